//! Line-delimited JSON over TCP: one request line, one response line.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{order_samples, AnnealError, Backend, Result, Sample, SampleSet};
use crate::qubo::{BinaryObjective, QuboProblem};

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    /// `HOST:PORT`.
    pub addr: String,
    pub timeout: Duration,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteRequest {
    pub problem: QuboProblem,
    pub n_read: usize,
    pub timeout_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteResponse {
    #[serde(default)]
    pub samples: Vec<Sample>,
    #[serde(default)]
    pub backend_id: String,
    #[serde(default)]
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn remote_err(cfg: &RemoteConfig, message: impl Into<String>) -> AnnealError {
    AnnealError::Remote {
        backend_id: format!("remote:{}", cfg.addr),
        message: message.into(),
    }
}

/// Sends `q` to the server at `cfg.addr` and checks the reply.
///
/// Energies are recomputed locally; a mismatch beyond `1e-6` relative, a
/// wrong bitstring length, or counts not summing to `n_read` is a protocol
/// error.
pub fn sample_remote(cfg: &RemoteConfig, q: &QuboProblem, n_read: usize) -> Result<SampleSet> {
    q.validate()?;
    let start = Instant::now();
    let addr = cfg
        .addr
        .to_socket_addrs()
        .map_err(|e| remote_err(cfg, format!("resolve: {e}")))?
        .next()
        .ok_or_else(|| remote_err(cfg, "address resolved to nothing"))?;
    let stream = TcpStream::connect_timeout(&addr, cfg.timeout)
        .map_err(|e| remote_err(cfg, format!("connect: {e}")))?;
    stream
        .set_read_timeout(Some(cfg.timeout))
        .and_then(|_| stream.set_write_timeout(Some(cfg.timeout)))
        .map_err(|e| remote_err(cfg, e.to_string()))?;

    let req = RemoteRequest {
        problem: q.clone(),
        n_read,
        timeout_s: cfg.timeout.as_secs_f64(),
    };
    let mut line = serde_json::to_string(&req).map_err(|e| remote_err(cfg, e.to_string()))?;
    line.push('\n');
    (&stream)
        .write_all(line.as_bytes())
        .map_err(|e| remote_err(cfg, format!("send: {e}")))?;

    let mut reply = String::new();
    BufReader::new(&stream)
        .read_line(&mut reply)
        .map_err(|e| remote_err(cfg, format!("receive: {e}")))?;
    if reply.trim().is_empty() {
        return Err(remote_err(cfg, "connection closed without a response"));
    }
    let resp: RemoteResponse =
        serde_json::from_str(&reply).map_err(|e| remote_err(cfg, format!("bad response: {e}")))?;
    if let Some(msg) = resp.error {
        return Err(remote_err(cfg, msg));
    }

    let mut samples = resp.samples;
    let total: usize = samples.iter().map(|s| s.count).sum();
    if total != n_read || samples.is_empty() {
        return Err(remote_err(
            cfg,
            format!("counts sum to {total}, expected {n_read}"),
        ));
    }
    for s in &mut samples {
        let e = q
            .energy(&s.bits)
            .map_err(|e| remote_err(cfg, format!("bad bitstring: {e}")))?;
        if (e - s.energy).abs() > 1e-6 * (1.0 + e.abs()) {
            return Err(remote_err(
                cfg,
                format!("reported energy {} but bits give {e}", s.energy),
            ));
        }
        s.energy = e;
    }
    order_samples(&mut samples);
    let backend_id = if resp.backend_id.is_empty() {
        format!("remote:{}", cfg.addr)
    } else {
        resp.backend_id
    };
    Ok(SampleSet {
        samples,
        n_read,
        backend_id,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Answers requests on one connection until the peer hangs up.
pub fn handle_connection(stream: TcpStream, backend: &Backend) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<RemoteRequest>(&line) {
            Ok(req) => match backend.sample(&req.problem, req.n_read) {
                Ok(set) => RemoteResponse {
                    samples: set.samples,
                    backend_id: set.backend_id,
                    wall_time: set.wall_time,
                    error: None,
                },
                Err(e) => error_response(backend, e.to_string()),
            },
            Err(e) => error_response(backend, format!("bad request: {e}")),
        };
        let mut out = serde_json::to_string(&resp).map_err(std::io::Error::other)?;
        out.push('\n');
        writer.write_all(out.as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

fn error_response(backend: &Backend, message: String) -> RemoteResponse {
    RemoteResponse {
        samples: Vec::new(),
        backend_id: backend.id(),
        wall_time: 0.0,
        error: Some(message),
    }
}

/// Serves connections one after another. Stops after `max_connections` if
/// given, otherwise runs until the listener fails.
pub fn serve(
    listener: TcpListener,
    backend: &Backend,
    max_connections: Option<usize>,
) -> std::io::Result<()> {
    for (i, stream) in listener.incoming().enumerate() {
        if let Err(e) = handle_connection(stream?, backend) {
            eprintln!("connection error: {e}");
        }
        if max_connections.is_some_and(|m| i + 1 >= m) {
            break;
        }
    }
    Ok(())
}
