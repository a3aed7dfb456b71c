//! Text checkpoints: one JSON header line describing the architecture,
//! then one parameter per line.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{ActorCritic, Mlp, PpoError, Result};

pub const FORMAT: &str = "qrlpf-ppo";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    /// Case the policy was trained on.
    pub case: String,
    /// Layer sizes of the policy mean network, input first.
    pub actor: Vec<usize>,
    /// Layer sizes of the value network, input first.
    pub critic: Vec<usize>,
    pub n_params: usize,
}

pub fn save<W: Write>(model: &ActorCritic, case: &str, mut out: W) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        case: case.into(),
        actor: model.actor().sizes().to_vec(),
        critic: model.critic().sizes().to_vec(),
        n_params: model.n_params(),
    };
    let line = serde_json::to_string(&header).map_err(|e| PpoError::Checkpoint(e.to_string()))?;
    writeln!(out, "{line}")?;
    for p in &model.params {
        // shortest representation that parses back to the same value
        writeln!(out, "{p}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load<R: BufRead>(input: R) -> Result<(Header, ActorCritic)> {
    let bad = |m: String| PpoError::Checkpoint(m);
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| bad("empty file".into()))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| bad(format!("header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let mut params = Vec::with_capacity(header.n_params);
    for (i, line) in lines.enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: f64 = t.parse().map_err(|e| bad(format!("parameter {i}: {e}")))?;
        params.push(v);
    }
    if params.len() != header.n_params {
        return Err(bad(format!(
            "header announces {} parameters, found {}",
            header.n_params,
            params.len()
        )));
    }
    let actor = Mlp::new(header.actor.clone()).ok_or_else(|| bad("bad actor sizes".into()))?;
    let critic = Mlp::new(header.critic.clone()).ok_or_else(|| bad("bad critic sizes".into()))?;
    let model = ActorCritic::from_params(actor, critic, params)
        .ok_or_else(|| bad("architecture does not match the parameter count".into()))?;
    Ok((header, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> ActorCritic {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        ActorCritic::init(7, 6, &[32, 32, 32], &[32, 32, 32], &mut rng).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let mut buf = Vec::new();
        save(&m, "case4", &mut buf).unwrap();
        let (h, back) = load(&buf[..]).unwrap();
        assert_eq!(h.case, "case4");
        assert_eq!(h.actor, vec![7, 32, 32, 32, 6]);
        assert_eq!(back, m);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = model();
        let mut buf = Vec::new();
        save(&m, "case4", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let short: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(load(short.as_bytes()).is_err());
        assert!(load(&b""[..]).is_err());
        let garbled = text.replacen("\n0", "\nx", 1);
        assert!(load(garbled.as_bytes()).is_err());
        let wrong = text.replacen(FORMAT, "other", 1);
        assert!(load(wrong.as_bytes()).is_err());
    }
}
