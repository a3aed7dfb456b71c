use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Fully connected network over a flat parameter slice: ReLU on hidden
/// layers, identity on the output.
///
/// Layer `l` stores its `out × in` weights row-major, followed by `out` biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// `acts[0]` is the input, `acts[l]` the post-activation of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    /// `sizes = [input, hidden…, output]`; at least two entries, none zero.
    pub fn new(sizes: Vec<usize>) -> Option<Self> {
        (sizes.len() >= 2 && sizes.iter().all(|&s| s > 0)).then_some(Mlp { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// `Σ (in + 1) · out`.
    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let start: usize = self
            .sizes
            .windows(2)
            .take(l)
            .map(|w| (w[0] + 1) * w[1])
            .sum();
        (start, start + self.sizes[l] * self.sizes[l + 1])
    }

    /// Orthogonal weights scaled by `hidden_gain` on hidden layers and
    /// `output_gain` on the last one; zero biases.
    pub fn init_orthogonal<R: Rng>(
        &self,
        rng: &mut R,
        hidden_gain: f64,
        output_gain: f64,
    ) -> Vec<f64> {
        let mut params = vec![0.0; self.n_params()];
        for l in 0..self.n_layers() {
            let gain = if l + 1 == self.n_layers() {
                output_gain
            } else {
                hidden_gain
            };
            let (w0, _) = self.layer_offsets(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let q = orthogonal(rng, n_out, n_in);
            for r in 0..n_out {
                for c in 0..n_in {
                    params[w0 + r * n_in + c] = gain * q[(r, c)];
                }
            }
        }
        params
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        self.forward_cached(params, x).acts.pop().unwrap()
    }

    pub fn forward_cached(&self, params: &[f64], x: &[f64]) -> MlpCache {
        assert_eq!(params.len(), self.n_params(), "parameter length");
        assert_eq!(x.len(), self.input_dim(), "input length");
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(x.to_vec());
        for l in 0..self.n_layers() {
            let (w0, b0) = self.layer_offsets(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = &acts[l];
            let last = l + 1 == self.n_layers();
            let out: Vec<f64> = (0..n_out)
                .map(|r| {
                    let row = &params[w0 + r * n_in..w0 + (r + 1) * n_in];
                    let z = params[b0 + r] + row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>();
                    if last {
                        z
                    } else {
                        z.max(0.0)
                    }
                })
                .collect();
            acts.push(out);
        }
        MlpCache { acts }
    }

    /// Adds `∂(dout · output)/∂params` into `grad`.
    pub fn backward(&self, params: &[f64], cache: &MlpCache, dout: &[f64], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.n_params(), "gradient length");
        let mut delta = dout.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (w0, b0) = self.layer_offsets(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = &cache.acts[l];
            for r in 0..n_out {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                grad[b0 + r] += d;
                let row = &mut grad[w0 + r * n_in..w0 + (r + 1) * n_in];
                for (g, v) in row.iter_mut().zip(input) {
                    *g += d * v;
                }
            }
            if l == 0 {
                break;
            }
            // through the weights and the ReLU of the layer below
            let mut below = vec![0.0; n_in];
            for r in 0..n_out {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                let row = &params[w0 + r * n_in..w0 + (r + 1) * n_in];
                for (b, w) in below.iter_mut().zip(row) {
                    *b += d * w;
                }
            }
            for (b, a) in below.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *b = 0.0;
                }
            }
            delta = below;
        }
    }
}

/// `rows × cols` matrix with orthonormal rows or columns, whichever is fewer.
fn orthogonal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    // sign fix makes the distribution uniform
    for c in 0..short {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    if rows >= cols {
        q
    } else {
        q.transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_count() {
        let m = Mlp::new(vec![7, 32, 32, 32, 6]).unwrap();
        assert_eq!(m.n_params(), 8 * 32 + 33 * 32 + 33 * 32 + 33 * 6);
        assert!(Mlp::new(vec![3]).is_none());
        assert!(Mlp::new(vec![3, 0, 1]).is_none());
    }

    #[test]
    fn zero_weights_give_zero() {
        let m = Mlp::new(vec![3, 4, 1]).unwrap();
        assert_eq!(
            m.forward(&vec![0.0; m.n_params()], &[1.0, -2.0, 3.0]),
            vec![0.0]
        );
    }

    #[test]
    fn single_linear_layer() {
        let m = Mlp::new(vec![2, 1]).unwrap();
        assert_eq!(m.forward(&[1.0, 1.0, 0.0], &[2.0, 3.0]), vec![5.0]);
    }

    #[test]
    fn matches_naive_matrix_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Mlp::new(vec![5, 8, 6, 3]).unwrap();
        let p: Vec<f64> = (0..m.n_params())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        // independent evaluation with nalgebra
        let mut h = nalgebra::DVector::from_column_slice(&x);
        let mut off = 0;
        for l in 0..3 {
            let (i, o) = (m.sizes[l], m.sizes[l + 1]);
            let w = DMatrix::from_row_slice(o, i, &p[off..off + o * i]);
            let b = nalgebra::DVector::from_column_slice(&p[off + o * i..off + o * i + o]);
            off += (i + 1) * o;
            h = w * h + b;
            if l < 2 {
                h.apply(|v| *v = v.max(0.0));
            }
        }
        let got = m.forward(&p, &x);
        for (a, b) in got.iter().zip(h.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Mlp::new(vec![4, 6, 5, 2]).unwrap();
        let p: Vec<f64> = (0..m.n_params())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dout = [0.7, -1.3];
        let f = |p: &[f64]| {
            let y = m.forward(p, &x);
            y[0] * dout[0] + y[1] * dout[1]
        };
        let mut g = vec![0.0; m.n_params()];
        m.backward(&p, &m.forward_cached(&p, &x), &dout, &mut g);
        let h = 1e-6;
        for i in 0..p.len() {
            let mut up = p.clone();
            up[i] += h;
            let mut dn = p.clone();
            dn[i] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!(
                (fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {i}: {fd} vs {}",
                g[i]
            );
        }
    }

    #[test]
    fn orthogonal_init_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (r, c) in [(8, 5), (5, 8), (6, 6)] {
            let q = orthogonal(&mut rng, r, c);
            let g = if r >= c {
                q.transpose() * &q
            } else {
                &q * q.transpose()
            };
            assert!((g - DMatrix::identity(r.min(c), r.min(c))).abs().max() < 1e-12);
        }
        let m = Mlp::new(vec![3, 4, 2]).unwrap();
        let p = m.init_orthogonal(&mut rng, 2f64.sqrt(), 0.01);
        // biases are zero
        assert!(p[12..16].iter().all(|&b| b == 0.0));
        assert!(p[26..].iter().all(|&b| b == 0.0));
        // output rows have norm 0.01
        let row: f64 = p[16..20].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((row - 0.01).abs() < 1e-12);
    }
}
