//! Volume-preserving invertible networks built from affine coupling blocks.
//!
//! Each block permutes its input columns, keeps the first `⌈K/2⌉`
//! coordinates and transforms the remaining `⌊K/2⌋` as
//! `b' = b ⊙ exp(s) + t`, where the log-scales `s` come from
//! `2·tanh(s_raw)` centered per sample so that they sum to zero. The
//! Jacobian determinant of every block is therefore exactly one.
//!
//! Evaluation uses plain matrix code ([`FlowParams::forward`],
//! [`FlowParams::inverse`]); training builds the inverse on an autodiff tape
//! through [`FlowArch`].

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint};

use crate::autodiff::{ParamVector, Source, Tape, Var};
use crate::error::{contract, IconError, Result};
use crate::numerics::{log_std_normal, Matrix, RngStream};

/// Log-scale magnitude above which a coupling is reported unstable.
pub const MAX_LOG_SCALE: f64 = 30.0;

/// Initial posterior scale.
pub const INITIAL_SIGMA: f64 = 0.1;

/// Shape and fixed permutations of a flow; everything except the
/// trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowArch {
    pub k: usize,
    pub n: usize,
    pub width: usize,
    perms: Vec<Vec<usize>>,
    inv_perms: Vec<Vec<usize>>,
}

/// A flow: architecture plus parameter vector (subnets and `log_sigma`).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowParams {
    pub arch: FlowArch,
    pub params: ParamVector,
}

/// Per-sample diagonal Gaussian over the designated latents.
#[derive(Clone, Debug)]
pub struct GaussianPosterior {
    pub mu: Matrix,
    pub sigma: Vec<f64>,
}

impl GaussianPosterior {
    /// One draw `mu + sigma ⊙ ε` per row.
    pub fn sample(&self, rng: &mut RngStream) -> Matrix {
        Matrix::from_fn(self.mu.rows(), self.mu.cols(), |i, j| {
            self.mu.get(i, j) + self.sigma[j] * rng.normal()
        })
    }
}

fn seg(block: usize, name: &str) -> String {
    format!("block{block}.{name}")
}

fn inverse_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (j, &pj) in p.iter().enumerate() {
        inv[pj] = j;
    }
    inv
}

impl FlowArch {
    pub fn new(k: usize, n: usize, width: usize, perms: Vec<Vec<usize>>) -> Result<FlowArch> {
        if k == 0 || n == 0 || n > k {
            return contract(format!("flow needs 1 ≤ N ≤ K, got K={k}, N={n}"));
        }
        if perms.is_empty() {
            return contract("flow needs at least one block");
        }
        if width == 0 {
            return contract("subnet width must be positive");
        }
        for (b, p) in perms.iter().enumerate() {
            let mut seen = vec![false; k];
            if p.len() != k || p.iter().any(|&i| i >= k || std::mem::replace(&mut seen[i], true)) {
                return contract(format!("permutation of block {b} is not a bijection of 0..{k}"));
            }
        }
        let inv_perms = perms.iter().map(|p| inverse_permutation(p)).collect();
        Ok(FlowArch {
            k,
            n,
            width,
            perms,
            inv_perms,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.perms.len()
    }

    pub fn permutations(&self) -> &[Vec<usize>] {
        &self.perms
    }

    /// Conditioning width `⌈K/2⌉`.
    pub fn split(&self) -> usize {
        self.k.div_ceil(2)
    }

    /// Transformed width `⌊K/2⌋`.
    pub fn transformed(&self) -> usize {
        self.k / 2
    }

    /// Parameter count implied by the architecture.
    pub fn param_count(&self) -> usize {
        let (h, m, w) = (self.split(), self.transformed(), self.width);
        let per_block = if m == 0 {
            0
        } else {
            h * w + w + w * w + w + w * 2 * m + 2 * m
        };
        self.n_blocks() * per_block + self.n
    }

    /// Empty parameter vector with this architecture's layout.
    pub fn layout(&self) -> Result<ParamVector> {
        let (h, m, w) = (self.split(), self.transformed(), self.width);
        let mut p = ParamVector::new();
        if m > 0 {
            for b in 0..self.n_blocks() {
                p.push(&seg(b, "w1"), h, w)?;
                p.push(&seg(b, "b1"), 1, w)?;
                p.push(&seg(b, "w2"), w, w)?;
                p.push(&seg(b, "b2"), 1, w)?;
                p.push(&seg(b, "w3"), w, 2 * m)?;
                p.push(&seg(b, "b3"), 1, 2 * m)?;
            }
        }
        p.push("log_sigma", 1, self.n)?;
        Ok(p)
    }

    /// Inverse map `x ↦ z` on the tape (blocks in reverse order).
    pub fn tape_inverse(&self, tape: &mut Tape, src: Source, params: &ParamVector, x: Var) -> Result<Var> {
        let (h, m) = (self.split(), self.transformed());
        let mut cur = x;
        for b in (0..self.n_blocks()).rev() {
            if m > 0 {
                let a = tape.slice_cols(cur, 0, h)?;
                let out = tape.slice_cols(cur, h, self.k)?;
                let (s, t) = self.tape_subnet(tape, src, params, b, a)?;
                let shifted = tape.sub(out, t)?;
                let neg_s = tape.scale(s, -1.0);
                let inv_scale = tape.exp(neg_s);
                let restored = tape.mul(shifted, inv_scale)?;
                cur = tape.concat_cols(a, restored)?;
            }
            cur = tape.permute_cols(cur, &self.inv_perms[b])?;
        }
        Ok(cur)
    }

    /// Centered log-scales and translations of block `b` on the tape.
    fn tape_subnet(
        &self,
        tape: &mut Tape,
        src: Source,
        params: &ParamVector,
        b: usize,
        a: Var,
    ) -> Result<(Var, Var)> {
        let m = self.transformed();
        let w1 = tape.param(src, params, &seg(b, "w1"))?;
        let b1 = tape.param(src, params, &seg(b, "b1"))?;
        let w2 = tape.param(src, params, &seg(b, "w2"))?;
        let b2 = tape.param(src, params, &seg(b, "b2"))?;
        let w3 = tape.param(src, params, &seg(b, "w3"))?;
        let b3 = tape.param(src, params, &seg(b, "b3"))?;
        let h1 = tape.affine(a, w1, b1)?;
        let h1 = tape.tanh(h1);
        let h2 = tape.affine(h1, w2, b2)?;
        let h2 = tape.tanh(h2);
        let o = tape.affine(h2, w3, b3)?;
        let s_raw = tape.slice_cols(o, 0, m)?;
        let t = tape.slice_cols(o, m, 2 * m)?;
        let s = tape.tanh(s_raw);
        let s = tape.scale(s, 2.0);
        Ok((tape.center_rows(s), t))
    }

    /// Per-sample log-likelihood (`n × 1`) on the tape.
    pub fn tape_log_likelihood(&self, tape: &mut Tape, src: Source, params: &ParamVector, x: Var) -> Result<Var> {
        let z = self.tape_inverse(tape, src, params, x)?;
        Ok(tape.std_normal_log_density(z))
    }

    /// Posterior mean (`n × N`) and `log_sigma` (`1 × N`) on the tape.
    pub fn tape_posterior(
        &self,
        tape: &mut Tape,
        src: Source,
        params: &ParamVector,
        x: Var,
    ) -> Result<(Var, Var)> {
        let z = self.tape_inverse(tape, src, params, x)?;
        let mu = tape.slice_cols(z, 0, self.n)?;
        let log_sigma = tape.param(src, params, "log_sigma")?;
        Ok((mu, log_sigma))
    }
}

/// Creates a flow whose subnets output zero, so that it is exactly the
/// composition of its (random) block permutations.
pub fn init_flow(k: usize, n: usize, n_blocks: usize, width: usize, rng: &mut RngStream) -> Result<FlowParams> {
    if n_blocks == 0 {
        return contract("flow needs at least one block");
    }
    if k == 0 {
        return contract("flow needs K ≥ 1");
    }
    let perms = (0..n_blocks).map(|_| rng.permutation(k)).collect();
    let arch = FlowArch::new(k, n, width, perms)?;
    let mut params = arch.layout()?;
    let (h, w) = (arch.split(), arch.width);
    if arch.transformed() > 0 {
        for b in 0..n_blocks {
            for (name, fan_in) in [("w1", h), ("w2", w)] {
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in params.slice_mut(&seg(b, name))? {
                    *v = rng.uniform(-bound, bound);
                }
            }
        }
    }
    params
        .slice_mut("log_sigma")?
        .fill(INITIAL_SIGMA.ln());
    Ok(FlowParams { arch, params })
}

impl FlowParams {
    pub fn k(&self) -> usize {
        self.arch.k
    }

    pub fn n(&self) -> usize {
        self.arch.n
    }

    fn check_input(&self, x: &Matrix, what: &str) -> Result<()> {
        if x.cols() != self.arch.k {
            return contract(format!("{what}: expected {} columns, got {}", self.arch.k, x.cols()));
        }
        x.ensure_finite(what)
    }

    /// Centered log-scales `s` and translations `t` of block `b`.
    fn subnet(&self, b: usize, a: &Matrix) -> Result<(Matrix, Matrix)> {
        let p = &self.params;
        let m = self.arch.transformed();
        let layer = |input: &Matrix, w: &str, bias: &str| -> Result<Matrix> {
            let mut out = input.matmul(&p.matrix(&seg(b, w))?)?;
            out.add_row_vector(p.slice(&seg(b, bias))?);
            Ok(out)
        };
        let h1 = layer(a, "w1", "b1")?.map(f64::tanh);
        let h2 = layer(&h1, "w2", "b2")?.map(f64::tanh);
        let o = layer(&h2, "w3", "b3")?;
        let mut s = o.slice_cols(0, m).map(|v| 2.0 * v.tanh());
        for i in 0..s.rows() {
            let row = s.row_mut(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        let worst = s.max_abs();
        if !(worst <= MAX_LOG_SCALE) {
            return Err(IconError::Instability {
                magnitude: worst,
                limit: MAX_LOG_SCALE,
            });
        }
        Ok((s, o.slice_cols(m, 2 * m)))
    }

    /// `z ↦ x`, together with the per-sample sum of applied log-scales.
    pub fn forward_with_log_scales(&self, z: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        self.check_input(z, "flow input")?;
        let (h, m, k) = (self.arch.split(), self.arch.transformed(), self.arch.k);
        let mut cur = z.clone();
        let mut log_scale_sums = vec![0.0; z.rows()];
        for b in 0..self.arch.n_blocks() {
            cur = cur.permute_cols(&self.arch.perms[b]);
            if m == 0 {
                continue;
            }
            let a = cur.slice_cols(0, h);
            let (s, t) = self.subnet(b, &a)?;
            for i in 0..cur.rows() {
                let row = cur.row_mut(i);
                for j in 0..m {
                    row[h + j] = row[h + j] * s.get(i, j).exp() + t.get(i, j);
                }
                log_scale_sums[i] += s.row(i).iter().sum::<f64>();
            }
            debug_assert_eq!(cur.cols(), k);
        }
        cur.ensure_finite("flow output")?;
        Ok((cur, log_scale_sums))
    }

    /// `z ↦ x`.
    pub fn forward(&self, z: &Matrix) -> Result<Matrix> {
        Ok(self.forward_with_log_scales(z)?.0)
    }

    /// `x ↦ z`, the exact algebraic inverse of [`FlowParams::forward`].
    pub fn inverse(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x, "flow inverse input")?;
        let (h, m) = (self.arch.split(), self.arch.transformed());
        let mut cur = x.clone();
        for b in (0..self.arch.n_blocks()).rev() {
            if m > 0 {
                let a = cur.slice_cols(0, h);
                let (s, t) = self.subnet(b, &a)?;
                for i in 0..cur.rows() {
                    let row = cur.row_mut(i);
                    for j in 0..m {
                        row[h + j] = (row[h + j] - t.get(i, j)) * (-s.get(i, j)).exp();
                    }
                }
            }
            cur = cur.permute_cols(&self.arch.inv_perms[b]);
        }
        cur.ensure_finite("flow inverse output")?;
        Ok(cur)
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.params
            .slice("log_sigma")
            .map(|s| s.iter().map(|v| v.exp()).collect())
            .unwrap_or_default()
    }

    /// Posterior over the designated latents: the first `N` inverse
    /// coordinates and the learned scales.
    pub fn posterior(&self, x: &Matrix) -> Result<GaussianPosterior> {
        let z = self.inverse(x)?;
        Ok(GaussianPosterior {
            mu: z.slice_cols(0, self.arch.n),
            sigma: self.sigma(),
        })
    }

    /// Per-sample `log p(x) = Σ_i log φ(f⁻¹(x)_i)`; the log-determinant is zero.
    pub fn log_likelihood(&self, x: &Matrix) -> Result<Vec<f64>> {
        let z = self.inverse(x)?;
        Ok((0..z.rows())
            .map(|i| z.row(i).iter().map(|&v| log_std_normal(v)).sum())
            .collect())
    }
}
