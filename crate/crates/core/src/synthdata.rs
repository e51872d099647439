//! Synthetic continual-learning benchmark with known latents.
//!
//! Each task draws latents with an invariant block `N(0, I)` shared by all
//! tasks and a variant block `N(μ_t, diag σ_t²)` whose parameters change per
//! task. Observations come from a fixed invertible two-layer mixer
//! `x = W₂ · act(W₁ z)` with square, well-conditioned weights.
//!
//! The activation is a smooth leaky unit, `act(u) = α u + (1 − α) softplus(u)`,
//! which has slope in `(α, 1)` everywhere and is infinitely differentiable.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Split, TaskDataset};
use crate::error::{contract, IconError, Result};
use crate::numerics::{singular_values, stream_id, streams, Lu, Matrix, RngStream};

/// Benchmark recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub tasks: usize,
    pub n_per_task: usize,
    pub d_inv: usize,
    pub d_var: usize,
    pub mu_range: (f64, f64),
    pub var_range: (f64, f64),
    /// Slope of the mixer activation for large negative inputs.
    pub alpha: f64,
    /// Largest accepted condition number of each mixer weight matrix.
    pub max_condition: f64,
    /// Fraction of each task's rows held out for testing (taken from the end).
    pub test_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            tasks: 4,
            n_per_task: 10_000,
            d_inv: 8,
            d_var: 8,
            mu_range: (-4.0, 4.0),
            var_range: (0.1, 1.0),
            alpha: 0.2,
            max_condition: 100.0,
            test_fraction: 0.1,
        }
    }
}

impl SynthSpec {
    /// Reduced-size variant (2000 rows per task).
    pub fn fast() -> Self {
        SynthSpec {
            n_per_task: 2000,
            ..SynthSpec::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.d_inv + self.d_var
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IconError::Config(m.to_string()));
        if self.tasks == 0 || self.n_per_task < 2 {
            return bad("need at least one task and two rows per task");
        }
        if self.d_inv == 0 || self.d_var == 0 {
            return bad("both latent blocks must be non-empty");
        }
        if !(self.mu_range.0 < self.mu_range.1) || !(self.var_range.0 < self.var_range.1) {
            return bad("ranges must be ordered (lo < hi)");
        }
        if !(self.var_range.0 > 0.0) {
            return bad("variances must be positive");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("activation slope must lie in (0, 1)");
        }
        if !(self.max_condition > 1.0) {
            return bad("condition bound must exceed 1");
        }
        if !(self.test_fraction >= 0.0 && self.test_fraction < 1.0) {
            return bad("test fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        self.n_per_task - (self.n_per_task as f64 * self.test_fraction).round() as usize
    }
}

/// Variant-block distribution of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn gen_task_params(spec: &SynthSpec, rng: &mut RngStream) -> Vec<TaskParams> {
    (0..spec.tasks)
        .map(|_| TaskParams {
            mu: (0..spec.d_var)
                .map(|_| rng.uniform(spec.mu_range.0, spec.mu_range.1))
                .collect(),
            var: (0..spec.d_var)
                .map(|_| rng.uniform(spec.var_range.0, spec.var_range.1))
                .collect(),
        })
        .collect()
}

/// `n` latent rows: `d_inv` standard-normal columns then the variant block.
pub fn gen_latents(params: &TaskParams, d_inv: usize, n: usize, rng: &mut RngStream) -> Matrix {
    let d_var = params.mu.len();
    Matrix::from_fn(n, d_inv + d_var, |_, j| {
        let e = rng.normal();
        if j < d_inv {
            e
        } else {
            params.mu[j - d_inv] + params.var[j - d_inv].sqrt() * e
        }
    })
}

fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u + (-u).exp()
    } else {
        u.exp().ln_1p()
    }
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Ground-truth mixing network.
#[derive(Clone, Debug, PartialEq)]
pub struct MixerParams {
    pub w1: Matrix,
    pub w2: Matrix,
    pub alpha: f64,
    w1_inv: Matrix,
    w2_inv: Matrix,
}

impl MixerParams {
    pub fn new(w1: Matrix, w2: Matrix, alpha: f64) -> Result<MixerParams> {
        if w1.rows() != w1.cols() || w2.shape() != w1.shape() {
            return contract("mixer weights must be square and of equal size");
        }
        let w1_inv = Lu::new(&w1)?.inverse();
        let w2_inv = Lu::new(&w2)?.inverse();
        Ok(MixerParams {
            w1,
            w2,
            alpha,
            w1_inv,
            w2_inv,
        })
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn activation(&self, u: f64) -> f64 {
        self.alpha * u + (1.0 - self.alpha) * softplus(u)
    }

    pub fn activation_slope(&self, u: f64) -> f64 {
        self.alpha + (1.0 - self.alpha) * sigmoid(u)
    }

    /// Inverse activation by Newton's method. The activation is convex and
    /// increasing with slope in `(α, 1)`, so the iteration converges from
    /// any start.
    pub fn activation_inverse(&self, v: f64) -> f64 {
        let mut y = if v > 0.0 { v } else { v / self.alpha };
        for _ in 0..100 {
            let step = (self.activation(y) - v) / self.activation_slope(y);
            y -= step;
            if step.abs() <= 1e-15 * y.abs().max(1.0) {
                break;
            }
        }
        y
    }

    /// Observations for latent rows `z`.
    pub fn forward(&self, z: &Matrix) -> Result<Matrix> {
        let h = z.gemm(false, &self.w1, true)?.map(|u| self.activation(u));
        h.gemm(false, &self.w2, true)
    }

    /// Latent rows for observation rows `x`.
    pub fn inverse(&self, x: &Matrix) -> Result<Matrix> {
        let h = x.gemm(false, &self.w2_inv, true)?.map(|v| self.activation_inverse(v));
        h.gemm(false, &self.w1_inv, true)
    }

    /// Analytic Jacobian `W₂ · diag(act'(W₁ z)) · W₁` at one latent point.
    pub fn jacobian(&self, z: &[f64]) -> Result<Matrix> {
        let u = Matrix::row_vector(z).gemm(false, &self.w1, true)?;
        let d = self.dim();
        let scaled = Matrix::from_fn(d, d, |i, j| self.activation_slope(u.get(0, i)) * self.w1.get(i, j));
        self.w2.matmul(&scaled)
    }

    /// The map as a closure over single points.
    pub fn point_map(&self) -> impl Fn(&[f64]) -> Result<Vec<f64>> + '_ {
        move |z: &[f64]| Ok(self.forward(&Matrix::row_vector(z))?.into_vec())
    }

    /// SHA-256 over `alpha`, `W₁` and `W₂` as little-endian `f64`s.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.alpha.to_le_bytes());
        for v in self.w1.as_slice().iter().chain(self.w2.as_slice()) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes `"ICONMIX1"`, `u32` dimension, `f64` alpha, then `W₁` and `W₂`
    /// row-major as little-endian `f64`s.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"ICONMIX1");
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        buf.extend_from_slice(&self.alpha.to_le_bytes());
        for v in self.w1.as_slice().iter().chain(self.w2.as_slice()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MixerParams> {
        let bytes = std::fs::read(path)?;
        let bad = |m: &str| IconError::Ingestion {
            record: path.display().to_string(),
            message: m.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != b"ICONMIX1" {
            return Err(bad("not a mixer file"));
        }
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 20 + 16 * d * d {
            return Err(bad("size does not match the stated dimension"));
        }
        let f = |i: usize| f64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let alpha = f(12);
        let w1 = Matrix::from_vec(d, d, (0..d * d).map(|i| f(20 + 8 * i)).collect())?;
        let w2 = Matrix::from_vec(d, d, (0..d * d).map(|i| f(20 + 8 * (d * d + i))).collect())?;
        MixerParams::new(w1, w2, alpha)
    }
}

/// Uniformly random orthogonal matrix (Gram–Schmidt on a Gaussian matrix).
fn random_orthogonal(d: usize, rng: &mut RngStream) -> Matrix {
    let g = rng.normal_matrix(d, d);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    for j in 0..d {
        let mut v = g.column(j);
        for q in &cols {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        cols.push(v);
    }
    Matrix::from_fn(d, d, |i, j| cols[j][i])
}

fn condition_number(m: &Matrix) -> Result<f64> {
    let s = singular_values(m)?;
    let smin = *s.last().unwrap_or(&0.0);
    Ok(if smin > 0.0 { s[0] / smin } else { f64::INFINITY })
}

/// Draws orthogonal-initialised square weights, resampling (up to 100
/// attempts) any matrix whose condition number reaches `max_condition`.
pub fn make_mixer(d: usize, alpha: f64, max_condition: f64, rng: &mut RngStream) -> Result<MixerParams> {
    let mut draw = || -> Result<Matrix> {
        for _ in 0..100 {
            let w = random_orthogonal(d, rng);
            if condition_number(&w)? < max_condition {
                return Ok(w);
            }
        }
        Err(IconError::Generation(format!(
            "no weight matrix with condition number below {max_condition} in 100 attempts"
        )))
    };
    let w1 = draw()?;
    let w2 = draw()?;
    MixerParams::new(w1, w2, alpha)
}

/// JSON manifest written next to generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthManifest {
    pub seed: u64,
    pub spec: SynthSpec,
    pub streams: ManifestStreams,
    pub tasks: Vec<ManifestTask>,
    pub mixer_sha256: String,
    pub mixer_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestStreams {
    pub task_params: u64,
    pub mixer: u64,
    pub latents: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTask {
    pub task: usize,
    pub file: String,
    pub rows: usize,
    pub n_train: usize,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

/// Output of [`generate`].
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub train: Vec<TaskDataset>,
    pub test: Vec<TaskDataset>,
    pub mixer: MixerParams,
    pub task_params: Vec<TaskParams>,
    pub manifest: SynthManifest,
}

impl Benchmark {
    /// Full (train followed by test) rows of task `t`.
    pub fn full_task(&self, t: usize) -> Result<TaskDataset> {
        let tr = crate::dataset::find_task(&self.train, t)?;
        let te = crate::dataset::find_task(&self.test, t)?;
        TaskDataset::new(
            t,
            Matrix::vcat(&[&tr.x, &te.x])?,
            match (&tr.z_true, &te.z_true) {
                (Some(a), Some(b)) => Some(Matrix::vcat(&[a, b])?),
                _ => None,
            },
            None,
            Split::Train,
        )
    }
}

pub fn task_file_name(t: usize) -> String {
    format!("task{t}.bin")
}

pub const MIXER_FILE: &str = "mixer.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Generates all tasks. Observations are computed in `f64` and then rounded
/// to `f32` precision so that in-memory data equal what the file format
/// stores.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Benchmark> {
    spec.validate()?;
    let params_stream = stream_id(streams::TASK_PARAMS, 0);
    let mixer_stream = stream_id(streams::MIXER, 0);
    let task_params = gen_task_params(spec, &mut RngStream::new(seed, params_stream));
    let mixer = make_mixer(spec.dim(), spec.alpha, spec.max_condition, &mut RngStream::new(seed, mixer_stream))?;
    let n_train = spec.n_train();
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut tasks = Vec::new();
    let mut latent_streams = Vec::new();
    for (i, tp) in task_params.iter().enumerate() {
        let t = i + 1;
        let sid = stream_id(streams::LATENTS, t as u64);
        latent_streams.push(sid);
        let z = gen_latents(tp, spec.d_inv, spec.n_per_task, &mut RngStream::new(seed, sid));
        let x = mixer.forward(&z)?;
        let round = |m: &Matrix| m.map(|v| f64::from(v as f32));
        let (z, x) = (round(&z), round(&x));
        let head: Vec<usize> = (0..n_train).collect();
        let tail: Vec<usize> = (n_train..spec.n_per_task).collect();
        train.push(TaskDataset::new(t, x.select_rows(&head), Some(z.select_rows(&head)), None, Split::Train)?);
        if !tail.is_empty() {
            test.push(TaskDataset::new(t, x.select_rows(&tail), Some(z.select_rows(&tail)), None, Split::Test)?);
        }
        tasks.push(ManifestTask {
            task: t,
            file: task_file_name(t),
            rows: spec.n_per_task,
            n_train,
            mu: tp.mu.clone(),
            var: tp.var.clone(),
        });
    }
    let manifest = SynthManifest {
        seed,
        spec: spec.clone(),
        streams: ManifestStreams {
            task_params: params_stream,
            mixer: mixer_stream,
            latents: latent_streams,
        },
        tasks,
        mixer_sha256: mixer.hash(),
        mixer_file: MIXER_FILE.to_string(),
    };
    Ok(Benchmark {
        train,
        test,
        mixer,
        task_params,
        manifest,
    })
}

/// Writes one file per task (all rows, training rows first), the mixer and
/// the manifest into `dir`.
pub fn write_benchmark(b: &Benchmark, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for entry in &b.manifest.tasks {
        let full = b.full_task(entry.task)?;
        crate::dataset::write_dataset(&full, &dir.join(&entry.file))?;
    }
    b.mixer.save(&dir.join(MIXER_FILE))?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&b.manifest)? + "\n")?;
    Ok(())
}

/// Reads a directory written by [`write_benchmark`], splitting each task
/// according to the manifest.
pub fn read_benchmark(dir: &Path) -> Result<Benchmark> {
    let manifest: SynthManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mixer = MixerParams::load(&dir.join(&manifest.mixer_file))?;
    if mixer.hash() != manifest.mixer_sha256 {
        return Err(IconError::Ingestion {
            record: manifest.mixer_file.clone(),
            message: "mixer hash does not match the manifest".into(),
        });
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut task_params = Vec::new();
    for entry in &manifest.tasks {
        let full = crate::dataset::read_dataset(&dir.join(&entry.file), entry.task)?;
        if full.len() != entry.rows || entry.n_train > entry.rows {
            return Err(IconError::Ingestion {
                record: entry.file.clone(),
                message: format!("expected {} rows, found {}", entry.rows, full.len()),
            });
        }
        let head: Vec<usize> = (0..entry.n_train).collect();
        let tail: Vec<usize> = (entry.n_train..entry.rows).collect();
        train.push(full.subset(&head));
        if !tail.is_empty() {
            let mut t = full.subset(&tail);
            t.split = Split::Test;
            test.push(t);
        }
        task_params.push(TaskParams {
            mu: entry.mu.clone(),
            var: entry.var.clone(),
        });
    }
    Ok(Benchmark {
        train,
        test,
        mixer,
        task_params,
        manifest,
    })
}
