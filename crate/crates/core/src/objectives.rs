//! Likelihood objectives, posterior alignment, the forgetting metric and the
//! contrastive classification loss.
//!
//! Every loss exists twice: a plain evaluation over frozen models (used for
//! reporting) and a tape-building form used by the trainer. Tests check that
//! the two agree.

use crate::autodiff::{ParamVector, Source, Tape, Var};
use crate::dataset::{find_task, TaskDataset};
use crate::error::{contract, IconError, Result};
use crate::flow::{FlowArch, FlowParams};
use crate::numerics::{mean, Matrix, RngStream};

/// Hidden width of the projection head.
pub const HEAD_HIDDEN: usize = 256;

/// The all-task model and one partial-task model per task seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBank {
    pub ata: FlowParams,
    /// `pta[t - 1]` is the model for tasks `1..=t`.
    pub pta: Vec<FlowParams>,
}

impl ModelBank {
    pub fn new(ata: FlowParams) -> ModelBank {
        ModelBank { ata, pta: Vec::new() }
    }

    /// The partial-task model for task `t` (1-based).
    pub fn pta(&self, t: usize) -> Result<&FlowParams> {
        t.checked_sub(1)
            .and_then(|i| self.pta.get(i))
            .ok_or_else(|| IconError::Contract(format!("no partial-task model for task {t}")))
    }

    pub fn pta_mut(&mut self, t: usize) -> Result<&mut FlowParams> {
        t.checked_sub(1)
            .and_then(|i| self.pta.get_mut(i))
            .ok_or_else(|| IconError::Contract(format!("no partial-task model for task {t}")))
    }
}

fn mean_log_likelihood(flow: &FlowParams, x: &Matrix) -> Result<f64> {
    Ok(mean(&flow.log_likelihood(x)?))
}

/// Negative task-averaged mean log-likelihood of `pta[t]` over tasks `1..=t`.
pub fn loss_pta(bank: &ModelBank, t: usize, data: &[TaskDataset]) -> Result<f64> {
    let flow = bank.pta(t)?;
    let mut total = 0.0;
    for i in 1..=t {
        total += mean_log_likelihood(flow, &find_task(data, i)?.x)?;
    }
    Ok(-total / t as f64)
}

/// Negative task-averaged mean log-likelihood of the all-task model.
pub fn loss_ata(ata: &FlowParams, data: &[TaskDataset]) -> Result<f64> {
    if data.is_empty() {
        return contract("loss_ata needs at least one task");
    }
    let mut total = 0.0;
    for d in data {
        total += mean_log_likelihood(ata, &d.x)?;
    }
    Ok(-total / data.len() as f64)
}

/// `KL(N(mu_p, σ_p²) ‖ N(mu_q, σ_q²))` for diagonal Gaussians.
pub fn kl_gauss(mu_p: &[f64], sigma_p: &[f64], mu_q: &[f64], sigma_q: &[f64]) -> Result<f64> {
    let n = mu_p.len();
    if sigma_p.len() != n || mu_q.len() != n || sigma_q.len() != n {
        return contract("kl_gauss arguments differ in dimension");
    }
    if sigma_p.iter().chain(sigma_q).any(|s| !(*s > 0.0)) {
        return contract("kl_gauss needs strictly positive scales");
    }
    let mut kl = 0.0;
    for i in 0..n {
        let d = mu_p[i] - mu_q[i];
        kl += (sigma_q[i] / sigma_p[i]).ln()
            + (sigma_p[i] * sigma_p[i] + d * d) / (2.0 * sigma_q[i] * sigma_q[i])
            - 0.5;
    }
    Ok(kl)
}

/// Task-averaged mean of `KL(q_ata(x) ‖ q_pta[t](x))` over tasks `1..=t`.
pub fn kl_align(bank: &ModelBank, t: usize, data: &[TaskDataset]) -> Result<f64> {
    let pta = bank.pta(t)?;
    let mut total = 0.0;
    for i in 1..=t {
        total += kl_align_task(&bank.ata, pta, &find_task(data, i)?.x)?;
    }
    Ok(total / t as f64)
}

/// Mean over rows of `x` of the ATA‖PTA posterior KL.
pub fn kl_align_task(ata: &FlowParams, pta: &FlowParams, x: &Matrix) -> Result<f64> {
    let qa = ata.posterior(x)?;
    let qp = pta.posterior(x)?;
    let mut total = 0.0;
    for i in 0..x.rows() {
        total += kl_gauss(qa.mu.row(i), &qa.sigma, qp.mu.row(i), &qp.sigma)?;
    }
    Ok(total / x.rows() as f64)
}

/// Mean over tasks of the mean log-likelihood gap `log p_pta[t] − log p_ata`.
pub fn forgetting(bank: &ModelBank, data: &[TaskDataset]) -> Result<f64> {
    if data.is_empty() {
        return contract("forgetting needs at least one task");
    }
    let mut total = 0.0;
    for d in data {
        let pta = bank.pta(d.task_id)?;
        total += mean_log_likelihood(pta, &d.x)? - mean_log_likelihood(&bank.ata, &d.x)?;
    }
    Ok(total / data.len() as f64)
}

/// Mean negative log-likelihood of `x` under a flow, on the tape.
pub fn tape_mean_nll(arch: &FlowArch, tape: &mut Tape, src: Source, params: &ParamVector, x: &Matrix) -> Result<Var> {
    let xv = tape.constant(x.clone());
    let ll = arch.tape_log_likelihood(tape, src, params, xv)?;
    let m = tape.mean_all(ll)?;
    Ok(tape.scale(m, -1.0))
}

/// Task average of per-task mean negative log-likelihoods, on the tape.
pub fn tape_task_average_nll(
    arch: &FlowArch,
    tape: &mut Tape,
    src: Source,
    params: &ParamVector,
    batches: &[&Matrix],
) -> Result<Var> {
    if batches.is_empty() {
        return contract("no batches supplied");
    }
    let mut acc: Option<Var> = None;
    for x in batches {
        let v = tape_mean_nll(arch, tape, src, params, x)?;
        acc = Some(match acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / batches.len() as f64))
}

/// Mean per-sample `KL(ATA ‖ PTA)` between posteriors given on the tape.
pub fn tape_kl_posteriors(tape: &mut Tape, mu_a: Var, ls_a: Var, mu_p: Var, ls_p: Var) -> Result<Var> {
    let (n, latent) = tape.value(mu_a).shape();
    let diff = tape.sub(mu_a, mu_p)?;
    let sq = tape.square(diff);
    let neg2 = tape.scale(ls_p, -2.0);
    let inv_var = tape.exp(neg2);
    let half_inv = tape.scale(inv_var, 0.5);
    let half_inv_rows = tape.broadcast_rows(half_inv, n)?;
    let weighted = tape.mul(sq, half_inv_rows)?;
    let data_sum = tape.sum_all(weighted);
    let data_part = tape.scale(data_sum, 1.0 / n as f64);
    // Variance ratio from the log difference, so equal scales give an exactly
    // zero gradient.
    let log_ratio = tape.sub(ls_a, ls_p)?;
    let twice = tape.scale(log_ratio, 2.0);
    let var_ratio = tape.exp(twice);
    let half_ratio = tape.scale(var_ratio, 0.5);
    let per_dim = tape.sub(half_ratio, log_ratio)?;
    let const_sum = tape.sum_all(per_dim);
    let const_part = tape.add_scalar(const_sum, -0.5 * latent as f64);
    tape.add(data_part, const_part)
}

/// Task-averaged mean posterior KL between two flows on the tape.
#[allow(clippy::too_many_arguments)]
pub fn tape_kl_align(
    ata: &FlowArch,
    pta: &FlowArch,
    tape: &mut Tape,
    src_ata: Source,
    src_pta: Source,
    ata_params: &ParamVector,
    pta_params: &ParamVector,
    batches: &[&Matrix],
) -> Result<Var> {
    if batches.is_empty() {
        return contract("no batches supplied");
    }
    let mut acc: Option<Var> = None;
    for x in batches {
        let xv = tape.constant((*x).clone());
        let (mu_a, ls_a) = ata.tape_posterior(tape, src_ata, ata_params, xv)?;
        let (mu_p, ls_p) = pta.tape_posterior(tape, src_pta, pta_params, xv)?;
        let v = tape_kl_posteriors(tape, mu_a, ls_a, mu_p, ls_p)?;
        acc = Some(match acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / batches.len() as f64))
}

/// Projection head parameters: `latent → 256 (tanh) → emb_dim`.
pub fn init_head(latent_dim: usize, emb_dim: usize, rng: &mut RngStream) -> Result<ParamVector> {
    let mut p = ParamVector::new();
    for (w, b, fan_in, fan_out) in [
        ("head.w1", "head.b1", latent_dim, HEAD_HIDDEN),
        ("head.w2", "head.b2", HEAD_HIDDEN, emb_dim),
    ] {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in p.push(w, fan_in, fan_out)? {
            *v = rng.uniform(-bound, bound);
        }
        p.push(b, 1, fan_out)?;
    }
    Ok(p)
}

/// Class embeddings scaled to unit norm; zero rows are a contract error.
pub fn normalize_embeddings(emb: &Matrix) -> Result<Matrix> {
    let mut out = emb.clone();
    for i in 0..out.rows() {
        let r = out.row_mut(i);
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) {
            return contract(format!("class embedding {i} has zero norm"));
        }
        r.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Unit-normalized head outputs for each row of `z`.
pub fn head_embed(head: &ParamVector, z: &Matrix) -> Result<Matrix> {
    let layer = |input: &Matrix, w: &str, b: &str| -> Result<Matrix> {
        let mut out = input.matmul(&head.matrix(w)?)?;
        out.add_row_vector(head.slice(b)?);
        Ok(out)
    };
    let h = layer(z, "head.w1", "head.b1")?.map(f64::tanh);
    normalize_embeddings(&layer(&h, "head.w2", "head.b2")?)
        .map_err(|_| IconError::Contract("projected latent has zero norm".into()))
}

/// Cosine similarities (`n × C`) between projected latents and unit class embeddings.
pub fn class_similarities(head: &ParamVector, z: &Matrix, unit_emb: &Matrix) -> Result<Matrix> {
    head_embed(head, z)?.gemm(false, unit_emb, true)
}

/// `−Σ_k log softmax(cos(head(z_k), e)/τ)[label_k]`.
pub fn nce_loss(z: &Matrix, head: &ParamVector, labels: &[usize], class_emb: &Matrix, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return contract("temperature must be positive");
    }
    if labels.len() != z.rows() {
        return contract("one label per latent row required");
    }
    let sims = class_similarities(head, z, &normalize_embeddings(class_emb)?)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= sims.cols() {
            return contract(format!("label {y} out of range for {} classes", sims.cols()));
        }
        let logits: Vec<f64> = sims.row(i).iter().map(|s| s / tau).collect();
        total += crate::autodiff::log_sum_exp(&logits) - logits[y];
    }
    Ok(total)
}

/// The contrastive loss on the tape, given latents already on it.
pub fn tape_nce(
    tape: &mut Tape,
    src: Source,
    head: &ParamVector,
    z: Var,
    labels: &[usize],
    unit_emb: &Matrix,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return contract("temperature must be positive");
    }
    let w1 = tape.param(src, head, "head.w1")?;
    let b1 = tape.param(src, head, "head.b1")?;
    let w2 = tape.param(src, head, "head.w2")?;
    let b2 = tape.param(src, head, "head.b2")?;
    let h = tape.affine(z, w1, b1)?;
    let h = tape.tanh(h);
    let e = tape.affine(h, w2, b2)?;
    let e = tape.normalize_rows(e)?;
    let emb_t = tape.constant(unit_emb.transpose());
    let sims = tape.matmul(e, emb_t)?;
    let logits = tape.scale(sims, 1.0 / tau);
    tape.softmax_xent(logits, labels)
}
