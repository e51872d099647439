//! Experiment metrics: latent alignment, affine recovery, the reconstruction
//! comparison between training arms, and 2-D scatter exports.

mod assignment;
mod scatter;

use serde::{Deserialize, Serialize};

pub use assignment::max_weight_assignment;
pub use scatter::{export_scatter, write_csv, write_svg, ScatterExport, ScatterPoint, PTA_COLOR, ATA_COLOR};

use crate::dataset::{find_task, TaskDataset};
use crate::error::{contract, IconError, Result};
use crate::flow::FlowParams;
use crate::numerics::{cholesky_solve, mean, pearson, rmse, Matrix};
use crate::objectives::ModelBank;

/// Ridge added to the normal equations when they are not positive definite.
pub const RIDGE: f64 = 1e-8;

/// Dimension-matched correlation between two latent representations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// `|r|` of each dimension of the first input with its matched partner.
    pub per_dim: Vec<f64>,
    /// Matched partner (column of the second input) per dimension.
    pub assignment: Vec<usize>,
    pub mean: f64,
}

/// Absolute correlation between every pair of dimensions, optimally matched
/// one-to-one. Constant dimensions score 0.
pub fn alignment_report(z_a: &Matrix, z_b: &Matrix) -> Result<AlignmentReport> {
    z_a.expect_shape(z_b.shape(), "alignment_report")?;
    let d = z_a.cols();
    if d == 0 {
        return contract("alignment of zero-dimensional latents");
    }
    let cols_a: Vec<Vec<f64>> = (0..d).map(|j| z_a.column(j)).collect();
    let cols_b: Vec<Vec<f64>> = (0..d).map(|j| z_b.column(j)).collect();
    let mut corr = Matrix::zeros(d, d);
    let mut warned = false;
    for i in 0..d {
        for j in 0..d {
            let r = match pearson(&cols_a[i], &cols_b[j]) {
                Ok(r) => r.abs(),
                Err(IconError::UndefinedCorrelation(_)) => {
                    if !warned {
                        log::warn!("constant latent dimension scored as uncorrelated");
                        warned = true;
                    }
                    0.0
                }
                Err(e) => return Err(e),
            };
            corr.set(i, j, r);
        }
    }
    let assignment = max_weight_assignment(&corr)?;
    let per_dim: Vec<f64> = assignment.iter().enumerate().map(|(i, &j)| corr.get(i, j)).collect();
    Ok(AlignmentReport {
        mean: mean(&per_dim),
        per_dim,
        assignment,
    })
}

/// Least-squares affine map `target ≈ source·A + b`.
#[derive(Clone, Debug)]
pub struct AffineFit {
    /// `(d_source + 1) × d_target`; the last row is the offset.
    pub coef: Matrix,
}

impl AffineFit {
    pub fn fit(source: &Matrix, target: &Matrix) -> Result<AffineFit> {
        if source.rows() != target.rows() {
            return contract("affine fit needs equal sample counts");
        }
        if source.rows() == 0 {
            return contract("affine fit of empty data");
        }
        let design = with_intercept(source);
        let gram = design.gemm(true, &design, false)?;
        let rhs = design.gemm(true, target, false)?;
        let coef = match cholesky_solve(&gram, &rhs)? {
            Some(c) => c,
            None => {
                log::warn!("rank-deficient design; fitting with ridge {RIDGE}");
                let d = gram.rows();
                let scale = (0..d).map(|i| gram.get(i, i)).fold(0.0, f64::max).max(1.0);
                let ridged = gram.add(&Matrix::identity(d).scale(RIDGE * scale))?;
                cholesky_solve(&ridged, &rhs)?
                    .ok_or_else(|| IconError::NumericDomain("ridge system not positive definite".into()))?
            }
        };
        Ok(AffineFit { coef })
    }

    pub fn predict(&self, source: &Matrix) -> Result<Matrix> {
        with_intercept(source).matmul(&self.coef)
    }
}

fn with_intercept(m: &Matrix) -> Matrix {
    Matrix::hcat(m, &Matrix::filled(m.rows(), 1, 1.0)).expect("same row count")
}

/// Uniform average over true dimensions of the R² of the best affine
/// prediction of `z_true` from `z_hat`.
pub fn recovery_r2(z_hat: &Matrix, z_true: &Matrix) -> Result<f64> {
    let pred = AffineFit::fit(z_hat, z_true)?.predict(z_hat)?;
    let means = z_true.column_means();
    let mut total = 0.0;
    for j in 0..z_true.cols() {
        let (mut ss_res, mut ss_tot) = (0.0, 0.0);
        for i in 0..z_true.rows() {
            let y = z_true.get(i, j);
            ss_res += (y - pred.get(i, j)).powi(2);
            ss_tot += (y - means[j]).powi(2);
        }
        if ss_tot == 0.0 {
            return Err(IconError::UndefinedCorrelation(format!("true latent dimension {j} is constant")));
        }
        total += 1.0 - ss_res / ss_tot;
    }
    Ok(total / z_true.cols() as f64)
}

/// RMSE between `x` and its reconstruction through the flow, with the
/// designated latent coordinates replaced by the posterior mean.
///
/// The posterior mean is the flow's own inverse on those coordinates, so this
/// is the exact round trip and measures numerical invertibility only.
pub fn reconstruction_rmse(flow: &FlowParams, x: &Matrix) -> Result<f64> {
    let z = flow.inverse(x)?;
    let mu = flow.posterior(x)?.mu;
    let mut z_mixed = z.clone();
    for i in 0..z.rows() {
        z_mixed.row_mut(i)[..mu.cols()].copy_from_slice(mu.row(i));
    }
    rmse(x, &flow.forward(&z_mixed)?)
}

/// RMSE of the best affine reconstruction of the ground-truth latents from
/// the flow's posterior means: the affine map is fitted on `fit` and scored
/// on `score`.
pub fn latent_rmse(flow: &FlowParams, fit: &TaskDataset, score: &TaskDataset) -> Result<f64> {
    let (Some(z_fit), Some(z_score)) = (&fit.z_true, &score.z_true) else {
        return contract("latent RMSE needs ground-truth latents");
    };
    let map = AffineFit::fit(&flow.posterior(&fit.x)?.mu, z_fit)?;
    rmse(&map.predict(&flow.posterior(&score.x)?.mu)?, z_score)
}

/// Average latent RMSE over tasks for the partial-task flows (each task
/// scored with the flow trained up to it) and the all-task flow.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRmse {
    pub pta: f64,
    pub ata: f64,
}

pub fn arm_rmse(bank: &ModelBank, train: &[TaskDataset], test: &[TaskDataset]) -> Result<ArmRmse> {
    if bank.pta.is_empty() {
        return contract("bank holds no partial-task flows");
    }
    let (mut pta, mut ata) = (Vec::new(), Vec::new());
    for t in 1..=bank.pta.len() {
        let (fit, score) = (find_task(train, t)?, find_task(test, t)?);
        pta.push(latent_rmse(bank.pta(t)?, fit, score)?);
        ata.push(latent_rmse(&bank.ata, fit, score)?);
    }
    Ok(ArmRmse {
        pta: mean(&pta),
        ata: mean(&ata),
    })
}

/// Latent RMSE for both models in both training arms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1 {
    pub without_kl: ArmRmse,
    pub with_kl: ArmRmse,
}

impl Table1 {
    /// `1 − ATA(with) / ATA(without)`.
    pub fn ata_improvement(&self) -> f64 {
        1.0 - self.with_kl.ata / self.without_kl.ata
    }
}

pub fn table1(with_kl: &ModelBank, without_kl: &ModelBank, train: &[TaskDataset], test: &[TaskDataset]) -> Result<Table1> {
    if with_kl.pta.len() != without_kl.pta.len() {
        return contract("the two arms were trained on different task counts");
    }
    Ok(Table1 {
        without_kl: arm_rmse(without_kl, train, test)?,
        with_kl: arm_rmse(with_kl, train, test)?,
    })
}

/// Summary of one trained bank on held-out data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: ArmRmse,
    pub forgetting: f64,
    /// Mean matched |r| between each task's partial-task and all-task latents.
    pub alignment: Vec<AlignmentReport>,
    pub alignment_mean: f64,
    /// Affine R² of the all-task flow's latents against the truth, when known.
    pub recovery_r2: Option<f64>,
}

pub fn evaluate_bank(bank: &ModelBank, train: &[TaskDataset], test: &[TaskDataset]) -> Result<Metrics> {
    let mut alignment = Vec::new();
    for t in 1..=bank.pta.len() {
        let x = &find_task(test, t)?.x;
        alignment.push(alignment_report(&bank.pta(t)?.posterior(x)?.mu, &bank.ata.posterior(x)?.mu)?);
    }
    let alignment_mean = mean(&alignment.iter().map(|a| a.mean).collect::<Vec<_>>());
    let has_truth = test.iter().all(|d| d.z_true.is_some()) && !test.is_empty();
    let recovery_r2 = if has_truth {
        let xs: Vec<&Matrix> = test.iter().map(|d| &d.x).collect();
        let zs: Vec<&Matrix> = test.iter().filter_map(|d| d.z_true.as_ref()).collect();
        let z_hat = bank.ata.posterior(&Matrix::vcat(&xs)?)?.mu;
        Some(recovery_r2(&z_hat, &Matrix::vcat(&zs)?)?)
    } else {
        None
    };
    Ok(Metrics {
        rmse: if has_truth { arm_rmse(bank, train, test)? } else { ArmRmse { pta: f64::NAN, ata: f64::NAN } },
        forgetting: crate::objectives::forgetting(bank, test)?,
        alignment,
        alignment_mean,
        recovery_r2,
    })
}
