//! Numerical checks of the identifiability theorem's assumptions on finite
//! latent point clouds.
//!
//! Manifolds are only available through samples, so every distance here is
//! a cloud distance and path-connectedness is approximated by connectivity
//! of the ε-neighbourhood graph.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::{finite_diff_jacobian, spectral_norm, Matrix, RngStream};

/// A differentiable map between latent and observation space.
pub type PointMap<'a> = dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync + 'a;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_clouds(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() == 0 || b.rows() == 0 {
        return contract("latent clouds must be non-empty");
    }
    if a.cols() != b.cols() {
        return contract(format!("cloud dimensions differ: {} vs {}", a.cols(), b.cols()));
    }
    Ok(())
}

/// Smallest Euclidean distance between a point of `a` and a point of `b`
/// (exhaustive scan).
pub fn manifold_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    check_clouds(a, b)?;
    Ok((0..a.rows())
        .into_par_iter()
        .map(|i| {
            let p = a.row(i);
            (0..b.rows()).map(|j| dist(p, b.row(j))).fold(f64::INFINITY, f64::min)
        })
        .reduce(|| f64::INFINITY, f64::min))
}

/// Closest point of `cloud` to `z`: `(row index, distance)`, lowest index on
/// ties.
pub fn nearest_in_cloud(z: &[f64], cloud: &Matrix) -> Result<(usize, f64)> {
    if cloud.rows() == 0 {
        return contract("nearest point in an empty cloud");
    }
    if cloud.cols() != z.len() {
        return contract("query and cloud dimensions differ");
    }
    let mut best = (0, f64::INFINITY);
    for i in 0..cloud.rows() {
        let d = dist(z, cloud.row(i));
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best)
}

/// Midpoints of every cross-cloud pair closer than `eps`, in row-major pair
/// order. An empty result means no intersection was detected at this scale.
pub fn intersection_estimate(a: &Matrix, b: &Matrix, eps: f64) -> Result<Matrix> {
    check_clouds(a, b)?;
    if !(eps > 0.0) {
        return contract("intersection eps must be positive");
    }
    let d = a.cols();
    let rows: Vec<Vec<f64>> = (0..a.rows())
        .into_par_iter()
        .map(|i| {
            let p = a.row(i);
            let mut out = Vec::new();
            for j in 0..b.rows() {
                let q = b.row(j);
                if dist(p, q) <= eps {
                    out.extend(p.iter().zip(q).map(|(x, y)| 0.5 * (x + y)));
                }
            }
            out
        })
        .collect();
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Matrix::from_vec(data.len() / d.max(1), d, data)
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Whether the graph joining points closer than `eps` is connected.
pub fn connectivity_check(cloud: &Matrix, eps: f64) -> Result<bool> {
    if cloud.rows() == 0 {
        return contract("connectivity of an empty cloud");
    }
    if !(eps > 0.0) {
        return contract("connectivity eps must be positive");
    }
    let n = cloud.rows();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut components = n;
    for i in 0..n {
        for j in (i + 1)..n {
            if dist(cloud.row(i), cloud.row(j)) <= eps {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                    components -= 1;
                }
            }
        }
    }
    Ok(components == 1)
}

/// Median over points of the distance to their nearest neighbour.
pub fn median_nn_distance(cloud: &Matrix) -> Result<f64> {
    if cloud.rows() < 2 {
        return contract("nearest-neighbour distances need two points");
    }
    let mut d: Vec<f64> = (0..cloud.rows())
        .into_par_iter()
        .map(|i| {
            (0..cloud.rows())
                .filter(|&j| j != i)
                .map(|j| dist(cloud.row(i), cloud.row(j)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    d.sort_by(f64::total_cmp);
    Ok(d[d.len() / 2])
}

/// Relative residual between `g(z1) − g(z)` and the trapezoidal quadrature of
/// `∫₀¹ J_g(λz + (1−λ)z1) dλ · (z1 − z)` with `n_steps` intervals.
pub fn line_integral_check(g: &PointMap, z: &[f64], z1: &[f64], n_steps: usize) -> Result<f64> {
    if z.len() != z1.len() {
        return contract("segment endpoints differ in dimension");
    }
    if n_steps == 0 {
        return contract("quadrature needs at least one step");
    }
    let h: Vec<f64> = z1.iter().zip(z).map(|(a, b)| a - b).collect();
    let direct: Vec<f64> = g(z1)?.iter().zip(g(z)?).map(|(a, b)| a - b).collect();
    let nodes: Vec<Vec<f64>> = (0..=n_steps)
        .into_par_iter()
        .map(|k| {
            let lambda = k as f64 / n_steps as f64;
            let p: Vec<f64> = z.iter().zip(z1).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
            let step = 1e-5 * p.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            let jac = finite_diff_jacobian(g, &p, Some(step))?;
            Ok((0..jac.rows())
                .map(|i| jac.row(i).iter().zip(&h).map(|(a, b)| a * b).sum())
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut quad = vec![0.0; direct.len()];
    for (k, v) in nodes.iter().enumerate() {
        let w = if k == 0 || k == n_steps { 0.5 } else { 1.0 } / n_steps as f64;
        for (q, x) in quad.iter_mut().zip(v) {
            *q += w * x;
        }
    }
    let num = dist(&direct, &quad);
    let den = direct.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(if den > 0.0 { num / den } else { num })
}

/// Quantities behind the distance condition on two sub-clouds of the
/// all-task latent manifold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assumption5Report {
    /// Largest Jacobian spectral norm at the sampled points.
    pub jacobian_norm: f64,
    /// Distance between the two sub-clouds.
    pub subcloud_distance: f64,
    /// `subcloud_distance / (2 · jacobian_norm)`.
    pub bound: f64,
    /// Largest distance from a sub-cloud point to the intersection.
    pub max_outside_distance: Option<f64>,
    /// `bound − max_outside_distance`.
    pub slack: Option<f64>,
    /// Share of sampled sub-cloud pairs `(z₁, z₂)` with
    /// `max(‖z₁ − z‖, ‖z₂ − z‖) ≥ bound`, `z` the intersection point nearest
    /// to `z₁`.
    pub pair_inequality_fraction: Option<f64>,
    pub pass: bool,
}

/// Evaluates the distance condition for sub-clouds `part1`, `part2` and the
/// estimated `intersection`, with `samples` Jacobian evaluation points drawn
/// from the sub-clouds.
pub fn assumption5_check(
    g: &PointMap,
    part1: &Matrix,
    part2: &Matrix,
    intersection: &Matrix,
    samples: usize,
    rng: &mut RngStream,
) -> Result<Assumption5Report> {
    check_clouds(part1, part2)?;
    let union = Matrix::vcat(&[part1, part2])?;
    let picks = if samples >= union.rows() {
        (0..union.rows()).collect()
    } else {
        rng.sample_without_replacement(union.rows(), samples.max(1))
    };
    let norms: Vec<f64> = picks
        .par_iter()
        .map(|&i| finite_diff_jacobian(g, union.row(i), None).map(|j| spectral_norm(&j)))
        .collect::<Result<_>>()?;
    let jacobian_norm = norms.into_iter().fold(0.0, f64::max);
    let subcloud_distance = manifold_distance(part1, part2)?;
    let bound = if jacobian_norm > 0.0 { subcloud_distance / (2.0 * jacobian_norm) } else { f64::INFINITY };

    if intersection.rows() == 0 {
        return Ok(Assumption5Report {
            jacobian_norm,
            subcloud_distance,
            bound,
            max_outside_distance: None,
            slack: None,
            pair_inequality_fraction: None,
            pass: false,
        });
    }
    let outside: Vec<f64> = (0..union.rows())
        .into_par_iter()
        .map(|i| nearest_in_cloud(union.row(i), intersection).map(|(_, d)| d))
        .collect::<Result<_>>()?;
    let max_outside = outside.iter().copied().fold(0.0, f64::max);
    let n_pairs = samples.max(1);
    let mut holds = 0;
    for _ in 0..n_pairs {
        let z1 = part1.row(rng.index(part1.rows()));
        let z2 = part2.row(rng.index(part2.rows()));
        let (k, d1) = nearest_in_cloud(z1, intersection)?;
        let d2 = dist(z2, intersection.row(k));
        if d1.max(d2) >= bound {
            holds += 1;
        }
    }
    let slack = bound - max_outside;
    Ok(Assumption5Report {
        jacobian_norm,
        subcloud_distance,
        bound,
        max_outside_distance: Some(max_outside),
        slack: Some(slack),
        pair_inequality_fraction: Some(holds as f64 / n_pairs as f64),
        pass: slack >= 0.0,
    })
}

/// Options of a full verification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Task whose latents are examined.
    pub task: usize,
    /// Points per cloud.
    pub n: usize,
    pub eps_intersection: f64,
    /// Connectivity radius; five times the median nearest-neighbour distance
    /// when absent.
    pub eps_connectivity: Option<f64>,
    pub line_steps: usize,
    pub line_segments: usize,
    /// Jacobian evaluation points for the spectral bound.
    pub jacobian_samples: usize,
    /// Sub-clouds are the all-task points whose first coordinate lies below
    /// the first quantile and above the second.
    pub split_quantiles: (f64, f64),
    /// Line-integral tolerance at `line_steps`.
    pub line_tolerance: f64,
    /// Minimum observed quadrature convergence order.
    pub min_order: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            task: 1,
            n: 2000,
            eps_intersection: 0.1,
            eps_connectivity: None,
            line_steps: 1000,
            line_segments: 5,
            jacobian_samples: 100,
            split_quantiles: (0.25, 0.75),
            line_tolerance: 1e-3,
            min_order: 1.9,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(crate::IconError::Config(m.into()));
        if self.task == 0 || self.n == 0 {
            return bad("verify task and n must be positive");
        }
        if !(self.eps_intersection > 0.0) || self.eps_connectivity.is_some_and(|e| !(e > 0.0)) {
            return bad("verify eps values must be positive");
        }
        if self.line_steps < 16 || self.line_segments == 0 || self.jacobian_samples == 0 {
            return bad("verify needs line_steps ≥ 16 and at least one segment and sample");
        }
        let (lo, hi) = self.split_quantiles;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return bad("split quantiles must satisfy 0 < lo < hi < 1");
        }
        Ok(())
    }
}

/// Smoothness evidence: quadrature residuals along random segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineIntegralReport {
    /// Residual per segment at the configured step count.
    pub residuals: Vec<f64>,
    /// Step counts of the convergence study, halving from the configured one.
    pub study_steps: Vec<usize>,
    /// Worst residual over segments at each study step count.
    pub study_residuals: Vec<f64>,
    /// Least-squares slope of `−log₂ residual` against `log₂ steps`.
    pub observed_order: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Outcome of every check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    /// Distance between the partial-task and all-task clouds.
    pub manifold_distance: f64,
    pub intersection_size: usize,
    pub eps_intersection: f64,
    pub connected_pta: bool,
    pub connected_ata: bool,
    pub eps_connectivity: f64,
    pub bounding_box: BoundingBox,
    pub line_integral: LineIntegralReport,
    pub assumption5: Assumption5Report,
    /// Pass flags of assumptions 1 to 5, in order.
    pub assumptions: [bool; 5],
    /// One line per failed assumption.
    pub failures: Vec<String>,
}

const ASSUMPTION_NAMES: [&str; 5] = [
    "assumption 1 (smooth mixing): line-integral residual or convergence order out of tolerance",
    "assumption 2 (shared latents): the two clouds have no points within eps_intersection",
    "assumption 3 (connectedness): a latent cloud splits into several components",
    "assumption 4 (compactness): observations are not bounded",
    "assumption 5 (distance condition): sub-cloud points lie beyond the Jacobian bound",
];

fn bounding_box(x: &Matrix) -> BoundingBox {
    let mut min = vec![f64::INFINITY; x.cols()];
    let mut max = vec![f64::NEG_INFINITY; x.cols()];
    for i in 0..x.rows() {
        for (j, v) in x.row(i).iter().enumerate() {
            min[j] = min[j].min(*v);
            max[j] = max[j].max(*v);
        }
    }
    BoundingBox { min, max }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Splits `cloud` by its first coordinate into the points below the `lo`
/// quantile and those above the `hi` quantile.
pub fn split_cloud(cloud: &Matrix, lo: f64, hi: f64) -> Result<(Matrix, Matrix)> {
    let first = cloud.column(0);
    let mut sorted = first.clone();
    sorted.sort_by(f64::total_cmp);
    let (a, b) = (quantile(&sorted, lo), quantile(&sorted, hi));
    let low: Vec<usize> = (0..cloud.rows()).filter(|&i| first[i] <= a).collect();
    let high: Vec<usize> = (0..cloud.rows()).filter(|&i| first[i] >= b).collect();
    Ok((cloud.select_rows(&low), cloud.select_rows(&high)))
}

/// Runs every check: `g` maps latents to observations, `pta` and `ata` are
/// the two latent clouds and `x` the observations they came from.
pub fn verify_theorem(
    g: &PointMap,
    pta: &Matrix,
    ata: &Matrix,
    x: &Matrix,
    cfg: &VerifyConfig,
    rng: &mut RngStream,
) -> Result<TheoremReport> {
    cfg.validate()?;
    check_clouds(pta, ata)?;
    let manifold_distance = manifold_distance(pta, ata)?;
    let intersection = intersection_estimate(pta, ata, cfg.eps_intersection)?;
    let eps_connectivity = match cfg.eps_connectivity {
        Some(e) => e,
        None => 5.0 * median_nn_distance(pta)?.max(median_nn_distance(ata)?),
    };
    let connected_pta = connectivity_check(pta, eps_connectivity)?;
    let connected_ata = connectivity_check(ata, eps_connectivity)?;
    let bounding_box = bounding_box(x);
    let compact = bounding_box.min.iter().chain(&bounding_box.max).all(|v| v.is_finite());

    let segments: Vec<(usize, usize)> = (0..cfg.line_segments)
        .map(|_| (rng.index(ata.rows()), rng.index(ata.rows())))
        .filter(|(a, b)| a != b)
        .collect();
    let study_steps: Vec<usize> = (0..5).map(|k| cfg.line_steps >> k).collect();
    let mut study_residuals = vec![0.0_f64; study_steps.len()];
    let mut residuals = Vec::with_capacity(segments.len());
    for &(a, b) in &segments {
        for (k, &steps) in study_steps.iter().enumerate() {
            let r = line_integral_check(g, ata.row(a), ata.row(b), steps)?;
            if k == 0 {
                residuals.push(r);
            }
            study_residuals[k] = study_residuals[k].max(r);
        }
    }
    let observed_order = convergence_order(&study_steps, &study_residuals);
    let smooth_pass = residuals.iter().all(|r| *r < cfg.line_tolerance) && observed_order >= cfg.min_order;
    let line_integral = LineIntegralReport {
        residuals,
        study_steps,
        study_residuals,
        observed_order,
        pass: smooth_pass,
    };

    let (part1, part2) = split_cloud(ata, cfg.split_quantiles.0, cfg.split_quantiles.1)?;
    let assumption5 = assumption5_check(g, &part1, &part2, &intersection, cfg.jacobian_samples, rng)?;
    let assumptions = [
        line_integral.pass,
        intersection.rows() > 0,
        connected_pta && connected_ata,
        compact,
        assumption5.pass,
    ];
    let failures = assumptions
        .iter()
        .zip(ASSUMPTION_NAMES)
        .filter(|(ok, _)| !**ok)
        .map(|(_, name)| name.to_string())
        .collect();
    Ok(TheoremReport {
        manifold_distance,
        intersection_size: intersection.rows(),
        eps_intersection: cfg.eps_intersection,
        connected_pta,
        connected_ata,
        eps_connectivity,
        bounding_box,
        line_integral,
        assumption5,
        assumptions,
        failures,
    })
}

/// Slope of `−log₂ r` against `log₂ n`. Residuals at rounding level
/// (below 1e-10) carry no rate information and are skipped; with fewer than
/// two usable points the order is reported as infinite.
pub fn convergence_order(steps: &[usize], residuals: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = steps
        .iter()
        .zip(residuals)
        .filter(|(_, r)| **r > 1e-10)
        .map(|(s, r)| ((*s as f64).log2(), -r.log2()))
        .collect();
    if pts.len() < 2 {
        return f64::INFINITY;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
