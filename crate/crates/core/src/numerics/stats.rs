use crate::error::{contract, IconError, Result};

use super::{symmetric_eigen, Matrix};

/// Root-mean-square difference over all entries.
pub fn rmse(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.expect_shape(b.shape(), "rmse")?;
    if a.is_empty() {
        return contract("rmse of empty matrices");
    }
    let ss: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok((ss / a.len() as f64).sqrt())
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance (divisor `n − 1`).
pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Standard error of the mean.
pub fn std_error(v: &[f64]) -> f64 {
    (variance(v) / v.len() as f64).sqrt()
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return contract(format!("pearson length mismatch: {} vs {}", a.len(), b.len()));
    }
    if a.len() < 2 {
        return contract("pearson needs at least two samples");
    }
    let ma = mean(a);
    let mb = mean(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(IconError::UndefinedCorrelation(
            "one of the inputs has zero variance".into(),
        ));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Principal axes of a point cloud.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Eigenvalues of the covariance (divisor `n`), descending.
    pub eigenvalues: Vec<f64>,
    /// Unit axes as columns, sign-fixed so each axis' largest-magnitude
    /// loading is positive.
    pub axes: Matrix,
}

impl Pca {
    pub fn fit(points: &Matrix) -> Result<Pca> {
        let (n, d) = points.shape();
        if n < 2 {
            return contract("PCA needs at least two points");
        }
        let mean = points.column_means();
        let mut centered = points.clone();
        let neg: Vec<f64> = mean.iter().map(|m| -m).collect();
        centered.add_row_vector(&neg);
        let cov = centered.gemm(true, &centered, false)?.scale(1.0 / n as f64);
        let (eigenvalues, mut axes) = symmetric_eigen(&cov)?;
        for j in 0..d {
            let col = axes.column(j);
            let (imax, _) = col
                .iter()
                .enumerate()
                .fold((0, -1.0), |b, (i, v)| if v.abs() > b.1 { (i, v.abs()) } else { b });
            if col[imax] < 0.0 {
                for i in 0..d {
                    axes.set(i, j, -axes.get(i, j));
                }
            }
        }
        Ok(Pca {
            mean,
            eigenvalues,
            axes,
        })
    }

    /// Coordinates of `points` on the top `k` axes.
    pub fn project(&self, points: &Matrix, k: usize) -> Result<Matrix> {
        let mut centered = points.clone();
        let neg: Vec<f64> = self.mean.iter().map(|m| -m).collect();
        centered.add_row_vector(&neg);
        let k = k.min(self.axes.cols());
        centered.matmul(&self.axes.slice_cols(0, k))
    }
}

/// Projection of `points` onto their top `k` principal axes (default use: `k = 2`).
pub fn pca_project(points: &Matrix, k: usize) -> Result<Matrix> {
    if points.rows() <= 2 {
        return contract("pca_project needs more than two points");
    }
    Pca::fit(points)?.project(points, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_cases() {
        let a = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert!((rmse(&a, &b).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(rmse(&b, &b).unwrap(), 0.0);
        assert!(rmse(&a, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn pearson_cases() {
        let a = [1.0, 2.0, 3.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        // cov = 1.5, var_a = 1, var_b = 7/3 (divisor n−1): r = 1.5 / sqrt(7/3)
        let r = pearson(&a, &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.981_980_506_061_965_7).abs() < 1e-12);
        assert!(matches!(
            pearson(&a, &[2.0, 2.0, 2.0]),
            Err(IconError::UndefinedCorrelation(_))
        ));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn pca_of_collinear_points_has_flat_second_component() {
        let pts = Matrix::from_fn(20, 3, |i, j| (i as f64 - 7.0) * [1.0, -2.0, 0.5][j] + 3.0);
        let p = pca_project(&pts, 2).unwrap();
        assert!(p.column(1).iter().all(|v| v.abs() < 1e-10));
    }
}
