//! Small dense decompositions: Jacobian by central differences, power
//! iteration, cyclic Jacobi eigensolver, LU and Cholesky.

use crate::error::{contract, IconError, Result};

use super::Matrix;

/// Default central-difference step for a point `x`.
pub fn default_step(x: &[f64]) -> f64 {
    let inf = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    1e-4 * inf.max(1.0)
}

/// Central-difference Jacobian of `f` at `x`.
///
/// Entry `(i, j)` is `(f(x + h e_j)_i − f(x − h e_j)_i) / 2h`. When `h` is
/// `None` the step is `1e-4 · max(1, ‖x‖∞)`.
pub fn finite_diff_jacobian<F>(f: F, x: &[f64], h: Option<f64>) -> Result<Matrix>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let h = h.unwrap_or_else(|| default_step(x));
    if !(h > 0.0) {
        return contract(format!("finite-difference step must be positive, got {h}"));
    }
    let mut probe = x.to_vec();
    let mut jac: Option<Matrix> = None;
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let plus = f(&probe)?;
        probe[j] = x[j] - h;
        let minus = f(&probe)?;
        probe[j] = x[j];
        if plus.len() != minus.len() {
            return contract("function output length changed between evaluations");
        }
        let jm = jac.get_or_insert_with(|| Matrix::zeros(plus.len(), x.len()));
        for (i, (p, m)) in plus.iter().zip(&minus).enumerate() {
            let d = (p - m) / (2.0 * h);
            if !d.is_finite() {
                return Err(IconError::NumericDomain(format!(
                    "non-finite function value while differentiating coordinate {j}"
                )));
            }
            jm.set(i, j, d);
        }
    }
    match jac {
        Some(j) => Ok(j),
        None => {
            let out = f(x)?;
            Ok(Matrix::zeros(out.len(), 0))
        }
    }
}

/// Largest singular value by power iteration on `MᵀM`.
///
/// Stops when the Rayleigh quotient changes by less than `1e-10` relative, or
/// after 1000 iterations. The zero matrix gives 0.
pub fn spectral_norm(m: &Matrix) -> f64 {
    let n = m.cols();
    if n == 0 || m.rows() == 0 || m.max_abs() == 0.0 {
        return 0.0;
    }
    // Deterministic start with no special alignment to coordinate axes.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.37 * ((i as f64) * 1.618).sin()).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let mv = matvec(m, &v);
        let mut w = matvec_t(m, &mv);
        let rq: f64 = mv.iter().map(|x| x * x).sum();
        let wn = norm(&w);
        if wn == 0.0 {
            // Start vector fell in the null space; nudge it.
            v.iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x += 1e-3 * (i as f64 + 1.0));
            normalize(&mut v);
            continue;
        }
        w.iter_mut().for_each(|x| *x /= wn);
        v = w;
        let converged = lambda > 0.0 && ((rq - lambda) / rq).abs() < 1e-10;
        lambda = rq;
        if converged {
            break;
        }
    }
    // Final Rayleigh quotient with the latest vector.
    let mv = matvec(m, &v);
    let rq: f64 = mv.iter().map(|x| x * x).sum();
    rq.max(lambda).sqrt()
}

fn matvec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn matvec_t(m: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (i, vi) in v.iter().enumerate() {
        for (o, a) in out.iter_mut().zip(m.row(i)) {
            *o += a * vi;
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors as the columns of the second matrix.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return contract("symmetric_eigen needs a square matrix");
    }
    let mut s = a.clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += s.get(p, q) * s.get(p, q);
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = s.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = s.get(p, p);
                let aqq = s.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let skp = s.get(k, p);
                    let skq = s.get(k, q);
                    s.set(k, p, c * skp - sn * skq);
                    s.set(k, q, sn * skp + c * skq);
                }
                for k in 0..n {
                    let spk = s.get(p, k);
                    let sqk = s.get(q, k);
                    s.set(p, k, c * spk - sn * sqk);
                    s.set(q, k, sn * spk + c * sqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s.get(j, j).total_cmp(&s.get(i, i)));
    let values = order.iter().map(|&i| s.get(i, i)).collect();
    let vectors = v.permute_cols(&order);
    Ok((values, vectors))
}

/// Singular values in descending order, via the eigenvalues of `MᵀM`.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    let gram = m.gemm(true, m, false)?;
    let (vals, _) = symmetric_eigen(&gram)?;
    Ok(vals.into_iter().map(|x| x.max(0.0).sqrt()).collect())
}

/// LU factorisation with partial pivoting.
#[derive(Clone, Debug)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn new(a: &Matrix) -> Result<Lu> {
        let n = a.rows();
        if a.cols() != n {
            return contract("LU needs a square matrix");
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let (piv, pmax) = (k..n)
                .map(|i| (i, lu.get(i, k).abs()))
                .fold((k, -1.0), |best, c| if c.1 > best.1 { c } else { best });
            if pmax == 0.0 {
                return Err(IconError::NumericDomain("singular matrix in LU".into()));
            }
            if piv != k {
                for j in 0..n {
                    let t = lu.get(k, j);
                    lu.set(k, j, lu.get(piv, j));
                    lu.set(piv, j, t);
                }
                perm.swap(k, piv);
                sign = -sign;
            }
            let d = lu.get(k, k);
            for i in (k + 1)..n {
                let f = lu.get(i, k) / d;
                lu.set(i, k, f);
                for j in (k + 1)..n {
                    lu.set(i, j, lu.get(i, j) - f * lu.get(k, j));
                }
            }
        }
        Ok(Lu { lu, perm, sign })
    }

    pub fn log_abs_det(&self) -> f64 {
        (0..self.lu.rows()).map(|i| self.lu.get(i, i).abs().ln()).sum()
    }

    pub fn det(&self) -> f64 {
        self.sign * (0..self.lu.rows()).map(|i| self.lu.get(i, i)).product::<f64>()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows();
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu.get(i, j) * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= self.lu.get(i, j) * x[j];
            }
            x[i] = s / self.lu.get(i, i);
        }
        x
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.lu.rows();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for (i, v) in col.into_iter().enumerate() {
                inv.set(i, j, v);
            }
        }
        inv
    }
}

/// Solves `A X = B` for symmetric positive-definite `A` by Cholesky.
///
/// Returns `None` when a pivot is not safely positive.
pub fn cholesky_solve(a: &Matrix, b: &Matrix) -> Result<Option<Matrix>> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return contract("cholesky_solve shape mismatch");
    }
    let mut l = Matrix::zeros(n, n);
    let tol = 1e-13 * (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max).max(1e-300);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > tol) {
            return Ok(None);
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in (i + 1)..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    Ok(Some(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn jacobian_of_identity_and_linear_maps() {
        let id = finite_diff_jacobian(|x| Ok(x.to_vec()), &[0.3, -1.2], None).unwrap();
        assert!(id.max_abs_diff(&Matrix::identity(2)) < 1e-12);
        let a = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let j = finite_diff_jacobian(
            |x| Ok(vec![2.0 * x[0], 3.0 * x[1]]),
            &[1.5, -0.5],
            None,
        )
        .unwrap();
        assert!(j.max_abs_diff(&a) < 1e-11);
    }

    #[test]
    fn jacobian_rejects_non_finite_output() {
        let r = finite_diff_jacobian(|x| Ok(vec![x[0].ln()]), &[0.0], Some(1e-4));
        assert!(matches!(r, Err(IconError::NumericDomain(_))));
    }

    #[test]
    fn spectral_norm_simple_cases() {
        assert!((spectral_norm(&Matrix::identity(3)) - 1.0).abs() < 1e-12);
        assert!((spectral_norm(&Matrix::diag(&[3.0, 1.0])) - 3.0).abs() < 1e-12);
        assert_eq!(spectral_norm(&Matrix::zeros(4, 4)), 0.0);
    }

    #[test]
    fn spectral_norm_never_exceeds_frobenius() {
        let mut rng = RngStream::new(5, 0);
        for _ in 0..50 {
            let r = 1 + rng.index(7);
            let c = 1 + rng.index(7);
            let m = rng.normal_matrix(r, c);
            assert!(spectral_norm(&m) <= m.frobenius_norm() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn jacobi_reconstructs_symmetric_matrix() {
        let mut rng = RngStream::new(9, 0);
        let g = rng.normal_matrix(6, 6);
        let s = g.gemm(true, &g, false).unwrap();
        let (vals, vecs) = symmetric_eigen(&s).unwrap();
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        let recon = vecs
            .matmul(&Matrix::diag(&vals))
            .unwrap()
            .gemm(false, &vecs, true)
            .unwrap();
        assert!(recon.max_abs_diff(&s) < 1e-10);
    }

    #[test]
    fn lu_solve_inverse_and_det() {
        let a = Matrix::from_rows(&[
            vec![0.0, 2.0, 1.0],
            vec![1.0, 1.0, 0.0],
            vec![3.0, 0.0, 1.0],
        ])
        .unwrap();
        let lu = Lu::new(&a).unwrap();
        // det by cofactor expansion: 0*(1) - 2*(1-0) + 1*(0-3) = -5
        assert!((lu.det() + 5.0).abs() < 1e-12);
        assert!((lu.log_abs_det() - 5f64.ln()).abs() < 1e-12);
        let prod = a.matmul(&lu.inverse()).unwrap();
        assert!(prod.max_abs_diff(&Matrix::identity(3)) < 1e-12);
        assert!(Lu::new(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn cholesky_solves_spd_and_rejects_singular() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let x = cholesky_solve(&a, &b).unwrap().unwrap();
        let back = a.matmul(&x).unwrap();
        assert!(back.max_abs_diff(&b) < 1e-12);
        let sing = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(cholesky_solve(&sing, &b).unwrap().is_none());
    }
}
