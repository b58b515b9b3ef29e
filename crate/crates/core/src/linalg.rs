//! Thin SVD via nalgebra with a deterministic sign convention.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `W = U diag(s) V^T` with `k = min(m, n)` components in descending order.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m x k`
    pub u: Tensor,
    pub s: Vec<f64>,
    /// `n x k`
    pub v: Tensor,
}

fn to_na(w: &Tensor) -> Result<DMatrix<f64>> {
    let (m, n) = w.dims2()?;
    Ok(DMatrix::from_row_slice(m, n, w.data()))
}

/// Thin SVD. Each left singular vector is flipped so its largest-magnitude
/// entry is non-negative, with the matching right vector flipped too.
pub fn svd(w: &Tensor) -> Result<Svd> {
    let (m, n) = w.dims2()?;
    if !w.all_finite() {
        return Err(Error::Numeric("SVD input has non-finite entries".into()));
    }
    let dec = to_na(w)?
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?;
    let u = dec.u.expect("u requested");
    let vt = dec.v_t.expect("v requested");
    let k = m.min(n);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| dec.singular_values[b].total_cmp(&dec.singular_values[a]));

    let mut u_out = Tensor::zeros(&[m, k]);
    let mut v_out = Tensor::zeros(&[n, k]);
    let mut s = Vec::with_capacity(k);
    for (c, &src) in order.iter().enumerate() {
        let col = u.column(src);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            u_out.set2(i, c, sign * u[(i, src)]);
        }
        for j in 0..n {
            v_out.set2(j, c, sign * vt[(src, j)]);
        }
        s.push(dec.singular_values[src].max(0.0));
    }
    Ok(Svd { u: u_out, s, v: v_out })
}

pub fn singular_values(w: &Tensor) -> Result<Vec<f64>> {
    let mut s: Vec<f64> = to_na(w)?
        .try_svd(false, false, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("SVD did not converge".into()))?
        .singular_values
        .iter()
        .map(|x| x.max(0.0))
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

pub fn spectral_norm(w: &Tensor) -> Result<f64> {
    Ok(singular_values(w)?.first().copied().unwrap_or(0.0))
}

/// Best rank-`r` approximation `U_r diag(s_r) V_r^T`.
pub fn truncate(w: &Tensor, r: usize) -> Result<Tensor> {
    let (m, n) = w.dims2()?;
    let dec = svd(w)?;
    let mut out = Tensor::zeros(&[m, n]);
    for k in 0..r.min(dec.s.len()) {
        let sk = dec.s[k];
        for i in 0..m {
            let a = dec.u.get2(i, k) * sk;
            for j in 0..n {
                let cur = out.get2(i, j);
                out.set2(i, j, cur + a * dec.v.get2(j, k));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, RngFactory};

    #[test]
    fn reconstructs_random_matrix() {
        let mut rng = RngFactory::new(2).stream("svd");
        for &(m, n) in &[(5, 3), (3, 5), (4, 4)] {
            let w = Tensor::matrix(m, n, normal_vec(&mut rng, m * n)).unwrap();
            let r = truncate(&w, m.min(n)).unwrap();
            let err = w.zip_map(&r, |a, b| a - b).unwrap().frobenius_norm();
            assert!(err < 1e-12, "{err}");
            let dec = svd(&w).unwrap();
            assert!(dec.s.windows(2).all(|p| p[0] >= p[1]));
        }
    }

    #[test]
    fn sign_convention_is_applied() {
        let w = Tensor::from_rows(&[&[-3.0, 0.0], &[0.0, -1.0]]);
        let dec = svd(&w).unwrap();
        assert_eq!(dec.s, vec![3.0, 1.0]);
        for k in 0..2 {
            let col: Vec<f64> = (0..2).map(|i| dec.u.get2(i, k)).collect();
            let pivot = col.iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            assert!(pivot >= 0.0);
        }
    }

    #[test]
    fn spectral_norm_of_scaled_identity() {
        assert!((spectral_norm(&Tensor::eye(3).scale(2.5)).unwrap() - 2.5).abs() < 1e-14);
    }
}
