//! Variance-matching initialization for factorized weights and SVD warm
//! starts from dense weights.
//!
//! For `W = A B^T` with `r` inner components and i.i.d. zero-mean factor
//! entries of variance `v`, `Var(W_ij) = r v^2`. Matching a dense reference
//! variance `sigma_W^2` gives the per-entry std `s = (sigma_W^2 / r)^(1/4)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::inverse_softplus;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{standard_normal, uniform};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    Glorot,
    He,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitFamily {
    #[default]
    Gaussian,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub family: InitFamily,
    /// Posterior std as a fraction of the matched mean scale.
    pub eta: f64,
    /// Plain multiplier on the initial mean scale.
    pub damping: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            scheme: InitScheme::Glorot,
            family: InitFamily::Gaussian,
            eta: 0.1,
            damping: 1.0,
        }
    }
}

impl InitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Config(format!("eta {} must lie in (0, 1)", self.eta)));
        }
        if !(self.damping > 0.0) {
            return Err(Error::Config(format!("damping {} must be positive", self.damping)));
        }
        Ok(())
    }

    /// Draws `len` mean entries whose variance is `scale^2`, scaled by damping.
    pub fn draw_means<R: Rng + ?Sized>(&self, rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
        let len: usize = shape.iter().product();
        let k = self.damping;
        let data = match self.family {
            InitFamily::Gaussian => (0..len).map(|_| k * scale * standard_normal(rng)).collect(),
            InitFamily::Uniform => {
                let a = 3f64.sqrt() * scale;
                (0..len).map(|_| k * uniform(rng, -a, a)).collect()
            }
        };
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }

    /// Constant raw scale giving posterior std `eta * scale`.
    pub fn rho_tensor(&self, shape: &[usize], scale: f64) -> Result<Tensor> {
        Ok(Tensor::full(shape, initial_rho(scale, self.eta)?))
    }
}

/// Dense reference variance: Glorot `2 / (n + m)`, He `2 / n`.
pub fn reference_variance(fan_in: usize, fan_out: usize, scheme: InitScheme) -> f64 {
    match scheme {
        InitScheme::Glorot => 2.0 / (fan_in + fan_out) as f64,
        InitScheme::He => 2.0 / fan_in as f64,
    }
}

pub fn matched_gaussian_std(sigma_w2: f64, r: usize) -> f64 {
    (sigma_w2 / r as f64).powf(0.25)
}

pub fn matched_uniform_limit(sigma_w2: f64, r: usize) -> f64 {
    3f64.sqrt() * matched_gaussian_std(sigma_w2, r)
}

/// Raw scale `rho` with `softplus(rho) = eta * s`.
pub fn initial_rho(s: f64, eta: f64) -> Result<f64> {
    let target = eta * s;
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::Parameter(format!("target posterior std {target} is not positive")));
    }
    let rho = inverse_softplus(target);
    Ok(if rho.is_finite() { rho } else { target.ln() })
}

/// `(U_r S_r^{1/2}, V_r S_r^{1/2})` so that `mu_A mu_B^T` is the truncated SVD.
pub fn svd_warm_start(w: &Tensor, r: usize) -> Result<(Tensor, Tensor)> {
    let (m, n) = w.dims2()?;
    if r == 0 || r > m.min(n) {
        return Err(Error::Parameter(format!("rank {r} outside 1..={}", m.min(n))));
    }
    let dec = linalg::svd(w)?;
    let mut a = Tensor::zeros(&[m, r]);
    let mut b = Tensor::zeros(&[n, r]);
    for k in 0..r {
        let root = dec.s[k].sqrt();
        for i in 0..m {
            a.set2(i, k, dec.u.get2(i, k) * root);
        }
        for j in 0..n {
            b.set2(j, k, dec.v.get2(j, k) * root);
        }
    }
    Ok((a, b))
}

/// `min(1, C / ||A||_2) A`.
pub fn spectral_project(factor: &Tensor, c: f64) -> Result<Tensor> {
    if !(c > 0.0) {
        return Err(Error::Parameter(format!("spectral radius {c} must be positive")));
    }
    let norm = linalg::spectral_norm(factor)?;
    if norm <= c {
        Ok(factor.clone())
    } else {
        Ok(factor.scale(c / norm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softplus;
    use crate::rng::{normal_vec, RngFactory};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn reference_variances() {
        assert_eq!(reference_variance(128, 128, InitScheme::Glorot), 0.0078125);
        assert_eq!(reference_variance(2, 7, InitScheme::He), 1.0);
        assert_eq!(reference_variance(1, 1, InitScheme::Glorot), 1.0);
    }

    #[test]
    fn matched_scales() {
        assert_eq!(matched_gaussian_std(1.0, 1), 1.0);
        // quartic roots evaluated at 30 digits
        assert!(close(matched_gaussian_std(0.0078125, 15), 0.151_068_769_867_838, 1e-12));
        assert!(close(matched_gaussian_std(2.0 / 19600.0, 25), 0.044_947_804_1, 1e-9));
        assert!(close(matched_uniform_limit(1.0, 1), 3f64.sqrt(), 1e-15));
        assert!(close(matched_uniform_limit(0.0078125, 15), 0.261_658_784_848_026, 1e-12));
        assert!(matched_uniform_limit(1.0, 100) < matched_uniform_limit(1.0, 1));
    }

    #[test]
    fn rho_examples() {
        assert!(initial_rho(2.0 * 2f64.ln(), 0.5).unwrap().abs() < 1e-15);
        let s = matched_gaussian_std(0.0078125, 15);
        let rho = initial_rho(s, 0.1).unwrap();
        assert!(close(rho, -4.185_042_261_702_02, 1e-10), "{rho}");
        let back = softplus(&Tensor::scalar(rho)).item();
        assert!((back - 0.1 * s).abs() < 1e-12);
        assert!(initial_rho(1.0, 0.0).is_err());
        assert!(initial_rho(1e-320, 0.5).unwrap().is_finite());
    }

    #[test]
    fn warm_start_of_diagonal() {
        let w = Tensor::from_rows(&[&[3.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 1.0]]);
        let (a, b) = svd_warm_start(&w, 2).unwrap();
        let prod = a.matmul(&b.transpose().unwrap()).unwrap();
        let expect = [3.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0];
        for (x, e) in prod.data().iter().zip(expect) {
            assert!((x - e).abs() < 1e-12);
        }
        assert!(svd_warm_start(&w, 4).is_err());
    }

    #[test]
    fn warm_start_tail_and_gauge() {
        let mut rng = RngFactory::new(9).stream("warm");
        let w = Tensor::matrix(10, 8, normal_vec(&mut rng, 80)).unwrap();
        let s = linalg::singular_values(&w).unwrap();
        for r in 1..=8 {
            let (a, b) = svd_warm_start(&w, r).unwrap();
            let prod = a.matmul(&b.transpose().unwrap()).unwrap();
            let err = w.zip_map(&prod, |x, y| x - y).unwrap().frobenius_norm();
            let tail = s[r..].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((err - tail).abs() < 1e-10);
            for (k, sk) in s.iter().enumerate().take(r) {
                let na = (0..10).map(|i| a.get2(i, k).powi(2)).sum::<f64>().sqrt();
                let nb = (0..8).map(|j| b.get2(j, k).powi(2)).sum::<f64>().sqrt();
                assert!((na - nb).abs() < 1e-12 && (na - sk.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spectral_projection() {
        let a = Tensor::eye(2).scale(0.5);
        assert_eq!(spectral_project(&a, 1.0).unwrap(), a);
        let p = spectral_project(&Tensor::eye(2).scale(2.0), 1.0).unwrap();
        assert!(p.zip_map(&Tensor::eye(2), |x, y| x - y).unwrap().frobenius_norm() < 1e-15);
        let mut rng = RngFactory::new(4).stream("proj");
        let raw = Tensor::matrix(5, 3, normal_vec(&mut rng, 15)).unwrap();
        let a = raw.scale(4.0 / linalg::spectral_norm(&raw).unwrap());
        let p = spectral_project(&a, 2.0).unwrap();
        assert!((linalg::spectral_norm(&p).unwrap() - 2.0).abs() < 1e-12);
        let again = spectral_project(&p, 2.0).unwrap();
        assert!(again.zip_map(&p, |x, y| x - y).unwrap().frobenius_norm() < 1e-15);
    }
}
