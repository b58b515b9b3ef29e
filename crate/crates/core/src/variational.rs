//! Mean-field posteriors, the scale-mixture prior, reparameterized sampling
//! and Monte-Carlo KL estimation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gaussian_ln_pdf, mixture_log_density, softplus, Param, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{standard_normal, unit_laplace};
use crate::tensor::Tensor;

/// `pi N(0, sigma1^2) + (1 - pi) N(0, sigma2^2)` over every scalar weight.
///
/// `pi = 1` is accepted and collapses the prior to a single Gaussian with
/// standard deviation `sigma1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleMixturePrior {
    pub pi: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl Default for ScaleMixturePrior {
    fn default() -> Self {
        ScaleMixturePrior {
            pi: 0.5,
            sigma1: 1.0,
            sigma2: (-6.0f64).exp(),
        }
    }
}

impl ScaleMixturePrior {
    pub fn new(pi: f64, sigma1: f64, sigma2: f64) -> Result<Self> {
        let p = ScaleMixturePrior { pi, sigma1, sigma2 };
        p.validate()?;
        Ok(p)
    }

    /// Single zero-mean Gaussian prior.
    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::new(1.0, sigma, sigma)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pi > 0.0 && self.pi <= 1.0) {
            return Err(Error::Parameter(format!("mixing weight {} not in (0, 1]", self.pi)));
        }
        if !(self.sigma2 > 0.0) || !(self.sigma1 > 0.0) {
            return Err(Error::Parameter("prior scales must be positive".into()));
        }
        if self.pi < 1.0 && self.sigma1 <= self.sigma2 {
            return Err(Error::Parameter(format!(
                "wide component sigma1={} must exceed narrow sigma2={}",
                self.sigma1, self.sigma2
            )));
        }
        Ok(())
    }

    pub fn log_density(&self, w: f64) -> f64 {
        mixture_log_density(w, self.pi, self.sigma1, self.sigma2).0
    }

    pub fn on_tape(&self, tape: &mut Tape, w: Var) -> Result<Var> {
        tape.mixture_log_prob(w, self.pi, self.sigma1, self.sigma2)
    }
}

/// Sum of the mixture log-density over all entries of `w`.
pub fn log_prior_density(w: &Tensor, prior: &ScaleMixturePrior) -> f64 {
    w.data().iter().map(|&x| prior.log_density(x)).sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorFamily {
    #[default]
    Gaussian,
    Laplace,
}

/// Location `mu` and raw scale `rho` with scale `softplus(rho)`.
///
/// For the Gaussian family the scale is the standard deviation; for the
/// Laplace family it is the diversity `b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Posterior {
    #[serde(default)]
    pub family: PosteriorFamily,
    pub mu: Param,
    pub rho: Param,
}

/// A reparameterized draw recorded on a tape together with its
/// single-sample KL contribution `log q(w) - log p(w)`.
#[derive(Debug, Clone, Copy)]
pub struct TapeSample {
    pub value: Var,
    pub kl: Var,
}

impl Posterior {
    pub fn new(family: PosteriorFamily, mu: Tensor, rho: Tensor) -> Result<Self> {
        if mu.shape() != rho.shape() {
            return Err(Error::dim("posterior", mu.shape(), rho.shape()));
        }
        Ok(Posterior {
            family,
            mu: Param::new(mu),
            rho: Param::new(rho),
        })
    }

    pub fn gaussian(mu: Tensor, rho: Tensor) -> Result<Self> {
        Self::new(PosteriorFamily::Gaussian, mu, rho)
    }

    pub fn laplace(mu: Tensor, rho: Tensor) -> Result<Self> {
        Self::new(PosteriorFamily::Laplace, mu, rho)
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.mu.value.len()
    }

    pub fn scale(&self) -> Tensor {
        softplus(&self.rho.value)
    }

    /// Unit noise of the matching family: standard normal or unit Laplace.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let n = self.numel();
        let data = match self.family {
            PosteriorFamily::Gaussian => (0..n).map(|_| standard_normal(rng)).collect(),
            PosteriorFamily::Laplace => (0..n).map(|_| unit_laplace(rng)).collect(),
        };
        Tensor::new(self.shape().to_vec(), data).expect("shape from posterior")
    }

    /// Per-entry second moment `E[x^2] = mu^2 + Var`, used by the covariance
    /// calculator. Laplace variance is `2 b^2`.
    pub fn second_moment(&self, idx: usize) -> f64 {
        let mu = self.mu.value.data()[idx];
        let s = softplus(&Tensor::scalar(self.rho.value.data()[idx])).item();
        let var = match self.family {
            PosteriorFamily::Gaussian => s * s,
            PosteriorFamily::Laplace => 2.0 * s * s,
        };
        mu * mu + var
    }

    pub fn log_q(&self, w: &Tensor) -> Result<f64> {
        if w.shape() != self.shape() {
            return Err(Error::dim("log_q", w.shape(), self.shape()));
        }
        let scale = self.scale();
        let mu = self.mu.value.data();
        Ok(w.data()
            .iter()
            .zip(mu)
            .zip(scale.data())
            .map(|((&x, &m), &s)| match self.family {
                PosteriorFamily::Gaussian => gaussian_ln_pdf(x, m, s),
                PosteriorFamily::Laplace => -(x - m).abs() / s - (2.0 * s).ln(),
            })
            .sum())
    }

    /// Records `mu + softplus(rho) * eps` and its KL term on the tape.
    pub fn sample_on_tape(
        &self,
        tape: &mut Tape,
        eps: Tensor,
        prior: &ScaleMixturePrior,
    ) -> Result<TapeSample> {
        if eps.shape() != self.shape() {
            return Err(Error::dim("sample_reparam", eps.shape(), self.shape()));
        }
        let mu = self.mu.on(tape);
        let rho = self.rho.on(tape);
        let scale = tape.softplus(rho)?;
        let eps = tape.constant(eps);
        let noise = tape.mul(scale, eps)?;
        let w = tape.add(mu, noise)?;
        let log_q = match self.family {
            PosteriorFamily::Gaussian => tape.gaussian_log_prob(w, mu, scale)?,
            PosteriorFamily::Laplace => tape.laplace_log_prob(w, mu, scale)?,
        };
        let log_p = prior.on_tape(tape, w)?;
        let kl = tape.sub(log_q, log_p)?;
        Ok(TapeSample { value: w, kl })
    }
}

/// `mu + scale * eps` without recording a tape.
pub fn sample_reparam(post: &Posterior, eps: &Tensor) -> Result<Tensor> {
    if eps.shape() != post.shape() {
        return Err(Error::dim("sample_reparam", eps.shape(), post.shape()));
    }
    let scale = post.scale();
    let mut out = post.mu.value.clone();
    for ((o, s), e) in out.data_mut().iter_mut().zip(scale.data()).zip(eps.data()) {
        *o += s * e;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KLEstimate {
    pub value: f64,
    pub n_samples: usize,
    pub std_error: f64,
}

/// Monte-Carlo estimate of `KL(q || p)` from `samples` reparameterized draws.
pub fn mc_kl<R: Rng + ?Sized>(
    post: &Posterior,
    prior: &ScaleMixturePrior,
    samples: usize,
    rng: &mut R,
) -> Result<KLEstimate> {
    if samples == 0 {
        return Err(Error::Parameter("mc_kl needs at least one sample".into()));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let eps = post.draw_noise(rng);
        let w = sample_reparam(post, &eps)?;
        let d = post.log_q(&w)? - log_prior_density(&w, prior);
        sum += d;
        sum_sq += d * d;
    }
    let n = samples as f64;
    let mean = sum / n;
    let std_error = if samples > 1 {
        let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(KLEstimate {
        value: mean,
        n_samples: samples,
        std_error,
    })
}

/// `sum ln(s_p / s) + (s^2 + mu^2) / (2 s_p^2) - 1/2` over paired entries.
pub fn closed_form_gaussian_kl(mu: &[f64], sigma: &[f64], prior_sigma: f64) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::dim("closed_form_gaussian_kl", &[mu.len()], &[sigma.len()]));
    }
    if !(prior_sigma > 0.0) || sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Domain("Gaussian KL needs positive scales".into()));
    }
    let p2 = prior_sigma * prior_sigma;
    Ok(mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| (prior_sigma / s).ln() + (s * s + m * m) / (2.0 * p2) - 0.5)
        .sum())
}
