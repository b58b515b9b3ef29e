//! Closed-form generalization and approximation bounds, plus sampling
//! oracles that check them.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::{svd, truncate};
use crate::model::Model;
use crate::rng::{standard_normal, unit_laplace, RngFactory};
use crate::tensor::Tensor;
use crate::variational::{Posterior, PosteriorFamily, ScaleMixturePrior};

/// Singular spectrum of a matrix with its truncation errors.
///
/// `tail_energy[r]` and `retention[r]` are indexed by the kept rank
/// `r = 0..=len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub singular_values: Vec<f64>,
    /// Count of singular values above `max(m, n) * eps * sigma_1`.
    pub numerical_rank: usize,
    pub tail_energy: Vec<f64>,
    pub retention: Vec<f64>,
}

impl SpectralReport {
    /// `sqrt(sum_{i>r} sigma_i^2)`, zero past the last singular value.
    pub fn tail(&self, r: usize) -> f64 {
        self.tail_energy.get(r).copied().unwrap_or(0.0)
    }

    pub fn tail_squared(&self, r: usize) -> f64 {
        let t = self.tail(r);
        t * t
    }

    /// Rank-by-value rows for CSV output.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.tail_energy.len())
            .map(|r| {
                let sv = if r == 0 { f64::NAN } else { self.singular_values[r - 1] };
                vec![r as f64, sv, self.tail_energy[r], self.retention[r]]
            })
            .collect()
    }
}

pub fn spectral_report(w: &Tensor) -> Result<SpectralReport> {
    let (m, n) = w.dims2()?;
    let s = svd(w)?.s;
    let k = s.len();
    let mut suffix = vec![0.0; k + 1];
    for i in (0..k).rev() {
        suffix[i] = suffix[i + 1] + s[i] * s[i];
    }
    let mut prefix = vec![0.0; k + 1];
    for i in 0..k {
        prefix[i + 1] = prefix[i] + s[i] * s[i];
    }
    let total = prefix[k];
    let retention = prefix
        .iter()
        .map(|&p| if total > 0.0 { p / total } else { 1.0 })
        .collect();
    let tol = s.first().copied().unwrap_or(0.0) * m.max(n) as f64 * f64::EPSILON;
    Ok(SpectralReport {
        numerical_rank: s.iter().filter(|&&v| v > tol).count(),
        tail_energy: suffix.iter().map(|v| v.sqrt()).collect(),
        retention,
        singular_values: s,
    })
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be positive and finite, got {v}")))
    }
}

/// `L R sqrt(sum_{i>r} sigma_i^2)` for an `L`-Lipschitz loss and inputs of
/// norm at most `R`.
pub fn loss_gap_bound(lipschitz: f64, radius: f64, spectral: &SpectralReport, r: usize) -> Result<f64> {
    positive("L", lipschitz)?;
    positive("R", radius)?;
    Ok(lipschitz * radius * spectral.tail(r))
}

/// Learning error plus rank bias. The rank bias appears both as the tail
/// norm and as its square; `total_squared_tail` follows the squared form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub learning_error: f64,
    pub rank_bias_sqrt: f64,
    pub rank_bias_squared: f64,
    pub total_sqrt_tail: f64,
    pub total_squared_tail: f64,
}

pub fn decomposition_bound(
    lipschitz: f64,
    radius: f64,
    w_learned: &Tensor,
    w_star: &Tensor,
    r: usize,
) -> Result<Decomposition> {
    positive("L", lipschitz)?;
    positive("R", radius)?;
    if w_learned.shape() != w_star.shape() {
        return Err(Error::dim("decomposition_bound", w_learned.shape(), w_star.shape()));
    }
    let w_r = truncate(w_star, r)?;
    let learning_error = w_learned
        .data()
        .iter()
        .zip(w_r.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let spec = spectral_report(w_star)?;
    let lr = lipschitz * radius;
    Ok(Decomposition {
        learning_error,
        rank_bias_sqrt: spec.tail(r),
        rank_bias_squared: spec.tail_squared(r),
        total_sqrt_tail: lr * (learning_error + spec.tail(r)),
        total_squared_tail: lr * (learning_error + spec.tail_squared(r)),
    })
}

fn check_factors(qa: &Posterior, qb: &Posterior) -> Result<(usize, usize, usize)> {
    let (m, r) = qa.mu.value.dims2()?;
    let (n, rb) = qb.mu.value.dims2()?;
    if r != rb {
        return Err(Error::dim("factors", qa.shape(), qb.shape()));
    }
    Ok((m, n, r))
}

/// An entry pair `((i, j), (i', j'))` of `W = A B^T`.
pub type EntryPair = ((usize, usize), (usize, usize));

fn check_pair(pair: EntryPair, m: usize, n: usize) -> Result<()> {
    let ((i, j), (i2, j2)) = pair;
    if i >= m || i2 >= m || j >= n || j2 >= n {
        return Err(Error::Parameter(format!("entry pair {pair:?} outside {m} x {n}")));
    }
    Ok(())
}

/// `Cov(W_ij, W_i'j')` for independent mean-field factors:
/// `sum_k E[A_ik A_i'k] E[B_jk B_j'k] - E[A_ik] E[A_i'k] E[B_jk] E[B_j'k]`.
pub fn induced_covariance(qa: &Posterior, qb: &Posterior, pair: EntryPair) -> Result<f64> {
    let (m, n, r) = check_factors(qa, qb)?;
    check_pair(pair, m, n)?;
    let ((i, j), (i2, j2)) = pair;
    if i != i2 && j != j2 {
        return Ok(0.0);
    }
    let (ma, mb) = (qa.mu.value.data(), qb.mu.value.data());
    let mut cov = 0.0;
    for k in 0..r {
        let (a, a2) = (i * r + k, i2 * r + k);
        let (b, b2) = (j * r + k, j2 * r + k);
        let ea = if a == a2 { qa.second_moment(a) } else { ma[a] * ma[a2] };
        let eb = if b == b2 { qb.second_moment(b) } else { mb[b] * mb[b2] };
        cov += ea * eb - (ma[a] * ma[a2]) * (mb[b] * mb[b2]);
    }
    Ok(cov)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub pair: EntryPair,
    pub estimate: f64,
    pub std_error: f64,
}

pub const JACKKNIFE_BLOCKS: usize = 100;

struct Moments {
    n: f64,
    sx: Vec<f64>,
    sy: Vec<f64>,
    sxy: Vec<f64>,
}

impl Moments {
    fn zeros(k: usize) -> Self {
        Moments { n: 0.0, sx: vec![0.0; k], sy: vec![0.0; k], sxy: vec![0.0; k] }
    }

    fn minus(&self, o: &Moments) -> Moments {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
        Moments { n: self.n - o.n, sx: d(&self.sx, &o.sx), sy: d(&self.sy, &o.sy), sxy: d(&self.sxy, &o.sxy) }
    }

    fn add(&mut self, o: &Moments) {
        self.n += o.n;
        for p in 0..self.sx.len() {
            self.sx[p] += o.sx[p];
            self.sy[p] += o.sy[p];
            self.sxy[p] += o.sxy[p];
        }
    }

    fn cov(&self, p: usize) -> f64 {
        (self.sxy[p] - self.sx[p] * self.sy[p] / self.n) / (self.n - 1.0)
    }
}

struct FactorDraw {
    family: PosteriorFamily,
    mu: Vec<f64>,
    scale: Vec<f64>,
}

impl FactorDraw {
    fn new(q: &Posterior) -> Self {
        FactorDraw { family: q.family, mu: q.mu.value.data().to_vec(), scale: q.scale().into_data() }
    }

    fn draw<R: rand::Rng>(&self, rng: &mut R, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let e = match self.family {
                PosteriorFamily::Gaussian => standard_normal(rng),
                PosteriorFamily::Laplace => unit_laplace(rng),
            };
            *o = self.mu[k] + self.scale[k] * e;
        }
    }
}

/// Sample covariances of entries of `W = A B^T` with delete-one-block
/// jackknife standard errors over [`JACKKNIFE_BLOCKS`] blocks. Block `b`
/// draws from substream `b` of the `"covariance"` stream, so results do not
/// depend on the thread count.
pub fn covariance_mc_oracle(
    qa: &Posterior,
    qb: &Posterior,
    pairs: &[EntryPair],
    n_samples: usize,
    factory: &RngFactory,
) -> Result<Vec<CovarianceEstimate>> {
    let (m, n, r) = check_factors(qa, qb)?;
    if n_samples < 1000 {
        return Err(Error::Parameter(format!("covariance oracle needs >= 1000 samples, got {n_samples}")));
    }
    for &p in pairs {
        check_pair(p, m, n)?;
    }
    let (fa, fb) = (FactorDraw::new(qa), FactorDraw::new(qb));
    let entry_mean = |i: usize, j: usize| (0..r).map(|k| fa.mu[i * r + k] * fb.mu[j * r + k]).sum::<f64>();
    // centring at the exact mean keeps the running sums well conditioned
    let shifts: Vec<(f64, f64)> = pairs
        .iter()
        .map(|&((i, j), (i2, j2))| (entry_mean(i, j), entry_mean(i2, j2)))
        .collect();
    let blocks: Vec<Moments> = (0..JACKKNIFE_BLOCKS)
        .into_par_iter()
        .map(|blk| {
            let lo = blk * n_samples / JACKKNIFE_BLOCKS;
            let hi = (blk + 1) * n_samples / JACKKNIFE_BLOCKS;
            let mut rng = factory.substream("covariance", blk as u64);
            let mut a = vec![0.0; m * r];
            let mut b = vec![0.0; n * r];
            let mut mom = Moments::zeros(pairs.len());
            let w = |a: &[f64], b: &[f64], i: usize, j: usize| (0..r).map(|k| a[i * r + k] * b[j * r + k]).sum::<f64>();
            for _ in lo..hi {
                fa.draw(&mut rng, &mut a);
                fb.draw(&mut rng, &mut b);
                for (p, &((i, j), (i2, j2))) in pairs.iter().enumerate() {
                    let x = w(&a, &b, i, j) - shifts[p].0;
                    let y = w(&a, &b, i2, j2) - shifts[p].1;
                    mom.sx[p] += x;
                    mom.sy[p] += y;
                    mom.sxy[p] += x * y;
                }
            }
            mom.n = (hi - lo) as f64;
            mom
        })
        .collect();
    let mut total = Moments::zeros(pairs.len());
    for b in &blocks {
        total.add(b);
    }
    let nb = JACKKNIFE_BLOCKS as f64;
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(p, &pair)| {
            let loo: Vec<f64> = blocks.iter().map(|b| total.minus(b).cov(p)).collect();
            let mean = loo.iter().sum::<f64>() / nb;
            let var = (nb - 1.0) / nb * loo.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            CovarianceEstimate { pair, estimate: total.cov(p), std_error: var.sqrt() }
        })
        .collect())
}

/// A bound value with its inputs echoed for auditing. Values are never
/// clipped; `vacuous` marks values at or above 1 for losses in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub inputs: BTreeMap<String, Value>,
    pub terms: BTreeMap<String, f64>,
    pub value: f64,
    pub vacuous: bool,
}

impl BoundReport {
    fn new(name: &str, inputs: Value, terms: &[(&str, f64)], value: f64, vacuous: bool) -> Self {
        let inputs = match inputs {
            Value::Object(map) => map.into_iter().collect(),
            _ => BTreeMap::new(),
        };
        BoundReport {
            name: name.to_string(),
            inputs,
            terms: terms.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            value,
            vacuous,
        }
    }
}

/// `emp_risk + sqrt((KL + ln(2 sqrt(N) / delta)) / (2N))`.
pub fn mcallester_bound(emp_risk: f64, kl: f64, n: u64, delta: f64) -> Result<BoundReport> {
    if !(0.0..=1.0).contains(&emp_risk) {
        return Err(Error::Parameter(format!("empirical risk {emp_risk} not in [0, 1]")));
    }
    if !(kl >= 0.0 && kl.is_finite()) {
        return Err(Error::Parameter(format!("KL {kl} must be finite and non-negative")));
    }
    if n == 0 {
        return Err(Error::Parameter("N must be at least 1".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Parameter(format!("delta {delta} not in (0, 1)")));
    }
    let nf = n as f64;
    let complexity = ((kl + (2.0 * nf.sqrt() / delta).ln()) / (2.0 * nf)).sqrt();
    let value = emp_risk + complexity;
    Ok(BoundReport::new(
        "mcallester",
        json!({ "emp_risk": emp_risk, "kl": kl, "N": n, "delta": delta }),
        &[("complexity", complexity)],
        value,
        value >= 1.0,
    ))
}

/// `KL(Q || P) <= C_max D` for `D` independent parameters.
pub fn kl_upper_factorized(c_max: f64, d: u64) -> Result<f64> {
    if !(c_max >= 0.0 && c_max.is_finite()) || d == 0 {
        return Err(Error::Parameter(format!("need C_max >= 0 and D >= 1, got {c_max}, {d}")));
    }
    Ok(c_max * d as f64)
}

/// `sqrt(r (m + n) / (m n))`: low-rank over dense complexity.
pub fn complexity_ratio(m: usize, n: usize, r: usize) -> Result<f64> {
    if r == 0 || r > m.min(n) {
        return Err(Error::Parameter(format!("rank {r} not in 1..={}", m.min(n))));
    }
    let (m, n, r) = (m as f64, n as f64, r as f64);
    Ok((r * (m + n) / (m * n)).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComplexityInputs {
    pub x_frob: f64,
    /// Sample count.
    pub m: usize,
    pub w1_frob: f64,
    /// Widths `h_1..h_D`.
    pub h: Vec<usize>,
    /// Norm caps `C_1..C_D`.
    pub c: Vec<f64>,
    /// Ranks `r_2..r_D`.
    pub r: Vec<usize>,
    pub c0: f64,
}

/// Inputs for turning the complexity into a risk bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationInputs {
    pub lipschitz: f64,
    pub delta: f64,
    pub n: u64,
    pub emp_risk: f64,
}

/// `(|X|_F / m) (|W_1|_F sqrt(h_1) prod_{i=1..D} C0 C_i
///  + sum_{j=2..D} C_j sqrt(r_j h_j) prod_{i>j} C0 C_i)`.
///
/// With `gen`, the `generalization` term adds
/// `emp + sqrt(pi L) G + 3 sqrt(ln(2/delta) / (2N))`, and `vacuous` refers
/// to it; otherwise `vacuous` compares the complexity itself with 1.
pub fn gaussian_complexity_bound(
    inp: &GaussianComplexityInputs,
    gen: Option<GeneralizationInputs>,
) -> Result<BoundReport> {
    let d = inp.c.len();
    if d == 0 || inp.h.len() != d || inp.r.len() + 1 != d {
        return Err(Error::Parameter(format!(
            "need len(C) = len(h) = len(r) + 1 >= 1, got {}, {}, {}",
            d,
            inp.h.len(),
            inp.r.len()
        )));
    }
    positive("|X|_F", inp.x_frob)?;
    positive("|W1|_F", inp.w1_frob)?;
    positive("C0", inp.c0)?;
    for &c in &inp.c {
        positive("C_i", c)?;
    }
    if inp.m == 0 || inp.h.contains(&0) || inp.r.contains(&0) {
        return Err(Error::Parameter("m, h_i and r_j must be positive".into()));
    }
    // tail[j] = prod_{i >= j} C0 C_i over 0-based layer indices
    let mut tail = vec![1.0; d + 1];
    for i in (0..d).rev() {
        tail[i] = tail[i + 1] * inp.c0 * inp.c[i];
    }
    let first = inp.w1_frob * (inp.h[0] as f64).sqrt() * tail[0];
    let rank_terms: f64 = (1..d)
        .map(|j| inp.c[j] * ((inp.r[j - 1] * inp.h[j]) as f64).sqrt() * tail[j + 1])
        .sum();
    let scale = inp.x_frob / inp.m as f64;
    let g = scale * (first + rank_terms);
    let mut terms = vec![("first_term", scale * first), ("rank_terms", scale * rank_terms)];
    let mut inputs = json!({
        "x_frob": inp.x_frob, "m": inp.m, "w1_frob": inp.w1_frob,
        "h": inp.h, "C": inp.c, "r": inp.r, "C0": inp.c0, "D": d,
    });
    let mut vacuous = g >= 1.0;
    if let Some(gi) = gen {
        positive("L", gi.lipschitz)?;
        if !(gi.delta > 0.0 && gi.delta < 1.0) || gi.n == 0 || !(0.0..=1.0).contains(&gi.emp_risk) {
            return Err(Error::Parameter("need 0 < delta < 1, N >= 1, emp_risk in [0, 1]".into()));
        }
        let conf = 3.0 * ((2.0 / gi.delta).ln() / (2.0 * gi.n as f64)).sqrt();
        let full = gi.emp_risk + (std::f64::consts::PI * gi.lipschitz).sqrt() * g + conf;
        terms.push(("confidence", conf));
        terms.push(("generalization", full));
        vacuous = full >= 1.0;
        let obj = inputs.as_object_mut().expect("object literal");
        obj.insert("L".into(), json!(gi.lipschitz));
        obj.insert("delta".into(), json!(gi.delta));
        obj.insert("N".into(), json!(gi.n));
        obj.insert("emp_risk".into(), json!(gi.emp_risk));
    }
    Ok(BoundReport::new("gaussian_complexity", inputs, &terms, g, vacuous))
}

fn scalar_log_q(family: PosteriorFamily, scale: f64, eps: f64) -> f64 {
    match family {
        PosteriorFamily::Gaussian => -0.5 * (2.0 * std::f64::consts::PI).ln() - scale.ln() - 0.5 * eps * eps,
        PosteriorFamily::Laplace => -(2.0 * scale).ln() - eps.abs(),
    }
}

/// Largest per-parameter Monte-Carlo KL over every variational entry of
/// the model, each from `samples` draws. Entry `k` (in parameter order)
/// uses substream `k` of the `"c_max"` stream.
pub fn max_parameter_kl(model: &Model, prior: &ScaleMixturePrior, samples: usize, factory: &RngFactory) -> Result<f64> {
    prior.validate()?;
    if samples == 0 {
        return Err(Error::Parameter("need at least one KL sample".into()));
    }
    let mut entries: Vec<(PosteriorFamily, f64, f64)> = Vec::new();
    for layer in model.linears() {
        for q in layer.posteriors() {
            let scale = q.scale();
            for (mu, s) in q.mu.value.data().iter().zip(scale.data()) {
                entries.push((q.family, *mu, *s));
            }
        }
    }
    let kls: Vec<f64> = entries
        .par_iter()
        .enumerate()
        .map(|(k, &(family, mu, s))| {
            let mut rng = factory.substream("c_max", k as u64);
            let mut acc = 0.0;
            for _ in 0..samples {
                let eps = match family {
                    PosteriorFamily::Gaussian => standard_normal(&mut rng),
                    PosteriorFamily::Laplace => unit_laplace(&mut rng),
                };
                acc += scalar_log_q(family, s, eps) - prior.log_density(mu + s * eps);
            }
            acc / samples as f64
        })
        .collect();
    Ok(kls.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::inverse_softplus;
    use crate::rng::normal_vec;

    fn diag(v: &[f64]) -> Tensor {
        let n = v.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (i, &x) in v.iter().enumerate() {
            t.set2(i, i, x);
        }
        t
    }

    fn posterior(rows: usize, cols: usize, mu: &[f64], sigma: &[f64]) -> Posterior {
        let rho: Vec<f64> = sigma.iter().map(|&s| inverse_softplus(s)).collect();
        Posterior::gaussian(Tensor::matrix(rows, cols, mu.to_vec()).unwrap(), Tensor::matrix(rows, cols, rho).unwrap())
            .unwrap()
    }

    #[test]
    fn spectral_report_of_diagonal() {
        let s = spectral_report(&diag(&[3.0, 2.0, 1.0])).unwrap();
        assert!((s.tail(1) - 5f64.sqrt()).abs() < 1e-12);
        assert!((s.tail(2) - 1.0).abs() < 1e-12);
        assert_eq!(s.tail(3), 0.0);
        assert!((s.retention[2] - 13.0 / 14.0).abs() < 1e-12);
        assert_eq!(s.retention[3], 1.0);
        assert_eq!(s.numerical_rank, 3);
        assert!(s.retention.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn spectral_report_of_low_rank_product() {
        let mut rng = RngFactory::new(4).stream("lr");
        let a = Tensor::matrix(8, 3, normal_vec(&mut rng, 24)).unwrap();
        let b = Tensor::matrix(7, 3, normal_vec(&mut rng, 21)).unwrap();
        let s = spectral_report(&a.matmul(&b.transpose().unwrap()).unwrap()).unwrap();
        assert!(s.tail(3) <= 1e-10 * s.singular_values[0]);
        assert_eq!(s.numerical_rank, 3);
    }

    #[test]
    fn loss_gap_examples() {
        let s = spectral_report(&diag(&[3.0, 2.0, 1.0])).unwrap();
        let l = 2f64.sqrt();
        assert!((loss_gap_bound(l, 1.0, &s, 2).unwrap() - l).abs() < 1e-12);
        assert_eq!(loss_gap_bound(l, 1.0, &s, 3).unwrap(), 0.0);
        assert_eq!(loss_gap_bound(l, 1.0, &s, 9).unwrap(), 0.0);
        assert!(loss_gap_bound(0.0, 1.0, &s, 1).is_err());
    }

    #[test]
    fn decomposition_examples() {
        let w = diag(&[3.0, 2.0, 1.0]);
        let d = decomposition_bound(1.0, 1.0, &truncate(&w, 1).unwrap(), &w, 1).unwrap();
        assert!(d.learning_error < 1e-12);
        assert!((d.rank_bias_sqrt - 5f64.sqrt()).abs() < 1e-12);
        assert!((d.rank_bias_squared - 5.0).abs() < 1e-12);
        let id = diag(&[1.0, 1.0, 1.0]);
        assert!(decomposition_bound(1.0, 1.0, &id, &id, 3).unwrap().rank_bias_sqrt < 1e-12);
        assert!(decomposition_bound(1.0, 1.0, &id, &w.slice_cols(0, 2).unwrap(), 1).is_err());
    }

    #[test]
    fn covariance_closed_form_examples() {
        let qa = posterior(1, 1, &[1.0], &[0.5]);
        let qb = posterior(2, 1, &[2.0, 1.0], &[0.3, 0.2]);
        let var = induced_covariance(&qa, &qb, ((0, 0), (0, 0))).unwrap();
        assert!((var - 1.1125).abs() < 1e-12);
        let cov = induced_covariance(&qa, &qb, ((0, 0), (0, 1))).unwrap();
        assert!((cov - 0.5).abs() < 1e-12);
        let qa2 = posterior(2, 2, &[1.0, -0.5, 0.3, 2.0], &[0.5, 0.2, 0.1, 0.7]);
        let qb2 = posterior(2, 2, &[0.4, 1.2, -1.0, 0.8], &[0.3, 0.3, 0.6, 0.1]);
        assert_eq!(induced_covariance(&qa2, &qb2, ((0, 0), (1, 1))).unwrap(), 0.0);
        assert!(induced_covariance(&qa2, &qb2, ((0, 0), (2, 1))).is_err());
    }

    #[test]
    fn covariance_oracle_small_cases() {
        let qa = posterior(1, 1, &[1.0], &[0.5]);
        let qb = posterior(2, 1, &[2.0, 1.0], &[0.3, 0.2]);
        let f = RngFactory::new(9);
        let pairs = [((0, 0), (0, 0)), ((0, 0), (0, 1)), ((0, 1), (0, 0))];
        let est = covariance_mc_oracle(&qa, &qb, &pairs, 200_000, &f).unwrap();
        for e in &est {
            let exact = induced_covariance(&qa, &qb, e.pair).unwrap();
            assert!((e.estimate - exact).abs() <= 3.0 * e.std_error, "{e:?} vs {exact}");
        }
        assert!((est[1].estimate - est[2].estimate).abs() < 1e-12);
        let tiny = posterior(1, 1, &[1.0], &[1e-300]);
        let d = covariance_mc_oracle(&tiny, &tiny, &[((0, 0), (0, 0))], 1000, &f).unwrap();
        assert_eq!(d[0].estimate, 0.0);
        assert!(covariance_mc_oracle(&qa, &qb, &pairs, 999, &f).is_err());
    }

    #[test]
    fn mcallester_examples() {
        let r = mcallester_bound(0.0, 0.0, 1_000_000, 0.05).unwrap();
        assert!((r.value - 0.002_301_807_4).abs() < 1e-9, "{}", r.value);
        let r = mcallester_bound(0.0, 100.0, 10_000, 0.05).unwrap();
        assert!((r.terms["complexity"] - 0.073_585).abs() < 1e-6);
        let r = mcallester_bound(0.9, 100.0, 10_000, 0.05).unwrap();
        assert!(!r.vacuous);
        let r = mcallester_bound(0.9, 500.0, 10_000, 0.05).unwrap();
        assert!(r.terms["complexity"] >= 0.1 && r.vacuous && r.value > 1.0);
        assert!(mcallester_bound(1.5, 0.0, 10, 0.05).is_err());
        assert!(mcallester_bound(0.1, -1.0, 10, 0.05).is_err());
        assert!(mcallester_bound(0.1, 0.0, 10, 1.0).is_err());
    }

    #[test]
    fn kl_upper_and_ratio_examples() {
        assert_eq!(kl_upper_factorized(0.0, 5).unwrap(), 0.0);
        assert_eq!(kl_upper_factorized(0.5, 13_610).unwrap(), 6805.0);
        assert_eq!(complexity_ratio(30, 30, 15).unwrap(), 1.0);
        assert!((complexity_ratio(44, 128, 15).unwrap() - (2580f64 / 5632.0).sqrt()).abs() < 1e-15);
        assert!((complexity_ratio(128, 128, 15).unwrap() - 0.484_122_918_275_927).abs() < 1e-12);
        assert!(complexity_ratio(4, 5, 5).is_err());
        assert!(complexity_ratio(4, 5, 0).is_err());
    }

    fn gc_example() -> GaussianComplexityInputs {
        GaussianComplexityInputs { x_frob: 10.0, m: 100, w1_frob: 2.0, h: vec![4, 3], c: vec![1.0, 1.0], r: vec![2], c0: 1.0 }
    }

    #[test]
    fn gaussian_complexity_examples() {
        let r = gaussian_complexity_bound(&gc_example(), None).unwrap();
        assert!((r.value - 0.1 * (4.0 + 6f64.sqrt())).abs() < 1e-12);
        let mut doubled = gc_example();
        doubled.c = vec![2.0, 2.0];
        let r2 = gaussian_complexity_bound(&doubled, None).unwrap();
        assert!((r2.terms["first_term"] - 4.0 * r.terms["first_term"]).abs() < 1e-12);
        let single = GaussianComplexityInputs { h: vec![4], c: vec![3.0], r: vec![], c0: 2.0, ..gc_example() };
        let r1 = gaussian_complexity_bound(&single, None).unwrap();
        assert!((r1.value - 0.1 * 2.0 * 2.0 * 6.0).abs() < 1e-12);
        let bad = GaussianComplexityInputs { r: vec![], ..gc_example() };
        assert!(gaussian_complexity_bound(&bad, None).is_err());
        let g = GeneralizationInputs { lipschitz: 1.0, delta: 0.05, n: 100, emp_risk: 0.1 };
        let full = gaussian_complexity_bound(&gc_example(), Some(g)).unwrap();
        let want = 0.1 + std::f64::consts::PI.sqrt() * r.value + 3.0 * (40f64.ln() / 200.0).sqrt();
        assert!((full.terms["generalization"] - want).abs() < 1e-12);
        assert_eq!(full.inputs["N"], json!(100));
    }
}
