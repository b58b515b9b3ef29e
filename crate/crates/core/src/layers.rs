//! Linear layer families and the variational LSTM cell.
//!
//! Every stochastic layer draws one weight sample per forward pass and
//! returns the single-sample KL estimate `log q(w) - log p(w)` of that draw
//! alongside its activations.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, Tape, Var};
use crate::error::{Error, Result};
use crate::init::{matched_gaussian_std, reference_variance, InitSpec};
use crate::rng::SbnnRng;
use crate::tensor::Tensor;
use crate::variational::{Posterior, PosteriorFamily, ScaleMixturePrior};

/// Mean and std scale of the rank-1 multiplicative factors at init.
const RANK1_SCALE: f64 = 0.1;

/// Where the reparameterization noise comes from.
pub enum Noise<'a> {
    Sample(&'a mut SbnnRng),
    /// All noise set to zero: the layer evaluates at its posterior mean.
    Mean,
}

impl Noise<'_> {
    pub fn draw(&mut self, post: &Posterior) -> Tensor {
        match self {
            Noise::Sample(rng) => post.draw_noise(*rng),
            Noise::Mean => Tensor::zeros(post.shape()),
        }
    }
}

/// Layer family selector used by model specifications.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    Deterministic,
    FullRank,
    LowRank { rank: usize },
    Rank1,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasKind {
    #[default]
    Variational,
    Deterministic,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Weights {
    Deterministic { w: Param },
    FullRank { w: Posterior },
    LowRank { rank: usize, a: Posterior, b: Posterior },
    /// `W = W0 * (1 + r s^T)` elementwise.
    Rank1 { w0: Param, r: Posterior, s: Posterior },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Bias {
    None,
    Deterministic { b: Param },
    Variational { b: Posterior },
}

/// `x W + b` with `W` of shape `in_dim x out_dim`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Weights,
    pub bias: Bias,
    pub prior: ScaleMixturePrior,
}

/// One weight draw recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SampledLinear {
    pub w: Var,
    pub b: Option<Var>,
    pub kl: Var,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        in_dim: usize,
        out_dim: usize,
        family: Family,
        bias: BiasKind,
        posterior: PosteriorFamily,
        prior: ScaleMixturePrior,
        spec: &InitSpec,
        rng: &mut SbnnRng,
    ) -> Result<Linear> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        spec.validate()?;
        prior.validate()?;
        let var_w = reference_variance(in_dim, out_dim, spec.scheme);
        let std_w = var_w.sqrt();
        let shape = [in_dim, out_dim];
        let post = |mu: Tensor, scale: f64| -> Result<Posterior> {
            let rho = spec.rho_tensor(mu.shape(), scale)?;
            Posterior::new(posterior, mu, rho)
        };
        let weights = match family {
            Family::Deterministic => Weights::Deterministic {
                w: Param::new(spec.draw_means(rng, &shape, std_w)),
            },
            Family::FullRank => Weights::FullRank {
                w: post(spec.draw_means(rng, &shape, std_w), std_w)?,
            },
            Family::LowRank { rank } => {
                if rank == 0 || rank > in_dim.min(out_dim) {
                    return Err(Error::Config(format!(
                        "rank {rank} invalid for a {in_dim}x{out_dim} layer"
                    )));
                }
                let s = matched_gaussian_std(var_w, rank);
                let a = post(spec.draw_means(rng, &[in_dim, rank], s), s)?;
                let b = post(spec.draw_means(rng, &[out_dim, rank], s), s)?;
                Weights::LowRank { rank, a, b }
            }
            Family::Rank1 => {
                let w0 = Param::new(spec.draw_means(rng, &shape, std_w));
                let r = post(spec.draw_means(rng, &[in_dim], RANK1_SCALE), RANK1_SCALE)?;
                let s = post(spec.draw_means(rng, &[out_dim], RANK1_SCALE), RANK1_SCALE)?;
                Weights::Rank1 { w0, r, s }
            }
        };
        // a deterministic layer carries no posterior, so its bias is plain too
        let bias = match (family, bias) {
            (Family::Deterministic, BiasKind::Variational) => BiasKind::Deterministic,
            (_, b) => b,
        };
        let bias = match bias {
            BiasKind::None => Bias::None,
            BiasKind::Deterministic => Bias::Deterministic {
                b: Param::new(Tensor::zeros(&[out_dim])),
            },
            BiasKind::Variational => Bias::Variational {
                b: post(Tensor::zeros(&[out_dim]), std_w)?,
            },
        };
        Ok(Linear {
            in_dim,
            out_dim,
            weights,
            bias,
            prior,
        })
    }

    pub fn family(&self) -> Family {
        match &self.weights {
            Weights::Deterministic { .. } => Family::Deterministic,
            Weights::FullRank { .. } => Family::FullRank,
            Weights::LowRank { rank, .. } => Family::LowRank { rank: *rank },
            Weights::Rank1 { .. } => Family::Rank1,
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = match &self.weights {
            Weights::Deterministic { w } => vec![w],
            Weights::FullRank { w } => vec![&w.mu, &w.rho],
            Weights::LowRank { a, b, .. } => vec![&a.mu, &a.rho, &b.mu, &b.rho],
            Weights::Rank1 { w0, r, s } => vec![w0, &r.mu, &r.rho, &s.mu, &s.rho],
        };
        match &self.bias {
            Bias::None => {}
            Bias::Deterministic { b } => out.push(b),
            Bias::Variational { b } => out.extend([&b.mu, &b.rho]),
        }
        out
    }

    /// Variational posteriors in noise-draw order; deterministic parts are skipped.
    pub fn posteriors(&self) -> Vec<&Posterior> {
        let mut out: Vec<&Posterior> = match &self.weights {
            Weights::Deterministic { .. } => vec![],
            Weights::FullRank { w } => vec![w],
            Weights::LowRank { a, b, .. } => vec![a, b],
            Weights::Rank1 { r, s, .. } => vec![r, s],
        };
        if let Bias::Variational { b } = &self.bias {
            out.push(b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = match &mut self.weights {
            Weights::Deterministic { w } => vec![w],
            Weights::FullRank { w } => vec![&mut w.mu, &mut w.rho],
            Weights::LowRank { a, b, .. } => vec![&mut a.mu, &mut a.rho, &mut b.mu, &mut b.rho],
            Weights::Rank1 { w0, r, s } => {
                vec![w0, &mut r.mu, &mut r.rho, &mut s.mu, &mut s.rho]
            }
        };
        match &mut self.bias {
            Bias::None => {}
            Bias::Deterministic { b } => out.push(b),
            Bias::Variational { b } => out.extend([&mut b.mu, &mut b.rho]),
        }
        out
    }

    /// Trainable scalars; `mu` and `rho` each count.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Weight matrix at the posterior mean.
    pub fn mean_weight(&self) -> Result<Tensor> {
        match &self.weights {
            Weights::Deterministic { w } => Ok(w.value.clone()),
            Weights::FullRank { w } => Ok(w.mu.value.clone()),
            Weights::LowRank { a, b, .. } => a.mu.value.matmul(&b.mu.value.transpose()?),
            Weights::Rank1 { w0, r, s } => {
                let outer = r
                    .mu
                    .value
                    .reshape(&[self.in_dim, 1])?
                    .matmul(&s.mu.value.reshape(&[1, self.out_dim])?)?;
                w0.value.zip_map(&outer, |w, o| w * (1.0 + o))
            }
        }
    }

    /// Draws the weight matrix and bias on `tape`, accumulating their KL.
    pub fn sample(&self, tape: &mut Tape, noise: &mut Noise<'_>) -> Result<SampledLinear> {
        let mut kls = Vec::new();
        let prior = &self.prior;
        let mut draw = |tape: &mut Tape, post: &Posterior, kls: &mut Vec<Var>| -> Result<Var> {
            let eps = noise.draw(post);
            let s = post.sample_on_tape(tape, eps, prior)?;
            kls.push(s.kl);
            Ok(s.value)
        };
        let w = match &self.weights {
            Weights::Deterministic { w } => w.on(tape),
            Weights::FullRank { w } => draw(tape, w, &mut kls)?,
            Weights::LowRank { a, b, .. } => {
                let av = draw(tape, a, &mut kls)?;
                let bv = draw(tape, b, &mut kls)?;
                let bt = tape.transpose(bv)?;
                tape.matmul(av, bt)?
            }
            Weights::Rank1 { w0, r, s } => {
                let w0v = w0.on(tape);
                let rv = draw(tape, r, &mut kls)?;
                let sv = draw(tape, s, &mut kls)?;
                let col = tape.reshape(rv, &[self.in_dim, 1])?;
                let row = tape.reshape(sv, &[1, self.out_dim])?;
                let outer = tape.matmul(col, row)?;
                let gain = tape.add_scalar(outer, 1.0)?;
                tape.mul(w0v, gain)?
            }
        };
        let b = match &self.bias {
            Bias::None => None,
            Bias::Deterministic { b } => Some(b.on(tape)),
            Bias::Variational { b } => Some(draw(tape, b, &mut kls)?),
        };
        let kl = tape.add_all(&kls)?;
        Ok(SampledLinear { w, b, kl })
    }

    /// Weight matrix of one fresh draw, without keeping the tape.
    pub fn sample_weight(&self, rng: &mut SbnnRng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let s = self.sample(&mut tape, &mut Noise::Sample(rng))?;
        Ok(tape.value(s.w).clone())
    }

    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        x: Var,
        noise: &mut Noise<'_>,
    ) -> Result<(Var, Var)> {
        let s = self.sample(tape, noise)?;
        Ok((apply(tape, x, &s)?, s.kl))
    }
}

/// `x W (+ b)` for an already drawn layer.
pub fn apply(tape: &mut Tape, x: Var, s: &SampledLinear) -> Result<Var> {
    let xw = tape.matmul(x, s.w)?;
    match s.b {
        Some(b) => tape.add_row(xw, b),
        None => Ok(xw),
    }
}

#[derive(Debug, Clone, Copy)]
struct WeightCache {
    tape: u64,
    ih: SampledLinear,
    hh: SampledLinear,
}

/// LSTM cell with packed gates in the order input, forget, candidate, output.
///
/// Weights are sampled on the first step of a sequence and reused from the
/// cache on later steps, so the KL term is emitted once per sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden: usize,
    pub x_to_gates: Linear,
    pub h_to_gates: Linear,
    #[serde(skip)]
    cache: Option<WeightCache>,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmStep {
    pub h: Var,
    pub c: Var,
    pub kl: Var,
}

impl LstmCell {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        input_dim: usize,
        hidden: usize,
        x_family: Family,
        h_family: Family,
        bias: BiasKind,
        posterior: PosteriorFamily,
        prior: ScaleMixturePrior,
        spec: &InitSpec,
        rng: &mut SbnnRng,
    ) -> Result<Self> {
        let g = 4 * hidden;
        let mut x_to_gates = Linear::init(input_dim, g, x_family, bias, posterior, prior, spec, rng)?;
        let h_to_gates = Linear::init(hidden, g, h_family, BiasKind::None, posterior, prior, spec, rng)?;
        let forget = hidden..2 * hidden;
        match &mut x_to_gates.bias {
            Bias::None => {}
            Bias::Deterministic { b } => b.value.data_mut()[forget].fill(1.0),
            Bias::Variational { b } => b.mu.value.data_mut()[forget].fill(1.0),
        }
        Ok(LstmCell {
            input_dim,
            hidden,
            x_to_gates,
            h_to_gates,
            cache: None,
        })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = self.x_to_gates.params();
        p.extend(self.h_to_gates.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.x_to_gates.params_mut();
        p.extend(self.h_to_gates.params_mut());
        p
    }

    pub fn param_count(&self) -> usize {
        self.x_to_gates.param_count() + self.h_to_gates.param_count()
    }

    /// One time step. With `use_cached` the weights drawn on the current
    /// tape are reused and the returned KL is zero; without it fresh weights
    /// are drawn and cached.
    pub fn step(
        &mut self,
        tape: &mut Tape,
        x_t: Var,
        h_prev: Var,
        c_prev: Var,
        noise: &mut Noise<'_>,
        use_cached: bool,
    ) -> Result<LstmStep> {
        let (cache, kl) = if use_cached {
            match self.cache {
                Some(c) if c.tape == tape.id() => (c, tape.constant(Tensor::scalar(0.0))),
                Some(_) => return Err(Error::State("cached LSTM weights belong to another tape".into())),
                None => return Err(Error::State("no cached LSTM weights; sample first".into())),
            }
        } else {
            let ih = self.x_to_gates.sample(tape, noise)?;
            let hh = self.h_to_gates.sample(tape, noise)?;
            let kl = tape.add(ih.kl, hh.kl)?;
            let c = WeightCache {
                tape: tape.id(),
                ih,
                hh,
            };
            self.cache = Some(c);
            (c, kl)
        };
        let zx = apply(tape, x_t, &cache.ih)?;
        let zh = apply(tape, h_prev, &cache.hh)?;
        let z = tape.add(zx, zh)?;
        let h = self.hidden;
        let i = tape.slice_cols(z, 0, h)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice_cols(z, h, 2 * h)?;
        let f = tape.sigmoid(f)?;
        let g = tape.slice_cols(z, 2 * h, 3 * h)?;
        let g = tape.tanh(g)?;
        let o = tape.slice_cols(z, 3 * h, 4 * h)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h_new = tape.mul(o, tc)?;
        Ok(LstmStep { h: h_new, c, kl })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{sigmoid_scalar, ParamId};
    use crate::linalg::singular_values;
    use crate::rng::{normal_vec, RngFactory};

    fn layer(in_dim: usize, out_dim: usize, family: Family, seed: u64) -> Linear {
        let mut rng = RngFactory::new(seed).stream("init");
        Linear::init(
            in_dim,
            out_dim,
            family,
            BiasKind::Variational,
            PosteriorFamily::Gaussian,
            ScaleMixturePrior::default(),
            &InitSpec::default(),
            &mut rng,
        )
        .unwrap()
    }

    fn set(p: &mut Posterior, mu: Vec<f64>, rho: f64) {
        let shape = p.shape().to_vec();
        p.mu.value = Tensor::new(shape.clone(), mu).unwrap();
        p.rho.value = Tensor::full(&shape, rho);
    }

    #[test]
    fn low_rank_deterministic_limit_is_identity() {
        let mut l = layer(2, 2, Family::LowRank { rank: 2 }, 1);
        if let Weights::LowRank { a, b, .. } = &mut l.weights {
            set(a, vec![1.0, 0.0, 0.0, 1.0], -40.0);
            set(b, vec![1.0, 0.0, 0.0, 1.0], -40.0);
        }
        if let Bias::Variational { b } = &mut l.bias {
            set(b, vec![0.0, 0.0], -40.0);
        }
        let mut rng = RngFactory::new(2).stream("noise");
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
        let (y, _) = l.forward_sample(&mut tape, x, &mut Noise::Sample(&mut rng)).unwrap();
        let y = tape.value(y);
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rank1_zero_perturbation_is_base_layer() {
        let mut l = layer(3, 2, Family::Rank1, 3);
        if let Weights::Rank1 { r, s, .. } = &mut l.weights {
            set(r, vec![0.0; 3], -800.0);
            set(s, vec![0.0; 2], -800.0);
        }
        let b = Tensor::vector(vec![0.5, -0.25]);
        l.bias = Bias::Deterministic { b: Param::new(b.clone()) };
        let Weights::Rank1 { w0, .. } = &l.weights else { unreachable!() };
        let x = Tensor::from_rows(&[&[1.0, -2.0, 0.5], &[0.1, 0.2, 0.3]]);
        let mut expect = x.matmul(&w0.value).unwrap();
        for row in expect.data_mut().chunks_mut(2) {
            row[0] += 0.5;
            row[1] -= 0.25;
        }
        let mut rng = RngFactory::new(4).stream("noise");
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (y, _) = l.forward_sample(&mut tape, xv, &mut Noise::Sample(&mut rng)).unwrap();
        assert_eq!(tape.value(y), &expect);
    }

    #[test]
    fn sampled_low_rank_weight_is_singular() {
        let l = layer(20, 20, Family::LowRank { rank: 3 }, 5);
        let mut rng = RngFactory::new(6).stream("noise");
        let w = l.sample_weight(&mut rng).unwrap();
        let s = singular_values(&w).unwrap();
        assert!(s[3] / s[0] <= 1e-10, "{:?}", &s[..5]);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let l = layer(3, 2, Family::FullRank, 7);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let err = l.forward_sample(&mut tape, x, &mut Noise::Mean).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn rank_must_fit_layer() {
        let mut rng = RngFactory::new(0).stream("init");
        let bad = Linear::init(
            4,
            3,
            Family::LowRank { rank: 4 },
            BiasKind::None,
            PosteriorFamily::Gaussian,
            ScaleMixturePrior::default(),
            &InitSpec::default(),
            &mut rng,
        );
        assert!(matches!(bad, Err(Error::Config(_))));
    }

    #[test]
    fn kl_is_sum_over_stochastic_parts() {
        let l = layer(4, 3, Family::LowRank { rank: 2 }, 8);
        let mut tape = Tape::new();
        let s = l.sample(&mut tape, &mut Noise::Mean).unwrap();
        let Weights::LowRank { a, b, .. } = &l.weights else { unreachable!() };
        let Bias::Variational { b: bias } = &l.bias else { unreachable!() };
        let expect: f64 = [a, b, bias]
            .iter()
            .map(|p| {
                p.log_q(&p.mu.value).unwrap()
                    - crate::variational::log_prior_density(&p.mu.value, &l.prior)
            })
            .sum();
        assert!((tape.value(s.kl).item() - expect).abs() < 1e-9);
    }

    fn cell(input: usize, hidden: usize, family: Family, seed: u64) -> LstmCell {
        let mut rng = RngFactory::new(seed).stream("init");
        LstmCell::init(
            input,
            hidden,
            family,
            family,
            BiasKind::Variational,
            PosteriorFamily::Gaussian,
            ScaleMixturePrior::default(),
            &InitSpec::default(),
            &mut rng,
        )
        .unwrap()
    }

    /// Independent scalar-loop LSTM step.
    fn reference_step(
        x: &[f64],
        h: &[f64],
        c: &[f64],
        wih: &Tensor,
        whh: &Tensor,
        b: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let hid = h.len();
        let z: Vec<f64> = (0..4 * hid)
            .map(|k| {
                b[k] + (0..x.len()).map(|i| x[i] * wih.get2(i, k)).sum::<f64>()
                    + (0..hid).map(|i| h[i] * whh.get2(i, k)).sum::<f64>()
            })
            .collect();
        let mut hn = vec![0.0; hid];
        let mut cn = vec![0.0; hid];
        for j in 0..hid {
            let i = sigmoid_scalar(z[j]);
            let f = sigmoid_scalar(z[hid + j]);
            let g = z[2 * hid + j].tanh();
            let o = sigmoid_scalar(z[3 * hid + j]);
            cn[j] = f * c[j] + i * g;
            hn[j] = o * cn[j].tanh();
        }
        (hn, cn)
    }

    #[test]
    fn zero_cell_stays_at_zero() {
        let mut c = cell(2, 3, Family::FullRank, 1);
        for p in c.params_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let h0 = tape.constant(Tensor::zeros(&[1, 3]));
        let c0 = tape.constant(Tensor::zeros(&[1, 3]));
        let s = c.step(&mut tape, x, h0, c0, &mut Noise::Mean, false).unwrap();
        assert!(tape.value(s.h).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(s.c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_limit_matches_reference_step() {
        let mut c = cell(3, 4, Family::FullRank, 2);
        let mut rng = RngFactory::new(3).stream("vals");
        for p in c.params_mut() {
            p.value = Tensor::new(p.value.shape().to_vec(), normal_vec(&mut rng, p.value.len())).unwrap();
        }
        for p in [&mut c.x_to_gates, &mut c.h_to_gates] {
            if let Weights::FullRank { w } = &mut p.weights {
                w.rho.value = Tensor::full(w.shape(), -800.0);
            }
            if let Bias::Variational { b } = &mut p.bias {
                b.rho.value = Tensor::full(b.shape(), -800.0);
            }
        }
        let x = normal_vec(&mut rng, 3);
        let h = normal_vec(&mut rng, 4);
        let cp = normal_vec(&mut rng, 4);
        let Weights::FullRank { w: wih } = &c.x_to_gates.weights else { unreachable!() };
        let Weights::FullRank { w: whh } = &c.h_to_gates.weights else { unreachable!() };
        let Bias::Variational { b } = &c.x_to_gates.bias else { unreachable!() };
        let (he, ce) = reference_step(&x, &h, &cp, &wih.mu.value, &whh.mu.value, b.mu.value.data());

        let mut noise_rng = RngFactory::new(4).stream("noise");
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::matrix(1, 3, x).unwrap());
        let hv = tape.constant(Tensor::matrix(1, 4, h).unwrap());
        let cv = tape.constant(Tensor::matrix(1, 4, cp).unwrap());
        let s = c.step(&mut tape, xv, hv, cv, &mut Noise::Sample(&mut noise_rng), false).unwrap();
        for (a, e) in tape.value(s.h).data().iter().zip(&he) {
            assert!((a - e).abs() < 1e-12);
        }
        for (a, e) in tape.value(s.c).data().iter().zip(&ce) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let c = cell(2, 3, Family::LowRank { rank: 2 }, 3);
        let Bias::Variational { b } = &c.x_to_gates.bias else { unreachable!() };
        assert_eq!(&b.mu.value.data()[3..6], &[1.0, 1.0, 1.0]);
        assert!(b.mu.value.data()[..3].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kl_emitted_once_per_sequence() {
        let mut c = cell(2, 3, Family::LowRank { rank: 2 }, 4);
        let mut rng = RngFactory::new(5).stream("noise");
        let mut tape = Tape::new();
        let mut h = tape.constant(Tensor::zeros(&[2, 3]));
        let mut cs = tape.constant(Tensor::zeros(&[2, 3]));
        let mut kls = Vec::new();
        for t in 0..24 {
            let x = tape.constant(Tensor::full(&[2, 2], t as f64 * 0.1));
            let s = c
                .step(&mut tape, x, h, cs, &mut Noise::Sample(&mut rng), t > 0)
                .unwrap();
            kls.push(tape.value(s.kl).item());
            h = s.h;
            cs = s.c;
        }
        let total: f64 = kls.iter().sum();
        assert_eq!(total, kls[0]);
        assert!(kls[0] != 0.0);
    }

    #[test]
    fn cache_contract() {
        let mut c = cell(2, 2, Family::FullRank, 6);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let h = tape.constant(Tensor::zeros(&[1, 2]));
        c.clear_cache();
        c.clear_cache();
        let err = c.step(&mut tape, x, h, h, &mut Noise::Mean, true).unwrap_err();
        assert!(matches!(err, Error::State(_)));

        let mut rng = RngFactory::new(7).stream("noise");
        let mut draws = Vec::new();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::zeros(&[1, 2]));
            let h = tape.constant(Tensor::zeros(&[1, 2]));
            c.step(&mut tape, x, h, h, &mut Noise::Sample(&mut rng), false).unwrap();
            let cache = c.cache.unwrap();
            draws.push(tape.value(cache.ih.w).clone());
            c.clear_cache();
        }
        assert_ne!(draws[0], draws[1]);
    }

    #[test]
    fn parameter_ids_follow_listing() {
        let mut l = layer(2, 2, Family::Rank1, 9);
        for (k, p) in l.params_mut().into_iter().enumerate() {
            p.id = ParamId(k);
        }
        let ids: Vec<usize> = l.params().iter().map(|p| p.id.0).collect();
        assert_eq!(ids, (0..7).collect::<Vec<_>>());
        assert_eq!(l.param_count(), 4 + 2 * 2 + 2 * 2 + 2 * 2);
    }
}
