//! Networks assembled from layers: an MLP and a sequence-to-one LSTM.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Param, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::init::InitSpec;
use crate::layers::{BiasKind, Family, Linear, LstmCell, Noise};
use crate::rng::SbnnRng;
use crate::tensor::Tensor;
use crate::variational::{PosteriorFamily, ScaleMixturePrior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    Lstm,
}

/// Architecture description from which a [`Model`] is initialized.
///
/// For an MLP, `dims` lists layer widths from input to output and `layers`
/// gives one family per linear map. For an LSTM, `dims` is
/// `[input, hidden, output]` and `layers` is
/// `[input-to-gates, hidden-to-gates, head]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub dims: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub layers: Vec<Family>,
    #[serde(default)]
    pub bias: BiasKind,
    #[serde(default)]
    pub posterior: PosteriorFamily,
    #[serde(default)]
    pub prior: ScaleMixturePrior,
    #[serde(default)]
    pub init: InitSpec,
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl ModelSpec {
    pub fn mlp(dims: &[usize], activation: Activation, layers: Vec<Family>) -> Self {
        ModelSpec {
            arch: Arch::Mlp,
            dims: dims.to_vec(),
            activation,
            layers,
            bias: BiasKind::Variational,
            posterior: PosteriorFamily::Gaussian,
            prior: ScaleMixturePrior::default(),
            init: InitSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = match self.arch {
            Arch::Mlp => {
                if self.dims.len() < 2 {
                    return Err(Error::Config("an MLP needs at least input and output widths".into()));
                }
                self.dims.len() - 1
            }
            Arch::Lstm => {
                if self.dims.len() != 3 {
                    return Err(Error::Config("LSTM dims must be [input, hidden, output]".into()));
                }
                3
            }
        };
        if self.layers.len() != expected {
            return Err(Error::Config(format!(
                "expected {expected} layer families, got {}",
                self.layers.len()
            )));
        }
        if self.dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        for (k, (fam, (i, o))) in self.layers.iter().zip(self.layer_shapes()).enumerate() {
            if let Family::LowRank { rank } = fam {
                if *rank == 0 || *rank > i.min(o) {
                    return Err(Error::Config(format!("layer {k}: rank {rank} not in 1..={} for {i}x{o}", i.min(o))));
                }
            }
        }
        Ok(())
    }

    /// `(in, out)` of each linear map, aligned with `layers`.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match self.arch {
            Arch::Mlp => self.dims.windows(2).map(|w| (w[0], w[1])).collect(),
            Arch::Lstm => {
                let (i, h, o) = (self.dims[0], self.dims[1], self.dims[2]);
                vec![(i, 4 * h), (h, 4 * h), (h, o)]
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LstmModel {
    pub cell: LstmCell,
    pub head: Linear,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum Model {
    Mlp(Mlp),
    Lstm(Box<LstmModel>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    pub name: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub layers: Vec<LayerCount>,
    pub total: usize,
}

/// Output of one stochastic forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub output: Var,
    pub kl: Var,
}

fn family_name(f: Family) -> String {
    match f {
        Family::Deterministic => "deterministic".into(),
        Family::FullRank => "full_rank".into(),
        Family::LowRank { rank } => format!("low_rank(r={rank})"),
        Family::Rank1 => "rank1".into(),
    }
}

impl Model {
    pub fn build(spec: &ModelSpec, rng: &mut SbnnRng) -> Result<Model> {
        spec.validate()?;
        let lin = |i: usize, o: usize, f: Family, b: BiasKind, rng: &mut SbnnRng| {
            Linear::init(i, o, f, b, spec.posterior, spec.prior, &spec.init, rng)
        };
        let mut model = match spec.arch {
            Arch::Mlp => {
                let layers = spec
                    .dims
                    .windows(2)
                    .zip(&spec.layers)
                    .map(|(d, &f)| lin(d[0], d[1], f, spec.bias, rng))
                    .collect::<Result<Vec<_>>>()?;
                Model::Mlp(Mlp {
                    layers,
                    activation: spec.activation,
                })
            }
            Arch::Lstm => {
                let (input, hidden, output) = (spec.dims[0], spec.dims[1], spec.dims[2]);
                let cell = LstmCell::init(
                    input,
                    hidden,
                    spec.layers[0],
                    spec.layers[1],
                    spec.bias,
                    spec.posterior,
                    spec.prior,
                    &spec.init,
                    rng,
                )?;
                let head = lin(hidden, output, spec.layers[2], spec.bias, rng)?;
                Model::Lstm(Box::new(LstmModel { cell, head }))
            }
        };
        model.assign_ids();
        Ok(model)
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Model::Mlp(m) => m.layers.iter().flat_map(|l| l.params()).collect(),
            Model::Lstm(m) => {
                let mut p = m.cell.params();
                p.extend(m.head.params());
                p
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Model::Mlp(m) => m.layers.iter_mut().flat_map(|l| l.params_mut()).collect(),
            Model::Lstm(m) => {
                let mut p = m.cell.params_mut();
                p.extend(m.head.params_mut());
                p
            }
        }
    }

    /// Numbers parameters by their position in [`Model::params`].
    pub fn assign_ids(&mut self) {
        for (k, p) in self.params_mut().into_iter().enumerate() {
            p.id = ParamId(k);
        }
    }

    pub fn param_count(&self) -> ParamCount {
        let layers: Vec<LayerCount> = match self {
            Model::Mlp(m) => m
                .layers
                .iter()
                .enumerate()
                .map(|(k, l)| LayerCount {
                    name: format!("layer{k}:{}x{}:{}", l.in_dim, l.out_dim, family_name(l.family())),
                    count: l.param_count(),
                })
                .collect(),
            Model::Lstm(m) => vec![
                LayerCount {
                    name: format!("lstm.x_to_gates:{}", family_name(m.cell.x_to_gates.family())),
                    count: m.cell.x_to_gates.param_count(),
                },
                LayerCount {
                    name: format!("lstm.h_to_gates:{}", family_name(m.cell.h_to_gates.family())),
                    count: m.cell.h_to_gates.param_count(),
                },
                LayerCount {
                    name: format!("head:{}", family_name(m.head.family())),
                    count: m.head.param_count(),
                },
            ],
        };
        let total = layers.iter().map(|l| l.count).sum();
        ParamCount { layers, total }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Model::Mlp(m) => m.layers[0].in_dim,
            Model::Lstm(m) => m.cell.input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Model::Mlp(m) => m.layers.last().expect("nonempty").out_dim,
            Model::Lstm(m) => m.head.out_dim,
        }
    }

    /// Linear maps in forward order.
    pub fn linears(&self) -> Vec<&Linear> {
        match self {
            Model::Mlp(m) => m.layers.iter().collect(),
            Model::Lstm(m) => vec![&m.cell.x_to_gates, &m.cell.h_to_gates, &m.head],
        }
    }

    /// One forward pass with a single weight draw per layer. MLP inputs are
    /// `batch x features`; LSTM inputs are `batch x time x features` and the
    /// head reads the final hidden state. The LSTM cache is cleared before
    /// and after the sequence.
    pub fn forward(&mut self, tape: &mut Tape, x: &Tensor, noise: &mut Noise<'_>) -> Result<Forward> {
        match self {
            Model::Mlp(m) => {
                let mut h = tape.constant(x.clone());
                let mut kls = Vec::with_capacity(m.layers.len());
                let last = m.layers.len() - 1;
                for (k, layer) in m.layers.iter().enumerate() {
                    let (z, kl) = layer.forward_sample(tape, h, noise)?;
                    kls.push(kl);
                    h = if k < last { tape.activation(z, m.activation)? } else { z };
                }
                let kl = tape.add_all(&kls)?;
                Ok(Forward { output: h, kl })
            }
            Model::Lstm(m) => {
                let steps = match x.shape() {
                    [_, t, f] if *f == m.cell.input_dim => *t,
                    s => return Err(Error::dim("lstm input", s, &[0, 0, m.cell.input_dim])),
                };
                let b = x.shape()[0];
                let zero = Tensor::zeros(&[b, m.cell.hidden]);
                let mut h = tape.constant(zero.clone());
                let mut c = tape.constant(zero);
                let mut kls = Vec::with_capacity(2);
                m.cell.clear_cache();
                for t in 0..steps {
                    let xt = tape.constant(x.time_step(t)?);
                    let s = m.cell.step(tape, xt, h, c, noise, t > 0)?;
                    if t == 0 {
                        kls.push(s.kl);
                    }
                    h = s.h;
                    c = s.c;
                }
                m.cell.clear_cache();
                let (out, kl_head) = m.head.forward_sample(tape, h, noise)?;
                kls.push(kl_head);
                let kl = tape.add_all(&kls)?;
                Ok(Forward { output: out, kl })
            }
        }
    }

    /// Output values of one draw, without gradients.
    pub fn predict_once(&mut self, x: &Tensor, noise: &mut Noise<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, x, noise)?;
        Ok(tape.value(f.output).clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Model> {
        let mut m: Model = serde_json::from_str(s)?;
        m.assign_ids();
        Ok(m)
    }
}
