//! Monte-Carlo posterior predictive summaries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Noise;
use crate::model::Model;
use crate::rng::RngFactory;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

/// Averages over `S` weight draws.
///
/// For classification `mean` holds class probabilities (`N x K`, `K >= 2`)
/// and the entropy fields are per example, in nats. For regression `mean`
/// and `variance` are the sample mean and unbiased sample variance of the
/// raw outputs, and the entropy fields are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub n_samples: usize,
    pub mean: Tensor,
    pub variance: Option<Tensor>,
    pub per_sample: Vec<Tensor>,
    pub entropy_of_mean: Vec<f64>,
    pub mean_entropy: Vec<f64>,
    pub mutual_information: Vec<f64>,
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&q| q > 0.0).map(|&q| q * q.ln()).sum::<f64>()
}

/// Row softmax, or `[1 - p, p]` with `p = sigmoid(logit)` for one column.
pub fn class_probs(logits: &Tensor) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    if k == 1 {
        let mut out = Vec::with_capacity(2 * n);
        for &z in logits.data() {
            let p = crate::autodiff::sigmoid_scalar(z);
            out.extend([1.0 - p, p]);
        }
        return Tensor::matrix(n, 2, out);
    }
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|z| *z = (*z - mx).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|z| *z /= s);
    }
    Ok(out)
}

/// Summary of per-draw class-probability matrices.
pub fn summarize_classification(per_sample: Vec<Tensor>) -> Result<PredictiveSummary> {
    let s = per_sample.len();
    if s == 0 {
        return Err(Error::Parameter("need at least one sample".into()));
    }
    let shape = per_sample[0].shape().to_vec();
    let (n, k) = per_sample[0].dims2()?;
    let mut mean = Tensor::zeros(&shape);
    for p in &per_sample {
        if p.shape() != shape.as_slice() {
            return Err(Error::dim("summarize", p.shape(), &shape));
        }
        mean.add_assign(p);
    }
    let mean = mean.scale(1.0 / s as f64);
    let mut eom = Vec::with_capacity(n);
    let mut me = Vec::with_capacity(n);
    let mut mi = Vec::with_capacity(n);
    for i in 0..n {
        let h_mean = entropy(&mean.data()[i * k..(i + 1) * k]);
        let h_each = per_sample.iter().map(|p| entropy(&p.data()[i * k..(i + 1) * k])).sum::<f64>() / s as f64;
        eom.push(h_mean);
        me.push(h_each);
        mi.push(h_mean - h_each);
    }
    Ok(PredictiveSummary {
        n_samples: s,
        mean,
        variance: None,
        per_sample,
        entropy_of_mean: eom,
        mean_entropy: me,
        mutual_information: mi,
    })
}

/// Summary of per-draw regression outputs.
pub fn summarize_regression(per_sample: Vec<Tensor>) -> Result<PredictiveSummary> {
    let s = per_sample.len();
    if s == 0 {
        return Err(Error::Parameter("need at least one sample".into()));
    }
    let shape = per_sample[0].shape().to_vec();
    let mut mean = Tensor::zeros(&shape);
    for p in &per_sample {
        if p.shape() != shape.as_slice() {
            return Err(Error::dim("summarize", p.shape(), &shape));
        }
        mean.add_assign(p);
    }
    let mean = mean.scale(1.0 / s as f64);
    let mut var = Tensor::zeros(&shape);
    if s > 1 {
        for p in &per_sample {
            for ((v, x), m) in var.data_mut().iter_mut().zip(p.data()).zip(mean.data()) {
                *v += (x - m) * (x - m);
            }
        }
        var = var.scale(1.0 / (s - 1) as f64);
    }
    Ok(PredictiveSummary {
        n_samples: s,
        mean,
        variance: Some(var),
        per_sample,
        entropy_of_mean: Vec::new(),
        mean_entropy: Vec::new(),
        mutual_information: Vec::new(),
    })
}

/// Raw outputs of `samples` independent weight draws. Draw `s` uses
/// substream `s` of the `"predict"` stream, so results do not depend on the
/// number of worker threads.
pub fn sample_outputs(model: &Model, x: &Tensor, samples: usize, factory: &RngFactory) -> Result<Vec<Tensor>> {
    if samples == 0 {
        return Err(Error::Parameter("mc_predict needs S >= 1".into()));
    }
    (0..samples)
        .into_par_iter()
        .map_init(
            || model.clone(),
            |m, s| {
                let mut rng = factory.substream("predict", s as u64);
                m.predict_once(x, &mut Noise::Sample(&mut rng))
            },
        )
        .collect()
}

pub fn mc_predict(
    model: &Model,
    x: &Tensor,
    samples: usize,
    factory: &RngFactory,
    task: TaskKind,
) -> Result<PredictiveSummary> {
    let outs = sample_outputs(model, x, samples, factory)?;
    match task {
        TaskKind::Regression => summarize_regression(outs),
        TaskKind::Classification => {
            summarize_classification(outs.iter().map(class_probs).collect::<Result<Vec<_>>>()?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::layers::Family;
    use crate::model::ModelSpec;

    #[test]
    fn maximal_disagreement_gives_ln2() {
        let a = Tensor::from_rows(&[&[1.0, 0.0]]);
        let b = Tensor::from_rows(&[&[0.0, 1.0]]);
        let s = summarize_classification(vec![a, b]).unwrap();
        assert!((s.mutual_information[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(s.mean_entropy[0], 0.0);
    }

    #[test]
    fn agreeing_samples_have_zero_mi() {
        let p = Tensor::from_rows(&[&[0.3, 0.7], &[0.9, 0.1]]);
        let s = summarize_classification(vec![p.clone(), p.clone(), p]).unwrap();
        assert!(s.mutual_information.iter().all(|m| m.abs() < 1e-15));
    }

    #[test]
    fn probabilities_are_normalized() {
        let p = class_probs(&Tensor::from_rows(&[&[1000.0, 0.0, -3.0], &[0.1, 0.2, 0.3]])).unwrap();
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let b = class_probs(&Tensor::from_rows(&[&[0.0]])).unwrap();
        assert_eq!(b.data(), &[0.5, 0.5]);
    }

    fn frozen(family: Family) -> Model {
        let mut spec = ModelSpec::mlp(&[2, 5, 3], Activation::Tanh, vec![family, family]);
        spec.init.eta = 0.5;
        let mut m = Model::build(&spec, &mut RngFactory::new(1).stream("init")).unwrap();
        if family != Family::Deterministic {
            for p in m.params_mut() {
                // raw scales are every second parameter of a posterior pair
                if p.id.0 % 2 == 1 {
                    p.value = Tensor::full(p.value.shape(), -800.0);
                }
            }
        }
        m
    }

    #[test]
    fn deterministic_limit_has_no_epistemic_spread() {
        let x = Tensor::from_rows(&[&[0.5, -1.0], &[2.0, 0.1]]);
        let m = frozen(Family::FullRank);
        let f = RngFactory::new(2);
        let c = mc_predict(&m, &x, 16, &f, TaskKind::Classification).unwrap();
        assert!(c.mutual_information.iter().all(|v| v.abs() < 1e-12));
        let r = mc_predict(&m, &x, 16, &f, TaskKind::Regression).unwrap();
        assert!(r.variance.unwrap().data().iter().all(|&v| v < 1e-24));
    }

    #[test]
    fn independent_of_thread_count() {
        let x = Tensor::from_rows(&[&[0.5, -1.0]]);
        let mut spec = ModelSpec::mlp(&[2, 5, 3], Activation::Tanh, vec![Family::LowRank { rank: 2 }, Family::FullRank]);
        spec.init.eta = 0.5;
        let m = Model::build(&spec, &mut RngFactory::new(1).stream("init")).unwrap();
        let f = RngFactory::new(3);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let a = one.install(|| mc_predict(&m, &x, 32, &f, TaskKind::Classification).unwrap());
        let b = mc_predict(&m, &x, 32, &f, TaskKind::Classification).unwrap();
        assert_eq!(a, b);
        assert!(a.mutual_information[0] > 0.0);
    }
}
