//! Fixtures shared by the benchmarks.

use sbnn_core::autodiff::Activation;
use sbnn_core::data::{Dataset, Targets};
use sbnn_core::layers::Family;
use sbnn_core::model::{Model, ModelSpec};
use sbnn_core::rng::{normal_vec, RngFactory};
use sbnn_core::Tensor;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = RngFactory::new(seed).stream("bench.matrix");
    Tensor::matrix(rows, cols, normal_vec(&mut rng, rows * cols)).expect("shape matches data")
}

/// Toy-sized MLP `1 -> 100 -> 100 -> 1` whose hidden layer uses `hidden`.
pub fn toy_model(hidden: Family) -> Model {
    let spec = ModelSpec::mlp(&[1, 100, 100, 1], Activation::Tanh, vec![Family::FullRank, hidden, Family::FullRank]);
    Model::build(&spec, &mut RngFactory::new(0).stream("init")).expect("valid toy spec")
}

pub fn regression_batch(n: usize) -> Dataset {
    let x = random_matrix(n, 1, 1);
    let y = Targets::Values(x.data().iter().map(|v| v.sin()).collect());
    Dataset::new(x, y).expect("rows match targets")
}
