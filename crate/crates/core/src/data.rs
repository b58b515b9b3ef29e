//! Datasets, synthetic generators and CSV loading.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{permutation, standard_normal, uniform, RngFactory};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    pub fn classes(&self) -> Result<&[usize]> {
        match self {
            Targets::Classes(c) => Ok(c),
            Targets::Values(_) => Err(Error::Data("expected class labels, found real targets".into())),
        }
    }

    pub fn values(&self) -> Result<&[f64]> {
        match self {
            Targets::Values(v) => Ok(v),
            Targets::Classes(_) => Err(Error::Data("expected real targets, found class labels".into())),
        }
    }

    /// Targets as floats; class labels map to their index.
    pub fn as_f64(&self) -> Vec<f64> {
        match self {
            Targets::Classes(c) => c.iter().map(|&k| k as f64).collect(),
            Targets::Values(v) => v.clone(),
        }
    }
}

/// Inputs whose first axis indexes examples, with aligned targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Targets,
}

impl Dataset {
    pub fn new(x: Tensor, y: Targets) -> Result<Self> {
        if x.shape()[0] != y.len() {
            return Err(Error::dim("dataset", x.shape(), &[y.len()]));
        }
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: self.y.select(idx),
        }
    }
}

/// Per-feature affine standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(x: &Tensor) -> Result<Self> {
        let (n, d) = x.dims2()?;
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += x.get2(i, j);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut std = vec![0.0; d];
        for i in 0..n {
            for (j, s) in std.iter_mut().enumerate() {
                *s += (x.get2(i, j) - mean[j]).powi(2);
            }
        }
        for s in &mut std {
            *s = (*s / n as f64).sqrt();
            if !(*s > 1e-12) {
                *s = 1.0;
            }
        }
        Ok(Normalization { mean, std })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if d != self.mean.len() {
            return Err(Error::dim("normalize", x.shape(), &[self.mean.len()]));
        }
        let mut out = x.clone();
        for i in 0..n {
            for j in 0..d {
                out.set2(i, j, (x.get2(i, j) - self.mean[j]) / self.std[j]);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Option<Dataset>,
    /// Shifted inputs for out-of-distribution detection.
    pub ood: Option<Dataset>,
    /// Dense evaluation inputs with no targets.
    pub grid: Option<Tensor>,
    pub normalization: Option<Normalization>,
}

/// `x + 0.3 sin(2 pi (x + e)) + 0.3 sin(4 pi (x + e)) + e`.
pub fn toy_function(x: f64, eps: f64) -> f64 {
    use std::f64::consts::PI;
    x + 0.3 * (2.0 * PI * (x + eps)).sin() + 0.3 * (4.0 * PI * (x + eps)).sin() + eps
}

pub const TOY_NOISE_STD: f64 = 0.02;
pub const TOY_GRID: (f64, f64) = (-0.5, 1.5);

fn toy_split(n: usize, lo: f64, hi: f64, f: &RngFactory, label: &str) -> Result<Dataset> {
    let mut rx = f.stream(&format!("{label}.x"));
    let mut re = f.stream(&format!("{label}.eps"));
    let xs: Vec<f64> = (0..n).map(|_| uniform(&mut rx, lo, hi)).collect();
    let ys = xs
        .iter()
        .map(|&x| toy_function(x, TOY_NOISE_STD * standard_normal(&mut re)))
        .collect();
    Dataset::new(Tensor::matrix(n, 1, xs)?, Targets::Values(ys))
}

/// Training inputs on `[-0.1, 0.6]`, test inputs on `[-0.25, 0.85]` and an
/// evenly spaced grid of `n_grid` points on `[-0.5, 1.5]`.
pub fn gen_toy_regression(n_train: usize, n_test: usize, n_grid: usize, seed: u64) -> Result<DatasetSplits> {
    if n_train == 0 || n_test == 0 || n_grid < 2 {
        return Err(Error::Config("toy regression sizes must be positive (grid >= 2)".into()));
    }
    let f = RngFactory::new(seed);
    let train = toy_split(n_train, -0.1, 0.6, &f, "toy.train")?;
    let test = toy_split(n_test, -0.25, 0.85, &f, "toy.test")?;
    let (lo, hi) = TOY_GRID;
    let step = (hi - lo) / (n_grid - 1) as f64;
    let grid = Tensor::matrix(n_grid, 1, (0..n_grid).map(|i| lo + step * i as f64).collect())?;
    Ok(DatasetSplits {
        train,
        val: None,
        test: Some(test),
        ood: None,
        grid: Some(grid),
        normalization: None,
    })
}

/// Half-distance between the two class means along the first axis.
const CLASS_OFFSET: f64 = 1.5;

/// Two unit-variance Gaussian classes at `+-1.5 e_1`. The OOD split is a
/// fresh draw of both classes displaced by `separation * u` for a random
/// unit `u` orthogonal to the class axis (`u = +-e_1` when `d = 1`), so at
/// `separation = 0` it is distributed exactly like the test split.
pub fn gen_synthetic_classification(n: usize, d: usize, separation: f64, seed: u64) -> Result<DatasetSplits> {
    if n == 0 || d == 0 {
        return Err(Error::Config("classification needs n >= 1 and d >= 1".into()));
    }
    let f = RngFactory::new(seed);
    let mut rd = f.stream("cls.direction");
    let mut dir: Vec<f64> = (0..d).map(|_| standard_normal(&mut rd)).collect();
    if d > 1 {
        dir[0] = 0.0;
    }
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    dir.iter_mut().for_each(|v| *v /= norm);

    let blob = |rows: usize, label: &str| -> Result<Dataset> {
        let mut rng = f.stream(label);
        let mut x = Vec::with_capacity(rows * d);
        let mut y = Vec::with_capacity(rows);
        for _ in 0..rows {
            let class = usize::from(rng.random::<bool>());
            let centre = if class == 1 { CLASS_OFFSET } else { -CLASS_OFFSET };
            x.push(centre + standard_normal(&mut rng));
            x.extend((1..d).map(|_| standard_normal(&mut rng)));
            y.push(class);
        }
        Dataset::new(Tensor::matrix(rows, d, x)?, Targets::Classes(y))
    };
    let ood = {
        let mut base = blob(n, "cls.ood")?;
        for row in base.x.data_mut().chunks_mut(d) {
            row.iter_mut().zip(&dir).for_each(|(v, u)| *v += separation * u);
        }
        base
    };
    let n_val = (n / 5).max(1);
    Ok(DatasetSplits {
        train: blob(n, "cls.train")?,
        val: Some(blob(n_val, "cls.val")?),
        test: Some(blob(n, "cls.test")?),
        ood: Some(ood),
        grid: None,
        normalization: None,
    })
}

/// Period of the synthetic sequences, in steps.
pub const SEQUENCE_PERIOD: f64 = 24.0;

/// Sine windows with random phase and amplitude in `[0.5, 1.5]`, observed
/// with Gaussian noise; the target is the next clean value plus noise.
/// Inputs are `n x steps x 1`.
pub fn gen_synthetic_sequence(n: usize, steps: usize, noise_std: f64, seed: u64) -> Result<DatasetSplits> {
    if n == 0 || steps == 0 || noise_std < 0.0 {
        return Err(Error::Config("sequence sizes must be positive and noise non-negative".into()));
    }
    let f = RngFactory::new(seed);
    let omega = 2.0 * std::f64::consts::PI / SEQUENCE_PERIOD;
    let split = |rows: usize, label: &str| -> Result<Dataset> {
        let mut rng = f.stream(label);
        let mut x = Vec::with_capacity(rows * steps);
        let mut y = Vec::with_capacity(rows);
        for _ in 0..rows {
            let phase = uniform(&mut rng, 0.0, 2.0 * std::f64::consts::PI);
            let amp = uniform(&mut rng, 0.5, 1.5);
            for t in 0..=steps {
                let v = amp * (omega * t as f64 + phase).sin() + noise_std * standard_normal(&mut rng);
                if t < steps {
                    x.push(v);
                } else {
                    y.push(v);
                }
            }
        }
        Dataset::new(Tensor::new(vec![rows, steps, 1], x)?, Targets::Values(y))
    };
    let small = (n / 5).max(1);
    Ok(DatasetSplits {
        train: split(n, "seq.train")?,
        val: Some(split(small, "seq.val")?),
        test: Some(split(small, "seq.test")?),
        ood: None,
        grid: None,
        normalization: None,
    })
}

/// Reads a headed numeric CSV, shuffles rows with `seed`, splits by
/// `fractions = [train, val, test]` and standardizes features with train
/// statistics. With `classification` the target must hold non-negative
/// integers.
pub fn load_csv(
    path: &Path,
    target_column: &str,
    fractions: [f64; 3],
    classification: bool,
    seed: u64,
) -> Result<DatasetSplits> {
    if fractions.iter().any(|&f| f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let target = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::Data(format!("column '{target_column}' not found in {}", path.display())))?;
    let d = headers.len() - 1;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        for (col, cell) in rec.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Data(format!("non-numeric cell '{cell}' at row {}, column '{}'", row + 1, &headers[col]))
            })?;
            if col == target {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    let n = ys.len();
    if n == 0 || d == 0 {
        return Err(Error::Data("CSV needs at least one row and one feature column".into()));
    }
    let y = if classification {
        Targets::Classes(
            ys.iter()
                .enumerate()
                .map(|(i, &v)| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::Data(format!("class label {v} at row {} is not a non-negative integer", i + 1)))
                    }
                })
                .collect::<Result<_>>()?,
        )
    } else {
        Targets::Values(ys)
    };
    let all = Dataset::new(Tensor::matrix(n, d, xs)?, y)?;
    let perm = permutation(&mut RngFactory::new(seed).stream("csv.split"), n);
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    if n_train == 0 {
        return Err(Error::Data("training split is empty".into()));
    }
    let train = all.select(&perm[..n_train]);
    let val = all.select(&perm[n_train..n_train + n_val]);
    let test_idx = &perm[n_train + n_val..];
    let norm = Normalization::fit(&train.x)?;
    let standardize = |mut ds: Dataset| -> Result<Dataset> {
        ds.x = norm.apply(&ds.x)?;
        Ok(ds)
    };
    let nonempty = |idx: &[usize]| -> Result<Option<Dataset>> {
        if idx.is_empty() { Ok(None) } else { Ok(Some(standardize(all.select(idx))?)) }
    };
    Ok(DatasetSplits {
        train: standardize(train)?,
        val: if n_val == 0 { None } else { Some(standardize(val)?) },
        test: nonempty(test_idx)?,
        ood: None,
        grid: None,
        normalization: Some(norm),
    })
}
