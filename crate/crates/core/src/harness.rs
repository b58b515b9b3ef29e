//! Commands that wire data, training, prediction and bounds into runs
//! producing JSON and CSV artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bounds::{
    complexity_ratio, gaussian_complexity_bound, kl_upper_factorized, max_parameter_kl, mcallester_bound,
    spectral_report, BoundReport, GaussianComplexityInputs, GeneralizationInputs,
};
use crate::config::{ExperimentConfig, OodSource};
use crate::data::{Dataset, DatasetSplits};
use crate::error::{Error, Result};
use crate::layers::{Family, Linear};
use crate::linalg::spectral_norm;
use crate::metrics::{
    auroc, aupr, brier, confidence_and_correct, coverage_curve, ece_best_config, gaussian_crps, gaussian_intervals, mae,
    nll, picp_mpiw, quantile, regression_calibration_auc, rmse, selective_prediction_curve,
};
use crate::model::{Arch, Model};
use crate::predict::{mc_predict, PredictiveSummary, TaskKind};
use crate::report::{csv_string, sha256_hex, to_json_pretty, write_file};
use crate::rng::RngFactory;
use crate::tensor::Tensor;
use crate::train::{train, LossKind};

/// Samples per parameter for the C_max estimate.
pub const C_MAX_SAMPLES: usize = 10_000;
/// Confidence level used for model-derived PAC-Bayes and complexity bounds.
pub const BOUND_DELTA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub enum BoundsQuery {
    Ratio { m: usize, n: usize, r: usize },
    McAllester { emp_risk: f64, kl: f64, n: u64, delta: f64 },
    KlUpper { c_max: f64, d: u64 },
    GaussianComplexity(GaussianComplexityInputs, Option<GeneralizationInputs>),
    /// Bounds evaluated on a trained model from the config.
    Model,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    GenData,
    Train,
    Eval,
    Bounds(BoundsQuery),
    SvdAnalyze,
    AblateRank,
    ParamCount,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Bounds(_) => "bounds",
            Command::SvdAnalyze => "svd-analyze",
            Command::AblateRank => "ablate-rank",
            Command::ParamCount => "param-count",
        }
    }
}

fn kv_map(args: &[String]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for a in args {
        let (k, v) = a
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("expected key=value, got '{a}'")))?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Usage(format!("key '{k}' given twice")));
        }
    }
    Ok(out)
}

struct Kv {
    map: BTreeMap<String, String>,
}

impl Kv {
    fn take<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        self.take_opt(key)?.ok_or_else(|| Error::Usage(format!("missing {key}=...")))
    }

    fn take_opt<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Usage(format!("cannot parse {key}={v}"))),
        }
    }

    fn take_list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Vec<T>> {
        let v = self.map.remove(key).ok_or_else(|| Error::Usage(format!("missing {key}=...")))?;
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Usage(format!("cannot parse {key}={v}"))))
            .collect()
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(Error::Usage(format!("unknown key '{k}'"))),
            None => Ok(()),
        }
    }
}

/// Parses `kind` (`ratio`, `mcallester`, `kl-upper`, `gaussian-complexity`)
/// with `key=value` arguments. Lists are comma separated.
pub fn parse_bounds_query(kind: &str, args: &[String]) -> Result<BoundsQuery> {
    let mut kv = Kv { map: kv_map(args)? };
    let q = match kind {
        "ratio" => BoundsQuery::Ratio {
            m: kv.take("m")?,
            n: kv.take("n")?,
            r: kv.take("r")?,
        },
        "mcallester" => BoundsQuery::McAllester {
            emp_risk: kv.take("emp")?,
            kl: kv.take("kl")?,
            n: kv.take("N")?,
            delta: kv.take("delta")?,
        },
        "kl-upper" => BoundsQuery::KlUpper {
            c_max: kv.take("c_max")?,
            d: kv.take("D")?,
        },
        "gaussian-complexity" => {
            let inp = GaussianComplexityInputs {
                x_frob: kv.take("x_frob")?,
                m: kv.take("m")?,
                w1_frob: kv.take("w1_frob")?,
                h: kv.take_list("h")?,
                c: kv.take_list("C")?,
                r: if kv.map.contains_key("r") { kv.take_list("r")? } else { Vec::new() },
                c0: kv.take("C0")?,
            };
            let gen = match kv.take_opt::<f64>("L")? {
                None => None,
                Some(lipschitz) => Some(GeneralizationInputs {
                    lipschitz,
                    delta: kv.take("delta")?,
                    n: kv.take("N")?,
                    emp_risk: kv.take("emp")?,
                }),
            };
            BoundsQuery::GaussianComplexity(inp, gen)
        }
        other => return Err(Error::Usage(format!("unknown bound '{other}'"))),
    };
    kv.finish()?;
    Ok(q)
}

/// Command-line overrides applied on top of the config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub rank: Option<usize>,
    pub samples: Option<usize>,
    pub epochs: Option<usize>,
}

pub fn apply_overrides(cfg: &ExperimentConfig, o: &Overrides, base: &Path) -> Result<ExperimentConfig> {
    let mut c = match o.rank {
        Some(r) => cfg.with_rank(r)?,
        None => cfg.clone(),
    };
    if let Some(s) = o.seed {
        c.seed = s;
    }
    if let Some(s) = o.samples {
        c.eval.samples = s;
    }
    if let Some(e) = o.epochs {
        c.train.epochs = e;
    }
    c.validate(base)?;
    Ok(c)
}

/// Everything a command needs besides its own arguments.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: Option<ExperimentConfig>,
    /// Directory that relative data paths resolve against.
    pub base: PathBuf,
    pub out: Option<PathBuf>,
    /// Model file for `eval`, `svd-analyze` and model bounds; defaults to
    /// `<out>/model.json`.
    pub model_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub sha256: String,
}

/// Provenance record written next to every command's artifacts. Only
/// `created_unix_seconds` varies between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub package_version: String,
    pub config_name: Option<String>,
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
    pub artifacts: Vec<Artifact>,
    pub created_unix_seconds: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Text for standard output.
    pub summary: String,
    pub artifacts: Vec<Artifact>,
}

struct Writer {
    out: Option<PathBuf>,
    artifacts: Vec<Artifact>,
}

impl Writer {
    fn put(&mut self, name: &str, contents: &str) -> Result<()> {
        if let Some(dir) = &self.out {
            write_file(&dir.join(name), contents)?;
            self.artifacts.push(Artifact {
                name: name.to_string(),
                sha256: sha256_hex(contents.as_bytes()),
            });
        }
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.put(name, &to_json_pretty(value)?)
    }
}

impl RunContext {
    fn config(&self) -> Result<&ExperimentConfig> {
        self.config
            .as_ref()
            .ok_or_else(|| Error::Usage("this command needs --config".into()))
    }

    fn out_dir(&self) -> Option<PathBuf> {
        self.out
            .clone()
            .or_else(|| self.config.as_ref().and_then(|c| c.output_dir.as_ref().map(|d| self.base.join(d))))
    }

    fn model_file(&self) -> Result<PathBuf> {
        if let Some(p) = &self.model_path {
            return Ok(p.clone());
        }
        let out = self
            .out_dir()
            .ok_or_else(|| Error::Usage("need --model or --out to locate the trained model".into()))?;
        Ok(out.join("model.json"))
    }

    fn load_model(&self) -> Result<Model> {
        let path = self.model_file()?;
        if !path.is_file() {
            return Err(Error::State(format!("no trained model at {}; run `train` first", path.display())));
        }
        Model::from_json(&std::fs::read_to_string(&path)?)
    }
}

/// Runs one command, writing artifacts and a manifest when an output
/// directory is known.
pub fn run(cmd: &Command, ctx: &RunContext) -> Result<RunOutcome> {
    let out = ctx.out_dir();
    let needs_out = !matches!(cmd, Command::ParamCount | Command::Bounds(BoundsQuery::Ratio { .. })
        | Command::Bounds(BoundsQuery::McAllester { .. })
        | Command::Bounds(BoundsQuery::KlUpper { .. })
        | Command::Bounds(BoundsQuery::GaussianComplexity(..)));
    if needs_out && out.is_none() {
        return Err(Error::Usage(format!("`{}` needs --out", cmd.name())));
    }
    let mut w = Writer { out: out.clone(), artifacts: Vec::new() };
    let summary = match cmd {
        Command::GenData => gen_data(ctx, &mut w)?,
        Command::Train => train_cmd(ctx, &mut w)?,
        Command::Eval => eval_cmd(ctx, &mut w)?,
        Command::Bounds(q) => bounds_cmd(q, ctx, &mut w)?,
        Command::SvdAnalyze => svd_cmd(ctx, &mut w)?,
        Command::AblateRank => ablate_cmd(ctx, &mut w)?,
        Command::ParamCount => param_count_cmd(ctx, &mut w)?,
    };
    if let Some(dir) = &out {
        let cfg = ctx.config.as_ref();
        let manifest = Manifest {
            command: cmd.name().to_string(),
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            config_name: cfg.map(|c| c.name.clone()),
            config_sha256: cfg.map(|c| c.canonical_json().map(|s| sha256_hex(s.as_bytes()))).transpose()?,
            seed: cfg.map(|c| c.seed),
            artifacts: w.artifacts.clone(),
            created_unix_seconds: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        write_file(&dir.join(format!("manifest.{}.json", cmd.name())), &to_json_pretty(&manifest)?)?;
    }
    Ok(RunOutcome { summary, artifacts: w.artifacts })
}

fn splits(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<DatasetSplits> {
    let s = cfg.task.generate(cfg.seed, &ctx.base)?;
    let feat = s.train.x.shape().last().copied().unwrap_or(0);
    if feat != cfg.model.dims[0] {
        return Err(Error::Config(format!(
            "model input width {} does not match {feat} data features",
            cfg.model.dims[0]
        )));
    }
    Ok(s)
}

fn build_model(cfg: &ExperimentConfig) -> Result<Model> {
    Model::build(&cfg.model, &mut RngFactory::new(cfg.seed).stream("init"))
}

fn train_model(cfg: &ExperimentConfig, data: &DatasetSplits) -> Result<(Model, crate::train::History)> {
    let mut model = build_model(cfg)?;
    let mut tc = cfg.train.clone();
    tc.seed = cfg.seed;
    let history = train(&mut model, &data.train, data.val.as_ref(), &tc)?;
    Ok((model, history))
}

fn gen_data(ctx: &RunContext, w: &mut Writer) -> Result<String> {
    let cfg = ctx.config()?;
    let s = cfg.task.generate(cfg.seed, &ctx.base)?;
    w.json("data.json", &s)?;
    let size = |d: &Option<Dataset>| d.as_ref().map(|d| d.len()).unwrap_or(0);
    let sizes = json!({
        "train": s.train.len(), "val": size(&s.val), "test": size(&s.test), "ood": size(&s.ood),
        "grid": s.grid.as_ref().map(|g| g.shape()[0]).unwrap_or(0),
    });
    w.json("data_summary.json", &sizes)?;
    Ok(format!("{sizes}\n"))
}

fn train_cmd(ctx: &RunContext, w: &mut Writer) -> Result<String> {
    let cfg = ctx.config()?;
    let data = splits(cfg, ctx)?;
    let (model, history) = train_model(cfg, &data)?;
    w.put("model.json", &model.to_json()?)?;
    w.put("history.csv", &history.to_csv())?;
    let last = history.epochs.last().cloned();
    let report = json!({
        "name": cfg.name,
        "epochs": history.epochs.len(),
        "final": last,
        "param_count": model.param_count(),
    });
    w.json("train_report.json", &report)?;
    Ok(match last {
        Some(r) => format!("trained {} epochs; final loss {:.6}\n", history.epochs.len(), r.total),
        None => "trained 0 epochs\n".to_string(),
    })
}

/// Flat metric report of `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub task: TaskKind,
    pub samples: usize,
    pub metrics: BTreeMap<String, f64>,
    /// Binning selected by the best-of-six ECE, for classification.
    pub ece_config: Option<String>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn column(t: &Tensor) -> Result<Vec<f64>> {
    let (_, k) = t.dims2()?;
    if k != 1 {
        return Err(Error::Config(format!("regression metrics need one output column, got {k}")));
    }
    Ok(t.data().to_vec())
}

fn loss_sigma(loss: LossKind) -> f64 {
    match loss {
        LossKind::GaussianNll { sigma } => sigma,
        _ => 0.0,
    }
}

/// Evaluates `model` on the test split (falling back to validation) and the
/// configured OOD inputs. Adds rows to `curves` keyed by file name.
pub fn evaluate(
    model: &Model,
    cfg: &ExperimentConfig,
    data: &DatasetSplits,
    factory: &RngFactory,
    curves: &mut BTreeMap<String, String>,
) -> Result<EvalReport> {
    let eval_set = data
        .test
        .as_ref()
        .or(data.val.as_ref())
        .ok_or_else(|| Error::Data("no test or validation split to evaluate".into()))?;
    let s = cfg.eval.samples;
    let kind = cfg.task.kind();
    let mut m = BTreeMap::new();
    let mut ece_config = None;
    let summary = mc_predict(model, &eval_set.x, s, &factory.child("eval"), kind)?;
    match kind {
        TaskKind::Classification => {
            let labels = eval_set.y.classes()?;
            let r = nll(&summary.mean, labels)?;
            m.insert("nll".into(), r.value);
            m.insert("nll_clamped".into(), r.clamped as f64);
            m.insert("brier".into(), brier(&summary.mean, labels)?);
            let (conf, correct) = confidence_and_correct(&summary.mean, labels)?;
            m.insert("accuracy".into(), correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64);
            let (ece, bins) = ece_best_config(&conf, &correct)?;
            m.insert("ece".into(), ece);
            ece_config = Some(format!("{:?}/{}", bins.binning, bins.n_bins).to_lowercase());
            let rows: Vec<Vec<f64>> = (0..bins.n_bins)
                .map(|b| vec![b as f64, bins.edges[b], bins.edges[b + 1], bins.confidence[b], bins.accuracy[b], bins.count[b] as f64])
                .collect();
            curves.insert(
                "reliability.csv".into(),
                csv_string(&["bin", "lower", "upper", "confidence", "accuracy", "count"], &rows),
            );
            let errors: Vec<f64> = correct.iter().map(|&c| if c { 0.0 } else { 1.0 }).collect();
            selective(&errors, &summary.entropy_of_mean, cfg, &mut m, curves)?;
            m.insert("mi_in_mean".into(), mean(&summary.mutual_information));
            if let (OodSource::Split, Some(ood)) = (&cfg.eval.ood_source, &data.ood) {
                let so = mc_predict(model, &ood.x, s, &factory.child("eval_ood"), kind)?;
                ood_detection(&summary, &so, &mut m)?;
            }
        }
        TaskKind::Regression => {
            let y = eval_set.y.values()?;
            let mu = column(&summary.mean)?;
            let var = column(summary.variance.as_ref().expect("regression variance"))?;
            let noise = loss_sigma(cfg.train.loss);
            let sigma: Vec<f64> = var.iter().map(|v| (v + noise * noise).sqrt()).collect();
            m.insert("rmse".into(), rmse(&mu, y)?);
            m.insert("mae".into(), mae(&mu, y)?);
            let gnll = (0..y.len())
                .map(|i| {
                    let z = (y[i] - mu[i]) / sigma[i];
                    0.5 * z * z + sigma[i].ln() + 0.5 * (2.0 * std::f64::consts::PI).ln()
                })
                .sum::<f64>()
                / y.len() as f64;
            m.insert("nll".into(), gnll);
            m.insert("crps".into(), gaussian_crps(&mu, &sigma, y)?);
            let iv = gaussian_intervals(&mu, &sigma, cfg.eval.interval_level)?;
            let (picp, mpiw) = picp_mpiw(&iv, y)?;
            m.insert("picp".into(), picp);
            m.insert("mpiw".into(), mpiw);
            m.insert("calibration_auc".into(), regression_calibration_auc(&mu, &sigma, y)?);
            let cov: Vec<Vec<f64>> = coverage_curve(&mu, &sigma, y)?.into_iter().map(|(q, o)| vec![q, o]).collect();
            curves.insert("coverage.csv".into(), csv_string(&["nominal", "observed"], &cov));
            m.insert("epistemic_std_mean".into(), mean(&var.iter().map(|v| v.sqrt()).collect::<Vec<_>>()));
            let errors: Vec<f64> = mu.iter().zip(y).map(|(a, b)| (a - b).abs()).collect();
            selective(&errors, &sigma, cfg, &mut m, curves)?;
            match (&cfg.eval.ood_source, &data.grid, &data.ood) {
                (OodSource::Grid { in_domain, ood }, Some(grid), _) => {
                    grid_iqr(model, grid, s, factory, *in_domain, *ood, &mut m, curves)?;
                }
                (OodSource::Split, _, Some(ood)) => {
                    let so = mc_predict(model, &ood.x, s, &factory.child("eval_ood"), kind)?;
                    let v_in = mean(&var);
                    let v_ood = mean(&column(so.variance.as_ref().expect("regression variance"))?);
                    m.insert("epistemic_var_in".into(), v_in);
                    m.insert("epistemic_var_ood".into(), v_ood);
                    m.insert("epistemic_var_ratio".into(), v_ood / v_in);
                }
                _ => {}
            }
        }
    }
    if !cfg.eval.metrics.is_empty() {
        m.retain(|k, _| cfg.eval.metrics.iter().any(|w| w == k));
    }
    Ok(EvalReport { name: cfg.name.clone(), task: kind, samples: s, metrics: m, ece_config })
}

fn selective(
    errors: &[f64],
    uncertainty: &[f64],
    cfg: &ExperimentConfig,
    m: &mut BTreeMap<String, f64>,
    curves: &mut BTreeMap<String, String>,
) -> Result<()> {
    let curve = selective_prediction_curve(errors, uncertainty, &cfg.eval.retention)?;
    let mut rows = Vec::new();
    for p in &curve {
        m.insert(format!("selective_error@{}", p.retention), p.mean_error);
        rows.push(vec![p.retention, p.kept as f64, p.mean_error]);
    }
    curves.insert("selective.csv".into(), csv_string(&["retention", "kept", "mean_error"], &rows));
    Ok(())
}

fn ood_detection(ind: &PredictiveSummary, ood: &PredictiveSummary, m: &mut BTreeMap<String, f64>) -> Result<()> {
    let labels: Vec<bool> = std::iter::repeat_n(false, ind.mutual_information.len())
        .chain(std::iter::repeat_n(true, ood.mutual_information.len()))
        .collect();
    let mi: Vec<f64> = ind.mutual_information.iter().chain(&ood.mutual_information).copied().collect();
    let ent: Vec<f64> = ind.entropy_of_mean.iter().chain(&ood.entropy_of_mean).copied().collect();
    m.insert("auroc_ood_mi".into(), auroc(&mi, &labels)?);
    m.insert("aupr_ood_mi".into(), aupr(&mi, &labels)?);
    m.insert("auroc_ood_entropy".into(), auroc(&ent, &labels)?);
    let mi_ood = mean(&ood.mutual_information);
    m.insert("mi_ood_mean".into(), mi_ood);
    m.insert("mi_ratio".into(), mi_ood / mean(&ind.mutual_information));
    Ok(())
}

/// Median over grid points of the 5-95 percentile width of the sampled
/// outputs, inside each domain.
#[allow(clippy::too_many_arguments)]
fn grid_iqr(
    model: &Model,
    grid: &Tensor,
    s: usize,
    factory: &RngFactory,
    in_domain: [f64; 2],
    ood: [f64; 2],
    m: &mut BTreeMap<String, f64>,
    curves: &mut BTreeMap<String, String>,
) -> Result<()> {
    let outs = crate::predict::sample_outputs(model, grid, s, &factory.child("eval_grid"))?;
    let n = grid.shape()[0];
    let (mut w_in, mut w_ood, mut rows) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let x = grid.data()[i];
        let v: Vec<f64> = outs.iter().map(|o| o.data()[i]).collect();
        let (lo, hi) = (quantile(&v, 0.05), quantile(&v, 0.95));
        let width = hi - lo;
        if (in_domain[0]..=in_domain[1]).contains(&x) {
            w_in.push(width);
        }
        if (ood[0]..=ood[1]).contains(&x) {
            w_ood.push(width);
        }
        rows.push(vec![x, mean(&v), lo, hi, width]);
    }
    if w_in.is_empty() || w_ood.is_empty() {
        return Err(Error::Config("IQR domains contain no grid points".into()));
    }
    let (a, b) = (quantile(&w_in, 0.5), quantile(&w_ood, 0.5));
    m.insert("iqr_in_domain".into(), a);
    m.insert("iqr_ood".into(), b);
    m.insert("iqr_ratio".into(), b / a);
    curves.insert("grid_iqr.csv".into(), csv_string(&["x", "mean", "q05", "q95", "width"], &rows));
    Ok(())
}

fn eval_cmd(ctx: &RunContext, w: &mut Writer) -> Result<String> {
    let cfg = ctx.config()?;
    let model = ctx.load_model()?;
    let data = splits(cfg, ctx)?;
    let mut curves = BTreeMap::new();
    let report = evaluate(&model, cfg, &data, &RngFactory::new(cfg.seed), &mut curves)?;
    w.json("eval_report.json", &report)?;
    for (name, body) in &curves {
        w.put(name, body)?;
    }
    Ok(report.metrics.iter().map(|(k, v)| format!("{k} {v:.6}\n")).collect())
}

fn bounds_cmd(q: &BoundsQuery, ctx: &RunContext, w: &mut Writer) -> Result<String> {
    let report = match q {
        BoundsQuery::Ratio { m, n, r } => {
            let v = complexity_ratio(*m, *n, *r)?;
            let rep = BoundReport {
                name: "complexity_ratio".into(),
                inputs: [("m", json!(m)), ("n", json!(n)), ("r", json!(r))]
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
                    .collect(),
                terms: BTreeMap::new(),
                value: v,
                vacuous: false,
            };
            w.json("bounds_report.json", &rep)?;
            return Ok(format!("{v:.6}\n"));
        }
        BoundsQuery::McAllester { emp_risk, kl, n, delta } => mcallester_bound(*emp_risk, *kl, *n, *delta)?,
        BoundsQuery::KlUpper { c_max, d } => {
            let v = kl_upper_factorized(*c_max, *d)?;
            BoundReport {
                name: "kl_upper_factorized".into(),
                inputs: [("C_max", json!(c_max)), ("D", json!(d))]
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
                    .collect(),
                terms: BTreeMap::new(),
                value: v,
                vacuous: false,
            }
        }
        BoundsQuery::GaussianComplexity(inp, gen) => gaussian_complexity_bound(inp, *gen)?,
        BoundsQuery::Model => return model_bounds(ctx, w),
    };
    w.json("bounds_report.json", &report)?;
    let mut s = format!("{:.6}\n", report.value);
    for (k, v) in &report.terms {
        s.push_str(&format!("{k} {v:.6}\n"));
    }
    if report.vacuous {
        s.push_str("vacuous\n");
    }
    Ok(s)
}

fn layer_rank(l: &Linear) -> usize {
    match l.family() {
        Family::LowRank { rank } => rank,
        _ => l.in_dim.min(l.out_dim),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerBound {
    index: usize,
    family: Family,
    in_dim: usize,
    out_dim: usize,
    rank: usize,
    complexity_ratio: Option<f64>,
    mean_spectral_norm: f64,
    mean_frobenius_norm: f64,
}

fn model_bounds(ctx: &RunContext, w: &mut Writer) -> Result<String> {
    let cfg = ctx.config()?;
    let model = ctx.load_model()?;
    let data = splits(cfg, ctx)?;
    let factory = RngFactory::new(cfg.seed).child("bounds");
    let mut layers = Vec::new();
    for (k, l) in model.linears().into_iter().enumerate() {
        let wbar = l.mean_weight()?;
        layers.push(LayerBound {
            index: k,
            family: l.family(),
            in_dim: l.in_dim,
            out_dim: l.out_dim,
            rank: layer_rank(l),
            complexity_ratio: match l.family() {
                Family::LowRank { rank } => Some(complexity_ratio(l.in_dim, l.out_dim, rank)?),
                _ => None,
            },
            mean_spectral_norm: spectral_norm(&wbar)?,
            mean_frobenius_norm: wbar.frobenius_norm(),
        });
    }
    let d: usize = model.linears().iter().flat_map(|l| l.posteriors()).map(|q| q.numel()).sum();
    let mut reports = Vec::new();
    let mut c_max = None;
    if d > 0 {
        let c = max_parameter_kl(&model, &cfg.model.prior, C_MAX_SAMPLES, &factory)?;
        c_max = Some(c);
        let kl = kl_upper_factorized(c, d as u64)?;
        if cfg.task.kind() == TaskKind::Classification {
            let s = mc_predict(&model, &data.train.x, cfg.eval.samples, &factory.child("train_risk"), TaskKind::Classification)?;
            let (_, correct) = confidence_and_correct(&s.mean, data.train.y.classes()?)?;
            let emp = correct.iter().filter(|&&c| !c).count() as f64 / correct.len() as f64;
            reports.push(mcallester_bound(emp, kl, data.train.len() as u64, BOUND_DELTA)?);
        }
        reports.push(BoundReport {
            name: "kl_upper_factorized".into(),
            inputs: [("C_max", json!(c)), ("D", json!(d))].into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            terms: BTreeMap::new(),
            value: kl,
            vacuous: false,
        });
    }
    if cfg.model.arch == Arch::Mlp {
        let lin = model.linears();
        let inp = GaussianComplexityInputs {
            x_frob: data.train.x.frobenius_norm(),
            m: data.train.len(),
            w1_frob: layers[0].mean_frobenius_norm,
            h: lin.iter().map(|l| l.out_dim).collect(),
            c: layers.iter().map(|l| l.mean_spectral_norm).collect(),
            r: layers.iter().skip(1).map(|l| l.rank).collect(),
            c0: 1.0,
        };
        reports.push(gaussian_complexity_bound(&inp, None)?);
    }
    let out = json!({ "name": cfg.name, "layers": layers, "c_max": c_max, "D": d, "bounds": reports });
    w.json("bounds_report.json", &out)?;
    let mut s = String::new();
    for r in &reports {
        s.push_str(&format!("{} {:.6}{}\n", r.name, r.value, if r.vacuous { " (vacuous)" } else { "" }));
    }
    for l in &layers {
        if let Some(v) = l.complexity_ratio {
            s.push_str(&format!("layer{} complexity_ratio {v:.6}\n", l.index));
        }
    }
    Ok(s)
}

fn svd_cmd(ctx: &RunContext, w: &mut Writer) -> Result<String> {
    let model = ctx.load_model()?;
    let mut layers = Vec::new();
    let mut s = String::new();
    for (k, l) in model.linears().into_iter().enumerate() {
        let rep = spectral_report(&l.mean_weight()?)?;
        w.put(
            &format!("svd_layer{k}.csv"),
            &csv_string(&["rank", "singular_value", "tail_energy", "retention"], &rep.rows()),
        )?;
        s.push_str(&format!(
            "layer{k} {}x{} numerical_rank {} sigma_1 {:.6}\n",
            l.in_dim,
            l.out_dim,
            rep.numerical_rank,
            rep.singular_values.first().copied().unwrap_or(0.0)
        ));
        layers.push(json!({ "index": k, "in_dim": l.in_dim, "out_dim": l.out_dim, "family": l.family(), "spectrum": rep }));
    }
    w.json("svd_report.json", &Value::Array(layers))?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub rank: usize,
    pub params: usize,
    pub complexity_ratio: f64,
    pub metrics: BTreeMap<String, f64>,
    /// Not dominated by another row on the task's trade-off axes.
    pub pareto: bool,
}

/// `(key, higher_is_better)` axes of the Pareto front.
fn pareto_axes(kind: TaskKind) -> [(&'static str, bool); 2] {
    match kind {
        TaskKind::Classification => [("nll", false), ("auroc_ood_mi", true)],
        TaskKind::Regression => [("nll", false), ("params", false)],
    }
}

fn mark_pareto(rows: &mut [AblationRow], kind: TaskKind) {
    let axes = pareto_axes(kind);
    let score = |r: &AblationRow, (k, hi): (&str, bool)| -> Option<f64> {
        let v = if k == "params" { Some(r.params as f64) } else { r.metrics.get(k).copied() };
        v.map(|v| if hi { -v } else { v })
    };
    let pts: Vec<Option<[f64; 2]>> = rows
        .iter()
        .map(|r| Some([score(r, axes[0])?, score(r, axes[1])?]))
        .collect();
    for i in 0..rows.len() {
        rows[i].pareto = match pts[i] {
            None => false,
            Some(p) => !pts.iter().enumerate().any(|(j, q)| {
                j != i && q.is_some_and(|q| q[0] <= p[0] && q[1] <= p[1] && (q[0] < p[0] || q[1] < p[1]))
            }),
        };
    }
}

fn ablate_cmd(ctx: &RunContext, w: &mut Writer) -> Result<String> {
    let cfg = ctx.config()?;
    let ab = cfg
        .ablation
        .as_ref()
        .ok_or_else(|| Error::Config("ablate-rank needs an `ablation` section".into()))?;
    let data = splits(cfg, ctx)?;
    let mut rows: Vec<AblationRow> = ab
        .ranks
        .par_iter()
        .map(|&r| {
            let mut c = cfg.with_rank(r)?;
            if let Some(e) = ab.epochs {
                c.train.epochs = e;
            }
            if let Some(s) = ab.samples {
                c.eval.samples = s;
            }
            let (model, _) = train_model(&c, &data)?;
            let mut scratch = BTreeMap::new();
            let report = evaluate(&model, &c, &data, &RngFactory::new(c.seed), &mut scratch)?;
            let ratio = c
                .model
                .layers
                .iter()
                .zip(c.model.layer_shapes())
                .find_map(|(f, (i, o))| match f {
                    Family::LowRank { rank } => Some(complexity_ratio(i, o, *rank)),
                    _ => None,
                })
                .expect("with_rank guarantees a low-rank layer")?;
            Ok(AblationRow {
                rank: r,
                params: model.param_count().total,
                complexity_ratio: ratio,
                metrics: report.metrics,
                pareto: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    mark_pareto(&mut rows, cfg.task.kind());
    let keys: Vec<String> = rows[0].metrics.keys().cloned().collect();
    let mut header = vec!["rank", "params", "complexity_ratio", "pareto"];
    header.extend(keys.iter().map(|k| k.as_str()));
    let table: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.rank as f64, r.params as f64, r.complexity_ratio, if r.pareto { 1.0 } else { 0.0 }];
            v.extend(keys.iter().map(|k| r.metrics.get(k).copied().unwrap_or(f64::NAN)));
            v
        })
        .collect();
    w.put("ablation.csv", &csv_string(&header, &table))?;
    w.json("ablation.json", &rows)?;
    Ok(rows
        .iter()
        .map(|r| format!("rank {} params {}{}\n", r.rank, r.params, if r.pareto { " pareto" } else { "" }))
        .collect())
}

fn param_count_cmd(ctx: &RunContext, w: &mut Writer) -> Result<String> {
    let cfg = ctx.config()?;
    let count = build_model(cfg)?.param_count();
    w.json("param_count.json", &count)?;
    Ok(format!("{}\n", count.total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &[&str]) -> Vec<String> {
        s.iter().map(|a| a.to_string()).collect()
    }

    #[test]
    fn parses_bound_queries() {
        assert_eq!(
            parse_bounds_query("ratio", &args(&["m=44", "n=128", "r=15"])).unwrap(),
            BoundsQuery::Ratio { m: 44, n: 128, r: 15 }
        );
        let q = parse_bounds_query(
            "gaussian-complexity",
            &args(&["x_frob=10", "m=100", "w1_frob=2", "h=4,3", "C=1,1", "r=2", "C0=1"]),
        )
        .unwrap();
        match q {
            BoundsQuery::GaussianComplexity(inp, None) => assert_eq!(inp.h, vec![4, 3]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_bounds_query("ratio", &args(&["m=44", "n=128"])), Err(Error::Usage(_))));
        assert!(matches!(parse_bounds_query("ratio", &args(&["m=44", "n=128", "r=1", "z=2"])), Err(Error::Usage(_))));
        assert!(matches!(parse_bounds_query("nope", &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn pareto_marks_non_dominated_rows() {
        let row = |rank, params, nll| AblationRow {
            rank,
            params,
            complexity_ratio: 0.5,
            metrics: [("nll".to_string(), nll)].into_iter().collect(),
            pareto: false,
        };
        let mut rows = vec![row(1, 10, 0.9), row(2, 20, 0.5), row(3, 30, 0.6)];
        mark_pareto(&mut rows, TaskKind::Regression);
        assert_eq!(rows.iter().map(|r| r.pareto).collect::<Vec<_>>(), vec![true, true, false]);
    }
}
