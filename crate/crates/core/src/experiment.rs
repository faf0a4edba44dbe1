//! Declarative experiments: domains, strategy, training settings, attack
//! grid and seeds, plus result persistence (CSV, JSON, checkpoints).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{attack_white_box, AttackSpec};
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::data::{load_idx, subsample, synth_domain, DomainStyle, LabeledDataset};
use crate::error::{Error, Result};
use crate::metrics::{compile_report, gradient_norm_histogram, AttackReport, GradNormHistogram, DEFAULT_HIST_BINS};
use crate::model::Model;
use crate::train::{common_init_from, derive_seed, finetune_from, run_scratch, Strategy, TrainConfig, TrainedModel};

pub const RESULTS_HEADER: &str = "# tlab results v1";
pub const SWEEP_HEADER: &str = "# tlab sweep v1";
pub const HIST_HEADER: &str = "# tlab gradnorm_hist v1";

const STREAM_DATA_A: u64 = 11;
const STREAM_DATA_B: u64 = 12;
const STREAM_TEST_B: u64 = 13;
const STREAM_DATA_C: u64 = 14;
const STREAM_TRAIN_A: u64 = 21;
const STREAM_TRAIN_B: u64 = 22;
const STREAM_TRAIN_C: u64 = 23;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Held-out files; required for Domain B, which is evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

/// A domain is a synthetic preset name, a full synthetic style, or IDX files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DomainSpec {
    Preset(String),
    Idx { idx: IdxPaths },
    Style(DomainStyle),
}

impl DomainSpec {
    fn style(&self, field: &str) -> Result<Option<DomainStyle>> {
        match self {
            DomainSpec::Preset(name) => DomainStyle::preset(name).map(Some).ok_or_else(|| {
                Error::Config(format!(
                    "{field}: unknown style {name:?} (expected one of {})",
                    DomainStyle::preset_names().join(", ")
                ))
            }),
            DomainSpec::Style(style) => Ok(Some(style.clone())),
            DomainSpec::Idx { .. } => Ok(None),
        }
    }
}

/// Per-domain replacements for fields of the shared [`TrainConfig`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_fraction: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            momentum: self.momentum.unwrap_or(base.momentum),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            patience: self.patience.unwrap_or(base.patience),
            max_epochs: self.max_epochs.unwrap_or(base.max_epochs),
            val_fraction: self.val_fraction.unwrap_or(base.val_fraction),
            seed: base.seed,
        }
    }
}

fn default_n_a() -> usize {
    2000
}
fn default_n_b() -> usize {
    200
}
fn default_n_test() -> usize {
    500
}
fn default_num_classes() -> usize {
    10
}
fn default_eps_grid() -> Vec<f32> {
    vec![0.0, 8.0 / 255.0, 16.0 / 255.0, 32.0 / 255.0, 0.125]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}
fn default_hist_bins() -> usize {
    DEFAULT_HIST_BINS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_a: Option<DomainSpec>,
    pub domain_b: DomainSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_c: Option<DomainSpec>,
    #[serde(default = "default_n_a")]
    pub n_a: usize,
    #[serde(default = "default_n_b")]
    pub n_b: usize,
    /// Defaults to ten times `n_a`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_c: Option<usize>,
    /// Size of Domain B's test set (capped by the IDX test file).
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    /// Class count of synthetic domains.
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    pub strategy: Strategy,
    /// Shared training settings. Its `seed` is replaced per replication.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub train_a: TrainOverrides,
    #[serde(default)]
    pub train_b: TrainOverrides,
    #[serde(default)]
    pub train_c: TrainOverrides,
    #[serde(default = "default_eps_grid")]
    pub eps_grid: Vec<f32>,
    /// Each seed is an independent replication: data, init, split and attack.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_hist_bins")]
    pub hist_bins: usize,
    /// Fill the `wall_clock_s` column. Off by default so reruns are byte-identical.
    #[serde(default)]
    pub record_wall_clock: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        // a report.json embeds the resolved config under "config"
        let value = match value {
            serde_json::Value::Object(mut map) if map.contains_key("config") && !map.contains_key("domain_b") => {
                map.remove("config").expect("checked")
            }
            other => other,
        };
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy == Strategy::Ft && self.domain_a.is_none() {
            return Err(Error::Config("domain_a: required when strategy is \"ft\"".into()));
        }
        if self.strategy == Strategy::CommonInit {
            if self.domain_c.is_none() {
                return Err(Error::Config(
                    "domain_c: required when strategy is \"common_init\"".into(),
                ));
            }
            if self.domain_a.is_none() {
                return Err(Error::Config(
                    "domain_a: required when strategy is \"common_init\"".into(),
                ));
            }
        }
        if let Some(d) = &self.domain_a {
            d.style("domain_a")?;
        }
        self.domain_b.style("domain_b")?;
        if let DomainSpec::Idx { idx } = &self.domain_b {
            if idx.test_images.is_none() || idx.test_labels.is_none() {
                return Err(Error::Config(
                    "domain_b.idx: test_images and test_labels are required for the evaluated domain".into(),
                ));
            }
        }
        if let Some(d) = &self.domain_c {
            d.style("domain_c")?;
        }
        if self.eps_grid.is_empty() {
            return Err(Error::Config("eps_grid: must not be empty".into()));
        }
        if let Some(e) = self.eps_grid.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
            return Err(Error::Config(format!(
                "eps_grid: values must be finite and >= 0, got {e}"
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: must not be empty".into()));
        }
        if !(2..=10).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes: synthetic domains support 2..=10 classes, got {}",
                self.num_classes
            )));
        }
        for (field, n) in [
            ("n_a", self.n_a),
            ("n_b", self.n_b),
            ("n_test", self.n_test),
            ("n_c", self.n_c()),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{field}: must be positive")));
            }
        }
        if self.hist_bins < 2 {
            return Err(Error::Config(format!(
                "hist_bins: must be at least 2, got {}",
                self.hist_bins
            )));
        }
        for (field, o) in [
            ("train_a", &self.train_a),
            ("train_b", &self.train_b),
            ("train_c", &self.train_c),
        ] {
            o.apply(&self.train)
                .validate()
                .map_err(|e| Error::Config(format!("{field}: {e}")))?;
        }
        self.train
            .validate()
            .map_err(|e| Error::Config(format!("train: {e}")))?;
        Ok(())
    }

    pub fn n_c(&self) -> usize {
        self.n_c.unwrap_or(10 * self.n_a)
    }

    fn train_cfg(&self, overrides: &TrainOverrides, seed: u64, stream: u64) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(seed, stream),
            ..overrides.apply(&self.train)
        }
    }
}

/// Domain data for one replication.
#[derive(Clone, Debug)]
pub struct Domains {
    pub a: Option<LabeledDataset>,
    pub b: LabeledDataset,
    pub b_test: LabeledDataset,
    pub c: Option<LabeledDataset>,
}

fn load_domain(spec: &DomainSpec, field: &str, n: usize, k: usize, seed: u64) -> Result<LabeledDataset> {
    match spec.style(field)? {
        Some(style) => synth_domain(&style, n, k, seed),
        None => {
            let DomainSpec::Idx { idx } = spec else {
                unreachable!("non-synthetic domain")
            };
            let pool = load_idx(&idx.images, &idx.labels)?;
            subsample(&pool, n, seed)
        }
    }
}

fn load_test(spec: &DomainSpec, n: usize, k: usize, seed: u64) -> Result<LabeledDataset> {
    match spec.style("domain_b")? {
        Some(style) => synth_domain(&style, n, k, seed),
        None => {
            let DomainSpec::Idx { idx } = spec else {
                unreachable!("non-synthetic domain")
            };
            let (Some(images), Some(labels)) = (&idx.test_images, &idx.test_labels) else {
                return Err(Error::Config("domain_b.idx: test files missing".into()));
            };
            let pool = load_idx(images, labels)?;
            if n >= pool.len() {
                Ok(pool)
            } else {
                subsample(&pool, n, seed)
            }
        }
    }
}

/// Builds every domain the strategy needs for replication `seed`.
pub fn prepare_domains(cfg: &ExperimentConfig, seed: u64) -> Result<Domains> {
    let k = cfg.num_classes;
    let a = cfg
        .domain_a
        .as_ref()
        .map(|d| load_domain(d, "domain_a", cfg.n_a, k, derive_seed(seed, STREAM_DATA_A)))
        .transpose()?;
    let b = load_domain(&cfg.domain_b, "domain_b", cfg.n_b, k, derive_seed(seed, STREAM_DATA_B))?;
    let b_test = load_test(&cfg.domain_b, cfg.n_test, k, derive_seed(seed, STREAM_TEST_B))?;
    let c = match (cfg.strategy, &cfg.domain_c) {
        (Strategy::CommonInit, Some(d)) => Some(load_domain(
            d,
            "domain_c",
            cfg.n_c(),
            k,
            derive_seed(seed, STREAM_DATA_C),
        )?),
        _ => None,
    };
    Ok(Domains { a, b, b_test, c })
}

/// Everything one replication produced.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub model_a: Option<TrainedModel>,
    pub model_b: TrainedModel,
    pub model_c: Option<TrainedModel>,
    pub reports: Vec<AttackReport>,
    pub histogram: GradNormHistogram,
    pub wall_clock_s: f64,
}

impl SeedRun {
    /// The black-box source: Model A, when its label space matches B's.
    pub fn source(&self) -> Option<&Model> {
        self.model_a
            .as_ref()
            .map(|a| &a.model)
            .filter(|a| a.num_classes() == self.model_b.model.num_classes())
    }
}

/// Trains and attacks one replication. Model A (when Domain A is given) is
/// the black-box source for every strategy.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let start = Instant::now();
    let domains = prepare_domains(cfg, seed)?;
    let cfg_a = cfg.train_cfg(&cfg.train_a, seed, STREAM_TRAIN_A);
    let cfg_b = cfg.train_cfg(&cfg.train_b, seed, STREAM_TRAIN_B);
    let cfg_c = cfg.train_cfg(&cfg.train_c, seed, STREAM_TRAIN_C);

    let (model_a, model_b, model_c) = match cfg.strategy {
        Strategy::Scratch => {
            let a = domains.a.as_ref().map(|a| run_scratch(a, &cfg_a)).transpose()?;
            (a, run_scratch(&domains.b, &cfg_b)?, None)
        }
        Strategy::Ft => {
            let a_data = domains.a.as_ref().expect("validated: ft has domain_a");
            let mut a = run_scratch(a_data, &cfg_a)?;
            a.strategy = Strategy::Ft;
            let b = finetune_from(&a.model, &domains.b, &cfg_b)?;
            (Some(a), b, None)
        }
        Strategy::CommonInit => {
            let c_data = domains.c.as_ref().expect("validated: common_init has domain_c");
            let a_data = domains.a.as_ref().expect("validated: common_init has domain_a");
            let c = run_scratch(c_data, &cfg_c)?;
            let (a, b) = common_init_from(&c.model, a_data, &domains.b, &cfg_a, &cfg_b)?;
            (Some(a), b, Some(c))
        }
    };
    let source = model_a
        .as_ref()
        .map(|a| &a.model)
        .filter(|a| a.num_classes() == model_b.model.num_classes());
    let reports = compile_report(&model_b.model, source, &domains.b_test, &cfg.eps_grid, cfg.strategy)?;
    let eps_max = cfg.eps_grid.iter().copied().fold(0.0, f32::max);
    let adv = attack_white_box(&model_b.model, &domains.b_test, &AttackSpec::white_box(eps_max))?;
    let histogram = gradient_norm_histogram(&model_b.model, &domains.b_test, Some(&adv), cfg.hist_bins)?;
    Ok(SeedRun {
        seed,
        model_a,
        model_b,
        model_c,
        reports,
        histogram,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// One row of results.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub seed: u64,
    pub strategy: String,
    pub epsilon: f32,
    pub clean_accuracy: f64,
    pub a_w: f64,
    pub a_b: Option<f64>,
    /// A number, "undefined", or empty without a black-box result.
    pub gamma: Option<String>,
    pub subset_size: usize,
    pub wall_clock_s: Option<f64>,
}

impl ResultRow {
    fn from_report(seed: u64, r: &AttackReport, wall_clock_s: Option<f64>) -> Self {
        let gamma = match (r.a_b, r.gamma) {
            (None, _) => None,
            (Some(_), Some(g)) => Some(g.to_string()),
            (Some(_), None) => Some("undefined".to_string()),
        };
        Self {
            seed,
            strategy: r.strategy.tag().to_string(),
            epsilon: r.epsilon,
            clean_accuracy: r.clean_accuracy,
            a_w: r.a_w,
            a_b: r.a_b,
            gamma,
            subset_size: r.subset_size,
            wall_clock_s,
        }
    }
}

fn write_csv<T: Serialize>(path: &Path, header: &str, rows: &[T]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "{header}")?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by this module, skipping the version comment line.
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistRow {
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub cumulative: f64,
    pub success: usize,
    pub failure: usize,
}

pub fn hist_rows(h: &GradNormHistogram) -> Vec<HistRow> {
    (0..h.bins())
        .map(|b| HistRow {
            bin: b,
            lower: h.edges[b],
            upper: h.edges[b + 1],
            count: h.counts[b],
            cumulative: h.cumulative[b],
            success: h.success_counts[b],
            failure: h.failure_counts[b],
        })
        .collect()
}

pub fn write_histogram(path: impl AsRef<Path>, h: &GradNormHistogram) -> Result<()> {
    write_csv(path.as_ref(), HIST_HEADER, &hist_rows(h))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub best_epoch_a: Option<usize>,
    pub best_epoch_b: Option<usize>,
    pub best_epoch_c: Option<usize>,
    pub model_b_id: String,
    pub median_grad_norm: f64,
    pub reports: Vec<AttackReport>,
}

/// Mean over seeds at one ε.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub epsilon: f32,
    pub clean_accuracy: f64,
    pub a_w: f64,
    pub a_b: Option<f64>,
    /// Mean over seeds with a defined γ.
    pub gamma: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedSummary>,
    pub mean: Vec<MeanRow>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-ε means across replications; `runs` must share one ε grid.
pub fn mean_rows(runs: &[Vec<AttackReport>]) -> Vec<MeanRow> {
    let Some(first) = runs.first() else { return Vec::new() };
    (0..first.len())
        .map(|i| {
            let at = || runs.iter().map(move |r| &r[i]);
            MeanRow {
                epsilon: first[i].epsilon,
                clean_accuracy: mean(at().map(|r| r.clean_accuracy)).unwrap_or(0.0),
                a_w: mean(at().map(|r| r.a_w)).unwrap_or(0.0),
                a_b: if at().all(|r| r.a_b.is_some()) {
                    mean(at().filter_map(|r| r.a_b))
                } else {
                    None
                },
                gamma: mean(at().filter_map(|r| r.gamma)),
            }
        })
        .collect()
}

/// Runs every seed (in parallel over `threads` workers) and writes
/// results.csv, report.json, checkpoints and histograms under the output
/// directory. Outputs are ordered by seed regardless of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;

    let threads = threads.clamp(1, cfg.seeds.len());
    let mut results: Vec<Option<Result<SeedRun>>> = (0..cfg.seeds.len()).map(|_| None).collect();
    if threads == 1 {
        for (slot, &seed) in results.iter_mut().zip(&cfg.seeds) {
            *slot = Some(run_seed(cfg, seed));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    scope.spawn(move || {
                        cfg.seeds
                            .iter()
                            .enumerate()
                            .skip(w)
                            .step_by(threads)
                            .map(|(i, &seed)| (i, run_seed(cfg, seed)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("worker panicked") {
                    results[i] = Some(r);
                }
            }
        });
    }

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for result in results {
        let run = result.expect("every seed scheduled")?;
        let dir = out.join(format!("seed_{}", run.seed));
        fs::create_dir_all(&dir)?;
        let meta = |t: &TrainedModel| CheckpointMeta {
            strategy: Some(t.strategy.tag().to_string()),
            seed: Some(run.seed),
            epochs: Some(t.history.len()),
        };
        save_checkpoint(&run.model_b.model, &meta(&run.model_b), dir.join("model_b.tlab"))?;
        if let Some(a) = &run.model_a {
            save_checkpoint(&a.model, &meta(a), dir.join("model_a.tlab"))?;
        }
        if let Some(c) = &run.model_c {
            save_checkpoint(&c.model, &meta(c), dir.join("model_c.tlab"))?;
        }
        write_histogram(dir.join("gradnorm_hist.csv"), &run.histogram)?;
        let wall = cfg.record_wall_clock.then_some(run.wall_clock_s);
        rows.extend(run.reports.iter().map(|r| ResultRow::from_report(run.seed, r, wall)));
        summaries.push(SeedSummary {
            seed: run.seed,
            best_epoch_a: run.model_a.as_ref().and_then(|m| m.best_epoch),
            best_epoch_b: run.model_b.best_epoch,
            best_epoch_c: run.model_c.as_ref().and_then(|m| m.best_epoch),
            model_b_id: run.model_b.model.id(),
            median_grad_norm: run.histogram.median(),
            reports: run.reports,
        });
    }
    write_csv(&out.join("results.csv"), RESULTS_HEADER, &rows)?;
    let report = ExperimentReport {
        config: cfg.clone(),
        mean: mean_rows(&summaries.iter().map(|s| s.reports.clone()).collect::<Vec<_>>()),
        seeds: summaries,
    };
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NB,
    NA,
    Epsilon,
    /// Hyperparameter grid axes; they set the value for every trained model.
    LearningRate,
    WeightDecay,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "n_b" | "n_B" => Ok(SweepAxis::NB),
            "n_a" | "n_A" => Ok(SweepAxis::NA),
            "epsilon" | "eps" => Ok(SweepAxis::Epsilon),
            "learning_rate" | "lr" => Ok(SweepAxis::LearningRate),
            "weight_decay" | "wd" => Ok(SweepAxis::WeightDecay),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (expected n_b, n_a, epsilon, learning_rate or weight_decay)"
            ))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::NB => "n_b",
            SweepAxis::NA => "n_a",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::LearningRate => "learning_rate",
            SweepAxis::WeightDecay => "weight_decay",
        }
    }
}

/// One row of sweep.csv: seed means at the largest ε of the cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub strategy: String,
    pub epsilon: f32,
    pub clean_accuracy: f64,
    pub a_w: f64,
    pub a_b: Option<f64>,
    pub gamma: Option<f64>,
    pub seeds: usize,
}

/// The config for one sweep cell, writing into its own subdirectory.
pub fn sweep_cell(base: &ExperimentConfig, axis: SweepAxis, value: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{} value {value:?}: {e}", axis.name()));
    match axis {
        SweepAxis::NB => cfg.n_b = value.parse().map_err(|e| bad(&e))?,
        SweepAxis::NA => cfg.n_a = value.parse().map_err(|e| bad(&e))?,
        SweepAxis::Epsilon => cfg.eps_grid = vec![value.parse().map_err(|e| bad(&e))?],
        SweepAxis::LearningRate => {
            cfg.train.learning_rate = value.parse().map_err(|e| bad(&e))?;
            for o in [&mut cfg.train_a, &mut cfg.train_b, &mut cfg.train_c] {
                o.learning_rate = None;
            }
        }
        SweepAxis::WeightDecay => {
            cfg.train.weight_decay = value.parse().map_err(|e| bad(&e))?;
            for o in [&mut cfg.train_a, &mut cfg.train_b, &mut cfg.train_c] {
                o.weight_decay = None;
            }
        }
    }
    cfg.output_dir = base.output_dir.join(format!("{}_{value}", axis.name()));
    cfg.validate().map_err(|e| bad(&e))?;
    Ok(cfg)
}

/// Runs one experiment per axis value. sweep.csv is rewritten after every
/// cell, so a failing cell leaves the finished rows in place.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String], threads: usize) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let cells = values
        .iter()
        .map(|v| sweep_cell(base, axis, v))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&base.output_dir)?;
    let path = base.output_dir.join("sweep.csv");
    let mut rows = Vec::new();
    write_csv(&path, SWEEP_HEADER, &rows)?;
    for (cfg, value) in cells.iter().zip(values) {
        let report = run_experiment(cfg, threads)?;
        let last = report.mean.last().expect("non-empty grid");
        rows.push(SweepRow {
            axis: axis.name().to_string(),
            value: value.clone(),
            strategy: cfg.strategy.tag().to_string(),
            epsilon: last.epsilon,
            clean_accuracy: last.clean_accuracy,
            a_w: last.a_w,
            a_b: last.a_b,
            gamma: last.gamma,
            seeds: report.seeds.len(),
        });
        write_csv(&path, SWEEP_HEADER, &rows)?;
    }
    Ok(rows)
}

/// Resolves `synth:<style>:<n>:<seed>` or `idx:<images>,<labels>`.
pub fn resolve_dataset(spec: &str, num_classes: usize) -> Result<LabeledDataset> {
    if let Some(rest) = spec.strip_prefix("synth:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let [style, n, seed] = parts[..] else {
            return Err(Error::Config(format!(
                "dataset {spec:?}: expected synth:<style>:<n>:<seed>"
            )));
        };
        let style = DomainStyle::preset(style)
            .ok_or_else(|| Error::Config(format!("dataset {spec:?}: unknown style {style:?}")))?;
        let n = n
            .parse()
            .map_err(|e| Error::Config(format!("dataset {spec:?}: bad sample count: {e}")))?;
        let seed = seed
            .parse()
            .map_err(|e| Error::Config(format!("dataset {spec:?}: bad seed: {e}")))?;
        synth_domain(&style, n, num_classes, seed)
    } else if let Some(rest) = spec.strip_prefix("idx:") {
        let Some((images, labels)) = rest.split_once(',') else {
            return Err(Error::Config(format!(
                "dataset {spec:?}: expected idx:<images>,<labels>"
            )));
        };
        crate::data::load_idx_with_classes(images, labels, Some(num_classes))
    } else {
        Err(Error::Config(format!(
            "dataset {spec:?}: expected synth:<style>:<n>:<seed> or idx:<images>,<labels>"
        )))
    }
}
