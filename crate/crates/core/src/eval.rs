//! Base-to-novel evaluation: splits, accuracy metrics, ablations and sweeps.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::bank::{build_bank, KeyTemplate, PromptBank};
use crate::encoder::{ClassCatalog, Encoder, Sample, SampleFactory};
use crate::error::{CakiError, Result};
use crate::prompt::{train_class_prompt, train_shared_prompt, FewShotDataset, TrainConfig, TrainReport};
use crate::qkpm::{Qkpm, QkpmConfig, Strategy};
use crate::seed;

/// Supported shot counts in the standard protocol.
pub const STANDARD_SHOTS: [usize; 3] = [1, 4, 16];

/// `2bn / (b + n)` for percentages; zero when both are zero.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    let in_range = |v: f64| (0.0..=100.0).contains(&v);
    if !in_range(base) || !in_range(novel) {
        return Err(CakiError::invalid(format!(
            "accuracies must lie in [0, 100], got {base} and {novel}"
        )));
    }
    if base + novel == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * base * novel / (base + novel))
}

/// Base/novel partition of a catalog with few-shot training data and test
/// sets. Labels index the base or novel sub-catalog respectively.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub train: FewShotDataset,
    pub base_test: Vec<(Sample, usize)>,
    pub novel_test: Vec<(Sample, usize)>,
    pub seed: u64,
    pub shots: usize,
}

impl Split {
    pub fn base_catalog(&self, catalog: &ClassCatalog) -> Result<ClassCatalog> {
        catalog.subset(&self.base_classes)
    }

    pub fn novel_catalog(&self, catalog: &ClassCatalog) -> Result<ClassCatalog> {
        catalog.subset(&self.novel_classes)
    }
}

fn base_count(classes: usize, base_fraction: f64) -> Result<usize> {
    if classes < 2 {
        return Err(CakiError::invalid(format!(
            "a base/novel split needs at least 2 classes, got {classes}"
        )));
    }
    if !(base_fraction > 0.0 && base_fraction < 1.0) {
        return Err(CakiError::invalid(format!(
            "base fraction must lie in (0, 1), got {base_fraction}"
        )));
    }
    let n = (base_fraction * classes as f64).ceil() as usize;
    if n == 0 || n >= classes {
        return Err(CakiError::invalid(format!(
            "base fraction {base_fraction} leaves no novel classes out of {classes}"
        )));
    }
    Ok(n)
}

/// Base classes are the first `⌈fraction · C⌉` catalog indices; samples are
/// drawn from `factory` under `seed`.
pub fn make_split(
    catalog: &ClassCatalog,
    factory: &SampleFactory,
    seed: u64,
    shots: usize,
    test_per_class: usize,
    base_fraction: f64,
) -> Result<Split> {
    if shots == 0 {
        return Err(CakiError::invalid("shots per class must be at least 1"));
    }
    if factory.classes() != catalog.len() {
        return Err(CakiError::invalid("sample factory and catalog disagree on class count"));
    }
    let nb = base_count(catalog.len(), base_fraction)?;
    let base_classes: Vec<usize> = (0..nb).collect();
    let novel_classes: Vec<usize> = (nb..catalog.len()).collect();

    let mut train = Vec::with_capacity(nb * shots);
    let mut base_test = Vec::with_capacity(nb * test_per_class);
    for (local, &c) in base_classes.iter().enumerate() {
        train.extend(factory.draw(c, shots, seed, seed::TAG_TRAIN_SAMPLES).into_iter().map(|s| (s, local)));
        base_test.extend(factory.draw(c, test_per_class, seed, seed::TAG_TEST_SAMPLES).into_iter().map(|s| (s, local)));
    }
    let mut novel_test = Vec::with_capacity(novel_classes.len() * test_per_class);
    for (local, &c) in novel_classes.iter().enumerate() {
        novel_test.extend(factory.draw(c, test_per_class, seed, seed::TAG_TEST_SAMPLES).into_iter().map(|s| (s, local)));
    }
    Ok(Split {
        base_classes,
        novel_classes,
        train: FewShotDataset::new(train, nb)?,
        base_test,
        novel_test,
        seed,
        shots,
    })
}

/// Split over stored records (offline features): no training data, every
/// record is a test sample.
pub fn split_records(
    catalog: &ClassCatalog,
    records: &[(Sample, usize)],
    seed: u64,
    base_fraction: f64,
) -> Result<Split> {
    let nb = base_count(catalog.len(), base_fraction)?;
    let mut base_test = Vec::new();
    let mut novel_test = Vec::new();
    for &(s, c) in records {
        if c < nb {
            base_test.push((s, c));
        } else {
            novel_test.push((s, c - nb));
        }
    }
    Ok(Split {
        base_classes: (0..nb).collect(),
        novel_classes: (nb..catalog.len()).collect(),
        train: FewShotDataset::new(Vec::new(), nb)?,
        base_test,
        novel_test,
        seed,
        shots: 0,
    })
}

/// Accuracy percentages backed by exact counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub base_accuracy: f64,
    pub novel_accuracy: f64,
    pub harmonic_mean: f64,
    pub base_correct: usize,
    pub base_total: usize,
    pub novel_correct: usize,
    pub novel_total: usize,
}

fn percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64 * 100.0
    }
}

impl Metrics {
    pub fn from_counts(base_correct: usize, base_total: usize, novel_correct: usize, novel_total: usize) -> Self {
        let base_accuracy = percent(base_correct, base_total);
        let novel_accuracy = percent(novel_correct, novel_total);
        Metrics {
            base_accuracy,
            novel_accuracy,
            harmonic_mean: harmonic_mean(base_accuracy, novel_accuracy).expect("percentages in range"),
            base_correct,
            base_total,
            novel_correct,
            novel_total,
        }
    }
}

/// Prompts and bank learned from one split.
#[derive(Debug, Clone)]
pub struct TrainedBank {
    pub bank: PromptBank,
    pub shared: TrainReport,
    pub class_reports: Vec<TrainReport>,
}

/// Trains the shared prompt and one prompt per base class, then builds the bank.
pub fn train_bank(
    backend: &dyn Encoder,
    base_catalog: &ClassCatalog,
    train: &FewShotDataset,
    config: &TrainConfig,
    key_template: KeyTemplate,
) -> Result<TrainedBank> {
    let shared = train_shared_prompt(backend, train, base_catalog, config)?;
    let class_reports = (0..base_catalog.len())
        .into_par_iter()
        .map(|c| train_class_prompt(backend, c, &train.restrict(c), base_catalog, config))
        .collect::<Result<Vec<_>>>()?;
    let prompts: Vec<_> = class_reports.iter().map(|r| r.prompt.clone()).collect();
    let bank = build_bank(backend, base_catalog, &shared.prompt, &prompts, key_template)?;
    Ok(TrainedBank { bank, shared, class_reports })
}

/// Refined and coarse-only metrics from the same predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOutcome {
    pub caki: Metrics,
    pub coarse: Metrics,
}

fn count_correct(
    backend: &dyn Encoder,
    engine: &Qkpm<'_>,
    samples: &[(Sample, usize)],
    strategy: Strategy,
    strategy_seed: u64,
) -> Result<(usize, usize)> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, (sample, label))| {
            let image = backend.encode_image(sample)?;
            let out = engine.classify(&image, strategy, seed::derive(&[strategy_seed, i as u64]))?;
            Ok(((out.label == *label) as usize, (out.coarse.label() == *label) as usize))
        })
        .try_reduce(|| (0, 0), |a, b| Ok((a.0 + b.0, a.1 + b.1)))
}

/// Evaluates an existing bank on the split's base and novel test sets.
pub fn evaluate_bank(
    backend: &dyn Encoder,
    bank: &PromptBank,
    catalog: &ClassCatalog,
    split: &Split,
    qkpm: &QkpmConfig,
    strategy: Strategy,
) -> Result<EvalOutcome> {
    let mut counts = [(0, 0); 2];
    let sets = [
        (split.base_catalog(catalog)?, &split.base_test, seed::TAG_TRAIN_SAMPLES),
        (split.novel_catalog(catalog)?, &split.novel_test, seed::TAG_TEST_SAMPLES),
    ];
    for (slot, (test_catalog, samples, tag)) in counts.iter_mut().zip(&sets) {
        if samples.is_empty() {
            continue;
        }
        let engine = Qkpm::new(backend, bank, test_catalog, *qkpm)?;
        let strategy_seed = seed::derive(&[split.seed, seed::TAG_RANDOM_STRATEGY, *tag]);
        *slot = count_correct(backend, &engine, samples, strategy, strategy_seed)?;
    }
    let (nb, nn) = (split.base_test.len(), split.novel_test.len());
    Ok(EvalOutcome {
        caki: Metrics::from_counts(counts[0].0, nb, counts[1].0, nn),
        coarse: Metrics::from_counts(counts[0].1, nb, counts[1].1, nn),
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub outcome: EvalOutcome,
    pub trained: TrainedBank,
}

/// Train on the split's base classes, build the bank, evaluate.
pub fn run_experiment(
    backend: &dyn Encoder,
    catalog: &ClassCatalog,
    split: &Split,
    train_config: &TrainConfig,
    qkpm: &QkpmConfig,
    strategy: Strategy,
) -> Result<ExperimentResult> {
    qkpm.validate()?;
    let base = split.base_catalog(catalog)?;
    let trained = train_bank(backend, &base, &split.train, train_config, qkpm.key_template)?;
    let outcome = evaluate_bank(backend, &trained.bank, catalog, split, qkpm, strategy)?;
    Ok(ExperimentResult { outcome, trained })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    Beta,
    TopK,
    Tau,
}

impl SweepParameter {
    pub const BETA_GRID: [f64; 10] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
    pub const TOPK_GRID: [f64; 5] = [1.0, 3.0, 5.0, 7.0, 9.0];
    pub const TAU_GRID: [f64; 5] = [0.6, 0.8, 1.0, 1.2, 1.4];

    pub fn default_grid(self) -> &'static [f64] {
        match self {
            SweepParameter::Beta => &Self::BETA_GRID,
            SweepParameter::TopK => &Self::TOPK_GRID,
            SweepParameter::Tau => &Self::TAU_GRID,
        }
    }
}

impl FromStr for SweepParameter {
    type Err = CakiError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "beta" => Ok(SweepParameter::Beta),
            "k" | "topk" => Ok(SweepParameter::TopK),
            "tau" => Ok(SweepParameter::Tau),
            _ => Err(CakiError::invalid(format!("unknown sweep parameter {s:?}"))),
        }
    }
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParameter::Beta => "beta",
            SweepParameter::TopK => "K",
            SweepParameter::Tau => "tau",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub train: TrainConfig,
    pub qkpm: QkpmConfig,
    pub outcome: EvalOutcome,
}

/// One experiment per value with everything else fixed. `β` and `K` do not
/// affect training, so their sweeps share one trained bank; a `τ` sweep sets
/// both the training and the inference temperature and retrains per value.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    backend: &dyn Encoder,
    catalog: &ClassCatalog,
    split: &Split,
    parameter: SweepParameter,
    values: &[f64],
    train_config: &TrainConfig,
    qkpm: &QkpmConfig,
    strategy: Strategy,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(CakiError::invalid("sweep needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|&v| {
            let mut t = *train_config;
            let mut q = *qkpm;
            match parameter {
                SweepParameter::Beta => q.beta = v,
                SweepParameter::TopK => {
                    if v < 1.0 || v.fract() != 0.0 {
                        return Err(CakiError::invalid(format!("K must be a positive integer, got {v}")));
                    }
                    q.top_k = v as usize;
                }
                SweepParameter::Tau => {
                    t.temperature = v;
                    q.temperature = v;
                }
            }
            q.validate()?;
            t.validate()?;
            Ok((v, t, q))
        })
        .collect::<Result<Vec<_>>>()?;

    let base = split.base_catalog(catalog)?;
    let shared_training = match parameter {
        SweepParameter::Tau => None,
        _ => Some(train_bank(backend, &base, &split.train, train_config, qkpm.key_template)?),
    };
    configs
        .into_iter()
        .map(|(value, train, q)| {
            let outcome = match &shared_training {
                Some(trained) => evaluate_bank(backend, &trained.bank, catalog, split, &q, strategy)?,
                None => run_experiment(backend, catalog, split, &train, &q, strategy)?.outcome,
            };
            Ok(SweepPoint { value, train, qkpm: q, outcome })
        })
        .collect()
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One line of the machine-readable results file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub strategy: String,
    pub seed: u64,
    pub k_shots: usize,
    #[serde(rename = "K")]
    pub top_k: usize,
    pub beta: f64,
    pub tau: f64,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
}

/// Label used for coarse-only rows.
pub const COARSE_LABEL: &str = "coarse";

impl ResultRow {
    pub fn new(strategy: &str, seed: u64, k_shots: usize, qkpm: &QkpmConfig, metrics: &Metrics) -> Self {
        ResultRow {
            strategy: strategy.to_string(),
            seed,
            k_shots,
            top_k: qkpm.top_k,
            beta: qkpm.beta,
            tau: qkpm.temperature,
            base_acc: metrics.base_accuracy,
            novel_acc: metrics.novel_accuracy,
            hm: metrics.harmonic_mean,
        }
    }

    /// The coarse-only row: β is reported as 0.
    pub fn coarse(seed: u64, k_shots: usize, qkpm: &QkpmConfig, metrics: &Metrics) -> Self {
        ResultRow {
            beta: 0.0,
            ..Self::new(COARSE_LABEL, seed, k_shots, qkpm, metrics)
        }
    }

    fn sort_key(&self) -> (u64, String, usize, u64, u64) {
        (self.seed, self.strategy.clone(), self.top_k, self.beta.to_bits(), self.tau.to_bits())
    }
}

/// Sorts rows canonically: seed, strategy, K, β, τ.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        a.sort_key()
            .partial_cmp(&b.sort_key())
            .unwrap()
            .then(a.beta.partial_cmp(&b.beta).unwrap())
    });
}

pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| CakiError::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn format_table(rows: &[ResultRow]) -> String {
    let mut s = format!(
        "{:<8} {:>6} {:>6} {:>4} {:>6} {:>6} {:>9} {:>9} {:>8}\n",
        "strategy", "seed", "shots", "K", "beta", "tau", "base", "novel", "HM"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<8} {:>6} {:>6} {:>4} {:>6.2} {:>6.2} {:>9.2} {:>9.2} {:>8.2}\n",
            r.strategy, r.seed, r.k_shots, r.top_k, r.beta, r.tau, r.base_acc, r.novel_acc, r.hm
        ));
    }
    s
}
