use std::fs;
use std::path::{Path, PathBuf};

use caki_core::bank::{load_bank, save_bank, PromptBank};
use caki_core::encoder::{
    export_features, load_offline_features, make_synthetic_world, write_feature_file, ClassCatalog, Encoder,
    Sample, SampleFactory,
};
use caki_core::eval::{
    evaluate_bank, format_table, make_split, mean_std, run_experiment, sort_rows, split_records, sweep,
    train_bank, write_csv, EvalOutcome, ResultRow, Split, SweepParameter,
};
use caki_core::qkpm::Strategy;
use caki_core::CakiError;

use crate::config::{PipelineConfig, WorldSource};
use crate::CliError;

/// Noise-stream tag for the records written by `gen-task`.
const GEN_TASK_TAG: u64 = 0x6765_6e74;

/// A loaded feature source.
pub enum World {
    Synthetic {
        backend: caki_core::encoder::SyntheticWorld,
        catalog: ClassCatalog,
        factory: SampleFactory,
    },
    Offline {
        backend: caki_core::encoder::OfflineBackend,
        catalog: ClassCatalog,
    },
}

impl World {
    pub fn open(config: &PipelineConfig) -> Result<Self, CliError> {
        Ok(match &config.world {
            WorldSource::Synthetic(spec) => {
                let (backend, catalog, factory) = make_synthetic_world(*spec)?;
                World::Synthetic { backend, catalog, factory }
            }
            WorldSource::Offline { path } => {
                let (backend, catalog) = load_offline_features(path)?;
                if backend.renormalization_warnings() > 0 {
                    log::warn!(
                        "{}: {} vectors were not unit-norm",
                        path.display(),
                        backend.renormalization_warnings()
                    );
                }
                World::Offline { backend, catalog }
            }
        })
    }

    pub fn backend(&self) -> &dyn Encoder {
        match self {
            World::Synthetic { backend, .. } => backend,
            World::Offline { backend, .. } => backend,
        }
    }

    pub fn catalog(&self) -> &ClassCatalog {
        match self {
            World::Synthetic { catalog, .. } | World::Offline { catalog, .. } => catalog,
        }
    }

    fn split(&self, config: &PipelineConfig, seed: u64) -> Result<Split, CliError> {
        let s = &config.split;
        Ok(match self {
            World::Synthetic { catalog, factory, .. } => {
                make_split(catalog, factory, seed, s.shots, s.test_per_class, s.base_fraction)?
            }
            World::Offline { backend, catalog } => split_records(catalog, &backend.samples(), seed, s.base_fraction)?,
        })
    }
}

fn output_path(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| CliError::Config(format!("no {what} path: pass --out or set output.{what}")))
}

pub fn gen_task(config: &PipelineConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let path = output_path(out, &config.output.features, "features")?;
    let world = World::open(config)?;
    let World::Synthetic { backend, catalog, factory } = &world else {
        return Err(CliError::Config("gen-task needs a synthetic world".into()));
    };
    let seed = config.split.seeds[0];
    let per_class = config.split.shots + config.split.test_per_class;
    let samples: Vec<(Sample, usize)> = (0..catalog.len())
        .flat_map(|c| factory.draw(c, per_class, seed, GEN_TASK_TAG).into_iter().map(move |s| (s, c)))
        .collect();
    let file = export_features(backend, catalog, &samples)?;
    write_feature_file(&path, &file)?;
    println!(
        "wrote {} records for {} classes (D={}, Dt={}) to {}",
        samples.len(),
        catalog.len(),
        file.dim,
        file.token_dim,
        path.display()
    );
    Ok(())
}

pub fn train(config: &PipelineConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let path = output_path(out, &config.output.bank, "bank")?;
    let world = World::open(config)?;
    let seed = config.split.seeds[0];
    let split = world.split(config, seed)?;
    let base = split.base_catalog(world.catalog())?;
    let trained = train_bank(
        world.backend(),
        &base,
        &split.train,
        &config.train_for_seed(seed),
        config.qkpm.key_template,
    )?;
    println!("{:<24} {:>12} {:>12}", "prompt", "first loss", "final loss");
    println!(
        "{:<24} {:>12.6} {:>12.6}",
        "(shared)",
        trained.shared.first_loss(),
        trained.shared.final_loss()
    );
    for (c, report) in trained.class_reports.iter().enumerate() {
        println!(
            "{:<24} {:>12.6} {:>12.6}",
            base.name(c),
            report.first_loss(),
            report.final_loss()
        );
    }
    save_bank(&trained.bank, &path)?;
    println!("saved {} entries to {}", trained.bank.len(), path.display());
    Ok(())
}

fn rows_for(seed: u64, shots: usize, config: &PipelineConfig, strategy: Strategy, outcome: &EvalOutcome) -> [ResultRow; 2] {
    [
        ResultRow::coarse(seed, shots, &config.qkpm, &outcome.coarse),
        ResultRow::new(strategy.tag(), seed, shots, &config.qkpm, &outcome.caki),
    ]
}

fn emit(rows: &mut [ResultRow], csv_path: Option<&Path>) -> Result<(), CliError> {
    sort_rows(rows);
    print!("{}", format_table(rows));
    if let Some(path) = csv_path {
        let file = fs::File::create(path).map_err(CakiError::from)?;
        write_csv(rows, file)?;
        println!("wrote {} rows to {}", rows.len(), path.display());
    }
    Ok(())
}

fn summarize(rows: &[ResultRow]) {
    let mut labels: Vec<&str> = rows.iter().map(|r| r.strategy.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    for label in labels {
        let pick = |f: fn(&ResultRow) -> f64| {
            mean_std(&rows.iter().filter(|r| r.strategy == label).map(f).collect::<Vec<_>>())
        };
        let (b, bs) = pick(|r| r.base_acc);
        let (n, ns) = pick(|r| r.novel_acc);
        let (h, hs) = pick(|r| r.hm);
        println!("mean {label:<8} base {b:.2}±{bs:.2}  novel {n:.2}±{ns:.2}  HM {h:.2}±{hs:.2}");
    }
}

pub fn eval(
    config: &PipelineConfig,
    bank_path: Option<PathBuf>,
    strategy: Strategy,
    csv: Option<PathBuf>,
) -> Result<(), CliError> {
    let world = World::open(config)?;
    let bank: Option<PromptBank> = match &bank_path {
        Some(path) => {
            let bank = load_bank(path)?;
            bank.check_encoder(world.backend())?;
            Some(bank)
        }
        None => None,
    };
    if bank.is_none() && matches!(world, World::Offline { .. }) {
        return Err(CliError::Config(
            "an offline world cannot train prompts; pass --bank built for this feature file".into(),
        ));
    }
    let mut rows = Vec::new();
    for &seed in &config.split.seeds {
        let split = world.split(config, seed)?;
        let outcome = match &bank {
            Some(bank) => evaluate_bank(world.backend(), bank, world.catalog(), &split, &config.qkpm, strategy)?,
            None => {
                run_experiment(
                    world.backend(),
                    world.catalog(),
                    &split,
                    &config.train_for_seed(seed),
                    &config.qkpm,
                    strategy,
                )?
                .outcome
            }
        };
        rows.extend(rows_for(seed, split.shots, config, strategy, &outcome));
    }
    emit(&mut rows, csv.as_deref().or(config.output.csv.as_deref()))?;
    summarize(&rows);
    Ok(())
}

pub fn run_sweep(
    config: &PipelineConfig,
    parameter: SweepParameter,
    values: Option<Vec<f64>>,
    strategy: Strategy,
    csv: Option<PathBuf>,
) -> Result<(), CliError> {
    let world = World::open(config)?;
    if matches!(world, World::Offline { .. }) {
        return Err(CliError::Config("sweeps retrain prompts and need a synthetic world".into()));
    }
    let values = values.unwrap_or_else(|| parameter.default_grid().to_vec());
    let mut rows = Vec::new();
    let mut per_value_hm = vec![Vec::new(); values.len()];
    for &seed in &config.split.seeds {
        let split = world.split(config, seed)?;
        let points = sweep(
            world.backend(),
            world.catalog(),
            &split,
            parameter,
            &values,
            &config.train_for_seed(seed),
            &config.qkpm,
            strategy,
        )?;
        for (i, p) in points.iter().enumerate() {
            rows.push(ResultRow::new(strategy.tag(), seed, split.shots, &p.qkpm, &p.outcome.caki));
            per_value_hm[i].push(p.outcome.caki.harmonic_mean);
            // The coarse model ignores β and K; one baseline row per seed.
            if parameter == SweepParameter::Tau || i == 0 {
                let base_q = if parameter == SweepParameter::Tau { p.qkpm } else { config.qkpm };
                rows.push(ResultRow::coarse(seed, split.shots, &base_q, &p.outcome.coarse));
            }
        }
    }
    emit(&mut rows, csv.as_deref().or(config.output.csv.as_deref()))?;
    let means: Vec<f64> = per_value_hm.iter().map(|v| mean_std(v).0).collect();
    for (v, m) in values.iter().zip(&means) {
        println!("{parameter}={v}: mean HM {m:.2}");
    }
    let spread = means.iter().cloned().fold(f64::MIN, f64::max) - means.iter().cloned().fold(f64::MAX, f64::min);
    println!("HM range over {parameter}: {spread:.2}");
    Ok(())
}

pub fn inspect(path: &Path) -> Result<(), CliError> {
    let bank = load_bank(path)?;
    let fp = bank.fingerprint();
    println!("format version {}", bank.format_version());
    println!("encoder {fp}");
    println!("D={} Dt={} L={} C={}", fp.dim, fp.token_dim, fp.prompt_len, bank.len());
    println!("shared prompt norm {:.6}", bank.shared_prompt().frobenius_norm());
    if !bank.is_empty() {
        println!("{:<24} {:>10} {:>12}", "class", "key norm", "value norm");
    }
    for e in bank.entries() {
        let key_norm = e.key.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("{:<24} {:>10.6} {:>12.6}", e.class_name, key_norm, e.value.frobenius_norm());
    }
    Ok(())
}
