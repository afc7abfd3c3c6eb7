//! Training runs, comparisons, ablations and checkpoint tools.
//!
//! A run directory holds `metrics.csv` (one row per epoch), `profile.csv`
//! (final-epoch probability profile), `checkpoint.bin`, `config.toml` (the
//! resolved config) and `manifest.json`.
//!
//! `metrics.csv` errors, masses, `xe` and `hce` are all measured on the test
//! split after each epoch; `hce` uses the evaluation hierarchy.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use hcot_core::data::{self, Dataset, Split};
use hcot_core::metrics::{self, Evaluation, MetricsRecord, ProbabilityProfile};
use hcot_core::network::{mlp_spec, Network};
use hcot_core::objectives::{self, EntropyOptions, LogitBatch, ObjectiveKind};
use hcot_core::trainer::{self, EpochStats, OptimizerState};
use hcot_core::LabelHierarchy;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{DataConfig, ExperimentConfig, HierarchySource};
use crate::RunError;

/// Environment variable naming the CIFAR-100 binary directory.
pub const DATA_DIR_ENV: &str = "HCE_DATA_DIR";

pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    /// The dataset's own taxonomy.
    pub native: LabelHierarchy,
}

impl LoadedData {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self, RunError> {
        if let Some(spec) = cfg.synthetic_spec() {
            let data = data::generate_synthetic(&spec)?;
            return Ok(Self {
                train: data.train,
                test: data.test,
                native: data.hierarchy,
            });
        }
        let DataConfig::Cifar100 { path } = &cfg.data else {
            unreachable!("synthetic handled above")
        };
        let dir = match path {
            Some(p) => p.clone(),
            None => std::env::var_os(DATA_DIR_ENV)
                .map(PathBuf::from)
                .ok_or_else(|| {
                    RunError::Data(data::DataError::Missing(PathBuf::from(format!(
                        "${DATA_DIR_ENV}"
                    ))))
                })?,
        };
        let native = LabelHierarchy::cifar100();
        let (mut train, train_coarse) = data::load_cifar100(&dir, Split::Train)?;
        let (mut test, test_coarse) = data::load_cifar100(&dir, Split::Test)?;
        data::verify_coarse_labels(train.fine_labels(), &train_coarse, &native)?;
        data::verify_coarse_labels(test.fine_labels(), &test_coarse, &native)?;
        let means = data::channel_means(&train)?;
        data::subtract_channel_means(&mut train, &means)?;
        data::subtract_channel_means(&mut test, &means)?;
        Ok(Self {
            train,
            test,
            native,
        })
    }

    pub fn num_fine(&self) -> usize {
        self.native.num_fine()
    }

    pub fn resolve(&self, source: &str) -> Result<LabelHierarchy, RunError> {
        let named = |error| RunError::Hierarchy {
            source_name: source.to_string(),
            error,
        };
        let h = match HierarchySource::parse(source)? {
            HierarchySource::Flat => LabelHierarchy::flat(self.num_fine()).map_err(named)?,
            HierarchySource::Identity => {
                LabelHierarchy::identity(self.num_fine()).map_err(named)?
            }
            HierarchySource::Native => self.native.clone(),
            HierarchySource::Cifar100 => LabelHierarchy::cifar100(),
            HierarchySource::File(path) => {
                let text = fs::read_to_string(&path)
                    .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
                LabelHierarchy::parse(&text).map_err(named)?
            }
        };
        if h.num_fine() != self.num_fine() {
            return Err(RunError::Config(format!(
                "hierarchy {source} covers {} fine classes but the dataset has {}",
                h.num_fine(),
                self.num_fine()
            )));
        }
        Ok(h)
    }

    fn training_hierarchy(
        &self,
        cfg: &ExperimentConfig,
    ) -> Result<Option<LabelHierarchy>, RunError> {
        cfg.hierarchy
            .as_deref()
            .map(|s| self.resolve(s))
            .transpose()
    }

    fn eval_hierarchy(&self, cfg: &ExperimentConfig) -> Result<LabelHierarchy, RunError> {
        match &cfg.eval_hierarchy {
            Some(s) => self.resolve(s),
            None => Ok(self.native.clone()),
        }
    }
}

/// Everything a finished run produced.
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub epochs: Vec<EpochStats>,
    pub evaluation: Evaluation,
    pub network: Network,
    pub config_sha256: String,
}

impl RunOutcome {
    pub fn last(&self) -> &MetricsRecord {
        self.records
            .last()
            .expect("validated configs train at least one epoch")
    }

    pub fn complement_in_updates(&self) -> bool {
        self.epochs.iter().any(|e| e.complement_in_updates)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    version: &'static str,
    config_sha256: &'a str,
    master_seed: u64,
    data_seed: u64,
    init_seed: u64,
    shuffle_seed: u64,
    objective: ObjectiveKind,
    schedule: String,
    training_hierarchy: Option<&'a str>,
    eval_hierarchy: String,
    epochs: usize,
    parameters: usize,
    train_samples: usize,
    test_samples: usize,
    files: [&'static str; 4],
}

/// Creates `dir`, refusing a non-empty existing one unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), RunError> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)
            .map_err(RunError::io(dir))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(RunError::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(RunError::io(dir))
}

fn create(path: &Path) -> Result<BufWriter<File>, RunError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(RunError::io(path))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Test-split metrics plus XE and HCE of the test logits.
fn measure(
    net: &Network,
    test: &Dataset,
    h: &LabelHierarchy,
    opts: EntropyOptions,
) -> Result<(Evaluation, f64, f64), RunError> {
    let evaluation = metrics::evaluate(net, test, h)?;
    let logits = net.predict(test.inputs())?;
    let batch =
        LogitBatch::new(logits.view(), test.fine_labels()).map_err(metrics::MetricsError::from)?;
    let xe = objectives::cross_entropy(&batch)
        .map_err(metrics::MetricsError::from)?
        .value;
    let hce = objectives::hierarchical_complement_entropy(&batch, h, opts)
        .map_err(metrics::MetricsError::from)?
        .value;
    Ok((evaluation, xe, hce))
}

/// Trains one configuration. Artifacts go to `out` when given.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    force: bool,
) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    let data = LoadedData::load(cfg)?;
    run_with_data(cfg, &data, out, force)
}

pub fn run_with_data(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    out: Option<&Path>,
    force: bool,
) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    let train_h = data.training_hierarchy(cfg)?;
    let eval_h = data.eval_hierarchy(cfg)?;
    if let Some(dir) = out {
        prepare_out_dir(dir, force)?;
    }
    let config_text = cfg.to_toml();
    let config_sha256 = sha256_hex(config_text.as_bytes());

    let specs = mlp_spec(data.train.dim(), &cfg.network.hidden, data.num_fine());
    let mut net = Network::init(&specs, cfg.init_seed())?;
    let mut state = OptimizerState::new(&net);
    let mut records = Vec::with_capacity(cfg.train.epochs);
    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    let mut evaluation = None;
    for epoch in 0..cfg.train.epochs {
        let stats = trainer::train_epoch(
            &mut net,
            &mut state,
            &data.train,
            train_h.as_ref(),
            &cfg.train,
            epoch,
        )?;
        let (eval, xe, hce) = measure(&net, &data.test, &eval_h, cfg.train.entropy)?;
        if !(xe.is_finite() && hce.is_finite()) {
            return Err(RunError::NonFinite(format!(
                "test loss after epoch {}",
                epoch + 1
            )));
        }
        records.push(eval.record(epoch + 1, xe, hce));
        epochs.push(stats);
        evaluation = Some(eval);
    }
    let evaluation = evaluation.expect("validated configs train at least one epoch");

    if let Some(dir) = out {
        let path = dir.join("metrics.csv");
        metrics::write_metrics_csv(create(&path)?, &records)?;
        let path = dir.join("profile.csv");
        evaluation.profile.write_csv(create(&path)?)?;
        let path = dir.join("checkpoint.bin");
        let mut w = create(&path)?;
        net.write_checkpoint(&mut w, cfg.train.epochs)?;
        w.flush().map_err(RunError::io(&path))?;
        let path = dir.join("config.toml");
        fs::write(&path, &config_text).map_err(RunError::io(&path))?;
        let manifest = Manifest {
            format: "hcot-run/1",
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: &config_sha256,
            master_seed: cfg.seed,
            data_seed: cfg.data_seed(),
            init_seed: cfg.init_seed(),
            shuffle_seed: cfg.shuffle_seed(),
            objective: cfg.train.objective,
            schedule: cfg.train.schedule.to_string(),
            training_hierarchy: cfg.hierarchy.as_deref(),
            eval_hierarchy: cfg
                .eval_hierarchy
                .clone()
                .unwrap_or_else(|| "builtin:native".into()),
            epochs: cfg.train.epochs,
            parameters: net.parameter_count(),
            train_samples: data.train.len(),
            test_samples: data.test.len(),
            files: [
                "metrics.csv",
                "profile.csv",
                "checkpoint.bin",
                "config.toml",
            ],
        };
        let path = dir.join("manifest.json");
        let mut w = create(&path)?;
        serde_json::to_writer_pretty(&mut w, &manifest).expect("manifest serializes");
        writeln!(w)
            .and_then(|_| w.flush())
            .map_err(RunError::io(&path))?;
    }
    Ok(RunOutcome {
        records,
        epochs,
        evaluation,
        network: net,
        config_sha256,
    })
}

/// One row of `compare.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub objective: ObjectiveKind,
    pub fine_error: f64,
    pub coarse_error: f64,
    pub top5_error: f64,
    pub mass_g: f64,
    pub mass_inner: f64,
    pub mass_outer: f64,
    pub staircase_gap: f64,
    pub xe: f64,
    pub hce: f64,
    /// False for `xe`, whose HCE is measured but never optimized.
    pub hce_in_updates: bool,
}

impl CompareRow {
    fn new(objective: ObjectiveKind, run: &RunOutcome) -> Self {
        let last = run.last();
        Self {
            objective,
            fine_error: last.fine_error,
            coarse_error: last.coarse_error,
            top5_error: last.top5_error,
            mass_g: last.mean_mass_g,
            mass_inner: last.mean_mass_inner,
            mass_outer: last.mean_mass_outer,
            staircase_gap: run.evaluation.profile.staircase_gap(),
            xe: last.xe,
            hce: last.hce,
            hce_in_updates: run.complement_in_updates(),
        }
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for row in rows {
        w.serialize(row).map_err(metrics::MetricsError::from)?;
    }
    w.flush().map_err(RunError::io(path))
}

/// Trains `xe`, `cot` and `hcot` from the same seeds.
///
/// Runs go to `out/<objective>/`, the table to `out/compare.csv`.
pub fn compare(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    force: bool,
) -> Result<Vec<(CompareRow, RunOutcome)>, RunError> {
    let configs: Vec<ExperimentConfig> = ObjectiveKind::ALL
        .iter()
        .map(|&objective| {
            let mut c = cfg.clone();
            c.train.objective = objective;
            c
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    if let Some(dir) = out {
        prepare_out_dir(dir, force)?;
    }
    let data = LoadedData::load(cfg)?;
    let runs: Vec<RunOutcome> = configs
        .par_iter()
        .map(|c| {
            let sub = out.map(|d| d.join(c.train.objective.as_str()));
            run_with_data(c, &data, sub.as_deref(), force)
        })
        .collect::<Result<_, _>>()?;
    let rows: Vec<(CompareRow, RunOutcome)> = configs
        .iter()
        .zip(runs)
        .map(|(c, run)| (CompareRow::new(c.train.objective, &run), run))
        .collect();
    if let Some(dir) = out {
        let table: Vec<&CompareRow> = rows.iter().map(|(r, _)| r).collect();
        write_rows(&dir.join("compare.csv"), &table)?;
    }
    Ok(rows)
}

/// One row of `ablation_nc.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub n_c: usize,
    pub fine_error: f64,
    pub coarse_error: f64,
    pub top5_error: f64,
    pub mass_g: f64,
    pub mass_inner: f64,
    pub mass_outer: f64,
    pub staircase_gap: f64,
}

/// Resolves one granularity: `N` (1, the fine-class count, or the native
/// group count) or `N=path` / a bare path for a hierarchy file.
pub fn granularity_source(
    data: &LoadedData,
    spec: &str,
) -> Result<(String, Option<usize>), RunError> {
    let spec = spec.trim();
    if let Some((n, path)) = spec.split_once('=') {
        let n: usize = n
            .trim()
            .parse()
            .map_err(|_| RunError::Config(format!("bad granularity `{spec}`")))?;
        return Ok((path.trim().to_string(), Some(n)));
    }
    match spec.parse::<usize>() {
        Ok(1) => Ok(("builtin:flat".into(), Some(1))),
        Ok(n) if n == data.num_fine() => Ok(("builtin:identity".into(), Some(n))),
        Ok(n) if n == data.native.num_coarse() => Ok(("builtin:native".into(), Some(n))),
        Ok(n) => Err(RunError::Config(format!(
            "no builtin hierarchy with {n} groups (use 1, {}, {} or N=path)",
            data.native.num_coarse(),
            data.num_fine()
        ))),
        Err(_) => Ok((spec.to_string(), None)),
    }
}

/// Trains `hcot` once per granularity. Runs go to `out/nc_<N>/`, the
/// table to `out/ablation_nc.csv`.
pub fn ablate_nc(
    cfg: &ExperimentConfig,
    granularities: &[String],
    out: Option<&Path>,
    force: bool,
) -> Result<Vec<(AblationRow, RunOutcome)>, RunError> {
    if granularities.is_empty() {
        return Err(RunError::Config(
            "ablate-nc needs at least one granularity".into(),
        ));
    }
    let data = LoadedData::load(cfg)?;
    let mut configs = Vec::with_capacity(granularities.len());
    for spec in granularities {
        let (source, expected) = granularity_source(&data, spec)?;
        let h = data.resolve(&source)?;
        if let Some(n) = expected.filter(|&n| n != h.num_coarse()) {
            return Err(RunError::Config(format!(
                "{source} has {} groups, not {n}",
                h.num_coarse()
            )));
        }
        let mut c = cfg.clone();
        c.train.objective = ObjectiveKind::Hcot;
        c.hierarchy = Some(source);
        c.validate()?;
        configs.push((h.num_coarse(), c));
    }
    if let Some(dir) = out {
        prepare_out_dir(dir, force)?;
    }
    let runs: Vec<RunOutcome> = configs
        .par_iter()
        .map(|(n, c)| {
            let sub = out.map(|d| d.join(format!("nc_{n}")));
            run_with_data(c, &data, sub.as_deref(), force)
        })
        .collect::<Result<_, _>>()?;
    let rows: Vec<(AblationRow, RunOutcome)> = configs
        .iter()
        .zip(runs)
        .map(|((n, _), run)| {
            let last = run.last();
            let row = AblationRow {
                n_c: *n,
                fine_error: last.fine_error,
                coarse_error: last.coarse_error,
                top5_error: last.top5_error,
                mass_g: last.mean_mass_g,
                mass_inner: last.mean_mass_inner,
                mass_outer: last.mean_mass_outer,
                staircase_gap: run.evaluation.profile.staircase_gap(),
            };
            (row, run)
        })
        .collect();
    if let Some(dir) = out {
        let table: Vec<&AblationRow> = rows.iter().map(|(r, _)| r).collect();
        write_rows(&dir.join("ablation_nc.csv"), &table)?;
    }
    Ok(rows)
}

fn load_checkpoint(path: &Path) -> Result<(Network, usize), RunError> {
    let file = File::open(path).map_err(RunError::io(path))?;
    Ok(Network::read_checkpoint(BufReader::new(file))?)
}

/// Evaluates a checkpoint on the test split. Writes `eval.csv` and
/// `profile.csv` to `out` when given.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out: Option<&Path>,
    force: bool,
) -> Result<(MetricsRecord, ProbabilityProfile), RunError> {
    cfg.validate()?;
    let data = LoadedData::load(cfg)?;
    let eval_h = data.eval_hierarchy(cfg)?;
    let (net, epoch) = load_checkpoint(checkpoint)?;
    let (evaluation, xe, hce) = measure(&net, &data.test, &eval_h, cfg.train.entropy)?;
    let record = evaluation.record(epoch, xe, hce);
    if let Some(dir) = out {
        prepare_out_dir(dir, force)?;
        metrics::write_metrics_csv(
            create(&dir.join("eval.csv"))?,
            std::slice::from_ref(&record),
        )?;
        evaluation
            .profile
            .write_csv(create(&dir.join("profile.csv"))?)?;
    }
    Ok((record, evaluation.profile))
}

/// Writes penultimate-layer activations of one split as CSV.
pub fn export_embeddings(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    split: Split,
    out_file: &Path,
    force: bool,
) -> Result<usize, RunError> {
    cfg.validate()?;
    if out_file.exists() && !force {
        return Err(RunError::OutputExists(out_file.to_path_buf()));
    }
    let data = LoadedData::load(cfg)?;
    let eval_h = data.eval_hierarchy(cfg)?;
    let (net, _) = load_checkpoint(checkpoint)?;
    let rows = match split {
        Split::Train => &data.train,
        Split::Test => &data.test,
    };
    if let Some(parent) = out_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(RunError::io(parent))?;
    }
    Ok(metrics::export_embeddings(
        &net,
        rows,
        &eval_h,
        create(out_file)?,
    )?)
}
