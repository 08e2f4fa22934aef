//! Commands behind the `nir` binary. Each command is a plain function so
//! that tests can drive the pipeline without spawning a process.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use nir_core::analysis::{
    entanglement_score, subgroup_activation_matrix, top_k_neurons, variance_trace,
    ActivationMatrix, SubgroupCell, CELL_GRAMMAR,
};
use nir_core::data::{
    binarize_attribute, generate_synthetic, load_csv, save_csv, stratified_split_indices,
    SplitIndices,
};
use nir_core::error::ErrorCategory;
use nir_core::fairness::{fairness_report_with_source, FairnessReport};
use nir_core::trainer::train;
use nir_core::{Dataset, ModelParams, NirError, RunConfig, TrainingLog};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "training_log.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const MATRIX_CSV_FILE: &str = "activation_matrix.csv";
pub const MATRIX_JSON_FILE: &str = "activation_matrix.json";
pub const SUMMARY_FILE: &str = "compare_summary.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{} already exists; pass --overwrite to replace it", .0.display())]
    Exists(PathBuf),
    #[error(transparent)]
    Core(#[from] NirError),
    #[error("{side} run failed: {source}")]
    Side {
        side: &'static str,
        #[source]
        source: NirError,
    },
}

impl CliError {
    /// 0 success, 1 usage/config, 2 data, 3 numeric/divergence.
    pub fn exit_code(&self) -> i32 {
        let core = match self {
            CliError::Usage(_) | CliError::Exists(_) => return 1,
            CliError::Core(e) | CliError::Side { source: e, .. } => e,
        };
        match core.category() {
            ErrorCategory::Config => 1,
            ErrorCategory::Data => 2,
            ErrorCategory::Numeric => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Command-line overrides applied on top of a configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
}

pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(lambda) = overrides.lambda {
        cfg.train.lambda = lambda;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| {
        CliError::Core(NirError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::Core(NirError::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

fn refuse_existing(path: &Path, overwrite: bool) -> CliResult<()> {
    if path.exists() && !overwrite {
        return Err(CliError::Exists(path.to_path_buf()));
    }
    Ok(())
}

/// Lowercase hex SHA-256 of a file.
pub fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| NirError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

/// Loads `data` if given, otherwise generates from `cfg.data`; then applies
/// the configured binarization rules.
pub fn prepare_dataset(cfg: &RunConfig, data: Option<&Path>) -> CliResult<Dataset> {
    let mut ds = match data {
        Some(p) => load_csv(p)?,
        None => generate_synthetic(&cfg.data)?,
    };
    for rule in &cfg.binarize {
        ds = binarize_attribute(&ds, rule)?;
    }
    Ok(ds)
}

/// Split used by every command, plus a short identifier of the validation
/// part for provenance.
pub struct PreparedSplit {
    pub indices: SplitIndices,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub val_id: String,
}

pub fn split_dataset(cfg: &RunConfig, ds: &Dataset) -> CliResult<PreparedSplit> {
    let indices = stratified_split_indices(ds, &cfg.split.fractions, cfg.split.seed)?;
    let mut hasher = Sha256::new();
    for i in &indices.val {
        hasher.update((*i as u64).to_le_bytes());
    }
    let digest = format!("{:x}", hasher.finalize());
    let fr = &cfg.split.fractions;
    let val_id = format!(
        "validation split seed={} fractions={}/{}/{} n={} sha256={}",
        cfg.split.seed,
        fr.train,
        fr.val,
        fr.test,
        indices.val.len(),
        &digest[..16]
    );
    Ok(PreparedSplit {
        train: ds.subset(&indices.train),
        val: ds.subset(&indices.val),
        test: ds.subset(&indices.test),
        indices,
        val_id,
    })
}

// ---------------------------------------------------------------- generate

pub fn cmd_generate(
    config: Option<&Path>,
    out: &Path,
    overrides: &Overrides,
    overwrite: bool,
) -> CliResult<Dataset> {
    let cfg = load_config(config, overrides)?;
    refuse_existing(out, overwrite)?;
    let ds = generate_synthetic(&cfg.data)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    save_csv(&ds, out)?;
    info!("wrote {} samples to {}", ds.size(), out.display());
    Ok(ds)
}

// ------------------------------------------------------------------- train

pub struct TrainOutput {
    pub params: ModelParams,
    pub log: TrainingLog,
    pub config: RunConfig,
}

/// Trains under `cfg` and writes checkpoint, log and resolved config into
/// `out_dir`.
pub fn run_training(
    cfg: &RunConfig,
    ds: &Dataset,
    out_dir: &Path,
) -> Result<(ModelParams, TrainingLog), NirError> {
    let split = split_dataset(cfg, ds).map_err(|e| match e {
        CliError::Core(e) => e,
        other => NirError::Contract(other.to_string()),
    })?;
    let arch = cfg.architecture(ds.feature_dim())?;
    let (params, log) = train(&cfg.train, &split.train, &split.val, &arch)?;
    params.save_checkpoint(out_dir.join(CHECKPOINT_FILE))?;
    log.save(out_dir.join(LOG_FILE))?;
    let resolved = cfg.to_toml()?;
    fs::write(out_dir.join(RESOLVED_CONFIG_FILE), resolved).map_err(|e| NirError::Io {
        path: out_dir.join(RESOLVED_CONFIG_FILE),
        source: e,
    })?;
    Ok((params, log))
}

pub fn cmd_train(
    config: Option<&Path>,
    data: Option<&Path>,
    out_dir: &Path,
    overrides: &Overrides,
    overwrite: bool,
) -> CliResult<TrainOutput> {
    let cfg = load_config(config, overrides)?;
    refuse_existing(&out_dir.join(CHECKPOINT_FILE), overwrite)?;
    let ds = prepare_dataset(&cfg, data)?;
    ensure_dir(out_dir)?;
    let (params, log) = run_training(&cfg, &ds, out_dir)?;
    info!(
        "best epoch {} of {} (val AUC {:.4})",
        log.best_epoch,
        log.records.len(),
        log.best_val_auc
    );
    Ok(TrainOutput {
        params,
        log,
        config: cfg,
    })
}

// ------------------------------------------------------------------- audit

/// Config used by commands that operate on an existing run: the explicit
/// path, else the run directory's resolved config, else defaults.
fn run_config(
    config: Option<&Path>,
    run_dir: &Path,
    overrides: &Overrides,
) -> CliResult<RunConfig> {
    let resolved = run_dir.join(RESOLVED_CONFIG_FILE);
    match config {
        Some(p) => load_config(Some(p), overrides),
        None if resolved.exists() => load_config(Some(&resolved), overrides),
        None => load_config(None, overrides),
    }
}

fn checkpoint_path(checkpoint: Option<&Path>, run_dir: &Path) -> PathBuf {
    checkpoint.map_or_else(|| run_dir.join(CHECKPOINT_FILE), Path::to_path_buf)
}

pub fn audit_reports(
    cfg: &RunConfig,
    params: &ModelParams,
    ds: &Dataset,
    attributes: &[String],
) -> CliResult<Vec<FairnessReport>> {
    for attr in attributes {
        ds.attribute(attr)?;
    }
    let split = split_dataset(cfg, ds)?;
    attributes
        .iter()
        .map(|attr| {
            Ok(fairness_report_with_source(
                params,
                &split.val,
                &split.test,
                attr,
                &split.val_id,
            )?)
        })
        .collect()
}

pub fn cmd_audit(
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    attributes: &[String],
    out_dir: &Path,
    overwrite: bool,
) -> CliResult<Vec<FairnessReport>> {
    let cfg = run_config(config, out_dir, &Overrides::default())?;
    let params = ModelParams::load_checkpoint(checkpoint_path(checkpoint, out_dir))?;
    let ds = prepare_dataset(&cfg, data)?;
    let attributes: Vec<String> = if attributes.is_empty() {
        cfg.audit.attributes.clone()
    } else {
        attributes.to_vec()
    };
    let reports = audit_reports(&cfg, &params, &ds, &attributes)?;

    ensure_dir(out_dir)?;
    let combined = out_dir.join("fairness_table.txt");
    refuse_existing(&combined, overwrite)?;
    let mut table = String::new();
    for r in &reports {
        let json =
            serde_json::to_string_pretty(r).map_err(|e| NirError::Serialization(e.to_string()))?;
        write_file(
            &out_dir.join(format!("fairness_{}.json", r.attribute)),
            json,
        )?;
        write_file(
            &out_dir.join(format!("fairness_{}.txt", r.attribute)),
            r.to_table(),
        )?;
        table.push_str(&r.to_table());
        table.push('\n');
    }
    write_file(&combined, &table)?;
    Ok(reports)
}

// ----------------------------------------------------------------- analyze

/// Matrix plus the metadata written next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisExport {
    pub matrix: ActivationMatrix,
    pub privileged_cell: String,
    pub entanglement_score: f64,
    pub k: usize,
}

pub fn parse_cell(spec: &str) -> CliResult<SubgroupCell> {
    spec.parse::<SubgroupCell>().map_err(|_| {
        CliError::Usage(format!(
            "invalid cell spec `{spec}`; expected {CELL_GRAMMAR}"
        ))
    })
}

/// Analysis over the full dataset with the configured cells.
pub fn analyze(
    cfg: &RunConfig,
    params: &ModelParams,
    ds: &Dataset,
    reference: &SubgroupCell,
    k: usize,
) -> CliResult<AnalysisExport> {
    let mut analysis = cfg.analysis.clone();
    analysis.reference = reference.to_string();
    let cells = analysis.resolved_cells()?;
    let neurons = top_k_neurons(params, ds, reference, k)?;
    let matrix = subgroup_activation_matrix(params, ds, &neurons, &cells, reference)?;
    let privileged = parse_cell(&analysis.privileged)?.to_string();
    let score = entanglement_score(&matrix, &privileged, &reference.to_string())?;
    Ok(AnalysisExport {
        matrix,
        privileged_cell: privileged,
        entanglement_score: score,
        k,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_analyze(
    config: Option<&Path>,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    cell: Option<&str>,
    k: Option<usize>,
    out_dir: &Path,
    overwrite: bool,
) -> CliResult<AnalysisExport> {
    let cfg = run_config(config, out_dir, &Overrides::default())?;
    let reference = parse_cell(cell.unwrap_or(&cfg.analysis.reference))?;
    let k = k.unwrap_or(cfg.analysis.k);
    let params = ModelParams::load_checkpoint(checkpoint_path(checkpoint, out_dir))?;
    let ds = prepare_dataset(&cfg, data)?;
    let export = analyze(&cfg, &params, &ds, &reference, k)?;

    ensure_dir(out_dir)?;
    let csv_path = out_dir.join(MATRIX_CSV_FILE);
    refuse_existing(&csv_path, overwrite)?;
    let mut buf = Vec::new();
    export.matrix.write_csv(&mut buf)?;
    write_file(&csv_path, buf)?;
    let json = serde_json::to_string_pretty(&export)
        .map_err(|e| NirError::Serialization(e.to_string()))?;
    write_file(&out_dir.join(MATRIX_JSON_FILE), json)?;
    let mut text = export.matrix.to_table();
    let _ = writeln!(
        text,
        "entanglement score ({} vs reference): {:.6}",
        export.privileged_cell, export.entanglement_score
    );
    write_file(&out_dir.join("activation_matrix.txt"), text)?;
    Ok(export)
}

// ----------------------------------------------------------------- compare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDisparity {
    pub delta_tpr: Option<f64>,
    pub delta_fpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub lambda: f64,
    pub auc: f64,
    pub best_epoch: usize,
    /// Probe incidence variance of the returned (best-epoch) model.
    pub probe_variance: f64,
    pub disparities: BTreeMap<String, AttributeDisparity>,
    pub variance_trace: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub seed: u64,
    pub split: String,
    pub baseline: MethodSummary,
    pub nir: MethodSummary,
    /// `nir − baseline` for every scalar.
    pub delta_auc: f64,
    pub delta_probe_variance: f64,
    pub delta_disparities: BTreeMap<String, AttributeDisparity>,
}

fn sub(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

impl CompareSummary {
    /// Side-by-side layout: per attribute one row per method, then AUC.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("undef".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:<10} {:>12} {:>12} {:>14}",
            "attribute", "method", "dTPR (%)", "dFPR (%)", "probe var"
        );
        for (attr, base) in &self.baseline.disparities {
            let nir = &self.nir.disparities[attr];
            for (name, m, d) in [("BCE", &self.baseline, base), ("NIR", &self.nir, nir)] {
                let _ = writeln!(
                    s,
                    "{:<12} {:<10} {:>12} {:>12} {:>14.6e}",
                    attr,
                    format!("{name} λ={}", m.lambda),
                    pct(d.delta_tpr),
                    pct(d.delta_fpr),
                    m.probe_variance
                );
            }
        }
        let _ = writeln!(
            s,
            "\n{:<12} {:>12} {:>12} {:>12}",
            "", "BCE AUC", "NIR AUC", "dAUC"
        );
        let _ = writeln!(
            s,
            "{:<12} {:>12.2} {:>12.2} {:>+12.2}",
            "test",
            100.0 * self.baseline.auc,
            100.0 * self.nir.auc,
            100.0 * self.delta_auc
        );
        s
    }
}

fn summarize(
    cfg: &RunConfig,
    params: &ModelParams,
    log: &TrainingLog,
    ds: &Dataset,
) -> Result<MethodSummary, NirError> {
    let reports = audit_reports(cfg, params, ds, &cfg.audit.attributes).map_err(|e| match e {
        CliError::Core(e) => e,
        other => NirError::Contract(other.to_string()),
    })?;
    Ok(MethodSummary {
        lambda: cfg.train.lambda,
        auc: reports[0].auc,
        best_epoch: log.best_epoch,
        probe_variance: log.best_record().probe_variance,
        disparities: reports
            .iter()
            .map(|r| {
                (
                    r.attribute.clone(),
                    AttributeDisparity {
                        delta_tpr: r.delta_tpr,
                        delta_fpr: r.delta_fpr,
                    },
                )
            })
            .collect(),
        variance_trace: variance_trace(log),
    })
}

/// Baseline (λ = 0) and NIR (configured λ) on the same data, split and
/// seed. Run artifacts go to `out_dir/baseline` and `out_dir/nir`.
pub fn compare(cfg: &RunConfig, ds: &Dataset, out_dir: &Path) -> CliResult<CompareSummary> {
    let run = |side: &'static str, lambda: f64| -> CliResult<MethodSummary> {
        let mut c = cfg.clone();
        c.train.lambda = lambda;
        let dir = out_dir.join(side);
        ensure_dir(&dir)?;
        let wrap = |source| CliError::Side { side, source };
        let (params, log) = run_training(&c, ds, &dir).map_err(wrap)?;
        summarize(&c, &params, &log, ds).map_err(wrap)
    };
    let baseline = run("baseline", 0.0)?;
    let nir = run("nir", cfg.train.lambda)?;
    let delta_disparities = baseline
        .disparities
        .iter()
        .map(|(attr, b)| {
            let n = &nir.disparities[attr];
            (
                attr.clone(),
                AttributeDisparity {
                    delta_tpr: sub(n.delta_tpr, b.delta_tpr),
                    delta_fpr: sub(n.delta_fpr, b.delta_fpr),
                },
            )
        })
        .collect();
    Ok(CompareSummary {
        seed: cfg.train.seed,
        split: split_dataset(cfg, ds)?.val_id,
        delta_auc: nir.auc - baseline.auc,
        delta_probe_variance: nir.probe_variance - baseline.probe_variance,
        delta_disparities,
        baseline,
        nir,
    })
}

pub fn cmd_compare(
    config: Option<&Path>,
    data: Option<&Path>,
    out_dir: &Path,
    overrides: &Overrides,
    overwrite: bool,
) -> CliResult<CompareSummary> {
    let cfg = load_config(config, overrides)?;
    refuse_existing(&out_dir.join(SUMMARY_FILE), overwrite)?;
    let ds = prepare_dataset(&cfg, data)?;
    ensure_dir(out_dir)?;
    let summary = compare(&cfg, &ds, out_dir)?;
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| NirError::Serialization(e.to_string()))?;
    write_file(&out_dir.join(SUMMARY_FILE), json)?;
    write_file(&out_dir.join("compare_table.txt"), summary.to_table())?;
    Ok(summary)
}
