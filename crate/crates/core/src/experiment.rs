//! Reproducible experiment runs: presets, input loading, staged output and
//! run manifests. The `ecf-lab` binary is a thin argument parser over the
//! `cmd_*` functions here.
//!
//! Every command validates its inputs before touching the output directory,
//! writes all files into a staging directory and moves them into place only
//! after the run succeeded. `manifest.json` is written last.
//!
//! Seeds: `--seed` is the master seed. Data for a run comes from
//! `derive_seed(master, DATA, k)`, evaluation samples from
//! `derive_seed(seed, EVAL, 0)` and the `i`-th training run of a sweep uses
//! `run_seed(master, i)`. A single `train` run keeps the config's own `seed`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::ecf::{self, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{self, ExperimentRow};
use crate::feature_model::{
    make_ood_spec, make_paired_dataset, sample_dataset, write_dataset_csv, BlockDims, FeatureSpec,
    OodShift,
};
use crate::fisher::{self, LinearClassifier};
use crate::numeric::relative_l2;
use crate::seed::{derive_seed, derived_rng, domain};

pub const PRESET_REFERENCE: &str = "reference";
pub const PRESET_HARD: &str = "hard";
pub const PRESETS: [&str; 2] = [PRESET_REFERENCE, PRESET_HARD];

/// Published seed of the hard preset's means.
pub const HARD_PRESET_SEED: u64 = 448;
/// Every mean of the hard preset is drawn uniformly from this range.
pub const HARD_MEAN_RANGE: (f64, f64) = (0.2, 0.6);

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// All-ones means, unit variances, one dimension per block.
pub fn reference_spec() -> FeatureSpec {
    FeatureSpec::uniform(BlockDims::new(1, 1, 1), [1.0; 3], [1.0; 3])
}

/// Dims 4/4/8, unit variances, means drawn from [`HARD_MEAN_RANGE`] with
/// `derived_rng(HARD_PRESET_SEED, PRESET, 0)` in block order.
pub fn hard_spec() -> FeatureSpec {
    let mut rng = derived_rng(HARD_PRESET_SEED, domain::PRESET, 0);
    let (lo, hi) = HARD_MEAN_RANGE;
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
    let mu_edited = draw(4);
    let mu_unedited = draw(4);
    let mu_correlated = draw(8);
    FeatureSpec {
        d_edited: 4,
        d_unedited: 4,
        d_correlated: 8,
        mu_edited,
        mu_unedited,
        mu_correlated,
        var_edited: vec![1.0; 4],
        var_unedited: vec![1.0; 4],
        var_correlated: vec![1.0; 8],
    }
}

pub fn preset(name: &str) -> Result<FeatureSpec> {
    match name {
        PRESET_REFERENCE => Ok(reference_spec()),
        PRESET_HARD => Ok(hard_spec()),
        other => Err(Error::InvalidArgument(format!(
            "unknown preset {other:?} (expected one of {})",
            PRESETS.join(", ")
        ))),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Io(_) => EXIT_FAILURE,
        _ => EXIT_VALIDATION,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Appends ` (line N)` when a validation message names a key that appears at
/// the start of a line of `text`.
fn locate(text: &str, err: Error) -> Error {
    let msg = match &err {
        Error::InvalidSpec(m) | Error::Config(m) => m.clone(),
        _ => return err,
    };
    if msg.contains("line ") {
        return err;
    }
    let key: String = msg
        .chars()
        .take_while(|c| c.is_ascii_alphanumeric() || *c == '_')
        .collect();
    let line = text.lines().position(|l| {
        l.trim_start()
            .strip_prefix(key.as_str())
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    });
    match (key.is_empty(), line) {
        (false, Some(i)) => {
            let m = format!("{msg} (line {})", i + 1);
            match err {
                Error::InvalidSpec(_) => Error::InvalidSpec(m),
                _ => Error::Config(m),
            }
        }
        _ => err,
    }
}

/// Where a spec or config came from, and the digest of the bytes consumed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InputRecord {
    pub role: String,
    pub source: String,
    pub sha256: String,
}

#[derive(Clone, Debug)]
pub struct LoadedSpec {
    pub spec: FeatureSpec,
    /// Preset name or file stem.
    pub id: String,
    pub record: InputRecord,
}

pub enum SpecSource<'a> {
    Preset(&'a str),
    File(&'a Path),
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))
}

pub fn load_spec(source: SpecSource) -> Result<LoadedSpec> {
    match source {
        SpecSource::Preset(name) => {
            let spec = preset(name)?;
            let text = spec.to_toml_string();
            Ok(LoadedSpec {
                spec,
                id: name.to_string(),
                record: InputRecord {
                    role: "spec".into(),
                    source: format!("preset:{name}"),
                    sha256: sha256_hex(text.as_bytes()),
                },
            })
        }
        SpecSource::File(path) => {
            let text = read_text(path)?;
            let spec = FeatureSpec::from_toml_str(&text)
                .map_err(|e| locate(&text, e))
                .map_err(|e| with_path(path, e))?;
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "spec".into());
            Ok(LoadedSpec {
                spec,
                id,
                record: InputRecord {
                    role: "spec".into(),
                    source: path.display().to_string(),
                    sha256: sha256_hex(text.as_bytes()),
                },
            })
        }
    }
}

fn with_path(path: &Path, err: Error) -> Error {
    let p = path.display();
    match err {
        Error::InvalidSpec(m) => Error::InvalidSpec(format!("{p}: {m}")),
        Error::Config(m) => Error::Config(format!("{p}: {m}")),
        other => other,
    }
}

#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: TrainConfig,
    pub record: InputRecord,
}

/// Reads a training config, or the defaults when `path` is `None`.
pub fn load_config(path: Option<&Path>) -> Result<LoadedConfig> {
    match path {
        None => {
            let config = TrainConfig::default();
            Ok(LoadedConfig {
                record: InputRecord {
                    role: "config".into(),
                    source: "default".into(),
                    sha256: sha256_hex(config.to_toml_string().as_bytes()),
                },
                config,
            })
        }
        Some(path) => {
            let text = read_text(path)?;
            let config = TrainConfig::from_toml_str(&text)
                .map_err(|e| locate(&text, e))
                .map_err(|e| with_path(path, e))?;
            Ok(LoadedConfig {
                config,
                record: InputRecord {
                    role: "config".into(),
                    source: path.display().to_string(),
                    sha256: sha256_hex(text.as_bytes()),
                },
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpecSummary {
    pub id: String,
    pub d_edited: usize,
    pub d_unedited: usize,
    pub d_correlated: usize,
    pub norm_phi_e: f64,
    pub norm_phi_u: f64,
    pub norm_phi_r: f64,
}

impl SpecSummary {
    fn new(loaded: &LoadedSpec) -> Result<Self> {
        let (e, u, r) = fisher::closed_form_ori(&loaded.spec)?.block_norms();
        Ok(Self {
            id: loaded.id.clone(),
            d_edited: loaded.spec.d_edited,
            d_unedited: loaded.spec.d_unedited,
            d_correlated: loaded.spec.d_correlated,
            norm_phi_e: e,
            norm_phi_u: u,
            norm_phi_r: r,
        })
    }
}

/// Written last by every command. Timestamps are Unix seconds, taken from
/// `SOURCE_DATE_EPOCH` when it is set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub master_seed: u64,
    pub inputs: Vec<InputRecord>,
    pub spec_summary: SpecSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<TrainConfig>,
    /// Command arguments, sorted by name.
    pub arguments: serde_json::Map<String, serde_json::Value>,
    pub started_at: u64,
    pub finished_at: u64,
    /// Every file the run produced, in write order, ending with the manifest.
    pub outputs: Vec<String>,
}

pub fn timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse::<u64>().ok())
    {
        return t;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Output files are written here first and renamed into `out_dir` on
/// [`Staging::commit`]. Dropping an uncommitted staging area deletes it.
pub struct Staging {
    dir: Option<tempfile::TempDir>,
    out_dir: PathBuf,
    created_out_dir: bool,
    files: Vec<String>,
}

impl Staging {
    pub fn create(out_dir: &Path) -> Result<Self> {
        let created_out_dir = !out_dir.exists();
        fs::create_dir_all(out_dir)?;
        let dir = tempfile::Builder::new()
            .prefix(".ecf-staging-")
            .tempdir_in(out_dir)?;
        Ok(Self {
            dir: Some(dir),
            out_dir: out_dir.to_path_buf(),
            created_out_dir,
            files: Vec::new(),
        })
    }

    fn staged_path(&self, name: &str) -> PathBuf {
        self.dir
            .as_ref()
            .expect("staging directory")
            .path()
            .join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.staged_path(name), bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_with<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    /// Moves every staged file into the output directory, then writes the
    /// manifest with its output list filled in.
    pub fn commit(mut self, mut manifest: RunManifest) -> Result<RunManifest> {
        for name in &self.files {
            fs::rename(self.staged_path(name), self.out_dir.join(name))?;
        }
        manifest.outputs = self.files.clone();
        manifest.outputs.push(MANIFEST_FILE.to_string());
        manifest.finished_at = timestamp();
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let staged = self.staged_path(MANIFEST_FILE);
        fs::write(&staged, text)?;
        fs::rename(staged, self.out_dir.join(MANIFEST_FILE))?;
        if let Some(dir) = self.dir.take() {
            dir.close()?;
        }
        Ok(manifest)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if let Some(dir) = self.dir.take() {
            let _ = dir.close();
            if self.created_out_dir {
                // only succeeds when nothing else was put there
                let _ = fs::remove_dir(&self.out_dir);
            }
        }
    }
}

/// Options shared by every command.
#[derive(Clone, Debug)]
pub struct Common {
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn fmt5(x: f64) -> String {
    format!("{x:.5}")
}

fn fmt5_opt(x: Option<f64>) -> String {
    x.map(fmt5).unwrap_or_default()
}

fn args_map(pairs: &[(&str, serde_json::Value)]) -> serde_json::Map<String, serde_json::Value> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

fn manifest(
    command: &str,
    common: &Common,
    spec: &LoadedSpec,
    config: Option<&LoadedConfig>,
    arguments: serde_json::Map<String, serde_json::Value>,
    started_at: u64,
) -> Result<RunManifest> {
    let mut inputs = vec![spec.record.clone()];
    if let Some(c) = config {
        inputs.push(c.record.clone());
    }
    Ok(RunManifest {
        command: command.to_string(),
        tool_version: TOOL_VERSION.to_string(),
        master_seed: common.seed,
        inputs,
        spec_summary: SpecSummary::new(spec)?,
        config: config.map(|c| c.config.clone()),
        arguments,
        started_at,
        finished_at: started_at,
        outputs: Vec::new(),
    })
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text.into_bytes())
}

pub const ANALYSIS_COLUMNS: [&str; 11] = [
    "spec_id",
    "d_edited",
    "d_unedited",
    "d_correlated",
    "norm_phi_e",
    "norm_phi_u",
    "norm_phi_r",
    "cos_ori",
    "cos_cad",
    "lambda_star",
    "cos_interp",
];

/// Closed-form myopia analysis: `analysis.csv` (one row, empty cells for an
/// undefined `lambda_star`/`cos_interp`) and `phi_{ori,cad,rob}.json`.
pub fn cmd_analyze(common: &Common, spec: &LoadedSpec) -> Result<RunManifest> {
    let started = timestamp();
    let a = fisher::analyze(&spec.spec)?;

    let mut stage = Staging::create(&common.out_dir)?;
    stage.write_with("analysis.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(ANALYSIS_COLUMNS)?;
        w.write_record([
            spec.id.clone(),
            spec.spec.d_edited.to_string(),
            spec.spec.d_unedited.to_string(),
            spec.spec.d_correlated.to_string(),
            fmt5(a.norm_e),
            fmt5(a.norm_u),
            fmt5(a.norm_r),
            fmt5(a.cos_ori),
            fmt5(a.cos_cad),
            fmt5_opt(a.lambda_star),
            fmt5_opt(a.cos_interp),
        ])?;
        w.flush()?;
        Ok(())
    })?;
    stage.write("phi_ori.json", &json_bytes(&a.phi_ori)?)?;
    stage.write("phi_cad.json", &json_bytes(&a.phi_cad)?)?;
    stage.write("phi_rob.json", &json_bytes(&a.phi_rob)?)?;
    let m = manifest("analyze", common, spec, None, Default::default(), started)?;
    stage.commit(m)
}

#[derive(Clone, Debug)]
pub struct SimulateArgs {
    /// Original-only sample count; the CAD pool uses `n / 2` pairs.
    pub n: usize,
    pub noise_sds: Vec<f64>,
    pub export_data: bool,
}

pub const SIMULATE_COLUMNS: [&str; 9] = [
    "arm",
    "noise_sd",
    "n_samples",
    "rel_l2_error",
    "cos_rob",
    "closed_form_cos_rob",
    "norm_e",
    "norm_u",
    "norm_r",
];

/// One Monte Carlo fit against its closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationFit {
    pub arm: String,
    pub noise_sd: Option<f64>,
    pub n_samples: usize,
    pub fitted: LinearClassifier,
    pub rel_l2_error: f64,
    pub cos_rob: f64,
    pub closed_form_cos_rob: f64,
}

fn noise_tag(sd: f64) -> String {
    format!("{sd}").replace('.', "p")
}

/// Monte Carlo discriminants on original-only data and on CAD pools (one per
/// noise level), compared with their closed forms. All CAD pools share the
/// same originals and the same standard-normal misalignment draws, so they
/// differ only through the noise scale.
pub fn simulate(spec: &FeatureSpec, args: &SimulateArgs, seed: u64) -> Result<Vec<SimulationFit>> {
    if args.n < 2 || !args.n.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!(
            "n must be a positive multiple of 4 (even pair count), got {}",
            args.n
        )));
    }
    if let Some(sd) = args
        .noise_sds
        .iter()
        .find(|s| !(s.is_finite() && **s >= 0.0))
    {
        return Err(Error::InvalidArgument(format!(
            "noise sd must be >= 0, got {sd}"
        )));
    }
    let dims = spec.dims();
    let ori = fisher::closed_form_ori(spec)?;
    let cad = fisher::closed_form_cad(spec)?;
    let fit_row =
        |arm: &str, sd: Option<f64>, samples: &[crate::Sample], target: &LinearClassifier| {
            let fitted = fisher::fld_fit(samples, dims)?;
            Ok::<_, Error>(SimulationFit {
                arm: arm.to_string(),
                noise_sd: sd,
                n_samples: samples.len(),
                rel_l2_error: relative_l2(&fitted.weights, &target.weights),
                cos_rob: fisher::cosine_to_robust(&fitted, spec)?,
                closed_form_cos_rob: fisher::cosine_to_robust(target, spec)?,
                fitted,
            })
        };
    let original = sample_dataset(spec, args.n, derive_seed(seed, domain::DATA, 0))?;
    let mut fits = vec![fit_row("original", None, &original, &ori)?];
    for &sd in &args.noise_sds {
        let paired = make_paired_dataset(spec, args.n / 2, sd, derive_seed(seed, domain::DATA, 1))?;
        fits.push(fit_row("cad", Some(sd), &paired.pooled(), &cad)?);
    }
    Ok(fits)
}

/// `simulate.csv`, one `fit_*.json` per row and, with `export_data`, the
/// sampled datasets as CSV.
pub fn cmd_simulate(
    common: &Common,
    spec: &LoadedSpec,
    args: &SimulateArgs,
) -> Result<RunManifest> {
    let started = timestamp();
    let fits = simulate(&spec.spec, args, common.seed)?;
    let dims = spec.spec.dims();

    let mut stage = Staging::create(&common.out_dir)?;
    stage.write_with("simulate.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(SIMULATE_COLUMNS)?;
        for f in &fits {
            let (e, u, r) = f.fitted.block_norms();
            w.write_record([
                f.arm.clone(),
                fmt5_opt(f.noise_sd),
                f.n_samples.to_string(),
                fmt5(f.rel_l2_error),
                fmt5(f.cos_rob),
                fmt5(f.closed_form_cos_rob),
                fmt5(e),
                fmt5(u),
                fmt5(r),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    for f in &fits {
        let name = match f.noise_sd {
            None => format!("fit_{}.json", f.arm),
            Some(sd) => format!("fit_{}_noise_{}.json", f.arm, noise_tag(sd)),
        };
        stage.write(&name, &json_bytes(&f.fitted)?)?;
    }
    if args.export_data {
        let original = sample_dataset(
            &spec.spec,
            args.n,
            derive_seed(common.seed, domain::DATA, 0),
        )?;
        stage.write_with("data_original.csv", |buf| {
            write_dataset_csv(&original, dims, buf)
        })?;
        for &sd in &args.noise_sds {
            let paired = make_paired_dataset(
                &spec.spec,
                args.n / 2,
                sd,
                derive_seed(common.seed, domain::DATA, 1),
            )?;
            stage.write_with(&format!("data_cad_noise_{}.csv", noise_tag(sd)), |buf| {
                write_dataset_csv(&paired.pooled(), dims, buf)
            })?;
        }
    }
    let arguments = args_map(&[
        ("n", args.n.into()),
        ("noise_sd", args.noise_sds.clone().into()),
        ("export_data", args.export_data.into()),
    ]);
    let m = manifest("simulate", common, spec, None, arguments, started)?;
    stage.commit(m)
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub pairs: usize,
    pub noise_sd: f64,
    pub eval_n: usize,
}

pub const EVALUATION_COLUMNS: [&str; 6] = [
    "environment",
    "n",
    "correct",
    "accuracy",
    "err_p2n",
    "err_n2p",
];

fn write_reports(reports: &[eval::EvalReport], buf: &mut Vec<u8>) -> Result<()> {
    let mut w = csv::Writer::from_writer(buf);
    w.write_record(EVALUATION_COLUMNS)?;
    for r in reports {
        w.write_record([
            r.environment.clone(),
            r.n.to_string(),
            r.correct.to_string(),
            fmt5(r.accuracy),
            r.errors_pos_to_neg.to_string(),
            r.errors_neg_to_pos.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn check_eval_n(n: usize) -> Result<()> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "eval_n must be a positive even count, got {n}"
        )));
    }
    Ok(())
}

/// Trains one model: `model.json`, `history.csv`, `decision.json` (the
/// effective linear map) and `evaluation.csv` (in-distribution, the three
/// shifts and the one-class flips).
pub fn cmd_train(
    common: &Common,
    spec: &LoadedSpec,
    config: &LoadedConfig,
    args: &TrainArgs,
) -> Result<RunManifest> {
    let started = timestamp();
    check_eval_n(args.eval_n)?;
    let data = make_paired_dataset(
        &spec.spec,
        args.pairs,
        args.noise_sd,
        derive_seed(common.seed, domain::DATA, 0),
    )?;
    let (params, history) = ecf::train_ecf(&data, &config.config)?;
    let dims = spec.spec.dims();
    let decision = ecf::effective_linear_map(&params, dims)?;
    let shifts = [
        OodShift::FlipCorrelated,
        OodShift::ZeroCorrelated,
        OodShift::ScaleCorrelated(0.5),
    ];
    let mut reports = eval::ood_suite(&params, &spec.spec, &shifts, args.eval_n, common.seed)?;
    reports.extend(eval::class_shift_reports(
        &params,
        &spec.spec,
        args.eval_n,
        common.seed,
    )?);

    let mut stage = Staging::create(&common.out_dir)?;
    stage.write("model.json", params.to_json().as_bytes())?;
    stage.write_with("history.csv", |buf| history.write_csv(buf))?;
    stage.write("decision.json", &json_bytes(&decision)?)?;
    stage.write_with("evaluation.csv", |buf| write_reports(&reports, buf))?;
    let arguments = args_map(&[
        ("pairs", args.pairs.into()),
        ("noise_sd", args.noise_sd.into()),
        ("eval_n", args.eval_n.into()),
    ]);
    let m = manifest("train", common, spec, Some(config), arguments, started)?;
    stage.commit(m)
}

#[derive(Clone, Debug)]
pub struct AblateArgs {
    pub pairs: usize,
    pub noise_sd: f64,
    pub n_seeds: usize,
    pub shift: OodShift,
    pub eval_n: usize,
}

/// Training seeds of an `n`-run sweep under `master`.
pub fn sweep_seeds(master: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| ecf::run_seed(master, i)).collect()
}

pub fn ablation(
    spec: &FeatureSpec,
    config: &TrainConfig,
    args: &AblateArgs,
    seed: u64,
) -> Result<Vec<ExperimentRow>> {
    check_eval_n(args.eval_n)?;
    if args.n_seeds == 0 {
        return Err(Error::InvalidArgument(
            "at least one seed is required".into(),
        ));
    }
    let data = make_paired_dataset(
        spec,
        args.pairs,
        args.noise_sd,
        derive_seed(seed, domain::DATA, 0),
    )?;
    let ood = make_ood_spec(spec, args.shift);
    eval::ablation_grid(
        &data,
        config,
        &ood,
        &args.shift.name(),
        &sweep_seeds(seed, args.n_seeds),
        args.eval_n,
    )
}

/// `ablation.csv` (four variant rows per seed) and `ablation_summary.csv`.
pub fn cmd_ablate(
    common: &Common,
    spec: &LoadedSpec,
    config: &LoadedConfig,
    args: &AblateArgs,
) -> Result<RunManifest> {
    let started = timestamp();
    config.config.validate()?;
    let rows = ablation(&spec.spec, &config.config, args, common.seed)?;
    let summary = eval::summarize(&rows);

    let mut stage = Staging::create(&common.out_dir)?;
    stage.write_with("ablation.csv", |buf| eval::write_rows_csv(&rows, buf))?;
    stage.write_with("ablation_summary.csv", |buf| {
        eval::write_summary_csv(&summary, buf)
    })?;
    let arguments = args_map(&[
        ("pairs", args.pairs.into()),
        ("noise_sd", args.noise_sd.into()),
        ("seeds", args.n_seeds.into()),
        ("shift", args.shift.name().into()),
        ("eval_n", args.eval_n.into()),
    ]);
    let m = manifest("ablate", common, spec, Some(config), arguments, started)?;
    stage.commit(m)
}

#[derive(Clone, Debug)]
pub struct EfficiencyArgs {
    pub sizes: Vec<usize>,
    pub noise_sd: f64,
    pub n_seeds: usize,
    pub shift: OodShift,
    pub eval_n: usize,
}

pub fn efficiency(
    spec: &FeatureSpec,
    config: &TrainConfig,
    args: &EfficiencyArgs,
    seed: u64,
) -> Result<Vec<ExperimentRow>> {
    check_eval_n(args.eval_n)?;
    if args.n_seeds == 0 {
        return Err(Error::InvalidArgument(
            "at least one seed is required".into(),
        ));
    }
    if args.sizes.contains(&0) {
        return Err(Error::InvalidArgument("sizes must be >= 1".into()));
    }
    eval::data_efficiency_curve(
        spec,
        &args.sizes,
        config,
        args.noise_sd,
        args.shift,
        &sweep_seeds(seed, args.n_seeds),
        args.eval_n,
    )
}

/// `efficiency.csv` (two arms per size and seed) and `efficiency_summary.csv`.
pub fn cmd_efficiency(
    common: &Common,
    spec: &LoadedSpec,
    config: &LoadedConfig,
    args: &EfficiencyArgs,
) -> Result<RunManifest> {
    let started = timestamp();
    config.config.validate()?;
    let rows = efficiency(&spec.spec, &config.config, args, common.seed)?;
    let summary = eval::summarize(&rows);

    let mut stage = Staging::create(&common.out_dir)?;
    stage.write_with("efficiency.csv", |buf| eval::write_rows_csv(&rows, buf))?;
    stage.write_with("efficiency_summary.csv", |buf| {
        eval::write_summary_csv(&summary, buf)
    })?;
    let arguments = args_map(&[
        ("sizes", args.sizes.clone().into()),
        ("noise_sd", args.noise_sd.into()),
        ("seeds", args.n_seeds.into()),
        ("shift", args.shift.name().into()),
        ("eval_n", args.eval_n.into()),
    ]);
    let m = manifest("efficiency", common, spec, Some(config), arguments, started)?;
    stage.commit(m)
}

/// Prints an error to stderr and returns its exit code.
pub fn report_error<W: Write>(err: &Error, mut out: W) -> i32 {
    let _ = writeln!(out, "error: {err}");
    exit_code(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common(dir: &Path) -> Common {
        Common {
            seed: 5,
            out_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn hard_preset_is_fixed_and_valid() {
        let a = hard_spec();
        a.validate().unwrap();
        assert_eq!(a, hard_spec());
        assert_eq!(a.dims(), BlockDims::new(4, 4, 8));
        assert!(a
            .mean()
            .iter()
            .all(|m| (HARD_MEAN_RANGE.0..HARD_MEAN_RANGE.1).contains(m)));
    }

    #[test]
    fn unknown_preset_is_a_validation_error() {
        let e = preset("nope").unwrap_err();
        assert_eq!(exit_code(&e), EXIT_VALIDATION);
    }

    #[test]
    fn exit_codes() {
        let div = Error::Divergence {
            epoch: 1,
            learning_rate: 1.0,
            what: "total loss",
        };
        assert_eq!(exit_code(&div), EXIT_DIVERGENCE);
        assert_eq!(exit_code(&Error::InvalidSpec("x".into())), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::Io("x".into())), EXIT_FAILURE);
    }

    #[test]
    fn validation_errors_point_at_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        fs::write(
            &p,
            "d_edited = 1\nd_unedited = 0\nd_correlated = 0\nmu_edited = [1.0]\n\
             mu_unedited = []\nmu_correlated = []\nvar_edited = [0.0]\n\
             var_unedited = []\nvar_correlated = []\n",
        )
        .unwrap();
        let e = load_spec(SpecSource::File(&p)).unwrap_err();
        assert!(e.to_string().contains("var_edited[0]"), "{e}");
        assert!(e.to_string().contains("(line 7)"), "{e}");
    }

    #[test]
    fn parse_errors_carry_toml_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.toml");
        fs::write(&p, "alpha = 1.0\nbeta = \"x\"\n").unwrap();
        let e = load_config(Some(&p)).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert_eq!(exit_code(&e), EXIT_VALIDATION);
    }

    #[test]
    fn config_defaults_when_keys_omitted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.toml");
        fs::write(&p, "epochs = 3\n").unwrap();
        let c = load_config(Some(&p)).unwrap().config;
        assert_eq!((c.alpha, c.beta, c.epochs), (1.6, 0.1, 3));
    }

    #[test]
    fn analyze_writes_listed_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let spec = load_spec(SpecSource::Preset(PRESET_REFERENCE)).unwrap();
        let m = cmd_analyze(&common(&out), &spec).unwrap();
        let mut on_disk: Vec<String> = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        on_disk.sort();
        let mut listed = m.outputs.clone();
        listed.sort();
        assert_eq!(on_disk, listed);
        let csv = fs::read_to_string(out.join("analysis.csv")).unwrap();
        assert!(
            csv.contains("reference,1,1,1,1.00000,1.00000,1.00000,0.81650,0.70711,0.50000,0.86603")
        );
    }

    #[test]
    fn divergence_leaves_no_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let spec = load_spec(SpecSource::Preset(PRESET_REFERENCE)).unwrap();
        let config = LoadedConfig {
            config: TrainConfig {
                learning_rate: 1e12,
                epochs: 5,
                ..TrainConfig::default()
            },
            record: InputRecord {
                role: "config".into(),
                source: "test".into(),
                sha256: String::new(),
            },
        };
        let args = TrainArgs {
            pairs: 64,
            noise_sd: 0.0,
            eval_n: 100,
        };
        let e = cmd_train(&common(&out), &spec, &config, &args).unwrap_err();
        assert_eq!(exit_code(&e), EXIT_DIVERGENCE);
        assert!(!out.exists());
    }

    #[test]
    fn failed_commit_area_is_removed() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        {
            let mut s = Staging::create(&out).unwrap();
            s.write("a.csv", b"x").unwrap();
        }
        assert!(!out.exists());
    }

    #[test]
    fn simulate_rejects_bad_n() {
        let args = SimulateArgs {
            n: 6,
            noise_sds: vec![0.0],
            export_data: false,
        };
        assert!(simulate(&reference_spec(), &args, 0).is_err());
    }

    #[test]
    fn simulate_shares_originals_across_noise() {
        let args = SimulateArgs {
            n: 4_000,
            noise_sds: vec![0.0, 0.5],
            export_data: false,
        };
        let fits = simulate(&reference_spec(), &args, 1).unwrap();
        assert_eq!(fits.len(), 3);
        // noise only touches the correlated block of edited samples
        assert_eq!(fits[1].fitted.edited(), fits[2].fitted.edited());
        assert!(fits[1].fitted.correlated()[0].abs() < fits[2].fitted.correlated()[0].abs());
    }
}
