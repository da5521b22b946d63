//! Command-line front end: one TOML configuration, dotted overrides, and the
//! subcommands that drive the pipeline end to end.
//!
//! Exit codes: 0 on success, 1 for anything that fails along the way, and 2
//! when `eval` or `ablate` finish but one of their headline comparisons
//! lands the wrong way round.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    generate_dataset, load_eval_cases, load_manifest, load_orbits, verify_dataset, DatasetConfig,
    Split,
};
use crate::diffcore::{
    load_latest_checkpoint, make_schedule, Checkpoint, Denoiser, DenoiserParams, DiffusionConfig,
    ModelConfig, Schedule, TrainConfig, Trainer,
};
use crate::error::{Error, Result};
use crate::evalkit::{
    ablation_trend_failures, evaluate_cases, format_ablation_table, format_summary_table,
    orbit_report, run_ablation, summarize, HarnessConfig,
};
use crate::propagate::{
    run_dual_stream, run_single_stream, select_anchor, DualStreamConfig, Falloff, FusionSchedule,
    ResyncMode,
};
use crate::sampler::{
    init_state, sample_orbit, state_to_sequence, ModelPredictor, NoiseMode, SamplerHook,
    SnapshotHook,
};
use crate::sequence::ViewSequence;
use crate::util::{atomic_write, derive_seed, sha256_file, sha256_hex, DirLock};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    /// Reverse-diffusion steps after respacing.
    pub steps: usize,
    pub seed: u64,
    pub noise: NoiseMode,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { steps: 50, seed: 11, noise: NoiseMode::Ancestral }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    pub falloff: Falloff,
    pub refine_from: f64,
    pub refine_lambda: f64,
    pub resync: ResyncMode,
}

impl Default for EditSection {
    fn default() -> Self {
        let fusion = FusionSchedule::default();
        EditSection {
            falloff: fusion.falloff,
            refine_from: fusion.refine_from,
            refine_lambda: fusion.refine_lambda,
            resync: ResyncMode::Always,
        }
    }
}

impl EditSection {
    pub fn fusion(&self) -> FusionSchedule {
        FusionSchedule {
            falloff: self.falloff,
            refine_from: self.refine_from,
            refine_lambda: self.refine_lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub train_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            data_dir: PathBuf::from("runs/data"),
            train_dir: PathBuf::from("runs/train"),
            out_dir: PathBuf::from("runs/out"),
        }
    }
}

/// The whole run configuration. Every section falls back to its defaults, so
/// a config file only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub sample: SampleSection,
    pub edit: EditSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.diffusion.validate()?;
        self.train.validate()?;
        if self.model.channels != self.dataset.orbit.channels {
            return Err(Error::Config(format!(
                "model.channels = {} does not match dataset.orbit.channels = {}",
                self.model.channels, self.dataset.orbit.channels
            )));
        }
        if self.dataset.orbit.resolution % 4 != 0 {
            return Err(Error::Config(format!(
                "dataset.orbit.resolution = {} must be divisible by 4",
                self.dataset.orbit.resolution
            )));
        }
        if self.sample.steps == 0 {
            return Err(Error::Config("sample.steps must be positive".into()));
        }
        self.edit.fusion().validate()?;
        Ok(())
    }
}

/// Loads the configuration, layering dotted `key=value` overrides on top of
/// the file (or the built-in defaults when no file is given).
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut value: toml::Value = match path {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
        None => toml::Value::try_from(RunConfig::default())
            .map_err(|e| Error::Config(format!("default configuration is unserializable: {e}")))?,
    };
    for entry in overrides {
        apply_override(&mut value, entry)?;
    }
    let cfg: RunConfig = value.try_into().map_err(Error::Toml)?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_override(root: &mut toml::Value, entry: &str) -> Result<()> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {entry:?} is not of the form key=value")))?;
    let parsed = parse_override_value(raw);
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("override key {key:?} has an empty segment")));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?} descends into a non-table")))?;
        if i + 1 == parts.len() {
            table.insert((*part).to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry((*part).to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("split never yields an empty part list");
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Accept bare scalars the way TOML would read them; anything that does
    // not parse as a TOML value is taken as a string.
    if let Ok(doc) = toml::from_str::<toml::Value>(&format!("v = {raw}")) {
        if let Some(v) = doc.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

/// Short digest of the resolved configuration, stamped into run manifests so
/// outputs can be traced to the exact settings that produced them.
pub fn config_hash(cfg: &RunConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    sha256_hex(&bytes)[..12].to_string()
}

#[derive(Parser)]
#[command(
    name = "orbitedit",
    about = "Train a small orbit diffusion model and propagate single-view edits around it",
    version
)]
pub struct Cli {
    /// Path to a TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Dotted configuration override, e.g. --set train.epochs=12. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Override the seed of the subcommand being run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate (or verify) the procedural orbit dataset.
    Gen,
    /// Train the view-sequence denoiser, resuming from the latest checkpoint.
    Train,
    /// Propagate the edit of one test case around its orbit.
    Edit(EditArgs),
    /// Sample an orbit conditioned on one test case's identity view.
    Sample(SampleArgs),
    /// Score single-stream and dual-stream settings on the test split.
    Eval,
    /// Score the fusion-feature ladder on the test split.
    Ablate,
    /// Report the resolved config, dataset state, and latest checkpoint.
    Inspect,
}

#[derive(Args)]
pub struct EditArgs {
    /// Test-case index.
    #[arg(long, default_value_t = 0)]
    pub case: usize,

    /// Override the automatically selected anchor view.
    #[arg(long)]
    pub anchor: Option<usize>,

    /// Resynchronization mode: always or never.
    #[arg(long)]
    pub resync: Option<ResyncMode>,

    /// Disable attention sharing between the streams.
    #[arg(long = "no-cva")]
    pub no_cva: bool,

    /// Disable distance-shaped blend weights (use flat averaging).
    #[arg(long = "no-spf")]
    pub no_spf: bool,
}

#[derive(Args)]
pub struct SampleArgs {
    /// Test-case index.
    #[arg(long, default_value_t = 0)]
    pub case: usize,

    /// Also write the partially denoised state every N steps.
    #[arg(long = "snapshot-every")]
    pub snapshot_every: Option<usize>,
}

/// Entry point used by the binary; returns the process exit code. Any
/// operational failure exits 1. `eval` and `ablate` exit 2 when their runs
/// complete but a headline comparison lands the wrong way round.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            1
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let mut cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Gen => cfg.dataset.seed = seed,
            Command::Train => cfg.train.seed = seed,
            _ => cfg.sample.seed = seed,
        }
    }
    match &cli.command {
        Command::Gen => cmd_gen(&cfg).map(|()| 0),
        Command::Train => cmd_train(&cfg).map(|()| 0),
        Command::Edit(args) => cmd_edit(&cfg, args).map(|()| 0),
        Command::Sample(args) => cmd_sample(&cfg, args).map(|()| 0),
        Command::Eval => cmd_eval(&cfg),
        Command::Ablate => cmd_ablate(&cfg),
        Command::Inspect => cmd_inspect(&cfg).map(|()| 0),
    }
}

fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let manifest = generate_dataset(&cfg.paths.data_dir, &cfg.dataset)?;
    println!(
        "dataset at {} ready: {} train, {} val, {} test records (config {})",
        cfg.paths.data_dir.display(),
        manifest.records_in(Split::Train).count(),
        manifest.records_in(Split::Val).count(),
        manifest.records_in(Split::Test).count(),
        config_hash(cfg),
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let orbits = load_orbits(&cfg.paths.data_dir, Split::Train)?;
    std::fs::create_dir_all(&cfg.paths.train_dir)?;
    let _lock = DirLock::acquire(&cfg.paths.train_dir)?;

    let mut trainer = match load_latest_checkpoint(&cfg.paths.train_dir) {
        Ok(mut ckpt) => {
            println!("resuming from epoch {}", ckpt.epoch);
            if ckpt.model != cfg.model || ckpt.diffusion != cfg.diffusion {
                return Err(Error::Config(
                    "checkpoint was trained with a different model or schedule; \
                     point paths.train_dir somewhere fresh"
                        .into(),
                ));
            }
            ckpt.train = cfg.train.clone();
            Trainer::resume(ckpt)?
        }
        Err(Error::Train(_)) => {
            Trainer::new(cfg.model.clone(), cfg.diffusion, cfg.train.clone())?
        }
        Err(e) => return Err(e),
    };

    let report = trainer.run(&orbits, Some(&cfg.paths.train_dir))?;
    println!(
        "trained {} epochs ({} steps): loss {:.5} -> {:.5}",
        report.epochs_run, report.steps, report.first_epoch_loss, report.last_epoch_loss
    );
    Ok(())
}

struct LoadedModel {
    net: Denoiser,
    params: DenoiserParams,
    native: Schedule,
}

fn load_model(cfg: &RunConfig) -> Result<LoadedModel> {
    let ckpt: Checkpoint = load_latest_checkpoint(&cfg.paths.train_dir)?;
    if ckpt.model != cfg.model || ckpt.diffusion != cfg.diffusion {
        return Err(Error::Config(
            "checkpoint does not match the configured model or schedule".into(),
        ));
    }
    let net = Denoiser::new(ckpt.model.clone())?;
    let native = make_schedule(&ckpt.diffusion)?;
    Ok(LoadedModel { net, params: DenoiserParams { theta: ckpt.theta }, native })
}

/// Writes `run.json` describing a command's outputs next to them.
fn write_run_record(dir: &Path, command: &str, cfg: &RunConfig, files: &[PathBuf]) -> Result<()> {
    #[derive(Serialize)]
    struct RunRecord {
        command: String,
        config_hash: String,
        outputs: BTreeMap<String, String>,
    }
    let mut outputs = BTreeMap::new();
    for path in files {
        let rel = path
            .strip_prefix(dir)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned();
        outputs.insert(rel, sha256_file(path)?);
    }
    let record = RunRecord {
        command: command.to_string(),
        config_hash: config_hash(cfg),
        outputs,
    };
    atomic_write(&dir.join("run.json"), &serde_json::to_vec_pretty(&record)?)?;
    Ok(())
}

fn cmd_edit(cfg: &RunConfig, args: &EditArgs) -> Result<()> {
    let model = load_model(cfg)?;
    let manifest = load_manifest(&cfg.paths.data_dir)?;
    let record = manifest
        .records_in(Split::Test)
        .nth(args.case)
        .ok_or_else(|| Error::Data(format!("no test case {}", args.case)))?
        .clone();
    let rdir = record.dir(&cfg.paths.data_dir);
    let base = ViewSequence::load_npy(&rdir.join("orbit.npy"))?;
    let truth = ViewSequence::load_npy(&rdir.join("edited.npy"))?;

    let (auto_anchor, counts) = select_anchor(&base, &truth)?;
    let anchor = args.anchor.unwrap_or(auto_anchor);
    let n = base.n_views();

    let dual_cfg = DualStreamConfig {
        steps: cfg.sample.steps,
        noise: cfg.sample.noise,
        fusion: cfg.edit.fusion(),
        resync: args.resync.unwrap_or(cfg.edit.resync),
        progressive_weights: !args.no_spf,
        inject_attention: !args.no_cva,
        ..DualStreamConfig::new(anchor, cfg.sample.seed)
    };

    let out_dir = cfg.paths.out_dir.join("edit").join(format!("case_{:04}", args.case));
    std::fs::create_dir_all(&out_dir)?;
    let _lock = DirLock::acquire(&out_dir)?;

    let (single_seq, _) = run_single_stream(
        &model.net,
        &model.params,
        &model.native,
        truth.frame_owned(0)?,
        n,
        cfg.sample.steps,
        cfg.sample.seed,
        cfg.sample.noise,
    )?;
    let outcome = run_dual_stream(
        &model.net,
        &model.params,
        &model.native,
        truth.frame_owned(0)?,
        truth.frame_owned(anchor)?,
        n,
        &dual_cfg,
    )?;

    let single_report = orbit_report(&single_seq, &truth)?;
    let dual_report = orbit_report(&outcome.sequence, &truth)?;
    println!(
        "case {} anchor {anchor} (auto {auto_anchor}, visibility {counts:?})",
        args.case
    );
    println!(
        "single stream {:.2} dB / {:.4} ssim, dual stream {:.2} dB / {:.4} ssim",
        single_report.mean_psnr_db,
        single_report.mean_ssim,
        dual_report.mean_psnr_db,
        dual_report.mean_ssim
    );

    #[derive(Serialize)]
    struct EditReport<'a> {
        case: usize,
        anchor: usize,
        auto_anchor: usize,
        visibility: &'a [usize],
        alpha: Vec<f64>,
        settings: &'a DualStreamConfig,
        single: &'a crate::evalkit::OrbitReport,
        dual: &'a crate::evalkit::OrbitReport,
    }
    let report = EditReport {
        case: args.case,
        anchor,
        auto_anchor,
        visibility: &counts,
        alpha: outcome.alpha.to_vec(),
        settings: &dual_cfg,
        single: &single_report,
        dual: &dual_report,
    };

    let mut files = Vec::new();
    let write_seq = |name: &str, seq: &ViewSequence, files: &mut Vec<PathBuf>| -> Result<()> {
        let npy = out_dir.join(format!("{name}.npy"));
        seq.save_npy(&npy)?;
        let png = out_dir.join(format!("{name}.png"));
        seq.save_strip_png(&png)?;
        files.push(npy);
        files.push(png);
        Ok(())
    };
    write_seq("base", &base, &mut files)?;
    write_seq("target", &truth, &mut files)?;
    write_seq("single", &single_seq, &mut files)?;
    write_seq("dual", &outcome.sequence, &mut files)?;
    let report_path = out_dir.join("report.json");
    atomic_write(&report_path, &serde_json::to_vec_pretty(&report)?)?;
    files.push(report_path);
    write_run_record(&out_dir, "edit", cfg, &files)?;
    println!("outputs in {}", out_dir.display());
    Ok(())
}

fn cmd_sample(cfg: &RunConfig, args: &SampleArgs) -> Result<()> {
    let model = load_model(cfg)?;
    let manifest = load_manifest(&cfg.paths.data_dir)?;
    let record = manifest
        .records_in(Split::Test)
        .nth(args.case)
        .ok_or_else(|| Error::Data(format!("no test case {}", args.case)))?
        .clone();
    let rdir = record.dir(&cfg.paths.data_dir);
    let base = ViewSequence::load_npy(&rdir.join("orbit.npy"))?;
    let n = base.n_views();

    let out_dir = cfg.paths.out_dir.join("sample").join(format!("case_{:04}", args.case));
    std::fs::create_dir_all(&out_dir)?;
    let _lock = DirLock::acquire(&out_dir)?;

    let schedule = model.native.respaced(cfg.sample.steps)?;
    let cond = crate::diffcore::Conditioning::new(base.frame_owned(0)?)?;
    let mut pred = ModelPredictor::new(&model.net, &model.params, cond, 0);
    let state = init_state(
        (n, base.resolution(), base.resolution(), base.channels()),
        &schedule,
        derive_seed(cfg.sample.seed, "front"),
    );

    let mut snapshots = SnapshotHook::new(args.snapshot_every.unwrap_or(0));
    let mut hooks: Vec<&mut dyn SamplerHook> = Vec::new();
    if args.snapshot_every.is_some() {
        hooks.push(&mut snapshots);
    }
    let x = sample_orbit(state, &schedule, &mut pred, cfg.sample.noise, &mut hooks)?;
    let seq = state_to_sequence(&x)?;

    let report = orbit_report(&seq, &base)?;
    println!(
        "sampled case {} in {} steps: {:.2} dB / {:.4} ssim against the rendered orbit",
        args.case, cfg.sample.steps, report.mean_psnr_db, report.mean_ssim
    );

    let mut files = Vec::new();
    let npy = out_dir.join("sampled.npy");
    seq.save_npy(&npy)?;
    files.push(npy);
    let png = out_dir.join("sampled.png");
    seq.save_strip_png(&png)?;
    files.push(png);
    for (t, snap) in &snapshots.snapshots {
        let path = out_dir.join(format!("snapshot_t{t:04}.png"));
        state_to_sequence(snap)?.save_strip_png(&path)?;
        files.push(path);
    }
    let report_path = out_dir.join("report.json");
    atomic_write(&report_path, &serde_json::to_vec_pretty(&report)?)?;
    files.push(report_path);
    write_run_record(&out_dir, "sample", cfg, &files)?;
    println!("outputs in {}", out_dir.display());
    Ok(())
}

/// Evaluation renders truth itself, so it follows the orbit geometry the
/// dataset on disk was actually generated with.
fn harness_config(cfg: &RunConfig) -> Result<HarnessConfig> {
    let manifest = load_manifest(&cfg.paths.data_dir)?;
    Ok(HarnessConfig {
        orbit: manifest.config.orbit,
        steps: cfg.sample.steps,
        seed: cfg.sample.seed,
        // Comparisons run on the posterior mean so arm deltas measure the
        // mechanism, not sampler noise. `sample` and `edit` keep cfg noise.
        noise: NoiseMode::MeanOnly,
        fusion: cfg.edit.fusion(),
        resync: cfg.edit.resync,
    })
}

fn cmd_eval(cfg: &RunConfig) -> Result<i32> {
    let model = load_model(cfg)?;
    let cases = load_eval_cases(&cfg.paths.data_dir)?;
    let harness = harness_config(cfg)?;

    let rows = evaluate_cases(&model.net, &model.params, &model.native, &cases, &harness)?;
    let summary = summarize(&rows, harness.orbit.n_views)?;
    print!("{}", format_summary_table(&summary));

    let out_dir = cfg.paths.out_dir.join("eval");
    std::fs::create_dir_all(&out_dir)?;
    let _lock = DirLock::acquire(&out_dir)?;
    let mut jsonl = String::new();
    for row in &rows {
        jsonl.push_str(&serde_json::to_string(row)?);
        jsonl.push('\n');
    }
    let rows_path = out_dir.join("scenes.jsonl");
    atomic_write(&rows_path, jsonl.as_bytes())?;
    let summary_path = out_dir.join("summary.json");
    atomic_write(&summary_path, &serde_json::to_vec_pretty(&summary)?)?;
    write_run_record(&out_dir, "eval", cfg, &[rows_path, summary_path])?;
    println!("reports in {}", out_dir.display());

    let failures = summary.trend_failures();
    for failure in &failures {
        eprintln!("trend check failed: {failure}");
    }
    Ok(if failures.is_empty() { 0 } else { 2 })
}

fn cmd_ablate(cfg: &RunConfig) -> Result<i32> {
    let model = load_model(cfg)?;
    let cases = load_eval_cases(&cfg.paths.data_dir)?;
    let harness = harness_config(cfg)?;

    let rows = run_ablation(&model.net, &model.params, &model.native, &cases, &harness)?;
    print!("{}", format_ablation_table(&rows));

    let out_dir = cfg.paths.out_dir.join("ablate");
    std::fs::create_dir_all(&out_dir)?;
    let _lock = DirLock::acquire(&out_dir)?;
    let path = out_dir.join("ablation.json");
    atomic_write(&path, &serde_json::to_vec_pretty(&rows)?)?;
    write_run_record(&out_dir, "ablate", cfg, &[path])?;
    println!("reports in {}", out_dir.display());

    let failures = ablation_trend_failures(&rows);
    for failure in &failures {
        eprintln!("trend check failed: {failure}");
    }
    Ok(if failures.is_empty() { 0 } else { 2 })
}

fn cmd_inspect(cfg: &RunConfig) -> Result<()> {
    println!("config hash {}", config_hash(cfg));
    println!(
        "model: {} params across {} attention blocks",
        Denoiser::new(cfg.model.clone())?.param_count(),
        cfg.model.blocks
    );

    match verify_dataset(&cfg.paths.data_dir) {
        Ok(manifest) => {
            println!(
                "dataset {}: {} train / {} val / {} test records, digests verified",
                cfg.paths.data_dir.display(),
                manifest.records_in(Split::Train).count(),
                manifest.records_in(Split::Val).count(),
                manifest.records_in(Split::Test).count(),
            );
        }
        Err(Error::Data(msg)) => println!("dataset: {msg}"),
        Err(e) => return Err(e),
    }

    match load_latest_checkpoint(&cfg.paths.train_dir) {
        Ok(ckpt) => println!(
            "checkpoint: epoch {}, step {}, {} parameters",
            ckpt.epoch,
            ckpt.step,
            ckpt.theta.len()
        ),
        Err(Error::Train(msg)) => println!("checkpoint: {msg}"),
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
            println!("checkpoint: train directory does not exist yet")
        }
        Err(e) => return Err(e),
    }
    Ok(())
}

impl clap::builder::ValueParserFactory for ResyncMode {
    type Parser = clap::builder::ValueParser;

    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| {
            ResyncMode::from_str(s).map_err(|e| e.to_string())
        })
    }
}
