//! Command-line experiment pipelines.

pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use advtraj_core::attacks::{attack_batch, threat_violations, AttackConfig, AttackRecord, ThreatModel};
use advtraj_core::augmentation::augment_scene;
use advtraj_core::planner::{episode_jsonl, outcome_csv, run_episode, scenario_suite, OutcomeRow, PredictorSource, SequenceAttackConfig};
use advtraj_core::predictor::checkpoint::{self, Model};
use advtraj_core::predictor::{Batch, Predictor};
use advtraj_core::probe::{run_probe, PROBE_HEADER};
use advtraj_core::scene::generate::generate_dataset;
use advtraj_core::scene::io::{load_dataset, metrics_csv, record_to_json, MetricsRow};
use advtraj_core::scene::{Dataset, Provenance, Record, Scene, Split};
use advtraj_core::seed;
use advtraj_core::training::{evaluate_plan, experiment_csv, run_one, RunReport, RunSpec};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use config::{parse_override, read_config_file, resolve_config, ConfigError, ExperimentConfig, OUT_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_INVALID,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn rt(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "advtraj", version, about = "Adversarially robust trajectory prediction experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON experiment config; defaults apply to every missing field.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config field, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Global seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; beats the config file and the environment.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData(Common),
    /// Augment the training split with the bicycle model.
    Augment(Common),
    /// Train every configured run and evaluate it.
    Train(Common),
    /// Attack the test split and record the perturbations.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        attack: Option<String>,
        #[arg(long)]
        eps: Option<f64>,
        /// Checkpoints to attack; defaults to every trained run.
        #[arg(long)]
        model: Vec<PathBuf>,
    },
    /// Clean and attacked metrics on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        attack: Option<String>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        model: Vec<PathBuf>,
    },
    /// Condition-dependence probe under noisy training histories.
    Probe {
        #[command(flatten)]
        common: Common,
        /// salt_pepper or adversarial; defaults to both.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Closed-loop planner episodes, benign and attacked.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        model: Vec<PathBuf>,
    },
    /// Comparison table over finished runs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory of run reports; defaults to `<out>/runs`.
        #[arg(long)]
        runs: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::Augment(c) | Command::Train(c) => c,
            Command::Attack { common, .. }
            | Command::Eval { common, .. }
            | Command::Probe { common, .. }
            | Command::Simulate { common, .. }
            | Command::Report { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Augment(_) => "augment",
            Command::Train(_) => "train",
            Command::Attack { .. } => "attack",
            Command::Eval { .. } => "eval",
            Command::Probe { .. } => "probe",
            Command::Simulate { .. } => "simulate",
            Command::Report { .. } => "report",
        }
    }

    /// Subcommand flags as config overrides, applied after `--set`.
    fn overrides(&self) -> Vec<(String, Value)> {
        let c = self.common();
        let mut o = Vec::new();
        if let Some(s) = c.seed {
            o.push(("seed".into(), json!(s)));
        }
        if let Some(out) = &c.out {
            o.push(("out_dir".into(), json!(out)));
        }
        match self {
            Command::Attack { attack, eps, .. } => {
                if let Some(a) = attack {
                    o.push(("attack.kind".into(), json!(a)));
                }
                if let Some(e) = eps {
                    o.push(("attack.eps".into(), json!(e)));
                }
            }
            Command::Eval { attack, eps, .. } => {
                if let Some(a) = attack {
                    o.push(("eval.attacks".into(), json!([a])));
                }
                if let Some(e) = eps {
                    o.push(("eval.eps".into(), json!([e])));
                }
            }
            Command::Probe { kind: Some(k), .. } => o.push(("probe.kinds".into(), json!([k]))),
            Command::Simulate { eps: Some(e), .. } => o.push(("simulate.eps".into(), json!(e))),
            _ => {}
        }
        o
    }
}

/// Config for a parsed command line. `env_out` is the value of the output
/// directory variable, ignored when `--out` is given.
pub fn resolve_for(cmd: &Command, env_out: Option<&str>) -> Result<ExperimentConfig> {
    let c = cmd.common();
    let file = c.config.as_deref().map(read_config_file).transpose()?;
    let mut overrides = c.set.iter().map(|s| parse_override(s)).collect::<std::result::Result<Vec<_>, _>>()?;
    overrides.extend(cmd.overrides());
    let env_out = if c.out.is_some() { None } else { env_out };
    Ok(resolve_config(file.as_ref(), &overrides, env_out)?)
}

/// Writes artifacts under the output directory, each with a
/// `<name>.meta.json` sidecar carrying the config digest.
pub struct Outputs {
    pub dir: PathBuf,
    pub digest: String,
    pub command: String,
}

pub const META_SUFFIX: &str = ".meta.json";

impl Outputs {
    pub fn new(cfg: &ExperimentConfig, command: &str) -> Result<Self> {
        let dir = cfg.out_dir.clone();
        std::fs::create_dir_all(&dir).map_err(|e| rt(format!("{}: {e}", dir.display())))?;
        let out = Self { dir, digest: cfg.digest(), command: command.to_string() };
        out.write("resolved_config.json", &cfg.to_json())?;
        out.write(&format!("configs/{}.json", out.digest), &cfg.to_json())?;
        Ok(out)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| rt(format!("{}: {e}", parent.display())))?;
        }
        std::fs::write(&path, contents).map_err(|e| rt(format!("{}: {e}", path.display())))?;
        let meta = json!({
            "artifact": name,
            "command": self.command,
            "config_digest": self.digest,
            "sha256": hex::encode(Sha256::digest(contents.as_bytes())),
        });
        let meta_path = self.dir.join(format!("{name}{META_SUFFIX}"));
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap()).map_err(|e| rt(format!("{}: {e}", meta_path.display())))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }
}

fn dataset_text(ds: &Dataset) -> String {
    ds.records().iter().map(|r| record_to_json(r) + "\n").collect()
}

fn load(path: &Path, hint: &str) -> Result<Dataset> {
    if !path.exists() {
        return Err(rt(format!("{} not found; run `{hint}` first", path.display())));
    }
    load_dataset(path).map_err(rt)
}

fn data_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("data.jsonl")
}

fn runs_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("runs")
}

const MODEL_SUFFIX: &str = ".model.json";
const REPORT_SUFFIX: &str = ".report.json";

fn files_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| rt(format!("{}: {e}", dir.display())))?;
    let mut v: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.to_string_lossy().ends_with(suffix)).collect();
    v.sort();
    Ok(v)
}

fn model_name(path: &Path) -> String {
    let f = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    f.strip_suffix(MODEL_SUFFIX).or_else(|| f.strip_suffix(".json")).unwrap_or(&f).to_string()
}

/// Named checkpoints: the given paths, or every trained run.
fn load_models(cfg: &ExperimentConfig, paths: &[PathBuf]) -> Result<Vec<(String, Model)>> {
    let paths = if paths.is_empty() {
        let dir = runs_dir(cfg);
        if !dir.exists() {
            return Err(rt(format!("{} not found; run `train` first or pass --model", dir.display())));
        }
        files_with_suffix(&dir, MODEL_SUFFIX)?
    } else {
        paths.to_vec()
    };
    if paths.is_empty() {
        return Err(rt("no checkpoints found"));
    }
    let arch = cfg.arch();
    paths
        .iter()
        .map(|p| {
            let m = checkpoint::load(p).map_err(rt)?;
            if m.arch().history_len != arch.history_len || m.arch().future_len != arch.future_len {
                return Err(rt(format!("{}: horizons differ from the configured data", p.display())));
            }
            Ok((model_name(p), m))
        })
        .collect()
}

fn gen_data(cfg: &ExperimentConfig, out: &Outputs) -> Result<()> {
    let d = &cfg.data;
    let ds = generate_dataset(&d.generator, [(Split::Train, d.train), (Split::Val, d.val), (Split::Test, d.test)], d.seed).map_err(rt)?;
    out.write("data.jsonl", &dataset_text(&ds))?;
    Ok(())
}

fn augment(cfg: &ExperimentConfig, out: &Outputs) -> Result<()> {
    let ds = load(&data_path(cfg), "gen-data")?;
    let next = ds.records().iter().map(|r| r.id).max().map_or(0, |m| m + 1);
    let mut aug = Dataset::default();
    let (mut modified, mut agents) = (0, 0);
    for (i, r) in ds.split(Split::Train).enumerate() {
        let a = augment_scene(&r.scene, &cfg.augment.config, seed::derive(cfg.augment.seed, "scene", r.id)).map_err(rt)?;
        agents += a.agents.len();
        modified += a.agents.iter().filter(|x| x.modified).count();
        aug.push(Record { id: next + i as u64, split: Split::Train, provenance: Provenance::Augmented, scene: a.scene });
    }
    log::info!("augmented {modified} of {agents} agents over {} scenes", aug.len());
    out.write("augmented.jsonl", &dataset_text(&aug))?;
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &Outputs) -> Result<()> {
    let ds = load(&data_path(cfg), "gen-data")?;
    let aug_ds = if cfg.runs.iter().any(|r| r.augmentation) { Some(load(&cfg.out_dir.join("augmented.jsonl"), "augment")?) } else { None };
    let train_scenes = ds.scenes(Split::Train);
    let test = ds.scenes(Split::Test);
    let aug: Vec<&Scene> = aug_ds.as_ref().map(|d| d.scenes(Split::Train)).unwrap_or_default();
    let mut reports = Vec::new();
    for r in 0..cfg.replicates {
        for entry in &cfg.runs {
            let spec = RunSpec { run_id: cfg.run_id(entry, r), arch: cfg.arch(), train: cfg.train_config(entry, r) };
            log::info!("training {}", spec.run_id);
            let (model, report) = run_one(&spec, &train_scenes, &aug, &test, &cfg.eval, None).map_err(rt)?;
            if let Some(e) = &report.error {
                log::error!("{}: {e}", spec.run_id);
            }
            out.write(&format!("runs/{}{MODEL_SUFFIX}", spec.run_id), &checkpoint::to_json(&model))?;
            out.write(&format!("runs/{}{REPORT_SUFFIX}", spec.run_id), &serde_json::to_string_pretty(&report).expect("report serializes"))?;
            reports.push(report);
        }
    }
    out.write("train_metrics.csv", &experiment_csv(&reports))?;
    if reports.iter().any(|r| !r.complete) {
        return Err(rt("some runs stopped on a non-finite loss; see their reports"));
    }
    Ok(())
}

fn eval(cfg: &ExperimentConfig, out: &Outputs, models: &[PathBuf]) -> Result<()> {
    let ds = load(&data_path(cfg), "gen-data")?;
    let test = ds.scenes(Split::Test);
    let mut rows = Vec::new();
    for (name, model) in load_models(cfg, models)? {
        let (clean, attacked) = evaluate_plan(&model, &test, &cfg.eval).map_err(rt)?;
        rows.push(MetricsRow { run_id: name.clone(), split: Split::Test, eps: 0.0, attack: "none".into(), metrics: clean });
        rows.extend(attacked.into_iter().map(|a| MetricsRow { run_id: name.clone(), split: Split::Test, eps: a.eps, attack: a.attack.as_str().into(), metrics: a.metrics }));
    }
    out.write("metrics.csv", &metrics_csv(&rows))?;
    Ok(())
}

fn attack(cfg: &ExperimentConfig, out: &Outputs, models: &[PathBuf]) -> Result<()> {
    let ds = load(&data_path(cfg), "gen-data")?;
    let test: Vec<&Record> = ds.split(Split::Test).collect();
    let a = &cfg.attack;
    let before = threat_violations();
    let mut summary = String::from("model,attack,eps,scenes,mean_objective\n");
    for (name, model) in load_models(cfg, models)? {
        let mut lines = String::new();
        let mut total = 0.0;
        for (ci, chunk) in test.chunks(cfg.eval.eval.batch.max(1)).enumerate() {
            let scenes: Vec<&Scene> = chunk.iter().map(|r| &r.scene).collect();
            let b = Batch::new(&scenes).map_err(rt)?;
            let acfg = AttackConfig { seed: seed::derive(a.config.seed, "chunk", ci as u64), ..a.config.clone() };
            let (_, res) = attack_batch(&model, &b, a.kind, &ThreatModel::new(a.eps), &acfg).map_err(rt)?;
            let cols = res.delta.shape()[1];
            for (s, r) in chunk.iter().enumerate() {
                let trace = res.traces.get(s).cloned().unwrap_or_default();
                total += trace.last().copied().unwrap_or(0.0);
                let rec = AttackRecord {
                    scene_id: r.id,
                    attack_kind: a.kind.as_str().into(),
                    eps: a.eps,
                    steps: acfg.steps,
                    delta: res.delta.data()[s * cols..(s + 1) * cols].to_vec(),
                    trace,
                };
                lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                lines.push('\n');
            }
        }
        out.write(&format!("attacks/{name}.jsonl"), &lines)?;
        summary.push_str(&format!("{name},{},{},{},{:.6}\n", a.kind.as_str(), a.eps, test.len(), total / test.len().max(1) as f64));
    }
    out.write("attack_summary.csv", &summary)?;
    let v = threat_violations() - before;
    if v > 0 {
        return Err(rt(format!("{v} perturbations left the threat set")));
    }
    Ok(())
}

fn probe(cfg: &ExperimentConfig, out: &Outputs) -> Result<()> {
    let mut csv = String::from(PROBE_HEADER);
    csv.push('\n');
    let mut reports = Vec::new();
    for &kind in &cfg.probe.kinds {
        let r = run_probe(&cfg.probe.config, kind, cfg.probe.seed).map_err(rt)?;
        csv.extend(r.to_csv().lines().skip(1).map(|l| format!("{l}\n")));
        reports.push(r);
    }
    out.write("probe.csv", &csv)?;
    out.write("probe_report.json", &serde_json::to_string_pretty(&reports).expect("report serializes"))?;
    Ok(())
}

fn simulate(cfg: &ExperimentConfig, out: &Outputs, models: &[PathBuf]) -> Result<()> {
    let s = &cfg.simulate;
    let g = &cfg.data.generator;
    let suite = scenario_suite(g.history_len, g.future_len, s.planner.lp, g.dt, s.suite_seed).map_err(rt)?;
    let atk = SequenceAttackConfig { eps: s.eps, attack: s.attack.clone() };
    let mut rows = Vec::new();
    for (name, model) in load_models(cfg, models)? {
        for sc in &suite {
            for (label, attack) in [("none", None), ("sequence", Some(&atk))] {
                let o = run_episode(sc, PredictorSource::Model(&model), &s.planner, attack).map_err(rt)?;
                out.write(&format!("episodes/{name}/{}_{label}.jsonl", sc.id), &episode_jsonl(&o))?;
                rows.push(OutcomeRow { scenario_id: sc.id.clone(), regime: name.clone(), attack: label.into(), collided: o.collided, offroad: o.offroad, progress: o.progress });
            }
        }
        let count = |l: &str| rows.iter().filter(|r| r.regime == name && r.attack == l && r.collided).count();
        log::info!("{name}: {} benign and {} attacked collisions", count("none"), count("sequence"));
    }
    out.write("outcomes.csv", &outcome_csv(&rows))?;
    Ok(())
}

fn report(cfg: &ExperimentConfig, out: &Outputs, runs: Option<&Path>) -> Result<String> {
    let dir = runs.map(Path::to_path_buf).unwrap_or_else(|| runs_dir(cfg));
    let mut reports = Vec::new();
    for p in files_with_suffix(&dir, REPORT_SUFFIX)? {
        let text = std::fs::read_to_string(&p).map_err(|e| rt(format!("{}: {e}", p.display())))?;
        reports.push(serde_json::from_str::<RunReport>(&text).map_err(|e| rt(format!("{}: {e}", p.display())))?);
    }
    if reports.is_empty() {
        return Err(rt(format!("no run reports in {}", dir.display())));
    }
    let (eps, rows) = report::comparison(&reports);
    let text = report::comparison_text(&eps, &rows);
    out.write("report.csv", &report::comparison_csv(&rows))?;
    out.write("report.txt", &text)?;
    Ok(text)
}

/// Runs one parsed command.
pub fn execute(cmd: &Command, env_out: Option<&str>) -> Result<()> {
    let cfg = resolve_for(cmd, env_out)?;
    let out = Outputs::new(&cfg, cmd.name())?;
    match cmd {
        Command::GenData(_) => gen_data(&cfg, &out),
        Command::Augment(_) => augment(&cfg, &out),
        Command::Train(_) => train(&cfg, &out),
        Command::Attack { model, .. } => attack(&cfg, &out, model),
        Command::Eval { model, .. } => eval(&cfg, &out, model),
        Command::Probe { .. } => probe(&cfg, &out),
        Command::Simulate { model, .. } => simulate(&cfg, &out, model),
        Command::Report { runs, .. } => {
            print!("{}", report(&cfg, &out, runs.as_deref())?);
            Ok(())
        }
    }
}

/// Parses `argv` and runs it, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_INVALID,
            };
            let _ = e.print();
            return code;
        }
    };
    let env_out = std::env::var(OUT_ENV).ok();
    match execute(&cli.command, env_out.as_deref()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
