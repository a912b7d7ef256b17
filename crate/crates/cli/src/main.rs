use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crossfit_core::attention::FundusMask;
use crossfit_core::autodiff::ParamStore;
use crossfit_core::checkpoint::{Checkpoint, TrainState};
use crossfit_core::config::RunConfig;
use crossfit_core::experiment::{self, holdout_split, sig6, Variant, ABLATION, SWEEP_THRESHOLDS};
use crossfit_core::geometry::field_grids;
use crossfit_core::image::Image;
use crossfit_core::model::Model;
use crossfit_core::rng::Rng;
use crossfit_core::synth::{self, SynthConfig, MANIFEST};
use crossfit_core::train::{evaluate, train, EpochLog};
use crossfit_core::verify::{self, Group};
use crossfit_core::Error;

#[derive(Parser)]
#[command(
    name = "crossfit",
    version,
    about = "Two-field fundus grading with cross-field attention"
)]
struct Cli {
    /// Print machine-readable JSON on stdout instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// More log output on stderr (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic two-field dataset.
    GenData(GenData),
    /// Train one model and write a checkpoint.
    Train(Train),
    /// Score a checkpoint on a dataset.
    Eval(Eval),
    /// Train and score several strategies over several seeds.
    Compare(Compare),
    /// Train at several mask thresholds.
    Sweep(Sweep),
    /// Dump masks, grids and attention maps for one eye.
    Inspect(Inspect),
    /// Run the built-in property suite.
    Verify(Verify),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    n: u32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.3)]
    split_evidence_rate: f64,
    #[arg(long, default_value_t = 0.2)]
    artifact_rate: f64,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Overwrite an existing dataset.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON object of dotted keys, e.g. {"cfa.layers": 3}.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override; the value is parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    pe_mode: Option<String>,
    #[arg(long, value_name = "on|off")]
    mask: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set {kv:?} is not key=value")))?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            cfg.set(k, value)?;
        }
        if let Some(s) = &self.strategy {
            cfg.model.strategy = s.parse()?;
        }
        if let Some(m) = &self.pe_mode {
            cfg.model.pe_mode = m.parse()?;
        }
        if let Some(m) = &self.mask {
            cfg.model.mask = experiment::parse_switch(m)?;
        }
        if let Some(p) = self.threshold {
            cfg.cfa.threshold = p;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch JSON-lines log (default: next to the checkpoint).
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct Compare {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated strategies, each optionally `name@pe=..,mask=..,p=..`.
    #[arg(long)]
    strategies: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    report: PathBuf,
    /// Fraction of eyes (highest ids) held out for scoring.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct Sweep {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct Inspect {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eye: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Verify {
    /// Run only these groups.
    #[arg(long, value_delimiter = ',')]
    group: Vec<String>,
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Bad input, bad flags or file trouble exit with 2; anything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Dataset { .. }
                | Error::Lookup(_)
                | Error::Integrity(_)
                | Error::Version { .. } => 2,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 2;
        }
    }
    1
}

struct Failed;

impl std::fmt::Debug for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("verification failed")
    }
}

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("verification failed")
    }
}

impl std::error::Error for Failed {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let json = cli.json;
    let result = match cli.cmd {
        Cmd::GenData(a) => gen_data(a, json),
        Cmd::Train(a) => train_cmd(a, json),
        Cmd::Eval(a) => eval_cmd(a, json),
        Cmd::Compare(a) => compare_cmd(a, json),
        Cmd::Sweep(a) => sweep_cmd(a, json),
        Cmd::Inspect(a) => inspect_cmd(a, json),
        Cmd::Verify(a) => verify_cmd(a, json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Failed>() => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn emit(json: bool, value: &Value, text: impl FnOnce() -> String) -> anyhow::Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        print!("{}", text());
    }
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn gen_data(a: GenData, json: bool) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        size: a.size,
        split_evidence_rate: a.split_evidence_rate,
        artifact_rate: a.artifact_rate,
        classes: a.classes,
    };
    cfg.validate()?;
    let occupied = fs::read_dir(&a.out)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false);
    if occupied {
        if !a.force {
            return Err(Error::Config(format!(
                "{} is not empty (pass --force to overwrite)",
                a.out.display()
            ))
            .into());
        }
        let images = a.out.join("images");
        if images.is_dir() {
            fs::remove_dir_all(&images)?;
        }
    }
    let data = synth::generate_dataset(a.seed, 0, a.n as usize, &cfg)?;
    synth::write_dataset(&data, &a.out)?;
    let mut hist = vec![0usize; cfg.classes];
    for s in &data {
        hist[s.grade] += 1;
    }
    let split = data.iter().filter(|s| s.split_evidence).count();
    let summary = json!({
        "out": a.out,
        "n": data.len(),
        "seed": a.seed,
        "size": a.size,
        "grade_counts": hist,
        "split_evidence": split,
    });
    emit(json, &summary, || {
        let mut s = format!("wrote {} eyes to {}\n", data.len(), a.out.display());
        for (g, c) in hist.iter().enumerate() {
            s.push_str(&format!("grade {g}: {c}\n"));
        }
        s.push_str(&format!("split-evidence eyes: {split}\n"));
        s
    })
}

fn load_data(dir: &Path, cfg: &RunConfig) -> anyhow::Result<Vec<synth::TwoFieldSample>> {
    let data = synth::load_dataset(dir, cfg.model.classes)?;
    if data.is_empty() {
        return Err(Error::Dataset {
            eye_id: "-".into(),
            msg: format!("{} lists no eyes", dir.join(MANIFEST).display()),
        }
        .into());
    }
    cfg.check_dataset(&data)?;
    Ok(data)
}

fn train_cmd(a: Train, json: bool) -> anyhow::Result<()> {
    let cfg = a.cfg.resolve()?;
    let data = load_data(&a.data, &cfg)?;
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(
        &cfg.model_config(),
        &mut store,
        &mut Rng::new(cfg.train.seed),
    )?;
    let log_path = a
        .log
        .unwrap_or_else(|| a.out.with_extension("epochs.jsonl"));
    let mut lines = String::new();
    let out = train(&model, &mut store, &data, &cfg.train, |e: &EpochLog| {
        lines.push_str(&serde_json::to_string(e).expect("epoch log serializes"));
        lines.push('\n');
        if !json {
            println!(
                "epoch {:>3}  loss {}  ({:.1}s)",
                e.epoch,
                sig6(e.mean_loss),
                e.seconds
            );
        }
    })?;
    let state = TrainState {
        step: out.steps as u64,
        epoch: cfg.train.epochs as u64,
    };
    let ckpt = Checkpoint::from_store(Value::Object(cfg.to_flat()), &store, out.velocities, state);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ckpt.save(&a.out)?;
    fs::write(&log_path, lines)?;
    let summary = json!({
        "checkpoint": a.out,
        "log": log_path,
        "epochs": out.log,
        "final_loss": out.log.last().map(|e| e.mean_loss),
    });
    emit(json, &summary, || {
        format!(
            "checkpoint {}\nepoch log {}\n",
            a.out.display(),
            log_path.display()
        )
    })
}

fn load_model(path: &Path) -> anyhow::Result<(RunConfig, Model, ParamStore<f32>)> {
    if !path.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint {} not found", path.display()),
        ))
        .into());
    }
    let ckpt = Checkpoint::load(path)?;
    let cfg = RunConfig::from_flat_json(&ckpt.config.to_string())?;
    cfg.validate()?;
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(
        &cfg.model_config(),
        &mut store,
        &mut Rng::new(cfg.train.seed),
    )?;
    ckpt.load_into(&mut store)?;
    Ok((cfg, model, store))
}

fn eval_cmd(a: Eval, json: bool) -> anyhow::Result<()> {
    let (cfg, model, store) = load_model(&a.ckpt)?;
    let data = load_data(&a.data, &cfg)?;
    let ev = evaluate(&model, &store, &data)?;
    let mut report = serde_json::to_value(&ev.report)?;
    report["split_evidence_accuracy"] = json!(ev.split_evidence_accuracy);
    report["split_evidence_count"] = json!(ev.split_evidence_count);
    write_json(&a.report, &report)?;
    emit(json, &report, || {
        let r = &ev.report;
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), sig6);
        let mut s = format!(
            "eyes      {}\nkappa     {}\naccuracy  {}\nmacro AUC {}\nsplit acc {} ({} eyes)\nconfusion (rows = label):\n",
            r.n_samples,
            sig6(r.kappa),
            sig6(r.accuracy),
            opt(r.macro_auc),
            opt(ev.split_evidence_accuracy),
            ev.split_evidence_count
        );
        for row in &r.confusion {
            let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
            s.push_str(&cells.join(""));
            s.push('\n');
        }
        s
    })
}

fn parse_variants(list: Option<&str>) -> anyhow::Result<Vec<Variant>> {
    let Some(list) = list else {
        return Ok(ABLATION
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_, _>>()?);
    };
    // `a@pe=none,mask=off,b`: a piece holding `=` continues the previous entry
    let mut entries: Vec<String> = Vec::new();
    for piece in list
        .split([',', ';'])
        .map(str::trim)
        .filter(|p| !p.is_empty())
    {
        match entries.last_mut() {
            Some(prev) if prev.contains('@') && piece.contains('=') && !piece.contains('@') => {
                prev.push(',');
                prev.push_str(piece);
            }
            _ => entries.push(piece.to_string()),
        }
    }
    if entries.is_empty() {
        bail!(Error::Config("--strategies is empty".into()));
    }
    Ok(entries
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_, _>>()?)
}

fn compare_cmd(a: Compare, json: bool) -> anyhow::Result<()> {
    let base = a.cfg.resolve()?;
    let variants = parse_variants(a.strategies.as_deref())?;
    let data = load_data(&a.data, &base)?;
    let (train_set, test_set) = holdout_split(data, a.test_fraction)?;
    let report = experiment::compare(
        &base,
        &variants,
        &a.seeds,
        &train_set,
        &test_set,
        experiment::worker_count(),
    )?;
    let value = serde_json::to_value(&report)?;
    write_json(&a.report, &value)?;
    emit(json, &value, || report.to_text())
}

fn sweep_cmd(a: Sweep, json: bool) -> anyhow::Result<()> {
    let base = a.cfg.resolve()?;
    let thresholds = a.thresholds.unwrap_or_else(|| SWEEP_THRESHOLDS.to_vec());
    let data = load_data(&a.data, &base)?;
    let (train_set, test_set) = holdout_split(data, a.test_fraction)?;
    let report = experiment::sweep(
        &base,
        &thresholds,
        &a.seeds,
        &train_set,
        &test_set,
        experiment::worker_count(),
    )?;
    let value = serde_json::to_value(&report)?;
    write_json(&a.report, &value)?;
    emit(json, &value, || report.to_text())
}

fn mask_json(field: usize, m: &FundusMask, side: usize) -> Value {
    json!({
        "field": field,
        "h": side,
        "w": side,
        "threshold": m.threshold(),
        "kept": m.count_ones(),
        "bits": m.bits().iter().map(|&b| b as u8).collect::<Vec<_>>(),
    })
}

/// Nearest-neighbour upscale of a `side x side` map in [0, max] to a grey image.
fn heatmap(values: &[f64], side: usize, size: usize) -> Image {
    let max = values.iter().copied().fold(0.0, f64::max);
    Image::from_fn(size, |y, x| {
        let v = values[(y * side / size) * side + x * side / size];
        let t = if max > 0.0 { v / max } else { 0.0 };
        [t, t, t]
    })
}

fn inspect_cmd(a: Inspect, json: bool) -> anyhow::Result<()> {
    let (cfg, model, store) = load_model(&a.ckpt)?;
    let records = synth::read_manifest(&a.data)?;
    if !records.iter().any(|r| r.eye_id == a.eye) {
        return Err(Error::Lookup(format!(
            "eye {} is not in {}",
            a.eye,
            a.data.join(MANIFEST).display()
        ))
        .into());
    }
    let data = load_data(&a.data, &cfg)?;
    let sample = data
        .iter()
        .find(|s| s.eye_id == a.eye)
        .expect("eye present in manifest");
    let (pred, fwd) = model.predict_detailed(&store, &sample.pair, true)?;
    fs::create_dir_all(&a.out)?;
    let side = cfg.encoder.feature_size();
    let mut files = Vec::new();
    for (k, m) in [(1, &fwd.masks.0), (2, &fwd.masks.1)] {
        let p = a.out.join(format!("mask_field{k}.json"));
        write_json(&p, &mask_json(k, m, side))?;
        files.push(p);
    }
    let (g1, g2) = field_grids(
        sample.pair.od1,
        sample.pair.od2,
        cfg.model_config().grid_dims(),
    )?;
    let p = a.out.join("grid.json");
    write_json(
        &p,
        &json!({ "field1": g1, "field2": g2, "od1": sample.pair.od1, "od2": sample.pair.od2 }),
    )?;
    files.push(p);
    if let Some(rec) = &fwd.record {
        files.extend(rec.write_layers(&a.out)?);
        let last = rec.layers.len().saturating_sub(1);
        if !rec.layers.is_empty() {
            let p = a.out.join("cross_field_heatmap.ppm");
            synth::write_ppm(
                &heatmap(&rec.cross_field_mass(last), side, cfg.encoder.input_size),
                &p,
            )?;
            files.push(p);
        }
    } else {
        log::warn!(
            "strategy {} has no attention stack; only masks and grids written",
            cfg.model.strategy
        );
    }
    let summary = json!({
        "eye": a.eye,
        "grade": sample.grade,
        "predicted": pred.grade,
        "probabilities": pred.probabilities,
        "files": files,
    });
    emit(json, &summary, || {
        let mut s = format!(
            "eye {} grade {} predicted {}\n",
            a.eye, sample.grade, pred.grade
        );
        for f in &files {
            s.push_str(&format!("  {}\n", f.display()));
        }
        s
    })
}

fn verify_cmd(a: Verify, json: bool) -> anyhow::Result<()> {
    let groups: Vec<Group> = if a.group.is_empty() {
        Group::ALL.to_vec()
    } else {
        a.group
            .iter()
            .map(|g| g.parse())
            .collect::<Result<_, _>>()?
    };
    let mut reports = Vec::new();
    for g in groups {
        let r = verify::run(g);
        if !json {
            println!("{}", r.line());
        }
        reports.push(r);
    }
    let passed = reports.iter().all(|r| r.passed);
    let value = json!({ "passed": passed, "groups": reports });
    if let Some(p) = &a.report {
        write_json(p, &value)?;
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&value)?);
    }
    if passed {
        Ok(())
    } else {
        Err(anyhow!(Failed))
    }
}
