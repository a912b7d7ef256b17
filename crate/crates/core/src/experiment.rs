//! Multi-strategy, multi-seed comparison tables and the threshold sweep.

use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::PeMode;
use crate::model::{Model, Strategy};
use crate::rng::Rng;
use crate::synth::TwoFieldSample;
use crate::train::{evaluate, train};

/// Thresholds covered by [`sweep`] when none are given.
pub const SWEEP_THRESHOLDS: [f64; 7] = [0.02, 0.04, 0.05, 0.06, 0.07, 0.08, 0.10];

/// Rows of the component ablation, from the single-field baseline to the full model.
pub const ABLATION: [&str; 5] = [
    "single_field_1",
    "feat_max@pe=none,mask=off",
    "crossfit@pe=regular,mask=off",
    "crossfit@pe=aligned,mask=off",
    "crossfit@pe=aligned,mask=on",
];

/// A strategy plus optional overrides, written `name@key=value,...`.
/// Keys: `pe` (position-embedding mode), `mask` (`on`/`off`), `p` (threshold).
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub strategy: Strategy,
    pub pe_mode: Option<PeMode>,
    pub mask: Option<bool>,
    pub threshold: Option<f64>,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, opts) = s.split_once('@').unwrap_or((s, ""));
        let mut v = Variant {
            label: s.to_string(),
            strategy: name.parse()?,
            pe_mode: None,
            mask: None,
            threshold: None,
        };
        for kv in opts.split(',').filter(|kv| !kv.is_empty()) {
            let (k, val) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("variant option {kv:?} is not key=value")))?;
            match k {
                "pe" => v.pe_mode = Some(val.parse()?),
                "mask" => v.mask = Some(parse_switch(val)?),
                "p" => {
                    v.threshold =
                        Some(val.parse().map_err(|_| {
                            Error::Config(format!("threshold {val:?} is not a number"))
                        })?)
                }
                _ => {
                    return Err(Error::Config(format!(
                        "unknown variant option {k:?} (valid: pe, mask, p)"
                    )))
                }
            }
        }
        Ok(v)
    }
}

pub fn parse_switch(s: &str) -> Result<bool> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(Error::Config(format!("expected on or off, got {s:?}"))),
    }
}

impl Variant {
    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        cfg.model.strategy = self.strategy;
        if let Some(pe) = self.pe_mode {
            cfg.model.pe_mode = pe;
        }
        if let Some(m) = self.mask {
            cfg.model.mask = m;
        }
        if let Some(p) = self.threshold {
            cfg.cfa.threshold = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Outcome of one (variant, seed) training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub variant: String,
    pub seed: u64,
    pub kappa: f64,
    pub accuracy: f64,
    pub macro_auc: Option<f64>,
    pub split_accuracy: Option<f64>,
    pub split_count: usize,
    pub final_loss: f64,
    pub loss_curve: Vec<f64>,
    pub seconds: f64,
}

/// Per-variant means over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub kappa: f64,
    pub accuracy: f64,
    pub macro_auc: Option<f64>,
    pub split_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: usize,
    pub rows: Vec<Row>,
    pub cells: Vec<Cell>,
}

impl CompareReport {
    pub fn row(&self, variant: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_text(&self) -> String {
        let head = [
            "variant",
            "kappa",
            "accuracy",
            "macro_auc",
            "split_acc",
            "seeds",
        ];
        let body: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.variant.clone(),
                    sig6(r.kappa),
                    sig6(r.accuracy),
                    r.macro_auc.map_or("n/a".into(), sig6),
                    r.split_accuracy.map_or("n/a".into(), sig6),
                    r.seeds.len().to_string(),
                ]
            })
            .collect();
        table(&head, &body)
    }
}

/// Format with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        return format!("{x:.5e}");
    }
    format!("{x:.*}", (5 - mag).max(0) as usize)
}

fn table<const N: usize>(head: &[&str; N], body: &[[String; N]]) -> String {
    let mut width: Vec<usize> = head.iter().map(|h| h.len()).collect();
    for row in body {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: Vec<&str>| {
        for (i, (c, w)) in cells.iter().zip(&width).enumerate() {
            if i == 0 {
                let _ = write!(out, "{c:<w$}");
            } else {
                let _ = write!(out, "  {c:>w$}");
            }
        }
        out.push('\n');
    };
    line(&mut out, head.to_vec());
    let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut out, rule.iter().map(String::as_str).collect());
    for row in body {
        line(&mut out, row.iter().map(String::as_str).collect());
    }
    out
}

/// Train on `train_set`, score on `test_set`. Model init and data order both derive from `seed`.
pub fn run_cell(
    cfg: &RunConfig,
    label: &str,
    seed: u64,
    train_set: &[TwoFieldSample],
    test_set: &[TwoFieldSample],
) -> Result<Cell> {
    cfg.validate()?;
    cfg.check_dataset(train_set)?;
    cfg.check_dataset(test_set)?;
    let t0 = Instant::now();
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&cfg.model_config(), &mut store, &mut Rng::new(seed))?;
    let tc = crate::train::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let out = train(&model, &mut store, train_set, &tc, |e| {
        log::debug!(
            "{label} seed {seed} epoch {} loss {:.4}",
            e.epoch,
            e.mean_loss
        )
    })?;
    let ev = evaluate(&model, &store, test_set)?;
    let loss_curve: Vec<f64> = out.log.iter().map(|e| e.mean_loss).collect();
    Ok(Cell {
        variant: label.to_string(),
        seed,
        kappa: ev.report.kappa,
        accuracy: ev.report.accuracy,
        macro_auc: ev.report.macro_auc,
        split_accuracy: ev.split_evidence_accuracy,
        split_count: ev.split_evidence_count,
        final_loss: *loss_curve.last().unwrap_or(&f64::NAN),
        loss_curve,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Worker count from `CROSSFIT_THREADS`, else the machine's parallelism.
pub fn worker_count() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("CROSSFIT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(n) if n > 0 => n,
        _ => avail,
    }
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Every variant trained once per seed. Cells run on independent workers;
/// the report order depends only on the inputs.
pub fn compare(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    train_set: &[TwoFieldSample],
    test_set: &[TwoFieldSample],
    workers: usize,
) -> Result<CompareReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "need at least one strategy and one seed".into(),
        ));
    }
    let configs = variants
        .iter()
        .map(|v| v.apply(base))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<Cell>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(v, seed)) = jobs.get(i) else { break };
                let cell = run_cell(&configs[v], &variants[v].label, seed, train_set, test_set);
                if let Ok(c) = &cell {
                    log::info!(
                        "{} seed {seed}: kappa {:.4} acc {:.4} split {:?} ({:.1}s)",
                        c.variant,
                        c.kappa,
                        c.accuracy,
                        c.split_accuracy,
                        c.seconds
                    );
                }
                results.lock().expect("result lock")[i] = Some(cell);
            });
        }
    });
    let cells = results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;
    let rows = variants
        .iter()
        .map(|v| {
            let mine: Vec<&Cell> = cells.iter().filter(|c| c.variant == v.label).collect();
            let n = mine.len() as f64;
            Row {
                variant: v.label.clone(),
                seeds: mine.iter().map(|c| c.seed).collect(),
                kappa: mine.iter().map(|c| c.kappa).sum::<f64>() / n,
                accuracy: mine.iter().map(|c| c.accuracy).sum::<f64>() / n,
                macro_auc: mean_opt(mine.iter().map(|c| c.macro_auc)),
                split_accuracy: mean_opt(mine.iter().map(|c| c.split_accuracy)),
            }
        })
        .collect();
    Ok(CompareReport {
        train_size: train_set.len(),
        test_size: test_set.len(),
        epochs: base.train.epochs,
        rows,
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub kappa: f64,
    pub accuracy: f64,
    pub macro_auc: Option<f64>,
    pub split_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_text(&self) -> String {
        let head = ["threshold", "kappa", "accuracy", "macro_auc", "split_acc"];
        let body: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    format!("{:.2}", r.threshold),
                    sig6(r.kappa),
                    sig6(r.accuracy),
                    r.macro_auc.map_or("n/a".into(), sig6),
                    r.split_accuracy.map_or("n/a".into(), sig6),
                ]
            })
            .collect();
        table(&head, &body)
    }
}

/// Train the configured model once per threshold and seed with masking on.
pub fn sweep(
    base: &RunConfig,
    thresholds: &[f64],
    seeds: &[u64],
    train_set: &[TwoFieldSample],
    test_set: &[TwoFieldSample],
    workers: usize,
) -> Result<SweepReport> {
    let variants = thresholds
        .iter()
        .map(|&p| {
            Ok(Variant {
                label: format!("p={p}"),
                strategy: base.model.strategy,
                pe_mode: None,
                mask: Some(true),
                threshold: Some(p),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rep = compare(base, &variants, seeds, train_set, test_set, workers)?;
    Ok(SweepReport {
        strategy: base.model.strategy,
        seeds: seeds.to_vec(),
        rows: thresholds
            .iter()
            .zip(&rep.rows)
            .map(|(&threshold, r)| SweepRow {
                threshold,
                kappa: r.kappa,
                accuracy: r.accuracy,
                macro_auc: r.macro_auc,
                split_accuracy: r.split_accuracy,
            })
            .collect(),
    })
}

/// Deterministic holdout: the last `test_fraction` of eyes by id form the test split.
pub fn holdout_split(
    mut data: Vec<TwoFieldSample>,
    test_fraction: f64,
) -> Result<(Vec<TwoFieldSample>, Vec<TwoFieldSample>)> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    data.sort_by_key(|s| s.eye_id);
    let n_test = ((data.len() as f64 * test_fraction).round() as usize).max(1);
    if n_test >= data.len() {
        return Err(Error::Config(format!(
            "{} eyes are too few to hold out a test split",
            data.len()
        )));
    }
    let test = data.split_off(data.len() - n_test);
    Ok((data, test))
}
