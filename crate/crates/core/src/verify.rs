//! Self-contained property suite run by `crossfit verify`.
//!
//! Each group compares the library against an oracle written here:
//! central differences for gradients, explicit formulas for masked
//! attention and grids, brute-force counting for the metrics.
//!
//! Setting `CROSSFIT_VERIFY_FAULT` to a group name corrupts that group's
//! implementation-side values so the failure path can be exercised.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::attention::{masked_mha, AttentionParams, CfaConfig};
use crate::autodiff::{gradcheck, Binding, Graph, ParamStore, Tensor, Var};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::geometry::{
    align_grid, aligned_position_embeddings, denormalize, downsample_grid, pe_frequency,
    regular_grid, sinusoidal_pe, translate, GridDims, PeMode, RelCoord,
};
use crate::image::Image;
use crate::metrics::{quadratic_weighted_kappa, roc_auc, Confusion};
use crate::model::{CrossFiTConfig, FieldPair, Model, Strategy};
use crate::rng::Rng;

pub const FAULT_ENV: &str = "CROSSFIT_VERIFY_FAULT";
pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Gradcheck,
    Mask,
    Geometry,
    Metrics,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::Gradcheck,
        Group::Mask,
        Group::Geometry,
        Group::Metrics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gradcheck => "gradcheck",
            Self::Mask => "mask",
            Self::Geometry => "geometry",
            Self::Metrics => "metrics",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown verify group {s:?} (valid: gradcheck, mask, geometry, metrics)"
                ))
            })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub group: Group,
    pub passed: bool,
    pub checks: usize,
    pub failures: Vec<String>,
    pub seconds: f64,
}

impl GroupReport {
    pub fn line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        let mut s = format!(
            "{status} {:<9} {} checks in {:.2}s",
            self.group.name(),
            self.checks,
            self.seconds
        );
        if let Some(f) = self.failures.first() {
            s.push_str(&format!(" (first failure: {f})"));
        }
        s
    }
}

struct Tally {
    checks: usize,
    failures: Vec<String>,
}

impl Tally {
    fn new() -> Self {
        Self {
            checks: 0,
            failures: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures.push(what());
        }
    }
}

fn faulted(group: Group) -> bool {
    std::env::var(FAULT_ENV).is_ok_and(|v| v.split(',').any(|g| g.trim() == group.name()))
}

pub fn run(group: Group) -> GroupReport {
    let t0 = Instant::now();
    let fault = faulted(group);
    let mut t = Tally::new();
    let outcome = match group {
        Group::Gradcheck => gradcheck_group(&mut t, fault),
        Group::Mask => mask_group(&mut t, fault),
        Group::Geometry => geometry_group(&mut t, fault),
        Group::Metrics => metrics_group(&mut t, fault),
    };
    if let Err(e) = outcome {
        t.failures.push(format!("error: {e}"));
    }
    GroupReport {
        group,
        passed: t.failures.is_empty(),
        checks: t.checks,
        failures: t.failures,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

pub fn run_all() -> Vec<GroupReport> {
    Group::ALL.into_iter().map(run).collect()
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

/// Largest relative gap between backprop and central differences of `build`.
fn fd_max_rel<F>(inputs: &[Tensor<f64>], fault: bool, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut analytic = gradcheck::analytic_grads(inputs, &build)?;
    if fault {
        if let Some(v) = analytic.iter_mut().flatten().find(|v| v.abs() > 1e-6) {
            *v *= 1.01;
        }
    }
    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };
    let eps = gradcheck::DEFAULT_EPS;
    let mut probe = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let x = t.data()[j];
            probe[ti].data_mut()[j] = x + eps;
            let up = eval(&probe)?;
            probe[ti].data_mut()[j] = x - eps;
            let down = eval(&probe)?;
            probe[ti].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(gradcheck::rel_err(analytic[ti][j], numeric, 1e-3));
        }
    }
    Ok(worst)
}

/// Contract an output with fixed random weights so every entry matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(randn(&shape, &mut Rng::new(seed)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpCase = (
    &'static str,
    fn(&mut Rng) -> Vec<Tensor<f64>>,
    fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
);

fn op_cases() -> Vec<OpCase> {
    vec![
        (
            "matmul",
            |r| vec![randn(&[3, 4], r), randn(&[4, 2], r)],
            |g, v| g.matmul(v[0], v[1]),
        ),
        (
            "add",
            |r| vec![randn(&[2, 3], r), randn(&[2, 3], r)],
            |g, v| g.add(v[0], v[1]),
        ),
        (
            "sub",
            |r| vec![randn(&[2, 3], r), randn(&[2, 3], r)],
            |g, v| g.sub(v[0], v[1]),
        ),
        (
            "mul",
            |r| vec![randn(&[2, 3], r), randn(&[2, 3], r)],
            |g, v| g.mul(v[0], v[1]),
        ),
        (
            "max2",
            |r| vec![randn(&[7], r), randn(&[7], r)],
            |g, v| g.max2(v[0], v[1]),
        ),
        (
            "scale",
            |r| vec![randn(&[5], r)],
            |g, v| Ok(g.scale(v[0], -1.7)),
        ),
        ("relu", |r| vec![randn(&[9], r)], |g, v| Ok(g.relu(v[0]))),
        ("gelu", |r| vec![randn(&[9], r)], |g, v| Ok(g.gelu(v[0]))),
        ("sum", |r| vec![randn(&[2, 3], r)], |g, v| Ok(g.sum(v[0]))),
        ("mean", |r| vec![randn(&[2, 3], r)], |g, v| Ok(g.mean(v[0]))),
        (
            "sum_axis",
            |r| vec![randn(&[3, 4], r)],
            |g, v| g.sum_axis(v[0], 0),
        ),
        (
            "mean_axis",
            |r| vec![randn(&[3, 4], r)],
            |g, v| g.mean_axis(v[0], 1),
        ),
        (
            "transpose",
            |r| vec![randn(&[2, 5], r)],
            |g, v| g.transpose(v[0]),
        ),
        (
            "reshape",
            |r| vec![randn(&[2, 6], r)],
            |g, v| g.reshape(v[0], &[3, 4]),
        ),
        (
            "flatten",
            |r| vec![randn(&[2, 2, 3], r)],
            |g, v| g.flatten(v[0]),
        ),
        (
            "concat",
            |r| vec![randn(&[2, 3], r), randn(&[2, 1], r)],
            |g, v| g.concat(&[v[0], v[1]], 1),
        ),
        (
            "narrow",
            |r| vec![randn(&[4, 5], r)],
            |g, v| g.narrow(v[0], 1, 1, 3),
        ),
        (
            "linear",
            |r| vec![randn(&[3, 4], r), randn(&[4, 2], r), randn(&[2], r)],
            |g, v| g.linear(v[0], v[1], Some(v[2])),
        ),
        (
            "softmax",
            |r| vec![randn(&[3, 5], r)],
            |g, v| g.softmax_lastdim(v[0]),
        ),
        (
            "masked_softmax",
            |r| vec![randn(&[3, 4], r)],
            |g, v| {
                let m = g.mask_columns(v[0], &[true, false, true, true])?;
                g.softmax_lastdim(m)
            },
        ),
        (
            "layer_norm",
            |r| vec![randn(&[3, 6], r), randn(&[6], r), randn(&[6], r)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        (
            "conv2d",
            |r| {
                vec![
                    randn(&[2, 5, 5], r),
                    randn(&[3, 2, 3, 3], r),
                    randn(&[3], r),
                ]
            },
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
        ),
        (
            "global_avg_pool",
            |r| vec![randn(&[3, 2, 2], r)],
            |g, v| g.global_avg_pool(v[0]),
        ),
        (
            "weighted_row_mean",
            |r| vec![randn(&[4, 3], r)],
            |g, v| g.weighted_row_mean(v[0], &[1.0, 0.0, 1.0, 1.0]),
        ),
        (
            "cross_entropy",
            |r| vec![randn(&[2, 5], r)],
            |g, v| g.cross_entropy_logits(v[0], &[3, 0]),
        ),
    ]
}

/// The micro configuration used for the end-to-end check.
pub fn micro_model_config() -> CrossFiTConfig {
    CrossFiTConfig {
        encoder: EncoderConfig {
            stage_channels: vec![4, 8],
            stride: 2,
            kernel: 3,
            input_size: 16,
        },
        cfa: CfaConfig {
            layers: 1,
            heads: 2,
            d_t: 8,
            mlp_ratio: 2,
            threshold: 0.06,
            zero_init: false,
        },
        strategy: Strategy::CrossFit,
        pe_mode: PeMode::Aligned,
        mask: true,
        classes: 3,
    }
}

fn disc_image(size: usize, rng: &mut Rng) -> Image {
    let c = (size as f64 - 1.0) / 2.0;
    Image::from_fn(size, |y, x| {
        if ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt() > 0.48 * size as f64 {
            [0.0; 3]
        } else {
            [rng.uniform(), rng.uniform(), rng.uniform()]
        }
    })
}

/// Full-model gradient error at the micro configuration, worst over parameters.
pub fn model_gradcheck(seed: u64, fault: bool) -> Result<f64> {
    let cfg = micro_model_config();
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&cfg, &mut store, &mut Rng::new(seed))?;
    let mut rng = Rng::new(seed + 1);
    let pair = FieldPair {
        image1: disc_image(16, &mut rng),
        image2: disc_image(16, &mut rng),
        od1: RelCoord::new(0.85, 0.45)?,
        od2: RelCoord::new(0.5, 0.52)?,
    };
    // zero biases put black-pixel activations exactly on the ReLU kink
    let inputs: Vec<Tensor<f64>> = store
        .iter()
        .map(|(_, t)| {
            let mut t = t.clone();
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += 0.05 * rng.normal());
            t
        })
        .collect();
    fd_max_rel(&inputs, fault, |g, vars| {
        let b = Binding::from_vars(vars.to_vec());
        model.loss(g, &b, &pair, 2)
    })
}

fn gradcheck_group(t: &mut Tally, fault: bool) -> Result<()> {
    let mut rng = Rng::new(0x6ad);
    for (name, inputs, build) in op_cases() {
        for k in 0..10 {
            let xs = inputs(&mut rng);
            let seed = rng.below(1 << 30) as u64;
            let worst = fd_max_rel(&xs, fault, |g, v| {
                let y = build(g, v)?;
                project(g, y, seed)
            })?;
            t.check(worst < OP_TOL, || {
                format!("{name} instance {k}: rel err {worst:.3e}")
            });
        }
    }
    let worst = model_gradcheck(7, fault)?;
    t.check(worst < MODEL_TOL, || {
        format!("full model: rel err {worst:.3e}")
    });
    Ok(())
}

fn unmasked_mha(
    g: &mut Graph<f64>,
    b: &Binding,
    x: Var,
    p: &AttentionParams,
    heads: usize,
) -> Result<Var> {
    let d = g.shape(x)[1];
    let dh = d / heads;
    let q = g.matmul(x, b.var(p.wq))?;
    let k = g.matmul(x, b.var(p.wk))?;
    let v = g.matmul(x, b.var(p.wv))?;
    let mut outs = Vec::new();
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.narrow(q, 1, h * dh, dh)?,
                g.narrow(k, 1, h * dh, dh)?,
                g.narrow(v, 1, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let raw = g.matmul(qh, kt)?;
        let logits = g.scale(raw, 1.0 / (dh as f64).sqrt());
        let a = g.softmax_lastdim(logits)?;
        outs.push(g.matmul(a, vh)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat(&outs, 1)?
    };
    g.matmul(cat, b.var(p.wo))
}

fn mask_group(t: &mut Tally, fault: bool) -> Result<()> {
    let mut rng = Rng::new(0x3a5c);
    for case in 0..100 {
        let heads = 1 + rng.below(4);
        let d = heads * (1 + rng.below(4));
        let n = 2 + rng.below(14);
        let mut store = ParamStore::<f64>::new();
        let p = AttentionParams::new(&mut store, "verify", d, false, &mut rng)?;
        let x = randn(&[n, d], &mut rng);
        let mut keep: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.6)).collect();
        if !keep.iter().any(|&k| k) {
            keep[rng.below(n)] = true;
        }
        let mut applied = keep.clone();
        if fault {
            if let Some(j) = applied.iter().position(|&k| !k) {
                applied[j] = true;
            }
        }
        let mut g = Graph::new();
        let b = Binding::bind(&mut g, &store, false);
        let xv = g.constant(x.clone());
        let mut cap = Vec::new();
        masked_mha(&mut g, &b, xv, &applied, &p, heads, Some(&mut cap))?;
        for head in &cap {
            for row in head.chunks(n) {
                let leak = row.iter().zip(&keep).any(|(&w, &k)| !k && w != 0.0);
                t.check(!leak, || {
                    format!("case {case}: masked key has nonzero weight")
                });
                let sum: f64 = row.iter().sum();
                t.check((sum - 1.0).abs() < 1e-12, || {
                    format!("case {case}: row sums to {sum}")
                });
            }
        }
        let ones = vec![true; n];
        let mut g = Graph::new();
        let b = Binding::bind(&mut g, &store, false);
        let xv = g.constant(x);
        let ym = masked_mha(&mut g, &b, xv, &ones, &p, heads, None)?;
        let yu = unmasked_mha(&mut g, &b, xv, &p, heads)?;
        let same = g
            .value(ym)
            .data()
            .iter()
            .zip(g.value(yu).data())
            .all(|(a, c)| a.to_bits() == c.to_bits());
        t.check(same, || {
            format!("case {case}: all-ones mask differs from unmasked attention")
        });
    }
    Ok(())
}

fn geometry_group(t: &mut Tally, fault: bool) -> Result<()> {
    let mut rng = Rng::new(0x9e0);
    let nudge = if fault { 1e-9 } else { 0.0 };
    for case in 0..50 {
        let h = 2 + rng.below(30);
        let w = 2 + rng.below(30);
        let od1 = RelCoord::new(rng.uniform(), rng.uniform())?;
        let od2 = RelCoord::new(rng.uniform(), rng.uniform())?;
        let base = regular_grid(h, w);
        let moved = RelCoord::new(od2.x, (od2.y + nudge).min(1.0))?;
        let aligned = align_grid(&base, od1, moved);
        let (dx, dy) = (2.0 * (od2.x - od1.x), 2.0 * (od2.y - od1.y));
        let exact = aligned
            .coords
            .iter()
            .zip(&base.coords)
            .all(|(a, r)| a[0] == r[0] + dx && a[1] == r[1] + dy);
        t.check(exact, || {
            format!("case {case}: aligned offset is not exactly (2dx, 2dy)")
        });

        let fh = 1 + rng.below(h);
        let fw = 1 + rng.below(w);
        let coarse = downsample_grid(&aligned, fh, fw)?;
        let expect = translate(&regular_grid(fh, fw), dx, dy);
        let err = coarse.max_abs_diff(&expect);
        t.check(err < 1e-12, || {
            format!("case {case}: downsampled grid off by {err:.3e}")
        });

        let dims = GridDims {
            image_h: h,
            image_w: w,
            feat_h: fh,
            feat_w: fw,
        };
        let d_t = 4 * (1 + rng.below(4));
        let (p1, p2) = aligned_position_embeddings(od1, od1, dims, d_t)?;
        let bitwise = p1
            .values
            .iter()
            .zip(&p2.values)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        t.check(bitwise, || {
            format!("case {case}: equal disc coordinates give different embeddings")
        });

        // row i*w+j encodes cell (i, j): explicit sin/cos oracle
        let pos = denormalize(&coarse);
        let pe = sinusoidal_pe(&pos, d_t)?;
        let half = d_t / 2;
        let (i, j) = (rng.below(fh), rng.below(fw));
        let cell = coarse.at(i, j);
        let px = (cell[0] + 1.0) * (fw as f64 - 1.0) / 2.0;
        let py = (cell[1] + 1.0) * (fh as f64 - 1.0) / 2.0;
        let mut want = Vec::with_capacity(d_t);
        for v in [px, py] {
            for f in (0..half / 2).map(|k| pe_frequency(k, half)) {
                want.push((v * f).sin());
                want.push((v * f).cos());
            }
        }
        let row = pe.row(i * fw + j);
        let err = row
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        t.check(err < 1e-12, || {
            format!(
                "case {case}: embedding row {} does not encode cell ({i}, {j})",
                i * fw + j
            )
        });
    }
    Ok(())
}

fn kappa_oracle(conf: &Confusion) -> f64 {
    let c = conf.len();
    let n: f64 = conf.iter().flatten().map(|&v| v as f64).sum();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..c {
        for j in 0..c {
            let w = ((i as f64) - (j as f64)).powi(2) / (((c - 1) * (c - 1)) as f64);
            let row: f64 = conf[i].iter().map(|&v| v as f64).sum();
            let col: f64 = (0..c).map(|r| conf[r][j] as f64).sum();
            num += w * conf[i][j] as f64;
            den += w * row * col / n;
        }
    }
    if den == 0.0 {
        1.0
    } else {
        1.0 - num / den
    }
}

fn auc_oracle(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                pairs += 1.0;
                wins += match scores[i].partial_cmp(&scores[j]).expect("finite scores") {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn metrics_group(t: &mut Tally, fault: bool) -> Result<()> {
    let mut rng = Rng::new(0x3e7);
    for case in 0..200 {
        let c = 2 + rng.below(4);
        let mut conf: Confusion = (0..c)
            .map(|_| (0..c).map(|_| rng.below(12) as u64).collect())
            .collect();
        conf[0][0] += 1;
        let oracle = kappa_oracle(&conf);
        if fault {
            conf[0][c - 1] += 1;
        }
        let k = quadratic_weighted_kappa(&conf)?;
        t.check((k - oracle).abs() < 1e-12, || {
            format!("case {case}: kappa {k} vs oracle {oracle}")
        });

        let n = 2 + rng.below(60);
        let levels = 1 + rng.below(8);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.below(levels) as f64 / levels as f64)
            .collect();
        let pos: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.4)).collect();
        let want = auc_oracle(&scores, &pos);
        let got = roc_auc(&scores, &pos).map(|a| if fault { a + 1e-9 } else { a });
        let ok = match (got, want) {
            (Some(a), Some(b)) => (a - b).abs() < 1e-12,
            (None, None) => true,
            _ => false,
        };
        t.check(ok, || {
            format!("case {case}: AUC {got:?} vs oracle {want:?}")
        });
    }
    for c in 2..6 {
        let diag: Confusion = (0..c)
            .map(|i| {
                (0..c)
                    .map(|j| if i == j { 3 + i as u64 } else { 0 })
                    .collect()
            })
            .collect();
        let k = quadratic_weighted_kappa(&diag)?;
        t.check(k == 1.0, || {
            format!("diagonal {c}x{c} confusion gives kappa {k}")
        });
    }
    let ties = roc_auc(&[0.3; 6], &[true, false, true, false, false, true]);
    t.check(ties == Some(0.5), || {
        format!("all-tie scores give AUC {ties:?}")
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_names_parse() {
        for g in Group::ALL {
            assert_eq!(g.name().parse::<Group>().unwrap(), g);
        }
        assert!("everything".parse::<Group>().is_err());
    }

    #[test]
    fn clean_groups_pass() {
        for g in [Group::Mask, Group::Geometry, Group::Metrics] {
            let r = run(g);
            assert!(r.passed, "{}", r.line());
            assert!(r.checks >= 200, "{}", r.line());
        }
    }

    #[test]
    fn micro_model_gradients_match() {
        let worst = model_gradcheck(7, false).unwrap();
        assert!(worst < MODEL_TOL, "{worst:.3e}");
        assert!(model_gradcheck(7, true).unwrap() > MODEL_TOL);
    }

    #[test]
    fn injected_faults_are_caught() {
        let mut t = Tally::new();
        mask_group(&mut t, true).unwrap();
        assert!(!t.failures.is_empty());
        let mut t = Tally::new();
        geometry_group(&mut t, true).unwrap();
        assert!(!t.failures.is_empty());
        let mut t = Tally::new();
        metrics_group(&mut t, true).unwrap();
        assert!(!t.failures.is_empty());
        let worst = fd_max_rel(&[randn(&[3], &mut Rng::new(1))], true, |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(worst > OP_TOL);
    }
}
