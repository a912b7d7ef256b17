//! Fundus masks and masked multi-head attention over the joint token sequence of two fields.

use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Binding, Graph, ParamId, ParamStore, Real, Var};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const LN_EPS: f64 = 1e-5;

/// Per-token informativeness bits of one field.
#[derive(Clone, Debug, PartialEq)]
pub struct FundusMask {
    bits: Vec<bool>,
    threshold: f64,
}

impl FundusMask {
    pub fn all_ones(l: usize) -> Self {
        Self {
            bits: vec![true; l],
            threshold: 0.0,
        }
    }

    pub fn from_bits(bits: Vec<bool>, threshold: f64) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return Err(Error::Contract("fundus mask with no set bit".into()));
        }
        Ok(Self { bits, threshold })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// 1.0 for kept tokens, 0.0 otherwise.
    pub fn weights(&self) -> Vec<f64> {
        self.bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }
}

pub fn check_threshold(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("mask threshold {p} outside [0, 1]")));
    }
    Ok(())
}

/// Channel mean, per-image min-max normalization, then `value >= p`.
/// A constant map keeps every token.
pub fn fundus_mask(fm: &FeatureMap, p: f64) -> Result<FundusMask> {
    check_threshold(p)?;
    let means = fm.channel_mean();
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let bits = if range > 0.0 {
        means.iter().map(|&v| (v - lo) / range >= p).collect()
    } else {
        vec![true; means.len()]
    };
    Ok(FundusMask { bits, threshold: p })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfaConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_t: usize,
    pub mlp_ratio: usize,
    pub threshold: f64,
    /// Zero the attention and MLP output projections so each block starts as the identity.
    pub zero_init: bool,
}

impl Default for CfaConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 4,
            d_t: 64,
            mlp_ratio: 4,
            threshold: 0.06,
            zero_init: true,
        }
    }
}

impl CfaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_t.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by head count {}",
                self.d_t, self.heads
            )));
        }
        if self.d_t == 0 || !self.d_t.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of 4",
                self.d_t
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp ratio must be positive".into()));
        }
        check_threshold(self.threshold)
    }

    pub fn head_dim(&self) -> usize {
        self.d_t / self.heads
    }
}

/// Affine map `d_in -> d_out`.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Projection {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.glorot(format!("{name}.weight"), &[d_in, d_out], d_in, d_out, rng)?,
            bias: store.zeros(format!("{name}.bias"), &[d_out])?,
        })
    }

    pub fn zeroed<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.zeros(format!("{name}.weight"), &[d_in, d_out])?,
            bias: store.zeros(format!("{name}.bias"), &[d_out])?,
        })
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, b: &Binding, x: Var) -> Result<Var> {
        g.linear(x, b.var(self.weight), Some(b.var(self.bias)))
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// `[c, h, w]` activations to row-major tokens `[h * w, c]`.
pub fn flatten_tokens<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(
            "flatten_tokens",
            format!("expected [c, h, w], got {s:?}"),
        ));
    }
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// Affine projection of `[l, d_e]` tokens to `[l, d_t]`.
pub fn project_sequence<T: Real>(
    g: &mut Graph<T>,
    b: &Binding,
    tokens: Var,
    proj: &Projection,
) -> Result<Var> {
    proj.apply(g, b, tokens)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        zero_out: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut mk = |s: &str| store.glorot(format!("{name}.{s}"), &[d, d], d, d, rng);
        let wq = mk("wq")?;
        let wk = mk("wk")?;
        let wv = mk("wv")?;
        let wo = if zero_out {
            store.zeros(format!("{name}.wo"), &[d, d])?
        } else {
            mk("wo")?
        };
        Ok(Self { wq, wk, wv, wo })
    }
}

/// Multi-head attention whose key columns with `keep[j] == false` get zero weight.
///
/// When `capture` is given, the post-softmax weights of every head are appended to it.
pub fn masked_mha<T: Real>(
    g: &mut Graph<T>,
    b: &Binding,
    x: Var,
    keep: &[bool],
    p: &AttentionParams,
    heads: usize,
    mut capture: Option<&mut Vec<Vec<f64>>>,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[0] != keep.len() {
        return Err(Error::dims("masked_mha", &s, &[keep.len()]));
    }
    if heads == 0 || !s[1].is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "width {} not divisible by {heads} heads",
            s[1]
        )));
    }
    if !keep.iter().any(|&k| k) {
        return Err(Error::Contract("attention mask has no unmasked key".into()));
    }
    let masked = keep.iter().any(|&k| !k);
    let dh = s[1] / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = g.matmul(x, b.var(p.wq))?;
    let k = g.matmul(x, b.var(p.wk))?;
    let v = g.matmul(x, b.var(p.wv))?;
    let mut outs = Vec::with_capacity(heads);
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
        let mut logits = g.scale(raw, scale);
        if masked {
            logits = g.mask_columns(logits, keep)?;
        }
        let a = g.softmax_lastdim(logits)?;
        if let Some(c) = capture.as_deref_mut() {
            c.push(g.value(a).to_f64_vec());
        }
        outs.push(g.matmul(a, vh)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat(&outs, 1)?
    };
    g.matmul(cat, b.var(p.wo))
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub attn: AttentionParams,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub mlp_in: Projection,
    pub mlp_out: Projection,
}

impl BlockParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &CfaConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d = cfg.d_t;
        let hidden = d * cfg.mlp_ratio;
        let ln1_gamma = store.ones(format!("{name}.ln1.gamma"), &[d])?;
        let ln1_beta = store.zeros(format!("{name}.ln1.beta"), &[d])?;
        let attn = AttentionParams::new(store, &format!("{name}.attn"), d, cfg.zero_init, rng)?;
        let ln2_gamma = store.ones(format!("{name}.ln2.gamma"), &[d])?;
        let ln2_beta = store.zeros(format!("{name}.ln2.beta"), &[d])?;
        let mlp_in = Projection::new(store, &format!("{name}.mlp.fc1"), d, hidden, rng)?;
        let mlp_out = if cfg.zero_init {
            Projection::zeroed(store, &format!("{name}.mlp.fc2"), hidden, d)?
        } else {
            Projection::new(store, &format!("{name}.mlp.fc2"), hidden, d, rng)?
        };
        Ok(Self {
            ln1_gamma,
            ln1_beta,
            attn,
            ln2_gamma,
            ln2_beta,
            mlp_in,
            mlp_out,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![
            self.ln1_gamma,
            self.ln1_beta,
            self.attn.wq,
            self.attn.wk,
            self.attn.wv,
            self.attn.wo,
            self.ln2_gamma,
            self.ln2_beta,
        ];
        v.extend(self.mlp_in.ids());
        v.extend(self.mlp_out.ids());
        v
    }
}

/// Pre-LN block: `G = F + MHA(LN(F))`, `F' = G + MLP(LN(G))`.
pub fn cfa_block<T: Real>(
    g: &mut Graph<T>,
    b: &Binding,
    x: Var,
    keep: &[bool],
    p: &BlockParams,
    heads: usize,
    capture: Option<&mut Vec<Vec<f64>>>,
) -> Result<Var> {
    let n1 = g.layer_norm(x, b.var(p.ln1_gamma), b.var(p.ln1_beta), LN_EPS)?;
    let att = masked_mha(g, b, n1, keep, &p.attn, heads, capture)?;
    let mid = g.add(x, att)?;
    let n2 = g.layer_norm(mid, b.var(p.ln2_gamma), b.var(p.ln2_beta), LN_EPS)?;
    let h = p.mlp_in.apply(g, b, n2)?;
    let h = g.gelu(h);
    let m = p.mlp_out.apply(g, b, h)?;
    g.add(mid, m)
}

/// Post-softmax weights captured during one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub tokens: usize,
    pub heads: usize,
    pub keep: Vec<bool>,
    /// `layers[k][h]` is a row-major `tokens x tokens` matrix.
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl AttentionRecord {
    pub fn weight(&self, layer: usize, head: usize, row: usize, col: usize) -> f64 {
        self.layers[layer][head][row * self.tokens + col]
    }

    /// Largest `|sum_j A[r, j] - 1|` over every layer, head and row.
    pub fn max_row_sum_error(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .flat_map(|m| m.chunks(self.tokens))
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Total weight placed on masked key columns; zero when masking is exact.
    pub fn masked_mass(&self) -> f64 {
        let mut total = 0.0;
        for m in self.layers.iter().flatten() {
            for row in m.chunks(self.tokens) {
                for (v, &k) in row.iter().zip(&self.keep) {
                    if !k {
                        total += v.abs();
                    }
                }
            }
        }
        total
    }

    /// Head-averaged attention mass from each of the first `l` tokens onto the last `l`.
    pub fn cross_field_mass(&self, layer: usize) -> Vec<f64> {
        let l = self.tokens / 2;
        let heads = &self.layers[layer];
        (0..l)
            .map(|r| {
                heads
                    .iter()
                    .map(|m| {
                        m[r * self.tokens + l..(r + 1) * self.tokens]
                            .iter()
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / heads.len() as f64
            })
            .collect()
    }

    pub fn layer_json(&self, layer: usize) -> serde_json::Value {
        let mut bytes = Vec::with_capacity(self.heads * self.tokens * self.tokens * 4);
        for m in &self.layers[layer] {
            for &v in m {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        json!({
            "layer": layer,
            "heads": self.heads,
            "tokens": self.tokens,
            "shape": [self.heads, self.tokens, self.tokens],
            "dtype": "f32le",
            "keep": self.keep.iter().map(|&k| k as u8).collect::<Vec<_>>(),
            "data": B64.encode(bytes),
        })
    }

    /// Write `attention_layer{k}.json` for every layer.
    pub fn write_layers(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut paths = Vec::with_capacity(self.layers.len());
        for k in 0..self.layers.len() {
            let path = dir.join(format!("attention_layer{k}.json"));
            fs::write(&path, serde_json::to_vec_pretty(&self.layer_json(k))?)?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Decode one exported layer into per-head matrices.
    pub fn decode_layer(value: &serde_json::Value) -> Result<Vec<Vec<f32>>> {
        let field = |k: &str| {
            value[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Integrity(format!("attention file lacks {k}")))
        };
        let heads = field("heads")?;
        let tokens = field("tokens")?;
        let data = value["data"]
            .as_str()
            .ok_or_else(|| Error::Integrity("attention file lacks data".into()))?;
        let bytes = B64
            .decode(data)
            .map_err(|e| Error::Integrity(format!("attention payload: {e}")))?;
        if bytes.len() != heads * tokens * tokens * 4 {
            return Err(Error::Integrity(format!(
                "attention payload has {} bytes, expected {}",
                bytes.len(),
                heads * tokens * tokens * 4
            )));
        }
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(vals.chunks(tokens * tokens).map(<[f32]>::to_vec).collect())
    }
}

/// Stack of attention blocks over both fields.
#[derive(Clone, Debug)]
pub struct CfaStack {
    pub cfg: CfaConfig,
    pub blocks: Vec<BlockParams>,
}

pub struct CfaOutput {
    pub g1: Var,
    pub g2: Var,
    pub record: Option<AttentionRecord>,
}

impl CfaStack {
    pub fn new<T: Real>(cfg: &CfaConfig, store: &mut ParamStore<T>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.layers)
            .map(|i| BlockParams::new(store, &format!("cfa.block{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(BlockParams::ids).collect()
    }

    /// Add position embeddings, concatenate both fields, run every block, split back.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        f1: Var,
        f2: Var,
        pe: Option<(Var, Var)>,
        m1: &FundusMask,
        m2: &FundusMask,
        capture: bool,
    ) -> Result<CfaOutput> {
        let s1 = g.shape(f1).to_vec();
        let s2 = g.shape(f2).to_vec();
        if s1.len() != 2 || s1 != s2 || s1[1] != self.cfg.d_t {
            return Err(Error::dims("cfa_stack", &s1, &s2));
        }
        let l = s1[0];
        if m1.len() != l || m2.len() != l {
            return Err(Error::dims(
                "cfa_stack mask",
                &[m1.len(), m2.len()],
                &[l, l],
            ));
        }
        let (x1, x2) = match pe {
            Some((p1, p2)) => (g.add(f1, p1)?, g.add(f2, p2)?),
            None => (f1, f2),
        };
        if self.blocks.is_empty() {
            return Ok(CfaOutput {
                g1: x1,
                g2: x2,
                record: capture.then(|| AttentionRecord {
                    tokens: 2 * l,
                    heads: self.cfg.heads,
                    keep: [m1.bits(), m2.bits()].concat(),
                    layers: Vec::new(),
                }),
            });
        }
        let keep: Vec<bool> = [m1.bits(), m2.bits()].concat();
        let mut x = g.concat(&[x1, x2], 0)?;
        let mut layers = Vec::new();
        for blk in &self.blocks {
            let mut heads = Vec::new();
            x = cfa_block(
                g,
                b,
                x,
                &keep,
                blk,
                self.cfg.heads,
                capture.then_some(&mut heads),
            )?;
            if capture {
                layers.push(heads);
            }
        }
        Ok(CfaOutput {
            g1: g.narrow(x, 0, 0, l)?,
            g2: g.narrow(x, 0, l, l)?,
            record: capture.then(|| AttentionRecord {
                tokens: 2 * l,
                heads: self.cfg.heads,
                keep,
                layers,
            }),
        })
    }
}
