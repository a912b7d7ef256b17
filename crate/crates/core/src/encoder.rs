//! Convolutional backbone shared by both fields.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stage_channels: Vec<usize>,
    pub stride: usize,
    pub kernel: usize,
    pub input_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 48, 64],
            stride: 2,
            kernel: 3,
            input_size: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config(
                "encoder needs at least one non-empty stage".into(),
            ));
        }
        if self.kernel.is_multiple_of(2) || self.stride == 0 || self.input_size == 0 {
            return Err(Error::Config(format!(
                "encoder kernel {} must be odd and stride {} positive",
                self.kernel, self.stride
            )));
        }
        let total = self.total_stride();
        if !self.input_size.is_multiple_of(total) {
            return Err(Error::Config(format!(
                "input size {} not divisible by total stride {total}",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.stride.pow(self.stage_channels.len() as u32)
    }

    /// Side of the output feature map.
    pub fn feature_size(&self) -> usize {
        self.input_size / self.total_stride()
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    MaculaCentric,
    OpticDiscCentric,
}

/// `h x w x d_e` activations of one field, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub d_e: usize,
    pub field: Field,
    pub values: Vec<f64>,
}

impl FeatureMap {
    /// Convert a channel-first `[d_e, h, w]` buffer.
    pub fn from_chw<T: Real>(chw: &[T], d_e: usize, h: usize, w: usize, field: Field) -> Self {
        let mut values = vec![0.0; h * w * d_e];
        for c in 0..d_e {
            for p in 0..h * w {
                values[p * d_e + c] = chw[c * h * w + p].to_f64();
            }
        }
        Self {
            h,
            w,
            d_e,
            field,
            values,
        }
    }

    /// Row-major token matrix `[h * w, d_e]`.
    pub fn tokens<T: Real>(&self) -> Tensor<T> {
        let data = self.values.iter().map(|&v| T::from_f64(v)).collect();
        Tensor::new(vec![self.h * self.w, self.d_e], data).expect("consistent size")
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.w + j) * self.d_e;
        &self.values[o..o + self.d_e]
    }

    /// Channel mean per cell, row-major.
    pub fn channel_mean(&self) -> Vec<f64> {
        self.values
            .chunks(self.d_e)
            .map(|c| c.iter().sum::<f64>() / self.d_e as f64)
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Stage {
    weight: ParamId,
    bias: ParamId,
}

/// Stack of `conv -> relu` stages.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<T: Real>(
        cfg: &EncoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let mut c_in = 3;
        let mut stages = Vec::with_capacity(cfg.stage_channels.len());
        for (i, &c_out) in cfg.stage_channels.iter().enumerate() {
            let weight = store.he(
                format!("encoder.conv{i}.weight"),
                &[c_out, c_in, k, k],
                c_in * k * k,
                rng,
            )?;
            let bias = store.zeros(format!("encoder.conv{i}.bias"), &[c_out])?;
            stages.push(Stage { weight, bias });
            c_in = c_out;
        }
        Ok(Self {
            cfg: cfg.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Run the stack on one image; returns a `[d_e, h, w]` var.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &Binding,
        image: &Image,
    ) -> Result<Var> {
        if image.size() != self.cfg.input_size {
            return Err(Error::shape(
                "encode",
                format!(
                    "expected {0}x{0} input, got {1}x{1}",
                    self.cfg.input_size,
                    image.size()
                ),
            ));
        }
        let mut x = g.constant(standardize(image));
        let pad = self.cfg.kernel / 2;
        for st in &self.stages {
            x = g.conv2d(
                x,
                params.var(st.weight),
                Some(params.var(st.bias)),
                self.cfg.stride,
                pad,
            )?;
            x = g.relu(x);
        }
        Ok(x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.stages
            .iter()
            .flat_map(|s| [s.weight, s.bias])
            .collect()
    }
}

/// Gain applied after centring; brings lesion contrast to roughly unit scale.
pub const INPUT_GAIN: f64 = 4.0;

/// `[3, S, S]` network input: each channel has its mean over non-black
/// pixels subtracted and is scaled by [`INPUT_GAIN`]. Black pixels stay 0.
pub fn standardize<T: Real>(image: &Image) -> Tensor<T> {
    let n = image.size() * image.size();
    let px = image.bytes();
    let fundus: Vec<bool> = px
        .chunks_exact(3)
        .map(|p| p.iter().any(|&v| v > 0))
        .collect();
    let count = fundus.iter().filter(|&&f| f).count().max(1) as f64;
    let mut out = vec![T::zero(); 3 * n];
    for c in 0..3 {
        let value = |i: usize| px[3 * i + c] as f64 / 255.0;
        let mean = (0..n).filter(|&i| fundus[i]).map(value).sum::<f64>() / count;
        for i in (0..n).filter(|&i| fundus[i]) {
            out[c * n + i] = T::from_f64((value(i) - mean) * INPUT_GAIN);
        }
    }
    Tensor::new(vec![3, image.size(), image.size()], out).expect("standardized shape")
}

/// Inference-only encoding into a [`FeatureMap`].
pub fn encode<T: Real>(
    encoder: &Encoder,
    store: &ParamStore<T>,
    image: &Image,
    field: Field,
) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let b = Binding::bind(&mut g, store, false);
    let out = encoder.forward(&mut g, &b, image)?;
    let s = g.shape(out).to_vec();
    Ok(FeatureMap::from_chw(
        g.value(out).data(),
        s[0],
        s[1],
        s[2],
        field,
    ))
}

/// Parameter-free stand-in: channel-averaged, `pool x pool` average-pooled image.
pub fn encode_stub(image: &Image, pool: usize, field: Field) -> Result<FeatureMap> {
    let s = image.size();
    if pool == 0 || !s.is_multiple_of(pool) {
        return Err(Error::shape(
            "encode_stub",
            format!("image side {s} not divisible by pool factor {pool}"),
        ));
    }
    let n = s / pool;
    let mut values = vec![0.0; n * n];
    let denom = (pool * pool * 3) as f64;
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for y in i * pool..(i + 1) * pool {
                for x in j * pool..(j + 1) * pool {
                    for c in 0..3 {
                        acc += image.value(y, x, c);
                    }
                }
            }
            values[i * n + j] = acc / denom;
        }
    }
    Ok(FeatureMap {
        h: n,
        w: n,
        d_e: 1,
        field,
        values,
    })
}
