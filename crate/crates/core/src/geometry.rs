//! Coordinate grids, optic-disc translation alignment and 2-D sinusoidal
//! position embeddings.
//!
//! Grids hold normalized coordinates: in-image points span `[-1, 1]` on each
//! axis with corner-aligned endpoints. Cells are stored row-major, so cell
//! `(i, j)` is entry `i * w + j`, the same order used when a feature map is
//! flattened into a token sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optic-disc center relative to the image extent, each axis in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelCoord {
    pub x: f64,
    pub y: f64,
}

impl RelCoord {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        let c = Self { x, y };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !(ok(self.x) && ok(self.y)) {
            return Err(Error::Config(format!(
                "relative coordinate ({}, {}) outside [0, 1]",
                self.x, self.y
            )));
        }
        Ok(())
    }

    pub fn center() -> Self {
        Self { x: 0.5, y: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Regular,
    Aligned,
}

/// `h x w` grid of normalized `(x, y)` coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub kind: GridKind,
    pub coords: Vec<[f64; 2]>,
}

impl Grid {
    pub fn at(&self, i: usize, j: usize) -> [f64; 2] {
        self.coords[i * self.w + j]
    }

    /// Per-axis offset `self - other` if it is the same at every cell.
    pub fn constant_offset_from(&self, other: &Grid, tol: f64) -> Option<[f64; 2]> {
        if self.h != other.h || self.w != other.w {
            return None;
        }
        let d0 = [
            self.coords[0][0] - other.coords[0][0],
            self.coords[0][1] - other.coords[0][1],
        ];
        let constant = self.coords.iter().zip(&other.coords).all(|(a, b)| {
            ((a[0] - b[0]) - d0[0]).abs() <= tol && ((a[1] - b[1]) - d0[1]).abs() <= tol
        });
        constant.then_some(d0)
    }

    pub fn max_abs_diff(&self, other: &Grid) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
            .fold(0.0, f64::max)
    }
}

/// Corner-aligned `n` points on `[-1, 1]`; a single point sits at 0.
pub fn linspace(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    let step = (n - 1) as f64;
    (0..n).map(|k| -1.0 + 2.0 * k as f64 / step).collect()
}

pub fn regular_grid(h: usize, w: usize) -> Grid {
    let xs = linspace(w);
    let ys = linspace(h);
    let mut coords = Vec::with_capacity(h * w);
    for &y in &ys {
        for &x in &xs {
            coords.push([x, y]);
        }
    }
    Grid {
        h,
        w,
        kind: GridKind::Regular,
        coords,
    }
}

/// Translate `g` by twice the optic-disc displacement from the fixed to the
/// moving image. The factor 2 converts `[0, 1]` relative offsets to the
/// `[-1, 1]` span of normalized grids. Coordinates may leave `[-1, 1]`.
pub fn align_grid(g: &Grid, od_fixed: RelCoord, od_moving: RelCoord) -> Grid {
    let dx = 2.0 * (od_moving.x - od_fixed.x);
    let dy = 2.0 * (od_moving.y - od_fixed.y);
    translate(g, dx, dy)
}

pub fn translate(g: &Grid, dx: f64, dy: f64) -> Grid {
    Grid {
        h: g.h,
        w: g.w,
        kind: GridKind::Aligned,
        coords: g.coords.iter().map(|c| [c[0] + dx, c[1] + dy]).collect(),
    }
}

fn sample_positions(src: usize, dst: usize) -> Vec<f64> {
    if dst == 1 {
        return vec![(src - 1) as f64 / 2.0];
    }
    let scale = (src - 1) as f64 / (dst - 1) as f64;
    (0..dst).map(|k| k as f64 * scale).collect()
}

/// Bilinear resampling of both coordinate channels at corner-aligned target
/// positions.
pub fn downsample_grid(g: &Grid, h: usize, w: usize) -> Result<Grid> {
    if h == 0 || w == 0 || h > g.h || w > g.w {
        return Err(Error::shape(
            "downsample_grid",
            format!("target {h}x{w} not within source {}x{}", g.h, g.w),
        ));
    }
    if h == g.h && w == g.w {
        return Ok(g.clone());
    }
    let ys = sample_positions(g.h, h);
    let xs = sample_positions(g.w, w);
    let mut coords = Vec::with_capacity(h * w);
    for &sy in &ys {
        let y0 = (sy.floor() as usize).min(g.h - 1);
        let y1 = (y0 + 1).min(g.h - 1);
        let ty = sy - y0 as f64;
        for &sx in &xs {
            let x0 = (sx.floor() as usize).min(g.w - 1);
            let x1 = (x0 + 1).min(g.w - 1);
            let tx = sx - x0 as f64;
            let mut c = [0.0; 2];
            for (ch, out) in c.iter_mut().enumerate() {
                let v00 = g.at(y0, x0)[ch];
                let v01 = g.at(y0, x1)[ch];
                let v10 = g.at(y1, x0)[ch];
                let v11 = g.at(y1, x1)[ch];
                let top = v00 + (v01 - v00) * tx;
                let bottom = v10 + (v11 - v10) * tx;
                *out = top + (bottom - top) * ty;
            }
            coords.push(c);
        }
    }
    Ok(Grid {
        h,
        w,
        kind: g.kind,
        coords,
    })
}

/// Pixel-index positions of a grid's cells, `[pos_x, pos_y]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Positions {
    pub h: usize,
    pub w: usize,
    pub pos: Vec<[f64; 2]>,
}

/// Map `[-1, 1]` to `[0, extent - 1]` per axis. Out-of-range input is kept.
pub fn denormalize(g: &Grid) -> Positions {
    let sx = (g.w as f64 - 1.0) / 2.0;
    let sy = (g.h as f64 - 1.0) / 2.0;
    Positions {
        h: g.h,
        w: g.w,
        pos: g
            .coords
            .iter()
            .map(|c| [(c[0] + 1.0) * sx, (c[1] + 1.0) * sy])
            .collect(),
    }
}

/// `l x d_t` position embedding; columns `[0, d_t/2)` encode x, the rest y.
#[derive(Clone, Debug, PartialEq)]
pub struct PosEmbed {
    pub l: usize,
    pub d_t: usize,
    pub values: Vec<f64>,
}

impl PosEmbed {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d_t..(i + 1) * self.d_t]
    }

    pub fn zeros(l: usize, d_t: usize) -> Self {
        Self {
            l,
            d_t,
            values: vec![0.0; l * d_t],
        }
    }
}

/// Angular frequency of sin/cos pair `i` within one axis half of width `half`.
pub fn pe_frequency(i: usize, half: usize) -> f64 {
    1.0 / 10000f64.powf((2 * i) as f64 / half as f64)
}

/// Sine/cosine embedding per axis: channel `2i` holds `sin(pos * f_i)` and
/// `2i + 1` holds `cos(pos * f_i)`, with `f_i = 10000^(-2i / (d_t/2))`.
pub fn sinusoidal_pe(p: &Positions, d_t: usize) -> Result<PosEmbed> {
    if d_t == 0 || !d_t.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "d_t = {d_t} must be a positive multiple of 4"
        )));
    }
    let half = d_t / 2;
    let freqs: Vec<f64> = (0..half / 2).map(|i| pe_frequency(i, half)).collect();
    let mut values = Vec::with_capacity(p.pos.len() * d_t);
    for cell in &p.pos {
        for axis in 0..2 {
            for &f in &freqs {
                let a = cell[axis] * f;
                values.push(a.sin());
                values.push(a.cos());
            }
        }
    }
    Ok(PosEmbed {
        l: p.pos.len(),
        d_t,
        values,
    })
}

/// Position-embedding variant used by the attention stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    /// Field 1 gets embeddings of the optic-disc aligned grid, field 2 the regular one.
    Aligned,
    /// Both fields share the regular-grid embedding.
    Regular,
    /// A learned table shared by both fields.
    Learnable,
    None,
}

impl std::str::FromStr for PeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aligned" => Ok(Self::Aligned),
            "regular" => Ok(Self::Regular),
            "learnable" => Ok(Self::Learnable),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!(
                "unknown position-embedding mode {s:?} (valid: aligned, regular, learnable, none)"
            ))),
        }
    }
}

impl std::fmt::Display for PeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Aligned => "aligned",
            Self::Regular => "regular",
            Self::Learnable => "learnable",
            Self::None => "none",
        })
    }
}

/// Image-level grid size and feature-level token grid size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridDims {
    pub image_h: usize,
    pub image_w: usize,
    pub feat_h: usize,
    pub feat_w: usize,
}

/// The two fields' grids before embedding: field 1's translated into field
/// 2's frame, field 2's regular. Both are resampled from image resolution.
pub fn field_grids(od1: RelCoord, od2: RelCoord, dims: GridDims) -> Result<(Grid, Grid)> {
    let image = regular_grid(dims.image_h, dims.image_w);
    let fixed = downsample_grid(&align_grid(&image, od1, od2), dims.feat_h, dims.feat_w)?;
    let moving = downsample_grid(&image, dims.feat_h, dims.feat_w)?;
    Ok((fixed, moving))
}

/// `(pe_field1, pe_field2)`: the macula-centric field 1 receives the aligned
/// embedding, the optic-disc-centric field 2 the regular one.
pub fn aligned_position_embeddings(
    od1: RelCoord,
    od2: RelCoord,
    dims: GridDims,
    d_t: usize,
) -> Result<(PosEmbed, PosEmbed)> {
    let (g1, g2) = field_grids(od1, od2, dims)?;
    Ok((
        sinusoidal_pe(&denormalize(&g1), d_t)?,
        sinusoidal_pe(&denormalize(&g2), d_t)?,
    ))
}

/// Embeddings for both fields under `mode`. `Learnable` and `None` carry no
/// fixed table and return `None`.
pub fn position_embeddings(
    mode: PeMode,
    od1: RelCoord,
    od2: RelCoord,
    dims: GridDims,
    d_t: usize,
) -> Result<Option<(PosEmbed, PosEmbed)>> {
    match mode {
        PeMode::Aligned => aligned_position_embeddings(od1, od2, dims, d_t).map(Some),
        PeMode::Regular => {
            let g = downsample_grid(
                &regular_grid(dims.image_h, dims.image_w),
                dims.feat_h,
                dims.feat_w,
            )?;
            let pe = sinusoidal_pe(&denormalize(&g), d_t)?;
            Ok(Some((pe.clone(), pe)))
        }
        PeMode::Learnable | PeMode::None => Ok(None),
    }
}
