//! Synthetic two-field fundus eyes with planted lesions.
//!
//! Scene coordinates: one unit equals one field's side length, the macula
//! sits at the origin, `x` grows to the right and `y` downward.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RelCoord;
use crate::image::Image;
use crate::model::FieldPair;
use crate::rng::Rng;

/// Fundus aperture radius in field units.
pub const APERTURE: f64 = 0.48;
pub const DISC_RADIUS: f64 = 0.075;
pub const MACULA_RADIUS: f64 = 0.075;
const DOT_RADIUS: f64 = 0.03;
const STREAK_HALF_WIDTH: f64 = 0.015;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    Dot,
    Blob,
    Streak,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub kind: LesionKind,
    pub center: [f64; 2],
    /// Disc radius, or half-length for streaks.
    pub radius: f64,
    pub intensity: f64,
    /// Streak direction in radians.
    pub angle: f64,
}

impl Lesion {
    /// Radius of a disc around `center` that contains the lesion.
    pub fn extent(&self) -> f64 {
        match self.kind {
            LesionKind::Streak => self.radius + STREAK_HALF_WIDTH,
            _ => self.radius,
        }
    }

    fn endpoints(&self) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.angle.sin_cos();
        let d = [c * self.radius, s * self.radius];
        (
            [self.center[0] - d[0], self.center[1] - d[1]],
            [self.center[0] + d[0], self.center[1] + d[1]],
        )
    }

    fn covers(&self, p: [f64; 2]) -> bool {
        match self.kind {
            LesionKind::Streak => {
                let (a, b) = self.endpoints();
                segment_distance(p, a, b) <= STREAK_HALF_WIDTH
            }
            _ => dist(p, self.center) <= self.radius,
        }
    }

    fn color(&self) -> [f64; 3] {
        let k = self.intensity;
        match self.kind {
            LesionKind::Dot => [0.98 * k, 0.92 * k, 0.35 * k],
            LesionKind::Blob => [0.35 * k, 0.03, 0.03],
            LesionKind::Streak => [0.95 * k, 0.95 * k, 0.90 * k],
        }
    }

    /// Sample points covering the lesion's footprint.
    pub fn outline(&self) -> Vec<[f64; 2]> {
        let mut pts = vec![self.center];
        match self.kind {
            LesionKind::Streak => {
                let (a, b) = self.endpoints();
                let (s, c) = self.angle.sin_cos();
                let n = [-s * STREAK_HALF_WIDTH, c * STREAK_HALF_WIDTH];
                for t in 0..=10 {
                    let f = t as f64 / 10.0;
                    let p = [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])];
                    pts.push([p[0] + n[0], p[1] + n[1]]);
                    pts.push([p[0] - n[0], p[1] - n[1]]);
                }
            }
            _ => {
                for k in 0..16 {
                    let t = k as f64 * std::f64::consts::TAU / 16.0;
                    pts.push([
                        self.center[0] + self.radius * t.cos(),
                        self.center[1] + self.radius * t.sin(),
                    ]);
                }
            }
        }
        pts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Laterality {
    /// Optic disc to the right of the macula.
    #[serde(rename = "OD")]
    Od,
    #[serde(rename = "OS")]
    Os,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldCenter {
    Macula,
    OpticDisc,
}

impl FieldCenter {
    fn index(self) -> usize {
        match self {
            Self::Macula => 0,
            Self::OpticDisc => 1,
        }
    }
}

/// Opaque shadow in one field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub field: FieldCenter,
    pub polygon: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetinaScene {
    pub laterality: Laterality,
    pub od_center: [f64; 2],
    pub od_radius: f64,
    pub macula_center: [f64; 2],
    pub macula_radius: f64,
    pub lesions: Vec<Lesion>,
    pub grade: usize,
    pub split_evidence: bool,
    /// Scene position of each field's image center, macula field first.
    pub field_centers: [[f64; 2]; 2],
    pub exposure: [f64; 2],
    pub artifact: Option<Artifact>,
    pub noise_seed: u64,
}

impl RetinaScene {
    pub fn field_center(&self, f: FieldCenter) -> [f64; 2] {
        self.field_centers[f.index()]
    }

    /// Inside the field's square crop, optionally grown by `margin`.
    pub fn in_crop(&self, f: FieldCenter, p: [f64; 2], margin: f64) -> bool {
        let c = self.field_center(f);
        (p[0] - c[0]).abs() <= 0.5 + margin && (p[1] - c[1]).abs() <= 0.5 + margin
    }

    pub fn in_aperture(&self, f: FieldCenter, p: [f64; 2], margin: f64) -> bool {
        dist(p, self.field_center(f)) <= APERTURE - margin
    }

    /// Whether any part of `lesion` could show up in field `f`'s image.
    pub fn lesion_visible_in(&self, f: FieldCenter, lesion: &Lesion) -> bool {
        lesion.outline().iter().any(|&p| self.in_crop(f, p, 0.0))
            || dist(lesion.center, self.field_center(f)) < APERTURE + lesion.extent()
                && lesion
                    .outline()
                    .iter()
                    .any(|&p| self.in_aperture(f, p, 0.0))
    }
}

/// Stylized five-level grade from the lesion multiset.
pub fn grade_rule(lesions: &[Lesion]) -> usize {
    let count = |k| lesions.iter().filter(|l| l.kind == k).count();
    let (dots, blobs, streaks) = (
        count(LesionKind::Dot),
        count(LesionKind::Blob),
        count(LesionKind::Streak),
    );
    if streaks > 0 {
        4
    } else if dots > 10 || blobs >= 3 {
        3
    } else if (4..=10).contains(&dots) || (1..=2).contains(&blobs) {
        2
    } else if (1..=3).contains(&dots) {
        1
    } else {
        0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub size: usize,
    pub split_evidence_rate: f64,
    pub artifact_rate: f64,
    pub classes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            split_evidence_rate: 0.3,
            artifact_rate: 0.2,
            classes: 5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("split-evidence rate", self.split_evidence_rate),
            ("artifact rate", self.artifact_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(2..=5).contains(&self.classes) {
            return Err(Error::Config(format!(
                "generator supports 2 to 5 classes, got {}",
                self.classes
            )));
        }
        if self.size < 8 {
            return Err(Error::Config(format!("image size {} too small", self.size)));
        }
        Ok(())
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1])
            && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0]
        {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn lesion_counts(target: usize, rng: &mut Rng) -> (usize, usize, usize) {
    match target {
        0 => (0, 0, 0),
        1 => (rng.int_inclusive(1, 3), 0, 0),
        2 => (rng.int_inclusive(0, 3), rng.int_inclusive(1, 2), 0),
        3 => (rng.int_inclusive(12, 18), 0, 0),
        _ => (rng.int_inclusive(0, 3), rng.int_inclusive(0, 1), 1),
    }
}

struct Placement<'a> {
    scene: &'a RetinaScene,
    split: bool,
}

impl Placement<'_> {
    /// Lesion footprint fits the allowed territory and stays off the landmarks.
    fn admissible(&self, l: &Lesion) -> bool {
        let s = self.scene;
        let pts = l.outline();
        let clear_of = |c: [f64; 2], r: f64| dist(l.center, c) > r + l.extent() + 0.01;
        if !clear_of(s.od_center, s.od_radius) || !clear_of(s.macula_center, s.macula_radius) {
            return false;
        }
        let m = 0.01;
        if self.split {
            pts.iter().all(|&p| {
                s.in_aperture(FieldCenter::OpticDisc, p, m) && !s.in_crop(FieldCenter::Macula, p, m)
            })
        } else {
            let in1 = pts
                .iter()
                .all(|&p| s.in_aperture(FieldCenter::Macula, p, m));
            let in2 = pts
                .iter()
                .all(|&p| s.in_aperture(FieldCenter::OpticDisc, p, m));
            in1 || in2
        }
    }

    fn sample(&self, kind: LesionKind, rng: &mut Rng) -> Option<Lesion> {
        let (radius, intensity) = match kind {
            LesionKind::Dot => (DOT_RADIUS * rng.range(0.9, 1.1), rng.range(0.95, 1.0)),
            LesionKind::Blob => (rng.range(0.05, 0.065), rng.range(0.9, 1.1)),
            LesionKind::Streak => (0.5 * rng.range(0.16, 0.22), rng.range(0.95, 1.0)),
        };
        let s = self.scene;
        let (lo, hi) = {
            let c1 = s.field_center(FieldCenter::Macula);
            let c2 = s.field_center(FieldCenter::OpticDisc);
            (
                [c1[0].min(c2[0]) - APERTURE, c1[1].min(c2[1]) - APERTURE],
                [c1[0].max(c2[0]) + APERTURE, c1[1].max(c2[1]) + APERTURE],
            )
        };
        for _ in 0..400 {
            let l = Lesion {
                kind,
                center: [rng.range(lo[0], hi[0]), rng.range(lo[1], hi[1])],
                radius,
                intensity,
                angle: rng.range(0.0, std::f64::consts::PI),
            };
            if self.admissible(&l) {
                return Some(l);
            }
        }
        None
    }
}

/// Draw an eye whose lesions grade to `target`.
pub fn generate_scene(rng: &mut Rng, target: usize, cfg: &SynthConfig) -> Result<RetinaScene> {
    if target >= 5 {
        return Err(Error::Label {
            label: target,
            classes: 5,
        });
    }
    let laterality = if rng.bernoulli(0.5) {
        Laterality::Od
    } else {
        Laterality::Os
    };
    let side = if laterality == Laterality::Od {
        1.0
    } else {
        -1.0
    };
    let od_center = [side * rng.range(0.36, 0.44), rng.range(-0.04, 0.04)];
    let macula_center = [0.0, 0.0];
    let mut jitter = || [rng.range(-0.025, 0.025), rng.range(-0.025, 0.025)];
    let j1 = jitter();
    let j2 = jitter();
    let field_centers = [
        [macula_center[0] + j1[0], macula_center[1] + j1[1]],
        [od_center[0] + j2[0], od_center[1] + j2[1]],
    ];
    let split_evidence = target > 0 && rng.bernoulli(cfg.split_evidence_rate);
    let mut scene = RetinaScene {
        laterality,
        od_center,
        od_radius: DISC_RADIUS,
        macula_center,
        macula_radius: MACULA_RADIUS,
        lesions: Vec::new(),
        grade: target,
        split_evidence,
        field_centers,
        exposure: [rng.range(0.9, 1.1), rng.range(0.9, 1.1)],
        artifact: None,
        noise_seed: 0,
    };
    let (dots, blobs, streaks) = lesion_counts(target, rng);
    let kinds = std::iter::repeat_n(LesionKind::Streak, streaks)
        .chain(std::iter::repeat_n(LesionKind::Blob, blobs))
        .chain(std::iter::repeat_n(LesionKind::Dot, dots));
    let mut lesions = Vec::new();
    for kind in kinds {
        let placement = Placement {
            scene: &scene,
            split: split_evidence,
        };
        let l = placement
            .sample(kind, rng)
            .ok_or_else(|| Error::Contract(format!("could not place a {kind:?} lesion")))?;
        lesions.push(l);
    }
    scene.lesions = lesions;
    debug_assert_eq!(grade_rule(&scene.lesions), target);
    if rng.bernoulli(cfg.artifact_rate) {
        scene.artifact = place_artifact(&scene, rng);
    }
    scene.noise_seed = rng.below(u32::MAX as usize) as u64;
    Ok(scene)
}

fn place_artifact(scene: &RetinaScene, rng: &mut Rng) -> Option<Artifact> {
    let field = if rng.bernoulli(0.5) {
        FieldCenter::Macula
    } else {
        FieldCenter::OpticDisc
    };
    let c = scene.field_center(field);
    for _ in 0..100 {
        let r = rng.range(0.08, 0.14);
        let a = rng.range(0.0, std::f64::consts::TAU);
        let d = rng.range(0.0, APERTURE - 0.1);
        let center = [c[0] + d * a.cos(), c[1] + d * a.sin()];
        if dist(center, scene.od_center) <= r + scene.od_radius + 0.02 {
            continue;
        }
        if scene
            .lesions
            .iter()
            .any(|l| dist(center, l.center) <= r + l.extent() + 0.01)
        {
            continue;
        }
        let mut angles: Vec<f64> = (0..5)
            .map(|_| rng.range(0.0, std::f64::consts::TAU))
            .collect();
        angles.sort_by(f64::total_cmp);
        let polygon = angles
            .iter()
            .map(|t| {
                let rr = r * rng.range(0.6, 1.0);
                [center[0] + rr * t.cos(), center[1] + rr * t.sin()]
            })
            .collect();
        return Some(Artifact { field, polygon });
    }
    None
}

fn fundus_color(scene: &RetinaScene, field: FieldCenter, p: [f64; 2]) -> [f64; 3] {
    let fc = scene.field_center(field);
    let r = dist(p, fc) / APERTURE;
    let shade = 1.0 - 0.25 * r * r;
    let tex = 0.04 * (7.0 * p[0] + 2.0).sin() * (5.0 * p[1]).cos();
    let mut col = [(0.80 + tex) * shade, 0.38 * shade, 0.20 * shade];
    if dist(p, scene.macula_center) <= scene.macula_radius {
        col = [0.45, 0.16, 0.08];
    }
    if dist(p, scene.od_center) <= scene.od_radius {
        col = [0.98, 0.88, 0.60];
    }
    for l in &scene.lesions {
        if l.covers(p) {
            col = l.color();
        }
    }
    if let Some(a) = scene.artifact.as_ref().filter(|a| a.field == field) {
        if point_in_polygon(p, &a.polygon) {
            col = [0.28, 0.28, 0.28];
        }
    }
    col
}

/// Pixel coordinate (centers at integers) to relative `[0, 1]`.
fn pixel_to_rel(px: f64, size: usize) -> f64 {
    (px / (size - 1) as f64).clamp(0.0, 1.0)
}

/// Render one field; returns the image and the disc center in its relative coordinates.
pub fn render_field(scene: &RetinaScene, field: FieldCenter, size: usize) -> (Image, RelCoord) {
    let c = scene.field_center(field);
    let s = size as f64;
    let to_scene = |py: f64, px: f64| [c[0] + (px + 0.5) / s - 0.5, c[1] + (py + 0.5) / s - 0.5];
    let exposure = scene.exposure[field.index()];
    let mut noise = Rng::new(scene.noise_seed ^ ((field.index() as u64 + 1) << 40));
    const SUB: [f64; 2] = [-0.25, 0.25];
    let img = Image::from_fn(size, |y, x| {
        let mut acc = [0.0; 3];
        let mut hits = 0;
        for dy in SUB {
            for dx in SUB {
                let p = to_scene(y as f64 + dy, x as f64 + dx);
                if dist(p, c) <= APERTURE {
                    let col = fundus_color(scene, field, p);
                    for k in 0..3 {
                        acc[k] += col[k];
                    }
                    hits += 1;
                }
            }
        }
        if hits == 0 {
            return [0.0; 3];
        }
        let n = noise.normal() * 0.015;
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = acc[k] / 4.0 * exposure + n;
        }
        out
    });
    let od_px = [
        (scene.od_center[0] - c[0] + 0.5) * s - 0.5,
        (scene.od_center[1] - c[1] + 0.5) * s - 0.5,
    ];
    let od = RelCoord {
        x: pixel_to_rel(od_px[0], size),
        y: pixel_to_rel(od_px[1], size),
    };
    (img, od)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoFieldSample {
    pub eye_id: u32,
    pub pair: FieldPair,
    pub grade: usize,
    pub split_evidence: bool,
}

/// Scene and rendered pair for one eye; the eye's stream is seeded with `seed ^ eye_id`.
pub fn generate_eye(
    seed: u64,
    eye_id: u32,
    cfg: &SynthConfig,
) -> Result<(RetinaScene, TwoFieldSample)> {
    let mut rng = Rng::new(seed ^ eye_id as u64);
    let target = rng.below(cfg.classes);
    let scene = generate_scene(&mut rng, target, cfg)?;
    let (image1, od1) = render_field(&scene, FieldCenter::Macula, cfg.size);
    let (image2, od2) = render_field(&scene, FieldCenter::OpticDisc, cfg.size);
    let sample = TwoFieldSample {
        eye_id,
        pair: FieldPair {
            image1,
            image2,
            od1,
            od2,
        },
        grade: scene.grade,
        split_evidence: scene.split_evidence,
    };
    Ok((scene, sample))
}

/// Eyes `first_id .. first_id + n`.
pub fn generate_dataset(
    seed: u64,
    first_id: u32,
    n: usize,
    cfg: &SynthConfig,
) -> Result<Vec<TwoFieldSample>> {
    cfg.validate()?;
    (0..n as u32)
        .map(|i| generate_eye(seed, first_id + i, cfg).map(|(_, s)| s))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub eye_id: u32,
    pub field1_path: String,
    pub field2_path: String,
    pub od1_x: f64,
    pub od1_y: f64,
    pub od2_x: f64,
    pub od2_y: f64,
    pub grade: usize,
    pub split_evidence: bool,
}

pub const MANIFEST: &str = "manifest.jsonl";

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    PnmEncoder::new(&mut w)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(
            img.bytes(),
            img.size() as u32,
            img.size() as u32,
            ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    w.flush()?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let dec = PnmDecoder::new(BufReader::new(File::open(path)?))
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let img = DynamicImage::from_decoder(dec).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let rgb = img.to_rgb8();
    if rgb.width() != rgb.height() {
        return Err(Error::shape(
            "read_ppm",
            format!(
                "{} is {}x{}, expected square",
                path.display(),
                rgb.width(),
                rgb.height()
            ),
        ));
    }
    Image::new(rgb.width() as usize, rgb.into_raw())
}

pub fn write_dataset(samples: &[TwoFieldSample], dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST))?);
    for s in samples {
        let f1 = format!("images/{}_f1.ppm", s.eye_id);
        let f2 = format!("images/{}_f2.ppm", s.eye_id);
        write_ppm(&s.pair.image1, &dir.join(&f1))?;
        write_ppm(&s.pair.image2, &dir.join(&f2))?;
        let rec = ManifestRecord {
            eye_id: s.eye_id,
            field1_path: f1,
            field2_path: f2,
            od1_x: s.pair.od1.x,
            od1_y: s.pair.od1.y,
            od2_x: s.pair.od2.x,
            od2_y: s.pair.od2.y,
            grade: s.grade,
            split_evidence: s.split_evidence,
        };
        serde_json::to_writer(&mut manifest, &rec)?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}

fn dataset_err(eye: impl ToString, msg: impl Into<String>) -> Error {
    Error::Dataset {
        eye_id: eye.to_string(),
        msg: msg.into(),
    }
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST);
    let file = File::open(&path)
        .map_err(|e| dataset_err("-", format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            let eye = serde_json::from_str::<serde_json::Value>(&line)
                .ok()
                .and_then(|v| v.get("eye_id").map(|x| x.to_string()))
                .unwrap_or_else(|| format!("<line {}>", i + 1));
            dataset_err(eye, format!("malformed manifest record: {e}"))
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn validate_record(rec: &ManifestRecord, dir: &Path, classes: usize) -> Result<(PathBuf, PathBuf)> {
    for (name, v) in [
        ("od1_x", rec.od1_x),
        ("od1_y", rec.od1_y),
        ("od2_x", rec.od2_x),
        ("od2_y", rec.od2_y),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(dataset_err(
                rec.eye_id,
                format!("{name} = {v} outside [0, 1]"),
            ));
        }
    }
    if rec.grade >= classes {
        return Err(dataset_err(
            rec.eye_id,
            format!("grade {} outside [0, {classes})", rec.grade),
        ));
    }
    let p1 = dir.join(&rec.field1_path);
    let p2 = dir.join(&rec.field2_path);
    for p in [&p1, &p2] {
        if !p.is_file() {
            return Err(dataset_err(
                rec.eye_id,
                format!("missing image {}", p.display()),
            ));
        }
    }
    Ok((p1, p2))
}

/// Load and validate every record of `dir/manifest.jsonl`.
pub fn load_dataset(dir: &Path, classes: usize) -> Result<Vec<TwoFieldSample>> {
    let records = read_manifest(dir)?;
    let mut out = Vec::with_capacity(records.len());
    for rec in &records {
        let (p1, p2) = validate_record(rec, dir, classes)?;
        let read = |p: &Path| {
            read_ppm(p).map_err(|e| dataset_err(rec.eye_id, format!("{}: {e}", p.display())))
        };
        let image1 = read(&p1)?;
        let image2 = read(&p2)?;
        if image1.size() != image2.size() {
            return Err(dataset_err(rec.eye_id, "fields differ in size"));
        }
        out.push(TwoFieldSample {
            eye_id: rec.eye_id,
            pair: FieldPair {
                image1,
                image2,
                od1: RelCoord {
                    x: rec.od1_x,
                    y: rec.od1_y,
                },
                od2: RelCoord {
                    x: rec.od2_x,
                    y: rec.od2_y,
                },
            },
            grade: rec.grade,
            split_evidence: rec.split_evidence,
        });
    }
    Ok(out)
}
