//! Two-field classifier and the fusion baselines it is compared against.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{
    flatten_tokens, fundus_mask, AttentionRecord, CfaConfig, CfaStack, FundusMask, Projection,
};
use crate::autodiff::{Binding, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::encoder::{Encoder, EncoderConfig, FeatureMap, Field};
use crate::error::{Error, Result};
use crate::geometry::{position_embeddings, GridDims, PeMode, RelCoord};
use crate::image::Image;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[serde(rename = "crossfit")]
    CrossFit,
    FeatMax,
    FeatAvg,
    FeatConcat,
    PredAvg,
    PredMax,
    #[serde(rename = "single_field_1")]
    SingleField1,
    #[serde(rename = "single_field_2")]
    SingleField2,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::CrossFit,
        Strategy::FeatMax,
        Strategy::FeatAvg,
        Strategy::FeatConcat,
        Strategy::PredAvg,
        Strategy::PredMax,
        Strategy::SingleField1,
        Strategy::SingleField2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::CrossFit => "crossfit",
            Self::FeatMax => "feat_max",
            Self::FeatAvg => "feat_avg",
            Self::FeatConcat => "feat_concat",
            Self::PredAvg => "pred_avg",
            Self::PredMax => "pred_max",
            Self::SingleField1 => "single_field_1",
            Self::SingleField2 => "single_field_2",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL
            .iter()
            .map(|s| s.name())
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn is_decision_level(self) -> bool {
        matches!(self, Self::PredAvg | Self::PredMax)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy {s:?} (valid: {})",
                    Self::valid_names()
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossFiTConfig {
    pub encoder: EncoderConfig,
    pub cfa: CfaConfig,
    pub strategy: Strategy,
    pub pe_mode: PeMode,
    pub mask: bool,
    pub classes: usize,
}

impl Default for CrossFiTConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            cfa: CfaConfig::default(),
            strategy: Strategy::CrossFit,
            pe_mode: PeMode::Aligned,
            mask: true,
            classes: 5,
        }
    }
}

impl CrossFiTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        self.encoder.validate()?;
        self.cfa.validate()
    }

    pub fn tokens_per_field(&self) -> usize {
        let s = self.encoder.feature_size();
        s * s
    }

    pub fn grid_dims(&self) -> GridDims {
        let f = self.encoder.feature_size();
        GridDims {
            image_h: self.encoder.input_size,
            image_w: self.encoder.input_size,
            feat_h: f,
            feat_w: f,
        }
    }
}

/// One eye: both photographs and their optic-disc annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldPair {
    pub image1: Image,
    pub image2: Image,
    pub od1: RelCoord,
    pub od2: RelCoord,
}

impl FieldPair {
    /// Mirror both fields left-right.
    pub fn flipped(&self) -> Self {
        Self {
            image1: self.image1.flipped_horizontal(),
            image2: self.image2.flipped_horizontal(),
            od1: RelCoord {
                x: 1.0 - self.od1.x,
                y: self.od1.y,
            },
            od2: RelCoord {
                x: 1.0 - self.od2.x,
                y: self.od2.y,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub grade: usize,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let probabilities = e.iter().map(|v| v / z).collect();
        let grade = argmax(&logits);
        Self {
            logits,
            probabilities,
            grade,
        }
    }

    fn from_probabilities(probabilities: Vec<f64>) -> Self {
        Self {
            logits: probabilities.iter().map(|p| p.ln()).collect(),
            grade: argmax(&probabilities),
            probabilities,
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Combine the two single-field predictions.
pub fn forward_decision(
    p1: &Prediction,
    p2: &Prediction,
    strategy: Strategy,
) -> Result<Prediction> {
    match strategy {
        Strategy::PredAvg => Ok(Prediction::from_probabilities(
            p1.probabilities
                .iter()
                .zip(&p2.probabilities)
                .map(|(a, b)| 0.5 * (a + b))
                .collect(),
        )),
        Strategy::PredMax => Ok(if p2.grade > p1.grade {
            p2.clone()
        } else {
            p1.clone()
        }),
        other => Err(Error::Config(format!(
            "{other} is not a decision-level strategy"
        ))),
    }
}

/// Mean of the kept rows of `[l, d]`; plain mean without a mask.
pub fn global_pool<T: Real>(g: &mut Graph<T>, x: Var, mask: Option<&FundusMask>) -> Result<Var> {
    match mask {
        Some(m) => g.weighted_row_mean(x, &m.weights()),
        None => g.mean_axis(x, 0),
    }
}

/// Feature-level fusion of two pooled vectors.
pub fn fuse<T: Real>(g: &mut Graph<T>, a: Var, b: Var, strategy: Strategy) -> Result<Var> {
    match strategy {
        Strategy::CrossFit | Strategy::FeatMax => g.max2(a, b),
        Strategy::FeatAvg => {
            let s = g.add(a, b)?;
            Ok(g.scale(s, 0.5))
        }
        Strategy::FeatConcat => g.concat(&[a, b], 0),
        other => Err(Error::Config(format!(
            "{other} is not a feature-level strategy"
        ))),
    }
}

/// Logits produced by one forward pass.
pub enum Heads {
    Joint(Var),
    /// One classifier output per field (decision-level strategies).
    PerField(Var, Var),
}

pub struct Forward {
    pub heads: Heads,
    pub masks: (FundusMask, FundusMask),
    pub record: Option<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: CrossFiTConfig,
    pub encoder: Encoder,
    pub proj: Option<Projection>,
    pub cfa: Option<CfaStack>,
    pub pe_table: Option<ParamId>,
    pub classifier: Projection,
}

impl Model {
    /// Build the model and register its parameters in `store`.
    pub fn new<T: Real>(
        cfg: &CrossFiTConfig,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(&cfg.encoder, store, rng)?;
        let d_e = cfg.encoder.out_channels();
        let d_t = cfg.cfa.d_t;
        let c = cfg.classes;
        let (proj, cfa, pe_table, head_in) = if cfg.strategy == Strategy::CrossFit {
            let proj = Projection::new(store, "proj", d_e, d_t, rng)?;
            let cfa = CfaStack::new(&cfg.cfa, store, rng)?;
            let pe_table = if cfg.pe_mode == PeMode::Learnable {
                let l = cfg.tokens_per_field();
                let data = (0..l * d_t)
                    .map(|_| T::from_f64(0.02 * rng.normal()))
                    .collect();
                Some(store.insert("pe.table", Tensor::new(vec![l, d_t], data)?)?)
            } else {
                None
            };
            (Some(proj), Some(cfa), pe_table, d_t)
        } else if cfg.strategy == Strategy::FeatConcat {
            (None, None, None, 2 * d_e)
        } else {
            (None, None, None, d_e)
        };
        let classifier = Projection::new(store, "classifier", head_in, c, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            proj,
            cfa,
            pe_table,
            classifier,
        })
    }

    fn field_mask<T: Real>(&self, g: &Graph<T>, x: Var, field: Field) -> Result<FundusMask> {
        let s = g.shape(x);
        let fm = FeatureMap::from_chw(g.value(x).data(), s[0], s[1], s[2], field);
        if self.cfg.mask {
            fundus_mask(&fm, self.cfg.cfa.threshold)
        } else {
            Ok(FundusMask::all_ones(fm.h * fm.w))
        }
    }

    fn pool<T: Real>(&self, g: &mut Graph<T>, x: Var, m: &FundusMask) -> Result<Var> {
        global_pool(g, x, self.cfg.mask.then_some(m))
    }

    /// Build the forward graph for one eye.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        pair: &FieldPair,
        capture: bool,
    ) -> Result<Forward> {
        if pair.image1.size() != pair.image2.size() {
            return Err(Error::shape(
                "forward",
                format!(
                    "field sizes differ: {} vs {}",
                    pair.image1.size(),
                    pair.image2.size()
                ),
            ));
        }
        let single = match self.cfg.strategy {
            Strategy::SingleField1 => Some(1),
            Strategy::SingleField2 => Some(2),
            _ => None,
        };
        if let Some(k) = single {
            let (img, field) = if k == 1 {
                (&pair.image1, Field::MaculaCentric)
            } else {
                (&pair.image2, Field::OpticDiscCentric)
            };
            let x = self.encoder.forward(g, b, img)?;
            let m = self.field_mask(g, x, field)?;
            let t = flatten_tokens(g, x)?;
            let p = self.pool(g, t, &m)?;
            let logits = self.classifier.apply(g, b, p)?;
            let ones = FundusMask::all_ones(m.len());
            let masks = if k == 1 { (m, ones) } else { (ones, m) };
            return Ok(Forward {
                heads: Heads::Joint(logits),
                masks,
                record: None,
            });
        }

        let x1 = self.encoder.forward(g, b, &pair.image1)?;
        let x2 = self.encoder.forward(g, b, &pair.image2)?;
        let m1 = self.field_mask(g, x1, Field::MaculaCentric)?;
        let m2 = self.field_mask(g, x2, Field::OpticDiscCentric)?;
        let t1 = flatten_tokens(g, x1)?;
        let t2 = flatten_tokens(g, x2)?;

        match self.cfg.strategy {
            Strategy::CrossFit => {
                let proj = self.proj.as_ref().expect("crossfit projection");
                let cfa = self.cfa.as_ref().expect("crossfit attention");
                let f1 = proj.apply(g, b, t1)?;
                let f2 = proj.apply(g, b, t2)?;
                let pe = match self.cfg.pe_mode {
                    PeMode::Learnable => {
                        let t = b.var(self.pe_table.expect("learnable table"));
                        Some((t, t))
                    }
                    mode => position_embeddings(
                        mode,
                        pair.od1,
                        pair.od2,
                        self.cfg.grid_dims(),
                        self.cfg.cfa.d_t,
                    )?
                    .map(|(p1, p2)| {
                        let shape = [p1.l, p1.d_t];
                        let a = g.constant(Tensor::from_f64(&shape, &p1.values).expect("pe shape"));
                        let c = g.constant(Tensor::from_f64(&shape, &p2.values).expect("pe shape"));
                        (a, c)
                    }),
                };
                let out = cfa.forward(g, b, f1, f2, pe, &m1, &m2, capture)?;
                let p1 = self.pool(g, out.g1, &m1)?;
                let p2 = self.pool(g, out.g2, &m2)?;
                let fused = fuse(g, p1, p2, Strategy::CrossFit)?;
                let logits = self.classifier.apply(g, b, fused)?;
                Ok(Forward {
                    heads: Heads::Joint(logits),
                    masks: (m1, m2),
                    record: out.record,
                })
            }
            Strategy::FeatMax | Strategy::FeatAvg | Strategy::FeatConcat => {
                let p1 = self.pool(g, t1, &m1)?;
                let p2 = self.pool(g, t2, &m2)?;
                let fused = fuse(g, p1, p2, self.cfg.strategy)?;
                let logits = self.classifier.apply(g, b, fused)?;
                Ok(Forward {
                    heads: Heads::Joint(logits),
                    masks: (m1, m2),
                    record: None,
                })
            }
            Strategy::PredAvg | Strategy::PredMax => {
                let p1 = self.pool(g, t1, &m1)?;
                let p2 = self.pool(g, t2, &m2)?;
                let l1 = self.classifier.apply(g, b, p1)?;
                let l2 = self.classifier.apply(g, b, p2)?;
                Ok(Forward {
                    heads: Heads::PerField(l1, l2),
                    masks: (m1, m2),
                    record: None,
                })
            }
            Strategy::SingleField1 | Strategy::SingleField2 => unreachable!("handled above"),
        }
    }

    /// Training loss for one eye. Decision-level strategies sum the
    /// cross-entropy of both fields' heads.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        b: &Binding,
        pair: &FieldPair,
        label: usize,
    ) -> Result<Var> {
        if label >= self.cfg.classes {
            return Err(Error::Label {
                label,
                classes: self.cfg.classes,
            });
        }
        match self.forward(g, b, pair, false)?.heads {
            Heads::Joint(logits) => ce_single(g, logits, label),
            Heads::PerField(l1, l2) => loss_single_field(g, l1, l2, label),
        }
    }

    /// Inference with frozen parameters.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, pair: &FieldPair) -> Result<Prediction> {
        Ok(self.predict_detailed(store, pair, false)?.0)
    }

    pub fn predict_detailed<T: Real>(
        &self,
        store: &ParamStore<T>,
        pair: &FieldPair,
        capture: bool,
    ) -> Result<(Prediction, Forward)> {
        let mut g = Graph::new();
        let b = Binding::bind(&mut g, store, false);
        let fwd = self.forward(&mut g, &b, pair, capture)?;
        let read = |v: Var| g.value(v).to_f64_vec();
        let pred = match fwd.heads {
            Heads::Joint(l) => Prediction::from_logits(read(l)),
            Heads::PerField(l1, l2) => forward_decision(
                &Prediction::from_logits(read(l1)),
                &Prediction::from_logits(read(l2)),
                self.cfg.strategy,
            )?,
        };
        Ok((pred, fwd))
    }

    /// Parameters owned by the attention stack, projection and learned table.
    pub fn cfa_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(p) = &self.proj {
            ids.extend(p.ids());
        }
        if let Some(c) = &self.cfa {
            ids.extend(c.param_ids());
        }
        ids.extend(self.pe_table);
        ids
    }
}

fn ce_single<T: Real>(g: &mut Graph<T>, logits: Var, label: usize) -> Result<Var> {
    let n = g.shape(logits)[0];
    let row = g.reshape(logits, &[1, n])?;
    g.cross_entropy_logits(row, &[label])
}

/// `CE(l1, y) + CE(l2, y)`: each field's head is trained against the eye label.
pub fn loss_single_field<T: Real>(g: &mut Graph<T>, l1: Var, l2: Var, label: usize) -> Result<Var> {
    let a = ce_single(g, l1, label)?;
    let c = ce_single(g, l2, label)?;
    g.add(a, c)
}
