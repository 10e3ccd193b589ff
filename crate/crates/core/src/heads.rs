//! Main classifier heads applied to pooled view vectors, their losses, and
//! ensemble prediction across views.
//!
//! A head maps a `[V, D]` stack of view vectors to a `[V, C]` score matrix:
//! logits for the softmax and MLP heads, squared prototype distances for the
//! prototype heads. Losses are summed over views, never averaged.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::tensor::{argmax, argmin};
use crate::numerics::{Bound, Graph, NodeId, ParamId, ParamSet, Tensor};

pub const DEFAULT_DROPOUT: f64 = 0.5;
pub const PROTOTYPE_INIT_STD: f64 = 0.1;

/// Hidden-layer stacks of the MLP heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MlpVariant {
    Cls1,
    Cls2,
    Cls3,
    Cls4,
}

impl MlpVariant {
    pub fn hidden(self) -> &'static [usize] {
        match self {
            MlpVariant::Cls1 => &[256],
            MlpVariant::Cls2 => &[256, 128],
            MlpVariant::Cls3 => &[256, 128, 128],
            MlpVariant::Cls4 => &[256, 256, 128, 128],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtoLoss {
    Mce,
    Dce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    SingleFc,
    Mlp(MlpVariant),
    Proto(ProtoLoss),
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadKind::SingleFc => f.write_str("single_fc"),
            HeadKind::Mlp(v) => write!(f, "mlp:{v:?}"),
            HeadKind::Proto(ProtoLoss::Mce) => f.write_str("proto_mce"),
            HeadKind::Proto(ProtoLoss::Dce) => f.write_str("proto_dce"),
        }
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "single_fc" => HeadKind::SingleFc,
            "mlp:Cls1" => HeadKind::Mlp(MlpVariant::Cls1),
            "mlp:Cls2" => HeadKind::Mlp(MlpVariant::Cls2),
            "mlp:Cls3" => HeadKind::Mlp(MlpVariant::Cls3),
            "mlp:Cls4" => HeadKind::Mlp(MlpVariant::Cls4),
            "proto_mce" => HeadKind::Proto(ProtoLoss::Mce),
            "proto_dce" => HeadKind::Proto(ProtoLoss::Dce),
            other => {
                return Err(Error::Config(format!(
                    "unknown head '{other}' (expected single_fc, mlp:Cls1..mlp:Cls4, proto_mce, proto_dce)"
                )))
            }
        })
    }
}

impl Serialize for HeadKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for HeadKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Predicted class plus the per-class aggregate it was chosen from.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    /// summed logits (softmax heads) or summed squared distances (prototype heads)
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Layout {
    Softmax {
        weight: ParamId,
        bias: ParamId,
    },
    Mlp {
        layers: Vec<(ParamId, ParamId)>,
        dropout: f64,
    },
    Prototype {
        weight: ParamId,
        bias: ParamId,
        prototypes: ParamId,
        loss: ProtoLoss,
    },
}

/// Main classifier head; weights live in a shared [`ParamSet`].
#[derive(Clone, Debug)]
pub struct MainHead {
    kind: HeadKind,
    classes: usize,
    layout: Layout,
}

fn push_linear(params: &mut ParamSet, name: &str, inp: usize, out: usize, rng: &mut impl Rng) -> (ParamId, ParamId) {
    let w = params.push_normal(format!("{name}.weight"), &[inp, out], (1.0 / inp as f64).sqrt(), rng);
    let b = params.push(format!("{name}.bias"), Tensor::zeros(&[out]));
    (w, b)
}

impl MainHead {
    pub fn init(
        kind: HeadKind,
        in_dim: usize,
        classes: usize,
        proto_dim: usize,
        params: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if classes == 0 || in_dim == 0 {
            return Err(invalid!("head needs positive input width and class count"));
        }
        let layout = match kind {
            HeadKind::SingleFc => {
                let (weight, bias) = push_linear(params, "head.fc", in_dim, classes, rng);
                Layout::Softmax { weight, bias }
            }
            HeadKind::Mlp(variant) => {
                let mut layers = Vec::new();
                let mut width = in_dim;
                for (i, &h) in variant.hidden().iter().enumerate() {
                    layers.push(push_linear(params, &format!("head.fc{i}"), width, h, rng));
                    width = h;
                }
                let n = layers.len();
                layers.push(push_linear(params, &format!("head.fc{n}"), width, classes, rng));
                Layout::Mlp {
                    layers,
                    dropout: DEFAULT_DROPOUT,
                }
            }
            HeadKind::Proto(loss) => {
                if classes < 2 {
                    return Err(invalid!("prototype heads need at least two classes"));
                }
                if proto_dim == 0 {
                    return Err(invalid!("prototype dimension must be positive"));
                }
                let (weight, bias) = push_linear(params, "head.fc", in_dim, proto_dim, rng);
                let prototypes = params.push_normal("head.prototypes", &[classes, proto_dim], PROTOTYPE_INIT_STD, rng);
                Layout::Prototype {
                    weight,
                    bias,
                    prototypes,
                    loss,
                }
            }
        };
        Ok(MainHead { kind, classes, layout })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Overrides the MLP dropout rate; no effect on other heads.
    pub fn set_dropout(&mut self, rate: f64) {
        if let Layout::Mlp { dropout, .. } = &mut self.layout {
            *dropout = rate;
        }
    }

    pub fn is_prototype(&self) -> bool {
        matches!(self.layout, Layout::Prototype { .. })
    }

    /// `[V, D]` view vectors to `[V, C]` scores. Passing an RNG enables
    /// training-mode dropout in MLP heads.
    pub fn forward<R: Rng>(&self, g: &mut Graph, bound: &Bound, views: NodeId, dropout_rng: Option<&mut R>) -> Result<NodeId> {
        match &self.layout {
            Layout::Softmax { weight, bias } => {
                let z = g.matmul(views, bound.node(*weight))?;
                g.add_row(z, bound.node(*bias))
            }
            Layout::Mlp { layers, dropout } => {
                let mut rng = dropout_rng;
                let mut x = views;
                let last = layers.len() - 1;
                for (i, &(w, b)) in layers.iter().enumerate() {
                    let z = g.matmul(x, bound.node(w))?;
                    x = g.add_row(z, bound.node(b))?;
                    if i == last {
                        break;
                    }
                    x = g.relu(x)?;
                    if let Some(rng) = rng.as_deref_mut() {
                        let keep = 1.0 - dropout;
                        let shape = g.shape(x).to_vec();
                        let mask = Tensor::from_fn(&shape, |_| {
                            if *dropout == 0.0 || rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        });
                        let m = g.input(mask);
                        x = g.mul(x, m)?;
                    }
                }
                Ok(x)
            }
            Layout::Prototype {
                weight,
                bias,
                prototypes,
                ..
            } => {
                let z = g.matmul(views, bound.node(*weight))?;
                let v = g.add_row(z, bound.node(*bias))?;
                g.squared_distances(v, bound.node(*prototypes))
            }
        }
    }

    /// Loss summed over all rows of `scores`, each labelled `label`.
    pub fn loss(&self, g: &mut Graph, scores: NodeId, label: usize) -> Result<NodeId> {
        let rows = match *g.shape(scores) {
            [v, c] if c == self.classes => v,
            ref s => return Err(invalid!("head scores must be [V, {}], got {s:?}", self.classes)),
        };
        if rows == 0 {
            return Err(invalid!("no views to score"));
        }
        if label >= self.classes {
            return Err(invalid!("label {label} out of range for {} classes", self.classes));
        }
        match &self.layout {
            Layout::Softmax { .. } | Layout::Mlp { .. } => {
                let s = g.softmax(scores)?;
                let p = g.pick(s, vec![label; rows])?;
                let nl = g.neg_log(p)?;
                g.sum(nl)
            }
            Layout::Prototype { loss: ProtoLoss::Dce, .. } => dce_node(g, scores, label),
            Layout::Prototype { loss: ProtoLoss::Mce, .. } => mce_node(g, scores, label),
        }
    }

    /// Aggregates per-view scores into one prediction.
    pub fn predict(&self, scores: &Tensor) -> Result<Prediction> {
        let rows = score_rows(scores, self.classes)?;
        if self.is_prototype() {
            distance_predict(&rows)
        } else {
            ensemble_predict(&rows)
        }
    }

    /// Per-view class probabilities (softmax heads) or distance-softmax
    /// probabilities (prototype heads), for confidence ranking.
    pub fn view_probabilities(&self, scores: &Tensor) -> Result<Vec<Vec<f64>>> {
        let rows = score_rows(scores, self.classes)?;
        Ok(rows
            .into_iter()
            .map(|r| {
                if self.is_prototype() {
                    let neg: Vec<f64> = r.iter().map(|d| -d).collect();
                    crate::numerics::tensor::softmax(&neg)
                } else {
                    crate::numerics::tensor::softmax(&r)
                }
            })
            .collect())
    }
}

fn score_rows(scores: &Tensor, classes: usize) -> Result<Vec<Vec<f64>>> {
    match *scores.shape() {
        [v, c] if c == classes && v > 0 => Ok(scores.data().chunks_exact(c).map(<[f64]>::to_vec).collect()),
        ref s => Err(invalid!("expected non-empty [V, {classes}] scores, got {s:?}")),
    }
}

/// Distance-softmax cross-entropy summed over rows of a `[V, C]` squared
/// distance matrix.
pub fn dce_node(g: &mut Graph, distances: NodeId, label: usize) -> Result<NodeId> {
    let rows = g.shape(distances)[0];
    let neg = g.scale(distances, -1.0)?;
    let ls = g.log_softmax(neg)?;
    let p = g.pick(ls, vec![label; rows])?;
    let s = g.sum(p)?;
    g.scale(s, -1.0)
}

/// `sigmoid(d_y - d_r)` summed over rows, `r` the nearest wrong prototype of
/// each row. The choice of `r` carries no gradient.
pub fn mce_node(g: &mut Graph, distances: NodeId, label: usize) -> Result<NodeId> {
    let (rows, c) = match *g.shape(distances) {
        [v, c] => (v, c),
        ref s => return Err(invalid!("distances must be [V, C], got {s:?}")),
    };
    if c < 2 {
        return Err(invalid!("MCE needs at least two classes"));
    }
    let d = g.value(distances).data();
    let rivals: Vec<usize> = (0..rows)
        .map(|i| {
            let row = &d[i * c..(i + 1) * c];
            let mut best = usize::MAX;
            for j in (0..c).filter(|&j| j != label) {
                if best == usize::MAX || row[j] < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let own = g.pick(distances, vec![label; rows])?;
    let rival = g.pick(distances, rivals)?;
    let s = g.sub(own, rival)?;
    let sig = g.sigmoid(s)?;
    g.sum(sig)
}

/// Argmax of the coordinate-wise sum of raw logits; lowest index on ties.
pub fn ensemble_predict(logits: &[Vec<f64>]) -> Result<Prediction> {
    let first = logits.first().ok_or_else(|| invalid!("no views to ensemble"))?;
    let c = first.len();
    let mut sum = vec![0.0; c];
    for (i, row) in logits.iter().enumerate() {
        if row.len() != c {
            return Err(invalid!("view {i} has {} logits, expected {c}", row.len()));
        }
        sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    Ok(Prediction {
        class: argmax(&sum),
        scores: sum,
    })
}

/// Argmin of summed squared distances; lowest index on ties.
fn distance_predict(distances: &[Vec<f64>]) -> Result<Prediction> {
    let c = distances[0].len();
    let mut sum = vec![0.0; c];
    for row in distances {
        sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    Ok(Prediction {
        class: argmin(&sum),
        scores: sum,
    })
}

fn bind_views(features: &Tensor) -> Result<(Graph, NodeId)> {
    match *features.shape() {
        [v, _] if v > 0 => {}
        ref s => return Err(invalid!("expected a non-empty [V, D] feature stack, got {s:?}")),
    }
    let mut g = Graph::new();
    let x = g.input(features.clone());
    Ok((g, x))
}

/// Summed per-view loss of a head over `[V, D]` view vectors (evaluation
/// mode, no dropout).
pub fn local_loss(features: &Tensor, head: &MainHead, params: &ParamSet, label: usize) -> Result<f64> {
    let (mut g, x) = bind_views(features)?;
    let bound = params.bind(&mut g);
    let scores = head.forward::<rand_chacha::ChaCha8Rng>(&mut g, &bound, x, None)?;
    let l = head.loss(&mut g, scores, label)?;
    Ok(g.value(l).item())
}

/// Same as [`local_loss`]; named for prototype heads.
pub fn mfa_proto_loss(features: &Tensor, head: &MainHead, params: &ParamSet, label: usize) -> Result<f64> {
    if !head.is_prototype() {
        return Err(invalid!("mfa_proto_loss needs a prototype head, got {}", head.kind()));
    }
    local_loss(features, head, params, label)
}

/// Prototype prediction: `argmin_j sum_i ||v_i - m_j||^2`.
pub fn proto_predict(features: &Tensor, head: &MainHead, params: &ParamSet) -> Result<Prediction> {
    if !head.is_prototype() {
        return Err(invalid!("proto_predict needs a prototype head, got {}", head.kind()));
    }
    let (mut g, x) = bind_views(features)?;
    let bound = params.bind(&mut g);
    let scores = head.forward::<rand_chacha::ChaCha8Rng>(&mut g, &bound, x, None)?;
    head.predict(g.value(scores))
}

fn proto_distances(v: &[f64], prototypes: &Tensor, label: usize) -> Result<(Graph, NodeId)> {
    let [c, l] = *prototypes.shape() else {
        return Err(invalid!("prototypes must be [C, L], got {:?}", prototypes.shape()));
    };
    if v.len() != l {
        return Err(invalid!("vector has {} entries, prototypes have {l}", v.len()));
    }
    if c < 2 {
        return Err(invalid!("need at least two prototypes, got {c}"));
    }
    if label >= c {
        return Err(invalid!("label {label} out of range for {c} prototypes"));
    }
    let mut g = Graph::new();
    let x = g.input(Tensor::matrix(1, l, v.to_vec())?);
    let m = g.input(prototypes.clone());
    let d = g.squared_distances(x, m)?;
    Ok((g, d))
}

/// MCE loss of one embedding against a `[C, L]` prototype bank.
pub fn mce_loss(v: &[f64], prototypes: &Tensor, label: usize) -> Result<f64> {
    let (mut g, d) = proto_distances(v, prototypes, label)?;
    let l = mce_node(&mut g, d, label)?;
    Ok(g.value(l).item())
}

/// DCE loss of one embedding against a `[C, L]` prototype bank.
pub fn dce_loss(v: &[f64], prototypes: &Tensor, label: usize) -> Result<f64> {
    let (mut g, d) = proto_distances(v, prototypes, label)?;
    let l = dce_node(&mut g, d, label)?;
    Ok(g.value(l).item())
}
