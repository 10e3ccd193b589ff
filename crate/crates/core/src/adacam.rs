//! Auxiliary 1x1-conv classifier, label-free attention maps, and the
//! reference class activation map.
//!
//! The auxiliary head maps features `F: [H, W, D]` to per-class score maps
//! `G: [H, W, C]` with a bias-free 1x1 convolution. Global average pooling
//! of `G` gives the class logits and their softmax `f`; the attention map is
//! `A = sum_i f_i * G_i`. With the same weights, a GAP -> FC head yields the
//! same logits, which [`equivalence_oracle`] checks numerically.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::numerics::tensor::{argmax, softmax};
use crate::numerics::{Bound, Graph, NodeId, ParamId, ParamSet, Tensor};

/// Bias-free 1x1 convolution `D -> C`.
#[derive(Clone, Copy, Debug)]
pub struct AuxHead {
    pub weight: ParamId,
}

/// Graph nodes produced by [`AuxHead::forward`].
#[derive(Clone, Copy, Debug)]
pub struct AuxNodes {
    /// class score maps `[H, W, C]`
    pub score_maps: NodeId,
    /// pre-softmax logits `[C]`
    pub logits: NodeId,
    /// softmax of the logits `[C]`
    pub probs: NodeId,
}

impl AuxHead {
    pub fn init(channels: usize, classes: usize, params: &mut ParamSet, rng: &mut impl Rng) -> Self {
        let weight = params.push_normal("aux.weight", &[channels, classes], (1.0 / channels as f64).sqrt(), rng);
        AuxHead { weight }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, features: NodeId) -> Result<AuxNodes> {
        let score_maps = g.conv1x1(features, bound.node(self.weight))?;
        let logits = g.global_avg_pool(score_maps)?;
        let probs = g.softmax(logits)?;
        Ok(AuxNodes {
            score_maps,
            logits,
            probs,
        })
    }
}

/// `G = conv1x1(F)` and `f = softmax(GAP(G))` for plain tensors.
pub fn aux_forward(features: &Tensor, weight: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let mut g = Graph::new();
    let f = g.input(features.clone());
    let w = g.input(weight.clone());
    let maps = g.conv1x1(f, w)?;
    let logits = g.global_avg_pool(maps)?;
    let probs = g.softmax(logits)?;
    Ok((g.value(maps).clone(), g.value(probs).data().to_vec()))
}

fn check_one_hot(y: &[f64]) -> Result<usize> {
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    let zeros = y.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != y.len() {
        return Err(invalid!("label vector {y:?} is not one-hot"));
    }
    Ok(argmax(y))
}

/// Cross-entropy `-sum y_i ln f_i` with the log argument clamped at 1e-12.
pub fn global_loss(probs: &[f64], one_hot: &[f64]) -> Result<f64> {
    if probs.len() != one_hot.len() {
        return Err(invalid!("{} probabilities vs {} label entries", probs.len(), one_hot.len()));
    }
    let label = check_one_hot(one_hot)?;
    let mut g = Graph::new();
    let f = g.input(Tensor::vector(probs.to_vec()));
    let picked = g.pick(f, vec![label])?;
    let nl = g.neg_log(picked)?;
    let loss = g.sum(nl)?;
    Ok(g.value(loss).item())
}

/// Cross-entropy node for a probability vector and a class index.
pub fn global_loss_node(g: &mut Graph, probs: NodeId, label: usize) -> Result<NodeId> {
    let picked = g.pick(probs, vec![label])?;
    let nl = g.neg_log(picked)?;
    g.sum(nl)
}

/// Attention map `A = sum_i G_i f_i`, returned as `[H, W]`. Raw values, no
/// rectification or normalisation.
pub fn adacam(score_maps: &Tensor, probs: &[f64]) -> Result<Tensor> {
    let [h, w, c] = *score_maps.shape() else {
        return Err(invalid!("score maps must be [H, W, C], got {:?}", score_maps.shape()));
    };
    if probs.len() != c {
        return Err(invalid!("{c} score maps but {} weights", probs.len()));
    }
    let out = score_maps
        .data()
        .chunks_exact(c)
        .map(|px| px.iter().zip(probs).map(|(a, b)| a * b).sum())
        .collect();
    Tensor::new(vec![h, w], out)
}

/// Graph form of [`adacam`]; used where the map feeds differentiable ops.
pub fn adacam_node(g: &mut Graph, score_maps: NodeId, probs: NodeId) -> Result<NodeId> {
    let (h, w, c) = match *g.shape(score_maps) {
        [h, w, c] => (h, w, c),
        ref s => return Err(invalid!("score maps must be [H, W, C], got {s:?}")),
    };
    let col = g.reshape(probs, &[c, 1])?;
    let a = g.conv1x1(score_maps, col)?;
    g.reshape(a, &[h, w])
}

/// Class activation map `A_c = sum_k W1[k, c] F_k` for a GAP -> FC head with
/// weights `W1: [D, C]`.
pub fn cam_reference(features: &Tensor, fc_weight: &Tensor, class: usize) -> Result<Tensor> {
    let [h, w, d] = *features.shape() else {
        return Err(invalid!("features must be [H, W, D], got {:?}", features.shape()));
    };
    let [wd, classes] = *fc_weight.shape() else {
        return Err(invalid!("FC weight must be [D, C], got {:?}", fc_weight.shape()));
    };
    if wd != d {
        return Err(invalid!("FC weight has {wd} rows for {d} channels"));
    }
    if class >= classes {
        return Err(invalid!("class {class} out of range for {classes} classes"));
    }
    let col: Vec<f64> = (0..d).map(|k| fc_weight.data()[k * classes + class]).collect();
    let out = features
        .data()
        .chunks_exact(d)
        .map(|px| px.iter().zip(&col).map(|(a, b)| a * b).sum())
        .collect();
    Tensor::new(vec![h, w], out)
}

/// Both head layouts evaluated with shared weights.
#[derive(Clone, Debug)]
pub struct Equivalence {
    /// GAP -> FC logits
    pub cam_logits: Vec<f64>,
    /// conv1x1 -> GAP logits
    pub adacam_logits: Vec<f64>,
    pub max_abs_diff: f64,
}

/// Pre-softmax logits of the GAP -> FC head and the conv1x1 -> GAP head built
/// from the same `W: [D, C]`.
///
/// `aux_bias` adds a per-class bias to the conv1x1 head only; it exists so
/// callers can check that the comparison detects a broken head.
pub fn equivalence_oracle(features: &Tensor, weight: &Tensor, aux_bias: Option<&[f64]>) -> Result<Equivalence> {
    let [h, w, d] = *features.shape() else {
        return Err(invalid!("features must be [H, W, D], got {:?}", features.shape()));
    };
    let [wd, c] = *weight.shape() else {
        return Err(invalid!("weight must be [D, C], got {:?}", weight.shape()));
    };
    if wd != d {
        return Err(invalid!("weight has {wd} rows for {d} channels"));
    }
    // GAP then FC, with explicit loops.
    let mut u = vec![0.0; d];
    for px in features.data().chunks_exact(d) {
        for (acc, v) in u.iter_mut().zip(px) {
            *acc += v;
        }
    }
    let inv = 1.0 / (h * w) as f64;
    u.iter_mut().for_each(|v| *v *= inv);
    let cam_logits: Vec<f64> = (0..c)
        .map(|j| (0..d).map(|k| weight.data()[k * c + j] * u[k]).sum())
        .collect();

    // conv1x1 then GAP, through the graph ops the trainer uses.
    let mut g = Graph::new();
    let f = g.input(features.clone());
    let wn = g.input(weight.clone());
    let maps = g.conv1x1(f, wn)?;
    let pooled = g.global_avg_pool(maps)?;
    let mut adacam_logits = g.value(pooled).data().to_vec();
    if let Some(bias) = aux_bias {
        if bias.len() != c {
            return Err(invalid!("bias has {} entries for {c} classes", bias.len()));
        }
        adacam_logits.iter_mut().zip(bias).for_each(|(l, b)| *l += b);
    }
    let max_abs_diff = cam_logits
        .iter()
        .zip(&adacam_logits)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(Equivalence {
        cam_logits,
        adacam_logits,
        max_abs_diff,
    })
}

/// `||A(tau) - G_c'||_inf` for each temperature, where `A(tau)` weights the
/// score maps by `softmax(logits / tau)` and `c'` is the top logit.
pub fn sharpness_study(score_maps: &Tensor, logits: &[f64], temperatures: &[f64]) -> Result<Vec<f64>> {
    let [_, _, c] = *score_maps.shape() else {
        return Err(invalid!("score maps must be [H, W, C], got {:?}", score_maps.shape()));
    };
    if logits.len() != c {
        return Err(invalid!("{} logits for {c} score maps", logits.len()));
    }
    if temperatures.iter().any(|&t| !(t > 0.0)) || temperatures.windows(2).any(|p| p[1] >= p[0]) {
        return Err(invalid!("temperatures must be positive and strictly decreasing: {temperatures:?}"));
    }
    let top = argmax(logits);
    if logits.iter().enumerate().any(|(i, &l)| i != top && l == logits[top]) {
        return Err(Error::InvalidArgument("tied top logits: target class is ambiguous".into()));
    }
    temperatures
        .iter()
        .map(|&t| {
            let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
            let a = adacam(score_maps, &softmax(&scaled))?;
            Ok(a
                .data()
                .iter()
                .zip(score_maps.data().chunks_exact(c))
                .fold(0.0f64, |m, (av, px)| m.max((av - px[top]).abs())))
        })
        .collect()
}
