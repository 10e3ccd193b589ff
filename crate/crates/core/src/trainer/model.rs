use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adacam::{adacam, adacam_node, global_loss_node, AuxHead, AuxNodes};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{invalid, Error, Result};
use crate::heads::{MainHead, Prediction};
use crate::numerics::{checkpoint, Bound, Graph, NodeId, ParamSet, Tensor};
use crate::sampler::{even_grid_anchors, pool_regions_node, rank_positions, regions, select_anchors, AnchorSet, Region};

use super::config::{Mode, TrainConfig};

/// RNG stream ids derived from the run seed.
pub(crate) mod streams {
    pub const BACKBONE: u64 = 0;
    pub const AUX: u64 = 1;
    pub const HEAD: u64 = 2;
    pub const BATCHES: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const DROPOUT: u64 = 5;
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `M = 2 / (1 + exp(-eta * A))` elementwise.
pub fn attention_mask(attention: &Tensor, eta: f64) -> Result<Tensor> {
    if !(eta > 0.0) {
        return Err(invalid!("eta must be positive, got {eta}"));
    }
    let data = attention.data().iter().map(|&a| 2.0 * crate::numerics::graph::sigmoid(eta * a)).collect();
    Tensor::new(attention.shape().to_vec(), data)
}

fn attention_mask_node(g: &mut Graph, attention: NodeId, eta: f64) -> Result<NodeId> {
    let z = g.scale(attention, eta)?;
    let s = g.sigmoid(z)?;
    g.scale(s, 2.0)
}

/// Graph nodes of one image's forward pass.
#[derive(Clone, Debug)]
pub struct SampleNodes {
    pub features: NodeId,
    pub aux: Option<AuxNodes>,
    /// AdaCAM map `[H, W]` as a graph node (mask-weighted mode only)
    pub attention_node: Option<NodeId>,
    /// anchors used for view sampling
    pub anchors: Option<AnchorSet>,
    /// main-head output `[V, C]`
    pub scores: NodeId,
}

/// Everything inference produces for one image.
#[derive(Clone, Debug)]
pub struct Inference {
    pub prediction: Prediction,
    /// main-head output per view `[V, C]`
    pub view_scores: Tensor,
    pub anchors: Option<AnchorSet>,
    /// regions in view order, for sampling modes
    pub regions: Vec<Region>,
    /// AdaCAM map `[H, W]`
    pub attention: Option<Tensor>,
    /// auxiliary score maps `[H, W, C]`
    pub score_maps: Option<Tensor>,
    pub aux_logits: Option<Vec<f64>>,
    pub features: Tensor,
}

/// Loss and parameter gradients for one batch.
#[derive(Clone, Debug)]
pub struct BatchEval {
    /// `(1/N) sum_n (global + local)`
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub anchors: Vec<Option<AnchorSet>>,
}

/// Backbone, optional auxiliary head and main head with their weights.
#[derive(Clone, Debug)]
pub struct Model {
    config: TrainConfig,
    backbone: Backbone,
    aux: Option<AuxHead>,
    head: MainHead,
    classes: usize,
    pub params: ParamSet,
}

impl Model {
    pub fn new(config: &TrainConfig, backbone: &BackboneConfig, classes: usize) -> Result<Self> {
        backbone.validate(config.region_sizes.max())?;
        let (h, w, c) = backbone.feature_shape();
        config.validate(h, w)?;
        if classes < 2 {
            return Err(Error::Config(format!("need at least two classes, got {classes}")));
        }
        let mut params = ParamSet::new();
        let bb = Backbone::init(backbone.clone(), &mut params, &mut stream_rng(config.seed, streams::BACKBONE));
        let aux = config
            .mode
            .has_aux()
            .then(|| AuxHead::init(c, classes, &mut params, &mut stream_rng(config.seed, streams::AUX)));
        let mut head = MainHead::init(
            config.head,
            c,
            classes,
            config.proto_dim,
            &mut params,
            &mut stream_rng(config.seed, streams::HEAD),
        )?;
        head.set_dropout(config.dropout);
        Ok(Model {
            config: config.clone(),
            backbone: bb,
            aux,
            head,
            classes,
            params,
        })
    }

    /// Rebuilds a model from checkpoint entries; the class count is read
    /// from the last tensor's leading extent.
    pub fn from_entries(config: &TrainConfig, backbone: &BackboneConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let classes = entries
            .last()
            .and_then(|(_, t)| t.shape().first().copied())
            .ok_or_else(|| invalid!("checkpoint holds no parameters"))?;
        let mut model = Model::new(config, backbone, classes)?;
        model.params.load_named(entries)?;
        Ok(model)
    }

    pub fn load(config: &TrainConfig, backbone: &BackboneConfig, path: &Path) -> Result<Self> {
        Model::from_entries(config, backbone, checkpoint::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params.named())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        self.backbone.config()
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn head(&self) -> &MainHead {
        &self.head
    }

    pub fn has_aux(&self) -> bool {
        self.aux.is_some()
    }

    /// Auxiliary 1x1-conv weights `[D, C]`, shared with the CAM layout.
    pub fn aux_weight(&self) -> Option<&Tensor> {
        self.aux.as_ref().map(|a| self.params.get(a.weight))
    }

    /// Forward pass for one image node. `anchors` overrides attention-based
    /// anchor selection in MFA mode.
    pub fn forward_sample(
        &self,
        g: &mut Graph,
        bound: &Bound,
        image: NodeId,
        anchors: Option<&AnchorSet>,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<SampleNodes> {
        let features = self.backbone.forward(g, bound, image)?;
        let aux = match &self.aux {
            Some(a) => Some(a.forward(g, bound, features)?),
            None => None,
        };
        let (h, w, c) = match *g.shape(features) {
            [h, w, c] => (h, w, c),
            _ => unreachable!("backbone output is rank 3"),
        };
        let mut attention_node = None;
        let mut used = None;
        let views = match self.config.mode {
            Mode::Gap => {
                let p = g.global_avg_pool(features)?;
                g.reshape(p, &[1, c])?
            }
            Mode::WoFeaAug => {
                let ax = aux.expect("aux head present");
                let a = adacam_node(g, ax.score_maps, ax.probs)?;
                attention_node = Some(a);
                let m = attention_mask_node(g, a, self.config.eta)?;
                let masked = g.mul_channels(features, m)?;
                let p = g.global_avg_pool(masked)?;
                g.reshape(p, &[1, c])?
            }
            Mode::Mfa => {
                let set = match anchors {
                    Some(set) => set.clone(),
                    None => {
                        let ax = aux.expect("aux head present");
                        let a = adacam(g.value(ax.score_maps), g.value(ax.probs).data())?;
                        select_anchors(&rank_positions(&a)?, self.config.k)?
                    }
                };
                let v = pool_regions_node(g, features, &set, &self.config.region_sizes)?;
                used = Some(set);
                v
            }
            Mode::WoAdaCam => {
                let set = match anchors {
                    Some(set) => set.clone(),
                    None => even_grid_anchors(h, w, self.config.grid_side)?,
                };
                let v = pool_regions_node(g, features, &set, &self.config.region_sizes)?;
                used = Some(set);
                v
            }
        };
        let scores = self.head.forward(g, bound, views, dropout)?;
        Ok(SampleNodes {
            features,
            aux,
            attention_node,
            anchors: used,
            scores,
        })
    }

    /// Global plus local loss of one sample.
    pub fn sample_loss(&self, g: &mut Graph, nodes: &SampleNodes, label: usize) -> Result<NodeId> {
        if label >= self.classes {
            return Err(invalid!("label {label} out of range for {} classes", self.classes));
        }
        let local = self.head.loss(g, nodes.scores, label)?;
        match nodes.aux {
            Some(ax) => {
                let global = global_loss_node(g, ax.probs, label)?;
                g.add(global, local)
            }
            None => Ok(local),
        }
    }

    /// Batch loss and gradients. `values` replaces the model's own
    /// parameters and `anchors` pins per-sample anchors; both exist for
    /// finite-difference checks.
    pub fn batch_eval(
        &self,
        values: Option<&[Tensor]>,
        images: &[Tensor],
        labels: &[usize],
        anchors: Option<&[Option<AnchorSet>]>,
        mut dropout: Option<&mut ChaCha8Rng>,
        with_grads: bool,
    ) -> Result<BatchEval> {
        if images.is_empty() {
            return Err(invalid!("empty batch"));
        }
        if images.len() != labels.len() {
            return Err(invalid!("{} images but {} labels", images.len(), labels.len()));
        }
        if let Some(a) = anchors {
            if a.len() != images.len() {
                return Err(invalid!("{} anchor sets for {} images", a.len(), images.len()));
            }
        }
        let mut g = Graph::new();
        let bound = match values {
            Some(v) => {
                if v.len() != self.params.len() {
                    return Err(invalid!("{} parameter tensors, model has {}", v.len(), self.params.len()));
                }
                Bound::from_nodes(v.iter().map(|t| g.param(t.clone())).collect())
            }
            None => self.params.bind(&mut g),
        };
        let mut total = None;
        let mut used = Vec::with_capacity(images.len());
        for (i, (img, &label)) in images.iter().zip(labels).enumerate() {
            let x = g.input(img.clone());
            let pinned = anchors.and_then(|a| a[i].as_ref());
            let nodes = self.forward_sample(&mut g, &bound, x, pinned, dropout.as_deref_mut())?;
            let l = self.sample_loss(&mut g, &nodes, label)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
            used.push(nodes.anchors);
        }
        let loss = g.scale(total.unwrap(), 1.0 / images.len() as f64)?;
        let value = g.value(loss).item();
        let grads = if with_grads && value.is_finite() {
            let mut gr = g.backward(loss)?;
            bound.nodes().iter().map(|&n| gr.take(n)).collect()
        } else {
            Vec::new()
        };
        Ok(BatchEval {
            loss: value,
            grads,
            anchors: used,
        })
    }

    /// Evaluation-mode forward pass and prediction for one image.
    pub fn infer(&self, image: &Tensor) -> Result<Inference> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let x = g.input(image.clone());
        let nodes = self.forward_sample(&mut g, &bound, x, None, None)?;
        let view_scores = g.value(nodes.scores).clone();
        let prediction = self.head.predict(&view_scores)?;
        let features = g.value(nodes.features).clone();
        let (h, w) = (features.shape()[0], features.shape()[1]);
        let regions = match &nodes.anchors {
            Some(a) => regions(a, &self.config.region_sizes, h, w)?,
            None => Vec::new(),
        };
        let (attention, score_maps, aux_logits) = match nodes.aux {
            Some(ax) => {
                let maps = g.value(ax.score_maps).clone();
                let a = adacam(&maps, g.value(ax.probs).data())?;
                (Some(a), Some(maps), Some(g.value(ax.logits).data().to_vec()))
            }
            None => (None, None, None),
        };
        Ok(Inference {
            prediction,
            view_scores,
            anchors: nodes.anchors,
            regions,
            attention,
            score_maps,
            aux_logits,
            features,
        })
    }

    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        Ok(self.infer(image)?.prediction)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Stage;
    use crate::heads::{HeadKind, ProtoLoss};
    use crate::sampler::RegionSizes;

    pub(crate) fn toy_backbone() -> BackboneConfig {
        BackboneConfig {
            input_height: 16,
            input_width: 16,
            stages: vec![Stage { out_channels: 4, kernel: 3, stride: 2 }],
        }
    }

    fn toy(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            k: 5,
            region_sizes: RegionSizes::new(vec![3, 5]).unwrap(),
            grid_side: 3,
            ..TrainConfig::default()
        }
    }

    fn image(seed: u64) -> Tensor {
        Tensor::from_fn(&[16, 16, 3], |i| ((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 1000.0)
    }

    #[test]
    fn mask_closed_forms() {
        let a = Tensor::vector(vec![0.0, 0.1, 1e6, -1e6]);
        let m = attention_mask(&a, 10.0).unwrap();
        assert_eq!(m.data()[0], 1.0);
        assert!((m.data()[1] - 2.0 / (1.0 + (-1f64).exp())).abs() < 1e-15);
        assert!((m.data()[1] - 1.4621).abs() < 1e-4);
        assert_eq!(m.data()[2], 2.0);
        assert_eq!(m.data()[3], 0.0);
        assert!(attention_mask(&a, 0.0).is_err());
    }

    #[test]
    fn view_counts_per_mode() {
        for (mode, views) in [(Mode::Gap, 1), (Mode::WoFeaAug, 1), (Mode::Mfa, 10), (Mode::WoAdaCam, 18)] {
            let m = Model::new(&toy(mode), &toy_backbone(), 3).unwrap();
            let inf = m.infer(&image(1)).unwrap();
            assert_eq!(inf.view_scores.shape(), &[views, 3], "{mode}");
            assert_eq!(inf.attention.is_some(), mode.has_aux());
        }
    }

    #[test]
    fn grid_mode_uses_grid_squared_anchors() {
        let cfg = TrainConfig {
            grid_side: 7,
            region_sizes: RegionSizes::default(),
            ..toy(Mode::WoAdaCam)
        };
        let bb = BackboneConfig {
            input_height: 32,
            input_width: 32,
            ..toy_backbone()
        };
        let m = Model::new(&cfg, &bb, 2).unwrap();
        let inf = m.infer(&Tensor::zeros(&[32, 32, 3])).unwrap();
        assert_eq!(inf.anchors.unwrap().len(), 49);
        assert_eq!(inf.view_scores.shape()[0], 196);
    }

    #[test]
    fn masked_mode_adds_only_the_aux_weights() {
        let gap = Model::new(&toy(Mode::Gap), &toy_backbone(), 3).unwrap();
        let masked = Model::new(&toy(Mode::WoFeaAug), &toy_backbone(), 3).unwrap();
        assert_eq!(masked.params.scalar_count(), gap.params.scalar_count() + 4 * 3);
        assert!(masked.infer(&image(2)).unwrap().anchors.is_none());
    }

    #[test]
    fn shared_seed_shares_backbone_and_head() {
        let gap = Model::new(&toy(Mode::Gap), &toy_backbone(), 3).unwrap();
        let mfa = Model::new(&toy(Mode::Mfa), &toy_backbone(), 3).unwrap();
        assert_eq!(gap.params.values()[0], mfa.params.values()[0]);
        assert_eq!(gap.params.values().last(), mfa.params.values().last());
    }

    #[test]
    fn single_sample_batch_is_sample_loss() {
        let m = Model::new(&toy(Mode::Mfa), &toy_backbone(), 3).unwrap();
        let img = image(3);
        let e = m.batch_eval(None, std::slice::from_ref(&img), &[1], None, None, false).unwrap();
        let mut g = Graph::new();
        let bound = m.params.bind(&mut g);
        let x = g.input(img);
        let nodes = m.forward_sample(&mut g, &bound, x, None, None).unwrap();
        let l = m.sample_loss(&mut g, &nodes, 1).unwrap();
        assert_eq!(e.loss, g.value(l).item());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = TrainConfig {
            head: HeadKind::Proto(ProtoLoss::Dce),
            ..toy(Mode::Mfa)
        };
        let m = Model::new(&cfg, &toy_backbone(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Model::load(&TrainConfig { seed: 99, ..cfg }, &toy_backbone(), &path).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.classes(), 3);
        assert!(Model::load(&toy(Mode::Gap), &toy_backbone(), &path).is_err());
    }

    #[test]
    fn batch_errors() {
        let m = Model::new(&toy(Mode::Gap), &toy_backbone(), 3).unwrap();
        assert!(m.batch_eval(None, &[], &[], None, None, false).is_err());
        assert!(m.batch_eval(None, &[image(1)], &[5], None, None, false).is_err());
        assert!(Model::new(&toy(Mode::Gap), &toy_backbone(), 1).is_err());
    }
}
