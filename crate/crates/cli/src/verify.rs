//! Self-contained numerical checks: head-layout equivalence, finite-difference
//! gradients for every loss, and brute-force sampler oracles.

use std::fmt;

use mvfa_core::adacam::{equivalence_oracle, global_loss_node, AuxHead};
use mvfa_core::heads::{HeadKind, MainHead, ProtoLoss};
use mvfa_core::numerics::{grad_check, Bound, GradCheck};
use mvfa_core::sampler::{crop_region, even_grid_anchors, pool_regions, pool_regions_node, rank_positions, select_anchors};
use mvfa_core::{AnchorSet, BackboneConfig, Coord, Graph, Mode, Model, NodeId, ParamSet, RegionSizes, Stage, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const EQUIVALENCE_TOL: f64 = 1e-9;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const POOL_TOL: f64 = 1e-12;
/// finite-difference step
pub const FD_EPS: f64 = 1e-5;

/// One named check with the worst error it observed.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, max_error: f64, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            max_error,
            tolerance,
            // NaN fails
            passed: max_error <= tolerance,
        }
    }

    fn failed(name: impl Into<String>, why: impl fmt::Display) -> Self {
        Check {
            name: format!("{} ({why})", name.into()),
            max_error: f64::NAN,
            tolerance: 0.0,
            passed: false,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<44} max_err={:.3e} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.tolerance
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// `trials` random `14x14x8` feature maps with `C = 5`: GAP -> FC logits
/// against conv1x1 -> GAP logits. `aux_bias` perturbs the conv1x1 layout so
/// the check can be seen to fail.
pub fn equivalence(trials: usize, seed: u64, aux_bias: Option<f64>) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bias: Option<Vec<f64>> = aux_bias.map(|b| (1..=5).map(|j| b * j as f64).collect());
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let f = normal(&[14, 14, 8], &mut rng);
        let w = normal(&[8, 5], &mut rng);
        match equivalence_oracle(&f, &w, bias.as_deref()) {
            Ok(e) => worst = worst.max(e.max_abs_diff),
            Err(e) => return Check::failed("head layout equivalence", e),
        }
    }
    Check::new(format!("head layout equivalence ({trials} trials)"), worst, EQUIVALENCE_TOL)
}

fn gradient_check(name: &str, result: mvfa_core::Result<GradCheck>) -> Check {
    match result {
        Ok(r) => Check::new(format!("gradient: {name}"), r.max_rel_error, GRADIENT_TOL),
        Err(e) => Check::failed(format!("gradient: {name}"), e),
    }
}

/// Runs the loss on fresh parameter nodes and returns value and gradients.
fn differentiate(
    vals: &[Tensor],
    build: impl FnOnce(&mut Graph, &[NodeId]) -> mvfa_core::Result<NodeId>,
) -> mvfa_core::Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = vals.iter().map(|v| g.param(v.clone())).collect();
    let loss = build(&mut g, &nodes)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), nodes.iter().map(|&n| grads.get(n)).collect()))
}

fn global_loss_check(rng: &mut ChaCha8Rng) -> Check {
    let mut params = ParamSet::new();
    let aux = AuxHead::init(6, 4, &mut params, rng);
    let mut vals = params.values().to_vec();
    vals.push(normal(&[5, 5, 6], rng));
    let r = grad_check(&vals, FD_EPS, |v| {
        differentiate(v, |g, n| {
            let nodes = aux.forward(g, &Bound::from_nodes(vec![n[0]]), n[1])?;
            global_loss_node(g, nodes.probs, 2)
        })
    });
    gradient_check("global loss", r)
}

/// Head loss over region-pooled views of a random feature map, with the
/// anchors fixed.
fn head_loss_check(name: &str, kind: HeadKind, rng: &mut ChaCha8Rng) -> Check {
    let mut params = ParamSet::new();
    let head = match MainHead::init(kind, 4, 3, 5, &mut params, rng) {
        Ok(h) => h,
        Err(e) => return Check::failed(name, e),
    };
    let anchors = AnchorSet::new(vec![Coord::new(1, 1), Coord::new(4, 2), Coord::new(0, 5)]);
    let sizes = RegionSizes::new(vec![3, 5]).expect("odd sizes");
    let n = params.len();
    let mut vals = params.values().to_vec();
    vals.push(normal(&[6, 6, 4], rng));
    let r = grad_check(&vals, FD_EPS, |v| {
        differentiate(v, |g, nodes| {
            let views = pool_regions_node(g, nodes[n], &anchors, &sizes)?;
            let scores = head.forward::<ChaCha8Rng>(g, &Bound::from_nodes(nodes[..n].to_vec()), views, None)?;
            head.loss(g, scores, 1)
        })
    });
    gradient_check(name, r)
}

fn pooling_check(rng: &mut ChaCha8Rng) -> Check {
    let anchors = AnchorSet::new(vec![Coord::new(0, 0), Coord::new(3, 2), Coord::new(6, 6)]);
    let sizes = RegionSizes::new(vec![3, 5, 7]).expect("odd sizes");
    let weights = normal(&[9, 2], rng);
    let vals = vec![normal(&[7, 7, 2], rng)];
    let r = grad_check(&vals, FD_EPS, |v| {
        differentiate(v, |g, n| {
            let p = pool_regions_node(g, n[0], &anchors, &sizes)?;
            let w = g.input(weights.clone());
            let m = g.mul(p, w)?;
            g.sum(m)
        })
    });
    gradient_check("region average pooling", r)
}

/// A model small enough for exhaustive finite differences: 12x12 input,
/// one 4-channel stage, 6x6 features, 3 classes.
pub fn tiny_model(mode: Mode, head: HeadKind, seed: u64) -> mvfa_core::Result<Model> {
    let backbone = BackboneConfig {
        input_height: 12,
        input_width: 12,
        stages: vec![Stage { out_channels: 4, kernel: 3, stride: 2 }],
    };
    let config = TrainConfig {
        mode,
        head,
        k: 4,
        region_sizes: RegionSizes::new(vec![3, 5])?,
        grid_side: 2,
        proto_dim: 5,
        seed,
        ..TrainConfig::default()
    };
    Model::new(&config, &backbone, 3)
}

/// Full per-batch loss with anchors pinned at the unperturbed point.
fn model_loss_check(name: &str, mode: Mode, head: HeadKind, rng: &mut ChaCha8Rng) -> Check {
    let seed = rng.random();
    let model = match tiny_model(mode, head, seed) {
        Ok(m) => m,
        Err(e) => return Check::failed(name, e),
    };
    let images: Vec<Tensor> = (0..2).map(|_| Tensor::from_fn(&[12, 12, 3], |_| rng.random())).collect();
    let labels = [0, 2];
    let r = model.batch_eval(None, &images, &labels, None, None, false).and_then(|base| {
        grad_check(model.params.values(), FD_EPS, |v| {
            let e = model.batch_eval(Some(v), &images, &labels, Some(&base.anchors), None, true)?;
            Ok((e.loss, e.grads))
        })
    });
    let n = model.params.scalar_count();
    debug_assert!(n <= 2000, "{name}: {n} parameters");
    gradient_check(name, r)
}

/// Finite-difference checks for every loss in the library.
pub fn gradient_suite(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fc = HeadKind::SingleFc;
    let mce = HeadKind::Proto(ProtoLoss::Mce);
    let dce = HeadKind::Proto(ProtoLoss::Dce);
    vec![
        global_loss_check(&mut rng),
        head_loss_check("local loss (single FC)", fc, &mut rng),
        head_loss_check("MCE prototype loss", mce, &mut rng),
        head_loss_check("DCE prototype loss", dce, &mut rng),
        pooling_check(&mut rng),
        model_loss_check("total loss MFA", Mode::Mfa, fc, &mut rng),
        model_loss_check("total loss MFA, MCE head", Mode::Mfa, mce, &mut rng),
        model_loss_check("total loss MFA, DCE head", Mode::Mfa, dce, &mut rng),
        model_loss_check("total loss GAP", Mode::Gap, fc, &mut rng),
        model_loss_check("masked-GAP loss", Mode::WoFeaAug, fc, &mut rng),
        model_loss_check("total loss even grid", Mode::WoAdaCam, fc, &mut rng),
    ]
}

/// Reference ranking: sort `(value, -scan index)` descending.
fn brute_force_ranking(values: &[f64], w: usize) -> Vec<Coord> {
    let mut keyed: Vec<(f64, i64)> = values.iter().enumerate().map(|(i, &v)| (v, -(i as i64))).collect();
    keyed.sort_by(|a, b| b.partial_cmp(a).unwrap());
    keyed
        .into_iter()
        .map(|(_, neg)| {
            let i = (-neg) as usize;
            Coord::new(i % w, i / w)
        })
        .collect()
}

fn ranking_check(rng: &mut ChaCha8Rng) -> Check {
    let mut mismatches = 0usize;
    for h in 1..=6 {
        for w in 1..=6 {
            let n = h * w;
            let maps = [
                Tensor::from_fn(&[h, w], |_| rng.random::<f64>()),
                // few distinct values, many ties
                Tensor::from_fn(&[h, w], |_| f64::from(rng.random_range(0..3u8))),
                Tensor::full(&[h, w], 0.25),
            ];
            for map in maps {
                let expected = brute_force_ranking(map.data(), w);
                let Ok(ranked) = rank_positions(&map) else {
                    mismatches += 1;
                    continue;
                };
                if ranked.as_slice() != expected.as_slice() {
                    mismatches += 1;
                }
                for k in 1..=n {
                    match select_anchors(&ranked, k) {
                        Ok(a) if a.as_slice() == &expected[..k] => {}
                        _ => mismatches += 1,
                    }
                }
            }
        }
    }
    Check::new("rank/select vs brute force, H,W <= 6", mismatches as f64, 0.0)
}

fn clamp_check() -> Check {
    let (h, w) = (14, 14);
    let mut violations = 0usize;
    for r in [3, 5, 7, 9] {
        let half = (r - 1) as i64 / 2;
        for y in 0..h {
            for x in 0..w {
                let Ok(reg) = crop_region(Coord::new(x, y), r, h, w) else {
                    violations += 1;
                    continue;
                };
                let expect = (
                    (x as i64 - half).max(0) as usize,
                    (y as i64 - half).max(0) as usize,
                    (x as i64 + half).min(w as i64 - 1) as usize,
                    (y as i64 + half).min(h as i64 - 1) as usize,
                );
                let ok_bounds = reg.x_tl <= reg.x_br && reg.x_br < w && reg.y_tl <= reg.y_br && reg.y_br < h;
                if !ok_bounds || (reg.x_tl, reg.y_tl, reg.x_br, reg.y_br) != expect {
                    violations += 1;
                }
            }
        }
    }
    Check::new("region clamp invariants, 14x14, r in 3..9", violations as f64, 0.0)
}

fn pooled_means_check(rng: &mut ChaCha8Rng) -> Vec<Check> {
    let (h, w, c) = (14, 14, 8);
    let f = normal(&[h, w, c], rng);
    let attention = normal(&[h, w], rng);
    let sizes = RegionSizes::default();
    let anchors = match rank_positions(&attention).and_then(|r| select_anchors(&r, 50)) {
        Ok(a) => a,
        Err(e) => return vec![Check::failed("pooled means", e)],
    };
    let pooled = match pool_regions(&f, &anchors, &sizes) {
        Ok(p) => p,
        Err(e) => return vec![Check::failed("pooled means", e)],
    };
    let views = pooled.shape()[0];
    let mut worst = 0.0f64;
    let mut row = 0;
    for a in anchors.as_slice() {
        for &r in sizes.as_slice() {
            let half = (r - 1) / 2;
            let (x0, y0) = (a.x.saturating_sub(half), a.y.saturating_sub(half));
            let (x1, y1) = ((a.x + half).min(w - 1), (a.y + half).min(h - 1));
            for ch in 0..c {
                let mut sum = 0.0;
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        sum += f.data()[(y * w + x) * c + ch];
                    }
                }
                let mean = sum / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                if row < views {
                    worst = worst.max((pooled.data()[row * c + ch] - mean).abs());
                }
            }
            row += 1;
        }
    }
    let grid = even_grid_anchors(h, w, 7).map(|g| g.len()).unwrap_or(0);
    vec![
        Check::new("pooled vectors vs nested-loop means", worst, POOL_TOL),
        Check::new("K=50, R=4 gives 200 views", (views as f64 - 200.0).abs(), 0.0),
        Check::new("7x7 grid gives 49 anchors", (grid as f64 - 49.0).abs(), 0.0),
    ]
}

/// Exhaustive and randomized sampler oracles.
pub fn sampler_oracles(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![ranking_check(&mut rng), clamp_check()];
    out.extend(pooled_means_check(&mut rng));
    out
}

/// Every check `mvfa verify` runs.
pub fn run_all(seed: u64, aux_bias: Option<f64>) -> Report {
    let mut checks = vec![equivalence(100, seed, aux_bias)];
    checks.extend(gradient_suite(seed));
    checks.extend(sampler_oracles(seed));
    Report { checks }
}
