use mvfa_core::adacam::{adacam, aux_forward, cam_reference, equivalence_oracle, global_loss};
use mvfa_core::heads::{dce_loss, ensemble_predict, mce_loss};
use mvfa_core::numerics::tensor::softmax;
use mvfa_core::sampler::{crop_region, pool_regions, rank_positions, select_anchors};
use mvfa_core::{Coord, Graph, RegionSizes, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

/// Features `[H, W, D]` with the matching weight `[D, C]`.
fn features_and_weight() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..6, 1usize..6, 1usize..5, 1usize..5)
        .prop_flat_map(|(h, w, d, c)| (tensor(vec![h, w, d]), tensor(vec![d, c])))
}

fn probs(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, c).prop_map(|l| softmax(&l))
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(l in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax(&l);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn forward_is_pure((f, w) in features_and_weight()) {
        let run = || {
            let mut g = Graph::new();
            let a = g.input(f.clone());
            let b = g.param(w.clone());
            let m = g.conv1x1(a, b).unwrap();
            let p = g.global_avg_pool(m).unwrap();
            let s = g.softmax(p).unwrap();
            g.value(s).clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn head_layouts_agree((f, w) in features_and_weight()) {
        prop_assert!(equivalence_oracle(&f, &w, None).unwrap().max_abs_diff <= 1e-9);
    }

    #[test]
    fn adacam_is_linear_in_the_weights(
        (g, f1, f2) in (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(h, w, c)| (tensor(vec![h, w, c]), probs(c), probs(c))),
        alpha in 0.0f64..=1.0,
    ) {
        let mix: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let lhs = adacam(&g, &mix).unwrap();
        let a1 = adacam(&g, &f1).unwrap();
        let a2 = adacam(&g, &f2).unwrap();
        for ((l, x), y) in lhs.data().iter().zip(a1.data()).zip(a2.data()) {
            prop_assert!((l - (alpha * x + (1.0 - alpha) * y)).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_hot_weights_give_the_cam((f, w) in features_and_weight(), pick in any::<prop::sample::Index>()) {
        let c = w.shape()[1];
        let class = pick.index(c);
        let (maps, _) = aux_forward(&f, &w).unwrap();
        let mut one_hot = vec![0.0; c];
        one_hot[class] = 1.0;
        let a = adacam(&maps, &one_hot).unwrap();
        let cam = cam_reference(&f, &w, class).unwrap();
        prop_assert!(a.max_abs_diff(&cam) <= 1e-12);
    }

    #[test]
    fn global_loss_is_non_negative(p in (1usize..8).prop_flat_map(probs), pick in any::<prop::sample::Index>()) {
        let mut y = vec![0.0; p.len()];
        y[pick.index(p.len())] = 1.0;
        prop_assert!(global_loss(&p, &y).unwrap() >= 0.0);
    }

    #[test]
    fn ranking_matches_exhaustive_sort(
        map in (1usize..=6, 1usize..=6).prop_flat_map(|(h, w)| {
            prop::collection::vec(0u8..4, h * w).prop_map(move |v| {
                Tensor::new(vec![h, w], v.into_iter().map(f64::from).collect()).unwrap()
            })
        }),
    ) {
        let w = map.shape()[1];
        let mut keyed: Vec<(f64, i64)> = map.data().iter().enumerate().map(|(i, &v)| (v, -(i as i64))).collect();
        keyed.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let expected: Vec<Coord> = keyed.iter().map(|&(_, n)| Coord::new((-n) as usize % w, (-n) as usize / w)).collect();
        let ranked = rank_positions(&map).unwrap();
        prop_assert_eq!(ranked.as_slice(), expected.as_slice());
        for k in 1..=expected.len() {
            let anchors = select_anchors(&ranked, k).unwrap();
            prop_assert_eq!(anchors.as_slice(), &expected[..k]);
        }
    }

    #[test]
    fn regions_stay_in_bounds(h in 1usize..20, w in 1usize..20, r in 0usize..6, cx in 0usize..20, cy in 0usize..20) {
        let r = 2 * r + 1;
        let (x, y) = (cx % w, cy % h);
        let reg = crop_region(Coord::new(x, y), r, h, w).unwrap();
        prop_assert!(reg.x_tl <= x && x <= reg.x_br && reg.x_br < w);
        prop_assert!(reg.y_tl <= y && y <= reg.y_br && reg.y_br < h);
        prop_assert!(reg.x_br - reg.x_tl < r && reg.y_br - reg.y_tl < r);
    }

    #[test]
    fn pooled_views_are_region_means(
        f in tensor(vec![9, 9, 2]),
        centres in prop::collection::vec((0usize..9, 0usize..9), 1..6),
        sizes in prop::sample::subsequence(vec![1usize, 3, 5, 7, 9], 1..=5),
    ) {
        let anchors = mvfa_core::AnchorSet::new(centres.iter().map(|&(x, y)| Coord::new(x, y)).collect());
        let sizes = RegionSizes::new(sizes).unwrap();
        let p = pool_regions(&f, &anchors, &sizes).unwrap();
        prop_assert_eq!(p.shape(), &[anchors.len() * sizes.len(), 2]);
        let mut row = 0;
        for &(x, y) in &centres {
            for &r in sizes.as_slice() {
                let half = (r - 1) / 2;
                let (x0, y0, x1, y1) = (x.saturating_sub(half), y.saturating_sub(half), (x + half).min(8), (y + half).min(8));
                for ch in 0..2 {
                    let mut s = 0.0;
                    for yy in y0..=y1 {
                        for xx in x0..=x1 {
                            s += f.get(&[yy, xx, ch]).unwrap();
                        }
                    }
                    let mean = s / ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
                    prop_assert!((p.get(&[row, ch]).unwrap() - mean).abs() <= 1e-12);
                }
                row += 1;
            }
        }
    }

    #[test]
    fn ensemble_ignores_order_and_uniform_shifts(
        views in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..10),
        shift in -5.0f64..5.0,
        seed in any::<u64>(),
    ) {
        // near-ties can flip under rounding, so only clear winners are compared
        let mut sums: Vec<f64> = (0..4).map(|j| views.iter().map(|v| v[j]).sum()).collect();
        sums.sort_by(|a, b| b.total_cmp(a));
        prop_assume!(sums[0] - sums[1] > 1e-9);
        let base = ensemble_predict(&views).unwrap().class;
        let mut permuted = views.clone();
        let n = permuted.len();
        permuted.rotate_left(seed as usize % n);
        permuted.swap(0, (seed as usize / 7) % n);
        prop_assert_eq!(ensemble_predict(&permuted).unwrap().class, base);
        let shifted: Vec<Vec<f64>> = views.iter().map(|v| v.iter().map(|a| a + shift).collect()).collect();
        prop_assert_eq!(ensemble_predict(&shifted).unwrap().class, base);
    }

    #[test]
    fn prototype_losses_stay_in_range(
        m in tensor(vec![3, 4]),
        v in prop::collection::vec(-3.0f64..3.0, 4),
        y in 0usize..3,
    ) {
        let mce = mce_loss(&v, &m, y).unwrap();
        let dist = |j: usize| (0..4).map(|l| (v[l] - m.get(&[j, l]).unwrap()).powi(2)).sum::<f64>();
        let rival = (0..3).filter(|&j| j != y).map(dist).fold(f64::INFINITY, f64::min);
        let s = dist(y) - rival;
        prop_assert!((mce - 1.0 / (1.0 + (-s).exp())).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&mce));
        // beyond |s| ~ 37 the sigmoid rounds to exactly 0 or 1 in f64
        if s.abs() < 36.0 {
            prop_assert!(mce > 0.0 && mce < 1.0);
        }
        prop_assert!(dce_loss(&v, &m, y).unwrap() >= 0.0);
    }
}
