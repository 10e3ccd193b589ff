//! Loss assembly, the Adam training loop, evaluation and metrics output.

pub mod config;
pub mod model;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::backbone::BackboneConfig;
use crate::datalab::Dataset;
use crate::error::{invalid, Error, Result};
use crate::numerics::{AdamState, Tensor};

pub use config::{Mode, TrainConfig};
pub use model::{attention_mask, BatchEval, Inference, Model, SampleNodes};
use model::{stream_rng, streams};

pub const METRICS_HEADER: &str = "iter,train_loss,val_acc";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    /// mean batch loss since the previous row; the initial row holds the
    /// loss of the first training batch before any update
    pub train_loss: f64,
    pub val_acc: f64,
}

/// `printf("%.9g")` formatting.
pub fn format_g9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim(&format!("{v:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{}", r.iteration, format_g9(r.train_loss), format_g9(r.val_acc)).unwrap();
    }
    out
}

/// Mean of global + local loss over a batch, evaluation mode.
pub fn total_loss(model: &Model, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    Ok(model.batch_eval(None, images, labels, None, None, false)?.loss)
}

/// Fraction of samples predicted correctly.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid!("cannot evaluate on an empty dataset"));
    }
    if data.classes() != model.classes() {
        return Err(invalid!("dataset has {} classes, model {}", data.classes(), model.classes()));
    }
    let mut correct = 0;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        if model.predict(img)?.class == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Horizontal flip with probability 0.5, then zero-pad by `side / 16` on
/// each border and crop back to the original size at a random offset.
pub fn augment(image: &Tensor, rng: &mut impl Rng) -> Tensor {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let flip = rng.random_bool(0.5);
    let (ph, pw) = (h / 16, w / 16);
    let dy = rng.random_range(0..=2 * ph) as isize - ph as isize;
    let dx = rng.random_range(0..=2 * pw) as isize - pw as isize;
    let src = image.data();
    let mut out = Tensor::zeros(&[h, w, 3]);
    let dst = out.data_mut();
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize + dx;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let sx = if flip { w - 1 - sx as usize } else { sx as usize };
            let s = (sy as usize * w + sx) * 3;
            dst[(y * w + x) * 3..(y * w + x + 1) * 3].copy_from_slice(&src[s..s + 3]);
        }
    }
    out
}

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
}

/// [`train_with`] without progress reporting.
pub fn train(config: &TrainConfig, backbone: &BackboneConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutcome> {
    train_with(config, backbone, train_set, val_set, |_| {})
}

/// Trains from a fresh initialisation, calling `on_row` for every metrics
/// row as it is produced.
pub fn train_with(
    config: &TrainConfig,
    backbone: &BackboneConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(invalid!("training and validation sets must be non-empty"));
    }
    if train_set.classes() != val_set.classes() {
        return Err(invalid!(
            "train set has {} classes, val set {}",
            train_set.classes(),
            val_set.classes()
        ));
    }
    let expected = (backbone.input_height, backbone.input_width);
    if train_set.image_size() != Some(expected) || val_set.image_size() != Some(expected) {
        return Err(Error::Config(format!(
            "images are {:?}, backbone expects {expected:?}",
            train_set.image_size()
        )));
    }
    let mut model = Model::new(config, backbone, train_set.classes())?;
    let mut adam = AdamState::new(config.lr, model.params.values());
    let mut batch_rng = stream_rng(config.seed, streams::BATCHES);
    let mut aug_rng = stream_rng(config.seed, streams::AUGMENT);
    let mut drop_rng = stream_rng(config.seed, streams::DROPOUT);

    let mut metrics = Vec::new();
    let n = config.batch_size.min(train_set.len());
    let first = train_set.take(n);
    let initial = total_loss(&model, &first.images, &first.labels)?;
    if !initial.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {initial} at iteration 0")));
    }
    let row = MetricsRow {
        iteration: 0,
        train_loss: initial,
        val_acc: evaluate(&model, val_set)?,
    };
    on_row(&row);
    metrics.push(row);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    for it in 1..=config.iterations {
        let mut images = Vec::with_capacity(config.batch_size);
        let mut labels = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let img = &train_set.images[i];
            images.push(if config.augment { augment(img, &mut aug_rng) } else { img.clone() });
            labels.push(train_set.labels[i]);
        }
        let eval = model.batch_eval(None, &images, &labels, None, Some(&mut drop_rng), true)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss is {} at iteration {it}", eval.loss)));
        }
        adam.step(model.params.values_mut(), &eval.grads)?;
        loss_sum += eval.loss;
        loss_count += 1;
        if it % config.eval_every == 0 || it == config.iterations {
            let row = MetricsRow {
                iteration: it,
                train_loss: loss_sum / loss_count as f64,
                val_acc: evaluate(&model, val_set)?,
            };
            on_row(&row);
            metrics.push(row);
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    Ok(TrainOutcome { model, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Stage;
    use crate::heads::HeadKind;
    use crate::sampler::RegionSizes;

    #[test]
    fn g9_formatting() {
        assert_eq!(format_g9(0.0), "0");
        assert_eq!(format_g9(1.0), "1");
        assert_eq!(format_g9(0.85), "0.85");
        assert_eq!(format_g9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_g9(2.0f64.ln() * 1000.0), "693.147181");
        assert_eq!(format_g9(123456789.4), "123456789");
        assert_eq!(format_g9(1234567890.0), "1.23456789e+09");
        assert_eq!(format_g9(0.0001), "0.0001");
        assert_eq!(format_g9(0.00001234), "1.234e-05");
        assert_eq!(format_g9(9.9999999999), "10");
        assert_eq!(format_g9(-2.5), "-2.5");
    }

    #[test]
    fn augment_moves_pixels_by_at_most_the_pad() {
        let img = Tensor::from_fn(&[16, 16, 3], |i| i as f64);
        let mut rng = stream_rng(1, 0);
        let (mut flipped, mut plain) = (0, 0);
        for _ in 0..50 {
            let a = augment(&img, &mut rng);
            assert_eq!(a.shape(), img.shape());
            let (y, x) = (8, 2);
            let src = a.get(&[y, x, 0]).unwrap() as usize / 3;
            let (sy, sx) = (src / 16, src % 16);
            assert!(sy.abs_diff(y) <= 1);
            if sx.abs_diff(x) <= 1 {
                plain += 1;
            } else {
                assert!((15 - sx).abs_diff(x) <= 1);
                flipped += 1;
            }
        }
        assert!(flipped > 0 && plain > 0);
    }

    fn tiny_data() -> (Dataset, Dataset, BackboneConfig) {
        let spec = crate::datalab::SyntheticSpec {
            image_side: 16,
            train_per_class: 4,
            val_per_class: 2,
            classes: 2,
            ..Default::default()
        };
        let d = crate::datalab::synthesize(&spec).unwrap();
        let bb = BackboneConfig {
            input_height: 16,
            input_width: 16,
            stages: vec![Stage { out_channels: 4, kernel: 3, stride: 2 }],
        };
        (d.train.data, d.val.data, bb)
    }

    fn tiny_config(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            k: 4,
            region_sizes: RegionSizes::new(vec![3, 5]).unwrap(),
            grid_side: 2,
            batch_size: 3,
            iterations: 5,
            eval_every: 2,
            head: HeadKind::SingleFc,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_log_one_row() {
        let (tr, va, bb) = tiny_data();
        let out = train(&TrainConfig { iterations: 0, ..tiny_config(Mode::Mfa) }, &bb, &tr, &va).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.metrics[0].iteration, 0);
    }

    #[test]
    fn rows_at_cadence_and_end() {
        let (tr, va, bb) = tiny_data();
        let out = train(&tiny_config(Mode::WoFeaAug), &bb, &tr, &va).unwrap();
        let iters: Vec<usize> = out.metrics.iter().map(|r| r.iteration).collect();
        assert_eq!(iters, vec![0, 2, 4, 5]);
        assert!(out.metrics.iter().all(|r| (0.0..=1.0).contains(&r.val_acc)));
    }

    #[test]
    fn same_seed_same_csv() {
        let (tr, va, bb) = tiny_data();
        for mode in Mode::ALL {
            let a = train(&tiny_config(mode), &bb, &tr, &va).unwrap();
            let b = train(&tiny_config(mode), &bb, &tr, &va).unwrap();
            assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
            assert_eq!(a.model.params, b.model.params);
        }
    }

    #[test]
    fn non_finite_loss_names_iteration() {
        let (mut tr, va, bb) = tiny_data();
        // the initial-loss batch stays clean, later samples are poisoned
        for img in &mut tr.images[3..] {
            img.data_mut()[0] = f64::NAN;
        }
        let cfg = TrainConfig {
            iterations: 4,
            augment: false,
            ..tiny_config(Mode::Gap)
        };
        match train(&cfg, &bb, &tr, &va) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("at iteration 1"), "{msg}"),
            other => panic!("expected a non-finite fault, got {:?}", other.map(|o| o.metrics)),
        }
    }

    #[test]
    fn evaluate_errors_and_constant_model() {
        let (tr, va, bb) = tiny_data();
        let mut m = Model::new(&tiny_config(Mode::Gap), &bb, 2).unwrap();
        assert!(evaluate(&m, &Dataset::default()).is_err());
        // zero head weights with a biased class-1 output
        let n = m.params.len();
        m.params.values_mut()[n - 2].data_mut().fill(0.0);
        m.params.values_mut()[n - 1] = Tensor::vector(vec![0.0, 1.0]);
        let acc = evaluate(&m, &tr).unwrap();
        let freq = tr.labels.iter().filter(|&&l| l == 1).count() as f64 / tr.len() as f64;
        assert_eq!(acc, freq);
        let _ = va;
    }
}
