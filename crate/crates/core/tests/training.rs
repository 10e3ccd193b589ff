use mvfa_core::datalab::synthesize;
use mvfa_core::numerics::grad_check;
use mvfa_core::trainer::{total_loss, train};
use mvfa_core::{BackboneConfig, Mode, Model, RegionSizes, Stage, SyntheticSpec, Tensor, TrainConfig};

fn desk_backbone() -> BackboneConfig {
    BackboneConfig {
        input_height: 64,
        input_width: 64,
        stages: vec![
            Stage { out_channels: 8, kernel: 3, stride: 2 },
            Stage { out_channels: 16, kernel: 3, stride: 2 },
        ],
    }
}

#[test]
fn mfa_loss_falls_over_the_first_200_iterations() {
    let data = synthesize(&SyntheticSpec::default()).unwrap();
    let mut improved = 0;
    for seed in 0..3 {
        let config = TrainConfig {
            mode: Mode::Mfa,
            iterations: 200,
            batch_size: 16,
            lr: 3e-3,
            seed,
            eval_every: 200,
            ..TrainConfig::default()
        };
        let probe = data.train.data.take(16);
        let before = total_loss(&Model::new(&config, &desk_backbone(), 4).unwrap(), &probe.images, &probe.labels).unwrap();
        let out = train(&config, &desk_backbone(), &data.train.data, &data.val.data.take(40)).unwrap();
        let after = total_loss(&out.model, &probe.images, &probe.labels).unwrap();
        if after < before {
            improved += 1;
        }
    }
    assert!(improved >= 2, "loss fell for only {improved} of 3 seeds");
}

#[test]
fn total_loss_gradient_on_two_class_8x8_features() {
    let backbone = BackboneConfig {
        input_height: 16,
        input_width: 16,
        stages: vec![Stage { out_channels: 4, kernel: 3, stride: 2 }],
    };
    let config = TrainConfig {
        mode: Mode::Mfa,
        k: 6,
        region_sizes: RegionSizes::new(vec![3, 5]).unwrap(),
        seed: 4,
        ..TrainConfig::default()
    };
    let model = Model::new(&config, &backbone, 2).unwrap();
    assert!(model.params.scalar_count() <= 2000);
    let images: Vec<Tensor> = (0..2)
        .map(|s| Tensor::from_fn(&[16, 16, 3], |i| ((i * 37 + s * 11) % 101) as f64 / 101.0))
        .collect();
    let labels = [0, 1];
    let base = model.batch_eval(None, &images, &labels, None, None, false).unwrap();
    let report = grad_check(model.params.values(), 1e-5, |v| {
        let e = model.batch_eval(Some(v), &images, &labels, Some(&base.anchors), None, true)?;
        Ok((e.loss, e.grads))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
