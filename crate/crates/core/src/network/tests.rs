use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::blocks::UpsamplerKind;

fn image(n: usize, size: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 3, size, size], |_| rng.gen_range(0.0..1.0))
}

/// Parameter count tallied layer by layer from the architecture description.
fn expected_params(cfg: &ModelConfig) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| k * k * cin * cout + cout;
    let cbs = |cin, cout, k| conv(cin, cout, k) + 2 * cout;
    let we = |c: usize| conv(c, c / cfg.we_reduction, 1) + conv(c / cfg.we_reduction, c, 1);
    let pawe = |c: usize| 3 * conv(c, c, 1) + 1 + we(c) + 2 * c;
    let da = |cin: usize, cout: usize| {
        let (l, g) = (cfg.dense_depth, cfg.growth);
        (0..l).map(|i| cbs(cin + i * g, g, 3)).sum::<usize>() + cbs(cin + l * g, cout, 1) + cbs(cin, cout, 3)
    };
    let ccm = |c: usize| 1 + we(c) + cfg.cyclefc_stepsizes.len() * conv(c, c, 1);
    let up = |cin: usize, cout: usize| match cfg.upsampler {
        UpsamplerKind::Transposed => conv(cin, cout, 2),
        UpsamplerKind::Bilinear => conv(cin, cout, 1),
    };
    let c = |s: usize| cfg.channels(s);
    let mut total = conv(cfg.in_channels, c(0), 3) + conv(c(0), c(0), 3) + 2 * pawe(c(0));
    for s in 1..=cfg.stages {
        total += da(c(s - 1), c(s)) + up(c(s), c(s - 1)) + da(2 * c(s - 1), c(s - 1));
        if cfg.use_ccm {
            total += ccm(c(s - 1));
        }
    }
    total + da(c(cfg.stages), c(cfg.stages)) + conv(c(0), cfg.num_classes, 1)
}

#[test]
fn channel_schedule_and_ladder() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.channel_schedule(), vec![32, 64, 128, 256, 512, 1024]);
    let arch = Architecture::new(&cfg).unwrap();
    let ladder = arch.shape_ladder(64, 64);
    assert_eq!(ladder[0], (0, 32, 64, 64));
    assert_eq!(ladder[5], (5, 1024, 2, 2));
    for s in 1..=5 {
        assert_eq!(arch.decoder[s - 1].dense.layers[0].conv.cin, 2 * cfg.channels(s - 1));
    }
}

#[test]
fn forward_follows_shape_ladder() {
    let cfg = ModelConfig::compact(32);
    let mut model = UCycleMLP::<f64>::new(&cfg, 1).unwrap();
    let (arch, mut f) = model.session(false, 0);
    let x = f.input(image(2, 32, 2), false);
    let feats = arch.encoder_forward(&mut f, x).unwrap();
    for (&v, &(_, c, h, w)) in feats.iter().zip(&arch.shape_ladder(32, 32)) {
        assert_eq!(f.graph.shape(v), &[2, c, h, w]);
    }
    let logits = arch.decoder_forward(&mut f, &feats).unwrap();
    assert_eq!(f.graph.shape(logits), &[2, 1, 32, 32]);
}

#[test]
fn rejects_indivisible_input() {
    let mut model = UCycleMLP::<f64>::new(&ModelConfig::compact(32), 1).unwrap();
    assert!(matches!(model.predict(&image(1, 30, 0)), Err(Error::Config(_))));
    assert!(matches!(
        model.predict(&Tensor::zeros(&[1, 2, 32, 32])),
        Err(Error::Dimension { .. })
    ));
    assert!(UCycleMLP::<f64>::new(&ModelConfig { input_size: (100, 100), ..ModelConfig::default() }, 0).is_err());
}

#[test]
fn parameter_examples() {
    let model = UCycleMLP::<f32>::new(&ModelConfig::default(), 0).unwrap();
    assert_eq!(model.params.numel_with_prefix("head."), 33);
    assert_eq!(model.params.numel_with_prefix("stem.conv0."), 896);
    let total = model.count_params();
    assert_eq!(total, expected_params(model.config()));
    assert_eq!(total, 29_495_496);
    assert!((20_000_000..=30_000_000).contains(&total));
    for k in [2, 4] {
        let cfg = ModelConfig { num_classes: k, ..ModelConfig::compact(32) };
        assert_eq!(UCycleMLP::<f32>::new(&cfg, 0).unwrap().count_params(), expected_params(&cfg));
    }
}

#[test]
fn ablation_parameter_deltas() {
    let base = ModelConfig::compact(32);
    let full = UCycleMLP::<f32>::new(&base, 0).unwrap();
    let plain = UCycleMLP::<f32>::new(&ModelConfig { use_ccm: false, ..base.clone() }, 0).unwrap();
    assert_eq!(full.count_params() - plain.count_params(), full.ccm_params());
    assert_eq!(plain.ccm_params(), 0);
    assert!(plain.arch.skips.iter().all(Option::is_none));
    let names: Vec<&str> = full.params.names().filter(|n| !n.starts_with("skip")).collect();
    assert_eq!(names, plain.params.names().collect::<Vec<_>>());

    let bilinear = UCycleMLP::<f32>::new(&ModelConfig { upsampler: UpsamplerKind::Bilinear, ..base.clone() }, 0).unwrap();
    let transposed_only: usize = (1..=base.stages)
        .map(|s| full.params.numel_with_prefix(&format!("up{s}.")) - bilinear.params.numel_with_prefix(&format!("up{s}.")))
        .sum();
    let reduce: usize = (1..=base.stages).map(|s| base.channels(s) * base.channels(s - 1) + base.channels(s - 1)).sum();
    assert_eq!(full.count_params() - bilinear.count_params(), transposed_only);
    assert_eq!(bilinear.count_params(), expected_params(bilinear.config()));
    assert_eq!(transposed_only + reduce, (1..=base.stages).map(|s| full.params.numel_with_prefix(&format!("up{s}."))).sum::<usize>());
    let out = UCycleMLP::<f64>::new(bilinear.config(), 0).unwrap().predict(&image(1, 32, 3)).unwrap();
    assert_eq!(out.shape(), &[1, 1, 32, 32]);
}

#[test]
fn flop_examples() {
    let arch = Architecture::new(&ModelConfig::default()).unwrap();
    assert_eq!(arch.head.flops(224, 224), 3_211_264);
    let fc = &arch.skips[0].as_ref().unwrap().mlp.branches[0];
    assert_eq!(fc.flops(448, 224), 2 * fc.flops(224, 224));
    let report = arch.count_flops(224, 224);
    let n = 224u64 * 224;
    assert_eq!(report.position_attention, 2 * 4 * n * n * 32);
    assert!(report.total > report.position_attention);
    assert!(report.attention_share() > 0.5 && report.attention_share() < 1.0);
}

#[test]
fn eval_forward_is_pure_and_batch_independent() {
    let cfg = ModelConfig::compact(32);
    let mut model = UCycleMLP::<f64>::new(&cfg, 4).unwrap();
    let batch = image(3, 32, 5);
    let a = model.predict(&batch).unwrap();
    let b = model.predict(&batch).unwrap();
    assert_eq!(a, b);
    let per = 32 * 32;
    for i in 0..3 {
        let one = Tensor::new(&[1, 3, 32, 32], batch.data()[i * 3 * per..(i + 1) * 3 * per].to_vec()).unwrap();
        let single = model.predict(&one).unwrap();
        let slice = &a.data()[i * per..(i + 1) * per];
        let d = single.data().iter().zip(slice).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(d < 1e-12, "sample {i}: {d:e}");
    }
}

#[test]
fn multiclass_head_shape() {
    let cfg = ModelConfig { num_classes: 4, ..ModelConfig::compact(32) };
    let out = UCycleMLP::<f64>::new(&cfg, 6).unwrap().predict(&image(1, 32, 7)).unwrap();
    assert_eq!(out.shape(), &[1, 4, 32, 32]);
}

#[test]
fn same_seed_same_weights() {
    let cfg = ModelConfig::compact(32);
    let a = UCycleMLP::<f32>::new(&cfg, 9).unwrap();
    let b = UCycleMLP::<f32>::new(&cfg, 9).unwrap();
    let c = UCycleMLP::<f32>::new(&cfg, 10).unwrap();
    let values = |m: &UCycleMLP<f32>| m.params.iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>();
    assert_eq!(values(&a), values(&b));
    assert_ne!(values(&a), values(&c));
}

#[test]
fn config_text_round_trip() {
    let cfg = ModelConfig {
        num_classes: 4,
        use_ccm: false,
        upsampler: UpsamplerKind::Bilinear,
        cyclefc_stepsizes: vec![(1, 5), (5, 1)],
        input_size: (64, 96),
        dropout: 0.25,
        ..ModelConfig::default()
    };
    let mut back = ModelConfig::default();
    for (k, v) in cfg.to_pairs() {
        assert!(back.set(&k, &v).unwrap(), "{k}");
    }
    assert_eq!(back, cfg);
    assert!(!back.set("colour", "blue").unwrap());
    assert!(back.set("growth", "many").is_err());
    assert!(back.set("upsampler", "pixelshuffle").is_err());
}

#[test]
fn config_validation() {
    let ok = ModelConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        ModelConfig { num_classes: 0, ..ok.clone() },
        ModelConfig { we_reduction: 3, ..ok.clone() },
        ModelConfig { dropout: 1.0, ..ok.clone() },
        ModelConfig { cyclefc_stepsizes: vec![(3, 3)], ..ok.clone() },
        ModelConfig { input_size: (224, 200), ..ok.clone() },
        ModelConfig { growth: 0, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}
