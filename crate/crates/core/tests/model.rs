mod common;

use sta_unet::flops::flops_model;
use sta_unet::kernels::mac_counter;
use sta_unet::model::{ModelConfig, StaUnet};
use sta_unet::{Error, Graph};

fn tiny() -> ModelConfig {
    ModelConfig::with_schedule(1, 3, 4, (32, 64), [1, 1, 2, 1], [2, 2, 1, 1], [1, 2, 2, 4])
}

#[test]
fn parameter_count_matches_store() {
    for cfg in [tiny(), ModelConfig::standard(2, 4, 8, (64, 64)), ModelConfig::standard(1, 9, 64, (224, 224))] {
        let model = StaUnet::<f32>::new(cfg.clone(), &mut common::rng(0)).unwrap();
        assert_eq!(cfg.parameter_count(), model.params.trainable_count());
    }
}

#[test]
fn probabilities_are_normalized_per_pixel() {
    let cfg = tiny();
    let mut model = StaUnet::<f64>::new(cfg, &mut common::rng(3)).unwrap();
    let x = common::uniform(&mut common::rng(4), &[2, 1, 32, 64], 1.0);
    let p = model.predict(&x).unwrap();
    assert_eq!(p.shape(), &[2, 3, 32, 64]);
    let plane = 32 * 64;
    for n in 0..2 {
        for i in 0..plane {
            let s: f64 = (0..3).map(|k| p.data()[(n * 3 + k) * plane + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn trace_lists_blocks_in_execution_order() {
    let mut model = StaUnet::<f32>::new(tiny(), &mut common::rng(1)).unwrap();
    let mut g = Graph::new();
    let x = g.constant(sta_unet::Tensor::zeros(&[1, 1, 32, 64]));
    let (out, _) = model.forward(&mut g, x, false, false).unwrap();
    let names: Vec<&str> = out.trace.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, model.block_names());
    assert_eq!(
        names,
        [
            "encoder1.sta0",
            "encoder2.sta0",
            "encoder3.sta0",
            "encoder3.sta1",
            "encoder4.sta0",
            "decoder4.sta0",
            "decoder3.sta0",
            "decoder3.sta1",
            "decoder2.sta0",
            "decoder1.sta0"
        ]
    );
    assert_eq!(out.trace[0].shape, [1, 4, 16, 32]);
    assert_eq!(out.trace[4].shape, [1, 32, 2, 4]);
    assert_eq!(out.trace[5].shape, [1, 32, 4, 8]);
    assert_eq!(out.trace[9].shape, [1, 4, 32, 64]);
}

#[test]
fn analytic_flops_equal_instrumented_macs() {
    for cfg in [tiny(), ModelConfig::standard(1, 2, 2, (32, 32)).with_token_sizes([4, 2, 2, 1])] {
        let mut model = StaUnet::<f64>::new(cfg.clone(), &mut common::rng(2)).unwrap();
        let x = common::uniform(&mut common::rng(5), &[1, 1, cfg.input_extent.0, cfg.input_extent.1], 1.0);
        let (_, macs) = mac_counter::count(|| model.predict(&x).unwrap());
        assert_eq!(2 * macs, flops_model(&cfg).unwrap().total);
    }
}

#[test]
fn invalid_extents_are_rejected() {
    let bad = ModelConfig::standard(1, 2, 4, (48, 32));
    assert!(matches!(bad.validate(), Err(Error::Geometry(_))));
    let indivisible = ModelConfig::standard(1, 2, 4, (32, 32)).with_token_sizes([3, 2, 1, 1]);
    assert!(matches!(indivisible.validate(), Err(Error::Geometry(_))));
    assert!(ModelConfig::standard(1, 2, 4, (32, 32)).validate().is_ok());
}
