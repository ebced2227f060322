mod common;

use common::seeded;
use fedafd_core::compression::{quant8_decode, quant8_encode};
use fedafd_core::data::{synthesize, DataConfig, Partition};
use fedafd_core::model::{evaluate, local_train, Architecture, ModelParams};
use fedafd_core::submodel::{extract, lift, select_random};
use fedafd_core::{BatchF32, ParamsF32, ParamsF64, TensorF32};

#[test]
fn f32_training_tracks_f64() {
    let cfg = DataConfig {
        n_clients: 2,
        n_per_client: 200,
        partition: Partition::Iid,
        ..Default::default()
    };
    let arch = Architecture::mlp(cfg.dim, &[16], cfg.n_classes).unwrap();
    let d64 = synthesize::<f64>(&cfg, 4).unwrap();
    let d32 = synthesize::<f32>(&cfg, 4).unwrap();
    let p64: ParamsF64 = ModelParams::init(&arch, &mut seeded(1));
    let p32: ParamsF32 = p64.cast();
    let (t64, l64) = local_train(&arch, &p64, &d64.clients[0].train, 3, 10, 0.05, &mut seeded(2)).unwrap();
    let (t32, l32) = local_train(&arch, &p32, &d32.clients[0].train, 3, 10, 0.05f32, &mut seeded(2)).unwrap();
    assert!((f64::from(l32) - l64).abs() < 1e-3, "{l32} vs {l64}");
    let test32: BatchF32 = d32.clients[1].test.clone();
    let a32 = evaluate(&arch, &t32, &test32).unwrap().accuracy;
    let a64 = evaluate(&arch, &t64, &d64.clients[1].test).unwrap().accuracy;
    assert!((a32 - a64).abs() <= 0.05, "{a32} vs {a64}");
}

#[test]
fn f32_slicing_and_quantization() {
    let arch = Architecture::cnn(6, 3, 5, 4).unwrap();
    let global: ParamsF32 = ModelParams::init(&arch, &mut seeded(3));
    let spec = select_random(&arch, 0.4, &mut seeded(4));
    let (sub, _) = extract(&global, &arch, &spec).unwrap();
    assert_eq!(lift(&global, &arch, &spec, &sub).unwrap(), global);
    let w: &TensorF32 = &global.layers[0].weights;
    let back: TensorF32 = quant8_decode(&quant8_encode(w, 9)).unwrap();
    let range = w.values().iter().fold(0f32, |m, v| m.max(v.abs())) * 2.0;
    for (a, b) in back.values().iter().zip(w.values()) {
        assert!((a - b).abs() <= range);
    }
}
