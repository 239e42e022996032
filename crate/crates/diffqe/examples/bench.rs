//! Rough per-component timings for the training hot path.

use diffqe::dataset::synthetic_plane;
use diffqe::model::{compose_encoder_input, plane_to_feat, ModelWeights};
use diffqe::nn::Workspace;
use diffqe::plane::QpMap;
use diffqe::train::{Stage, TrainConfig};
use std::time::Instant;

fn time<F: FnMut()>(label: &str, flops: f64, reps: usize, mut f: F) {
    f();
    let t0 = Instant::now();
    for _ in 0..reps {
        f();
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("{label:28} {:8.2} ms  {:6.1} GFLOP/s", dt * 1e3, flops / dt / 1e9);
}

fn main() {
    let cfg = TrainConfig { stage: Stage::Stage1, ..TrainConfig::default() };
    let w = ModelWeights::<f32>::stage1(cfg.arch(), 1);
    let gt = synthetic_plane(64, 64, 2);
    let comp = diffqe::codec::compress_proxy(&gt, 37, 8).unwrap();
    let x = plane_to_feat::<f32>(&comp);
    let z = vec![0.1f32; cfg.latent_dim];
    let mut ws = Workspace::new();

    // decoder: ~204 MMAC fwd = 0.41 GFLOP
    let dec = &w.decoder;
    time("decoder.forward", 0.41e9, 20, || {
        let _ = dec.forward(&x, &z, &mut ws);
    });
    time("decoder.forward_t", 0.41e9, 20, || {
        let _ = dec.forward_t(&x, &z, &mut ws);
    });
    let mut dec2 = w.decoder.clone();
    let (out, tape) = dec2.forward_t(&x, &z, &mut ws);
    time("decoder.backward", 0.82e9, 20, || {
        let _ = dec2.backward(&tape, &out, &mut ws);
    });
    let enc = w.encoder.as_ref().unwrap();
    let qp = QpMap::new(37, 64, 64).unwrap();
    let xe = compose_encoder_input::<f32>(&gt, &comp, &qp).unwrap();
    time("encoder.forward_t", 0.024e9, 50, || {
        let _ = enc.forward_t(&xe, &mut ws);
    });
    // full train step equivalent (batch 16)
    let mut dec3 = w.decoder.clone();
    time("fwd_t+bwd x16 (1 step)", 16.0 * 1.23e9, 3, || {
        for _ in 0..16 {
            let (out, tape) = dec3.forward_t(&x, &z, &mut ws);
            let _ = dec3.backward(&tape, &out, &mut ws);
        }
    });
}
