//! Helpers shared by the integration test binaries.
#![allow(dead_code)]

use candle_core::DType;
use lalab_core::anchoring::AnchorMode;
use lalab_core::latentspace::{encode, PeMode};
use lalab_core::model::{build_example, flow_loss, AnchorSampler, AnchorSampling, ClipSample, Denoiser, ModelConfig};
use lalab_core::synthworld::{render_clip_with, sample_identity, synth_audio, RenderConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;

/// The floor keeps gradients that are exactly zero (a key bias under
/// softmax, say) from dividing roundoff by roundoff. Central differences
/// carry noise of order `eps * |loss| / STEP`, so it scales with the loss.
fn relative_error(a: f64, f: f64, loss: f64) -> f64 {
    (a - f).abs() / (a.abs() + f.abs()).max(1e-6 * loss.abs().max(1.0))
}

/// Worst relative error between backprop and central differences over every
/// scalar parameter of a two-block micro model.
pub fn worst_gradient_error(pe_mode: PeMode, mode: AnchorMode) -> (f64, String, usize) {
    let cfg = ModelConfig {
        pe_mode,
        ..ModelConfig::micro()
    };
    let model = Denoiser::with_dtype(cfg.clone(), 11, DType::F64).unwrap();
    // Move learned vectors off their zero initialisation so every path matters.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let names: Vec<String> = model.param_names().map(String::from).collect();
    for name in &names {
        if name.ends_with(".b") || name == "pe.time" {
            let len = model.param_values(name).unwrap().len();
            let noise: Vec<f64> = (0..len).map(|_| rand::Rng::gen_range(&mut rng, -0.2..0.2)).collect();
            model.set_param_values(name, &noise).unwrap();
        }
    }

    let render = RenderConfig {
        height: 4,
        width: 4,
        ..RenderConfig::default()
    };
    let sampler = AnchorSampler {
        mode,
        sampling: AnchorSampling::Flexible,
        distance: 1,
        d_max: 3,
        past_latents: 1,
        starting_prob: 0.5,
    };
    let mut examples = Vec::new();
    for seed in 0..3u64 {
        let audio = synth_audio(8, seed).unwrap();
        let (clip, _) = render_clip_with(&sample_identity(seed), &audio, seed, &render).unwrap();
        let lat = encode(&clip, 1).unwrap();
        examples.push(build_example(&cfg, ClipSample { latents: &lat, audio: &audio.samples }, &sampler, &mut rng).unwrap());
    }
    let eval = || -> f64 {
        flow_loss(&model, &examples, &mut ChaCha8Rng::seed_from_u64(17))
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    };

    let loss = flow_loss(&model, &examples, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
    let grads = loss.backward().unwrap();
    let loss_value = loss.to_scalar::<f64>().unwrap();
    let mut worst = (0.0, String::new(), 0);
    let mut checked = 0;
    for name in &names {
        let var = model.var(name).unwrap().clone();
        let analytic: Vec<f64> = grads
            .get(var.as_tensor())
            .unwrap_or_else(|| panic!("no gradient for {name}"))
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let base = model.param_values(name).unwrap();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] = base[i] + STEP;
            model.set_param_values(name, &p).unwrap();
            let up = eval();
            p[i] = base[i] - STEP;
            model.set_param_values(name, &p).unwrap();
            let down = eval();
            model.set_param_values(name, &base).unwrap();
            let numeric = (up - down) / (2.0 * STEP);
            let err = relative_error(analytic[i], numeric, loss_value);
            if err > worst.0 {
                worst = (err, format!("{name}[{i}] analytic {} numeric {numeric}", analytic[i]), 0);
            }
            checked += 1;
        }
    }
    worst.2 = checked;
    worst
}

