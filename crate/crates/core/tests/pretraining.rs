//! Full-size pretraining runs (50K points, 200 epochs, three seeds). Slow.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use ndarray::Array2;
use steerlab::backbone::{build_toy_unet, DenoiserModel, UNetConfig};
use steerlab::conditions::encode_ring_label;
use steerlab::datasets::{default_ring_spec, sample_ring, sample_ring_mixture};
use steerlab::diffusion::{NoiseSchedule, SamplerConfig};
use steerlab::eval::{generate_prior, support_accuracy, DEFAULT_BAND};
use steerlab::steering::{build_steering_module, integrated_denoise_batch, IntegrationMode, WeightPolicy};
use steerlab::training::{evaluate_loss, finetune, pretrain, TrainConfig};

struct Run {
    history: Vec<f64>,
    held_out: f64,
    model: DenoiserModel,
}

fn run(seed: u64, sched: &NoiseSchedule) -> Run {
    let spec = default_ring_spec();
    let data = sample_ring_mixture(&spec, 50_000, seed).unwrap();
    let mut model = build_toy_unet(&UNetConfig::default(), seed).unwrap();
    let history = pretrain(&data, &mut model, sched, &TrainConfig { seed, ..TrainConfig::default() }).unwrap();
    let held = sample_ring_mixture(&spec, 10_000, 1000 + seed).unwrap();
    let held_out = evaluate_loss(&held, sched, 7, |z, ts, _| model.denoise_batch(z, ts, None)).unwrap();
    Run { history, held_out, model }
}

#[test]
fn pretraining_learns_the_ring_mixture() {
    let sched = NoiseSchedule::default();
    let runs: Vec<Run> = (0..3).map(|s| run(s, &sched)).collect();
    let dim = 2.0;
    let mut improved = 0;
    for (seed, r) in runs.iter().enumerate() {
        assert_eq!(r.history.len(), 200);
        assert!(r.history.iter().all(|l| l.is_finite()), "seed {seed}");
        improved += usize::from(r.history[199] < r.history[0]);
        // zero predictor: E|η|² = d
        assert!(r.held_out < dim, "seed {seed}: held-out loss {}", r.held_out);
        eprintln!("seed {seed}: loss {:.4} -> {:.4}, held-out {:.4}", r.history[0], r.history[199], r.held_out);
    }
    assert!(improved >= 2, "only {improved} of 3 seeds improved");

    // Unconditional samples land on ring 0 at roughly its mixture weight.
    // Trained models miss the weight by a few points each way, far more than
    // the sampling error of 5000 draws, so the bound is on model error.
    let spec = default_ring_spec();
    let n = 5000;
    let mut models: Vec<DenoiserModel> = runs.into_iter().map(|r| r.model).collect();
    for (seed, model) in models.iter_mut().enumerate() {
        model.freeze();
        let samples = generate_prior(model, &sched, n, &SamplerConfig::ddim(50), 3).unwrap();
        let (accuracy, precision) = support_accuracy(samples.view(), 0, &spec, DEFAULT_BAND).unwrap();
        let on_support = accuracy / precision;
        eprintln!("seed {seed}: ring-0 accuracy {accuracy:.3}, precision {precision:.3}, on support {on_support:.3}");
        assert!((precision - 0.7).abs() <= 0.1, "seed {seed}: ring-0 share {precision} vs 0.7");
        assert!(on_support > 0.9, "seed {seed}: on support {on_support}");
    }
    let model = models.swap_remove(0);

    // a short fine-tune moves the integrated denoiser off the backbone
    let labeled = sample_ring(&spec, 1, 12, 0).unwrap();
    let mut module = build_steering_module(&model, IntegrationMode::Emd, 2, WeightPolicy::Uniform, 0).unwrap();
    let cfg = TrainConfig { epochs: 50, ..TrainConfig::finetune_default() };
    finetune(&model, &mut module, &labeled, &sched, &cfg, &|k| encode_ring_label(k, 2)).unwrap();
    let z = sample_ring_mixture(&spec, 64, 5).unwrap().points;
    let ts: Vec<usize> = (0..64).map(|i| 1 + i * 15).collect();
    let cond = Array2::from_shape_fn((64, 2), |(_, j)| j as f64);
    let steered = integrated_denoise_batch(&model, &module, z.view(), &ts, cond.view()).unwrap();
    let plain = model.denoise_batch(z.view(), &ts, None).unwrap();
    let gap = (&steered - &plain).iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(gap > 0.0);
}
