//! End-to-end training on a short synthetic series.

use mrgpssm::data::{gen_multiscale, normalize, MultiScaleConfig};
use mrgpssm::experiment::{build_model, ComponentList};
use mrgpssm::inference::{elbo_minibatch, CachedLatents};
use mrgpssm::model::{Dataset, InitConfig, Model};
use mrgpssm::rng::RngStream;
use mrgpssm::trainer::{backfit, TrainConfig};

fn series() -> Dataset {
    let cfg = MultiScaleConfig {
        t: 400,
        ..MultiScaleConfig::default()
    };
    normalize(&gen_multiscale(&cfg, &RngStream::new(21)).unwrap().data).unwrap()
}

/// Bound averaged over a fixed set of windows and draws, so two models are
/// compared under common random numbers.
fn averaged_bound(model: &Model, data: &Dataset, cfg: &TrainConfig) -> f64 {
    let cache = CachedLatents::empty(1);
    let mut rng = RngStream::new(99);
    let n = 40;
    let total: f64 = (0..n)
        .map(|_| {
            elbo_minibatch(
                model,
                data,
                0,
                &cache,
                1,
                cfg.batch,
                cfg.buffer,
                cfg.samples,
                &mut rng,
            )
            .unwrap()
            .value
        })
        .sum();
    total / n as f64
}

#[test]
fn smoke_run_does_not_lower_the_bound() {
    let data = series();
    let comps: ComponentList = "R=1:d=2".parse().unwrap();
    let init = InitConfig {
        num_inducing: 10,
        ..InitConfig::default()
    };
    let model = build_model(
        &comps,
        data.input_dim(),
        data.out_dim(),
        data.dt,
        &init,
        1.0,
        &RngStream::new(3),
    )
    .unwrap();
    let cfg = TrainConfig {
        cycles: 2,
        iters_per_component: 20,
        batch: 30,
        buffer: 5,
        samples: 5,
        minibatches_per_iter: 4,
        lr0: 0.01,
        cache_samples: 5,
        ..TrainConfig::default()
    };
    let (trained, history) = backfit(&model, &data, &cfg, &mut RngStream::new(4)).unwrap();
    assert_eq!(history.len(), 40);
    assert!(history.iter().all(|r| !r.skipped));

    let before = averaged_bound(&model, &data, &cfg);
    let after = averaged_bound(&trained, &data, &cfg);
    assert!(after >= before, "bound fell from {before} to {after}");
}

#[test]
fn smoke_run_with_two_resolutions_completes() {
    let data = series();
    let comps: ComponentList = "R=5:d=1,R=1:d=1".parse().unwrap();
    let init = InitConfig {
        num_inducing: 8,
        ..InitConfig::default()
    };
    let model = build_model(
        &comps,
        data.input_dim(),
        data.out_dim(),
        data.dt,
        &init,
        1.0,
        &RngStream::new(3),
    )
    .unwrap();
    let cfg = TrainConfig {
        cycles: 2,
        iters_per_component: 20,
        batch: 20,
        buffer: 5,
        samples: 5,
        minibatches_per_iter: 2,
        lr0: 0.01,
        cache_samples: 5,
        ..TrainConfig::default()
    };
    let (trained, history) = backfit(&model, &data, &cfg, &mut RngStream::new(4)).unwrap();
    assert_eq!(history.len(), 2 * 2 * 20);
    assert!(history.iter().all(|r| r.elbo.value.is_finite()));
    trained.validate().unwrap();
    assert_ne!(trained, model);
}
