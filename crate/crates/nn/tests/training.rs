use snapddm_core::datagen::{crop_subdomains, simulate, CropParams, SimulationParams, SubdomainSample};
use snapddm_core::subdomain::{SubdomainClass, SubdomainSolver};
use snapddm_core::WavevectorConvention;
use snapddm_nn::losses::LossConfig;
use snapddm_nn::solver::NeuralSubdomainSolver;
use snapddm_nn::train::{train, TrainConfig};
use snapddm_nn::weights::load_weights;
use snapddm_nn::{InitOptions, NnError, SmFno, SmFnoConfig};

const K0: f64 = 0.0374;

fn samples(class: SubdomainClass, count: usize) -> Vec<SubdomainSample> {
    let mut out = Vec::new();
    let mut seed = 0;
    while out.len() < count {
        let mut p = SimulationParams::new(160, seed);
        p.source_inset = 40 + 66 * (seed as usize % 2);
        let sim = simulate(&p).unwrap();
        let crops = crop_subdomains(
            &sim,
            &CropParams { count: 48, seed, augment_rot: false, stride: None, convention: WavevectorConvention::default() },
        )
        .unwrap();
        out.extend(crops.into_iter().filter(|c| c.class == class));
        seed += 1;
    }
    out.truncate(count);
    out
}

fn tiny(in_channels: usize) -> SmFnoConfig {
    SmFnoConfig { layers: 2, channels: 4, modes: 4, latent_dim: 16, pad: 8, ..SmFnoConfig::toy(in_channels) }
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let data = samples(SubdomainClass::Material, 8);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt.snw");
    let cfg = TrainConfig { batch_size: 4, epochs: 6, lr_start: 3e-3, test_fraction: 0.25, seed: 2, checkpoint: Some(ckpt.clone()), ..Default::default() };
    let run = |threads| {
        let model = SmFno::<f32>::init(tiny(3), InitOptions { seed: 1, ..Default::default() }).unwrap();
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train(model, &data, K0, &cfg, &LossConfig::default()).unwrap())
    };
    let a = run(1);
    let b = run(2);
    assert_eq!(a.model, b.model);
    assert_eq!(a.history.step_loss, b.history.step_loss);
    let h = &a.history;
    assert_eq!(a.steps, 6 * 2);
    assert!(h.epochs.last().unwrap().train.data < h.epochs[0].train.data);
    // alpha is zero for the first epoch, then holds the configured ratio.
    assert_eq!(h.epochs[0].alpha, 0.0);
    for r in &h.epochs {
        let ratio = r.alpha_next * r.train.physics(1.0) / r.train.data;
        assert!((ratio - 0.3).abs() < 1e-9);
        assert!(r.test.is_some());
    }
    assert_eq!(h.to_csv().lines().count(), 7);
    let saved = load_weights::<f32>(&ckpt).unwrap();
    assert_eq!(saved.model, a.model);
    assert_eq!(saved.class, Some(SubdomainClass::Material));
}

#[test]
fn runaway_learning_rate_reports_non_finite_loss() {
    let data = samples(SubdomainClass::Material, 4);
    let model = SmFno::<f32>::init(tiny(3), InitOptions { seed: 1, ..Default::default() }).unwrap();
    let cfg = TrainConfig { batch_size: 2, epochs: 50, lr_start: 1e30, lr_decay: 2.0, test_fraction: 0.0, ..Default::default() };
    match train(model, &data, K0, &cfg, &LossConfig::default()) {
        Err(NnError::NonFiniteLoss { step, .. }) => assert!(step > 0),
        Ok(_) => panic!("training with lr 1e30 stayed finite"),
        Err(e) => panic!("unexpected error {e}"),
    }
}

#[test]
fn mixed_classes_and_wrong_channels_are_rejected() {
    let mut data = samples(SubdomainClass::Material, 2);
    data.extend(samples(SubdomainClass::Source, 1));
    let model = SmFno::<f32>::init(tiny(3), InitOptions::default()).unwrap();
    assert!(matches!(train(model.clone(), &data, K0, &TrainConfig::default(), &LossConfig::default()), Err(NnError::InvalidParams(_))));
    assert!(NeuralSubdomainSolver::new(model, SubdomainClass::Source).is_err());
}

#[test]
fn neural_solver_serves_matching_problems() {
    let data = samples(SubdomainClass::Material, 2);
    let model = SmFno::<f32>::init(tiny(3), InitOptions { seed: 4, ..Default::default() }).unwrap();
    let solver = NeuralSubdomainSolver::new(model, SubdomainClass::Material).unwrap();
    let conv = WavevectorConvention::default();
    let problems: Vec<_> = data.iter().map(|s| s.to_problem(K0, conv)).collect();
    let refs: Vec<_> = problems.iter().collect();
    let out = solver.solve_batch(&refs);
    assert_eq!(out.len(), 2);
    for (r, p) in out.iter().zip(&problems) {
        let f = r.as_ref().unwrap();
        assert_eq!(f.shape(), p.shape());
        assert!(f.as_slice().iter().all(|v| v.re.is_finite() && v.im.is_finite()));
    }
    let src = samples(SubdomainClass::Source, 1)[0].to_problem(K0, conv);
    assert!(solver.solve_batch(&[&src])[0].is_err());
}
