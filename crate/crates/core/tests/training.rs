use hvae::data::{SceneConfig, SemiDataset};
use hvae::nn::{ModelDims, ModelParams, NetworkSpecs};
use hvae::train::{train, Mode, Trainer, TrainConfig};
use hvae::EstimatorConfig;

fn dataset(m: usize) -> SemiDataset {
    SemiDataset::synthesize(&SceneConfig { image_side: 8, num_landmarks: 2, ..SceneConfig::default() }, 48, m, 40).unwrap()
}

fn params(ds: &SemiDataset, seed: u64) -> ModelParams {
    let dims = ModelDims::new(ds.d_dim(), ds.h_dim(), 2).unwrap();
    ModelParams::init(dims, NetworkSpecs::standard(dims, 16, false), seed).unwrap()
}

#[test]
fn hybrid_training_lowers_test_nll_and_task_loss() {
    let ds = dataset(200);
    let cfg = TrainConfig { batch_size: 16, epochs: 60, eval_every: 1000, ..TrainConfig::default() };
    let (_, rows) = train(&ds, cfg, params(&ds, 3)).unwrap();
    let (first, last) = (rows.first().unwrap(), rows.last().unwrap());
    assert_eq!(last.step, 180);
    assert!(last.test_nll < first.test_nll - 20.0, "{} -> {}", first.test_nll, last.test_nll);
    assert!(last.task_loss.unwrap() < first.task_loss.unwrap());
}

#[test]
fn full_mode_ignores_unlabeled_records() {
    let cfg = TrainConfig { mode: Mode::Full, batch_size: 8, epochs: 2, eval_every: 3, ..TrainConfig::default() };
    let a = dataset(10);
    let b = dataset(90);
    let (ca, ra) = train(&a, cfg.clone(), params(&a, 1)).unwrap();
    let (cb, rb) = train(&b, cfg, params(&b, 1)).unwrap();
    assert_eq!(ca, cb);
    assert!(ra.iter().zip(&rb).all(|(x, y)| x.test_nll == y.test_nll && x.task_loss.is_none()));
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let ds = dataset(20);
    let p = params(&ds, 2);
    let (c, rows) = train(&ds, TrainConfig { epochs: 0, ..TrainConfig::default() }, p.clone()).unwrap();
    assert_eq!(c.params, p);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].train_loss, None);
}

#[test]
fn only_hybrid_steps_reach_the_label_predictor() {
    let ds = dataset(20);
    let cfg = TrainConfig { batch_size: 4, estimator: EstimatorConfig::new(1, 1).unwrap(), ..TrainConfig::default() };
    let p = params(&ds, 4);
    let predictor_grad = |mode| {
        let mut t = Trainer::new(&ds, TrainConfig { mode, ..cfg.clone() }, p.clone()).unwrap();
        let (_, grads) = t.step().unwrap();
        p.blocks()
            .iter()
            .zip(&grads)
            .filter(|((name, _), _)| name.starts_with("predictor"))
            .flat_map(|(_, g)| g.data().iter().map(|v| v.abs()))
            .fold(0.0, f64::max)
    };
    assert_eq!(predictor_grad(Mode::Full), 0.0);
    assert!(predictor_grad(Mode::Hybrid) > 0.0);
}

#[test]
fn gradient_clipping_bounds_each_applied_step() {
    let ds = dataset(20);
    let cap = 0.5;
    let cfg = TrainConfig { max_grad_norm: Some(cap), batch_size: 4, ..TrainConfig::default() };
    let mut t = Trainer::new(&ds, cfg, params(&ds, 5)).unwrap();
    for _ in 0..5 {
        let (_, grads) = t.step().unwrap();
        let norm = grads.iter().flat_map(|g| g.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= cap * (1.0 + 1e-12), "{norm}");
    }
    let bad = TrainConfig { max_grad_norm: Some(0.0), ..TrainConfig::default() };
    assert!(Trainer::new(&ds, bad, params(&ds, 5)).is_err());
}
