use hvae::autodiff::Tape;
use hvae::depth::{masked_log_likelihood, ObservationMap};
use hvae::eval::{task_loss_from_predictions, TaskMetric};
use hvae::nn::{ModelDims, ModelParams, NetworkSpecs};
use hvae::noise::{CounterNoise, Stream};
use hvae::objectives::{hybrid_loss, summed_loss, EstimatorConfig, LabeledBatch, UnlabeledBatch};
use hvae::train::{sgd_step, Checkpoint};
use hvae::{DiagGaussian, Tensor};
use proptest::prelude::*;

fn gaussian_1d(mean: f64, log_std: f64) -> (f64, f64, f64) {
    let tape = Tape::new();
    let q = DiagGaussian::new(tape.constant(Tensor::vector(vec![mean])), tape.constant(Tensor::vector(vec![log_std]))).unwrap();
    let at_mean = q.log_pdf(tape.constant(Tensor::vector(vec![mean]))).unwrap().item().unwrap();
    (q.kl_to_standard_normal().unwrap().item().unwrap(), q.entropy().unwrap().item().unwrap(), at_mean)
}

/// `f(x) = Σ sigmoid(x ⊙ w) · exp(x) + (x²)` evaluated on a fresh tape.
fn composite(x: &[f64], w: &[f64]) -> (f64, Vec<f64>) {
    let tape = Tape::new();
    let xv = tape.leaf(Tensor::vector(x.to_vec()), true);
    let wv = tape.constant(Tensor::vector(w.to_vec()));
    let y = xv.mul(wv).unwrap().sigmoid().unwrap().mul(xv.exp().unwrap()).unwrap().add(xv.square().unwrap()).unwrap();
    let loss = y.sum().unwrap();
    tape.backward(loss).unwrap();
    (loss.item().unwrap(), xv.grad().unwrap().data().to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_standard(mean in -5.0f64..5.0, log_std in -4.0f64..4.0) {
        let (kl, _, _) = gaussian_1d(mean, log_std);
        prop_assert!(kl >= 0.0);
        let (kl0, _, _) = gaussian_1d(0.0, 0.0);
        prop_assert_eq!(kl0, 0.0);
    }

    #[test]
    fn entropy_and_peak_density_agree(mean in -5.0f64..5.0, log_std in -4.0f64..4.0) {
        let (_, ent, at_mean) = gaussian_1d(mean, log_std);
        // log q(μ) = −½ log 2π − log σ and H = ½ log 2πe + log σ.
        prop_assert!((ent + at_mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reverse_mode_matches_central_differences(
        x in prop::collection::vec(-2.0f64..2.0, 1..6),
        seed in 0u64..1000,
    ) {
        let w: Vec<f64> = x.iter().enumerate().map(|(i, _)| ((seed + i as u64) as f64 * 0.37).sin()).collect();
        let (_, grad) = composite(&x, &w);
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut up = x.clone();
            up[i] += eps;
            let mut down = x.clone();
            down[i] -= eps;
            let fd = (composite(&up, &w).0 - composite(&down, &w).0) / (2.0 * eps);
            prop_assert!((fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "{} vs {}", fd, grad[i]);
        }
    }

    #[test]
    fn depth_pixel_likelihood_is_bounded_by_observation_odds(
        mean in -3.0f64..3.0, log_std in -2.0f64..2.0, logit in -6.0f64..6.0, x in -3.0f64..3.0,
    ) {
        let tape = Tape::new();
        let density = DiagGaussian::new(tape.constant(Tensor::vector(vec![mean])), tape.constant(Tensor::vector(vec![log_std]))).unwrap();
        let b = ObservationMap::from_logits(tape.constant(Tensor::vector(vec![logit]))).unwrap();
        let p = b.probs().item().unwrap();
        let seen = masked_log_likelihood(tape.constant(Tensor::vector(vec![x])), &Tensor::vector(vec![1.0]), &density, &b).unwrap().item().unwrap();
        let unseen = masked_log_likelihood(tape.constant(Tensor::vector(vec![0.0])), &Tensor::vector(vec![0.0]), &density, &b).unwrap().item().unwrap();
        prop_assert!((unseen - (1.0 - p).ln()).abs() < 1e-12);
        prop_assert!(seen <= p.ln() - log_std - 0.9189385332046727 + 1e-12);
    }

    #[test]
    fn summed_loss_scales_hybrid_loss(seed in 0u64..200, b in 1usize..6) {
        let dims = ModelDims::new(2, 2, 1).unwrap();
        let params = ModelParams::init(dims, NetworkSpecs::standard(dims, 3, false), seed).unwrap();
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..b).map(|i| (vec![i as f64 * 0.1, -0.2], vec![0.3, i as f64 * -0.05])).collect();
        let images: Vec<Vec<f64>> = (0..b).map(|i| vec![0.5 - i as f64 * 0.1, 0.2]).collect();
        let lab = LabeledBatch::from_pairs(&pairs).unwrap();
        let unl = UnlabeledBatch::from_images(&images).unwrap();
        let noise = CounterNoise::new(seed, Stream::Train, 3);
        let tape = Tape::new();
        let vars = params.bind(&tape, false);
        let cfg = EstimatorConfig::default();
        let h = hybrid_loss(&vars, &lab, &unl, cfg, &noise).unwrap().value.item().unwrap();
        let s = summed_loss(&vars, Some(&lab), Some(&unl), cfg, &noise).unwrap().value.item().unwrap();
        prop_assert!((s - b as f64 * h).abs() <= 1e-12 * s.abs().max(1e-300));
    }

    #[test]
    fn checkpoint_bytes_roundtrip(seed in 0u64..500, step in 0u64..1_000_000, z in 1usize..4) {
        let dims = ModelDims::new(3, 2, z).unwrap();
        let mut c = Checkpoint::new(ModelParams::init(dims, NetworkSpecs::standard(dims, 4, seed % 2 == 0), seed).unwrap(), seed);
        c.step = step;
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, c);
    }

    #[test]
    fn zero_learning_rate_is_identity(seed in 0u64..100, g in -10.0f64..10.0) {
        let dims = ModelDims::new(2, 2, 1).unwrap();
        let mut p = ModelParams::init(dims, NetworkSpecs::standard(dims, 3, false), seed).unwrap();
        let before = p.clone();
        let grads: Vec<Tensor> = p.blocks().iter().map(|(_, t)| Tensor::filled(t.shape(), g)).collect();
        let mut vel: Vec<Tensor> = p.blocks().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        for _ in 0..3 {
            sgd_step(&mut p, &grads, &mut vel, 0.0, 0.9).unwrap();
        }
        prop_assert_eq!(p, before);
    }

    #[test]
    fn interocular_error_is_invariant_to_dyadic_shifts(
        pts in prop::collection::vec(0i32..64, 8),
        noise in prop::collection::vec(-4i32..4, 8),
        sx in -16i32..16, sy in -16i32..16,
    ) {
        let gt: Vec<f64> = pts.iter().map(|&p| p as f64 / 64.0).collect();
        prop_assume!((gt[0] - gt[2]).abs() + (gt[1] - gt[3]).abs() > 0.0);
        let pred: Vec<f64> = gt.iter().zip(&noise).map(|(g, n)| g + *n as f64 / 64.0).collect();
        let shift = |v: &[f64]| -> Vec<f64> { v.iter().enumerate().map(|(i, x)| x + if i % 2 == 0 { sx } else { sy } as f64 / 16.0).collect() };
        let a = task_loss_from_predictions(std::slice::from_ref(&pred), std::slice::from_ref(&gt), TaskMetric::Interocular).unwrap().value;
        let b = task_loss_from_predictions(&[shift(&pred)], &[shift(&gt)], TaskMetric::Interocular).unwrap().value;
        prop_assert_eq!(a, b);
    }
}
