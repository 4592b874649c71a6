use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::autodiff::{Adam, Sgd};

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn desk() -> DiffusionSchedule {
    make_schedule(50, 1e-4, 0.02, ScheduleShape::Linear).unwrap()
}

#[test]
fn schedule_hand_values() {
    let s = make_schedule(1, 0.5, 0.5, ScheduleShape::Linear).unwrap();
    assert_eq!(s.alpha_bar, vec![0.5]);
    let s = make_schedule(2, 0.1, 0.2, ScheduleShape::Linear).unwrap();
    assert_eq!(s.beta, vec![0.1, 0.2]);
    assert!((s.alpha_bar[0] - 0.9).abs() < 1e-15);
    assert!((s.alpha_bar[1] - 0.72).abs() < 1e-15);
}

#[test]
fn schedule_identities_are_exact() {
    for (steps, b0, b1) in [
        (1000, 1e-4, 0.02),
        (50, 1e-4, 0.02),
        (7, 0.3, 0.9),
        (2, 0.5, 0.5),
    ] {
        let s = make_schedule(steps, b0, b1, ScheduleShape::Linear).unwrap();
        assert_eq!(s.beta[0], b0);
        assert!((s.beta[steps - 1] - b1).abs() < 1e-15);
        for i in 0..steps {
            assert_eq!(s.alpha[i] + s.beta[i], 1.0);
            assert!(s.beta[i] > 0.0 && s.beta[i] < 1.0);
            assert_eq!(s.sigma[i] * s.sigma[i], s.beta[i].sqrt().powi(2));
            if i > 0 {
                assert_eq!(s.alpha_bar[i], s.alpha_bar[i - 1] * s.alpha[i]);
                assert!(s.alpha_bar[i] < s.alpha_bar[i - 1]);
            }
        }
    }
}

#[test]
fn schedule_rejects_bad_ranges() {
    for (t, a, b) in [
        (0, 0.1, 0.2),
        (10, 0.0, 0.2),
        (10, 0.3, 0.2),
        (10, 0.1, 1.0),
    ] {
        assert!(make_schedule(t, a, b, ScheduleShape::Linear).is_err());
    }
}

#[test]
fn q_sample_closed_form() {
    let s = desk();
    let eps = DenseTensor::randn(&[4, 4], 1.0, &mut rng(1));
    let xt = q_sample(&DenseTensor::zeros(&[4, 4]), 17, &eps, &s).unwrap();
    let c = (1.0 - s.alpha_bar[16]).sqrt();
    assert_eq!(xt, eps.map(|e| c * e));

    let half = make_schedule(1, 0.5, 0.5, ScheduleShape::Linear).unwrap();
    let ones = DenseTensor::ones(&[3]);
    let xt = q_sample(&ones, 1, &ones, &half).unwrap();
    for v in xt.data() {
        assert!((v - 2f64.sqrt()).abs() < 1e-15);
    }
    assert!(q_sample(&ones, 0, &ones, &half).is_err());
    assert!(q_sample(&ones, 2, &ones, &half).is_err());
}

/// Mean and variance within three standard errors.
fn assert_moments(draws: &[f64], mean: f64, var: f64) {
    let n = draws.len() as f64;
    let m = draws.iter().sum::<f64>() / n;
    let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1.0);
    let se_mean = (var / n).sqrt();
    // normal samples: Var(s²) = 2σ⁴ / (n - 1)
    let se_var = var * (2.0 / (n - 1.0)).sqrt();
    assert!((m - mean).abs() < 3.0 * se_mean, "mean {m} vs {mean}");
    assert!((v - var).abs() < 3.0 * se_var, "var {v} vs {var}");
}

#[test]
fn q_sample_marginal_moments() {
    let s = desk();
    let (x0, t) = (0.7, 30);
    let mut r = rng(2);
    let draws: Vec<f64> = (0..10_000)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut r);
            q_sample(&DenseTensor::scalar(x0), t, &DenseTensor::scalar(e), &s)
                .unwrap()
                .item()
        })
        .collect();
    let ab = s.alpha_bar[t - 1];
    assert_moments(&draws, ab.sqrt() * x0, 1.0 - ab);
}

#[test]
fn sequential_forward_steps_match_closed_form() {
    let s = desk();
    let (x0, t) = (-0.4, 50);
    let mut r = rng(3);
    let draws: Vec<f64> = (0..10_000)
        .map(|_| {
            let mut x = x0;
            for i in 0..t {
                let e: f64 = StandardNormal.sample(&mut r);
                x = (1.0 - s.beta[i]).sqrt() * x + s.beta[i].sqrt() * e;
            }
            x
        })
        .collect();
    let ab = s.alpha_bar[t - 1];
    assert_moments(&draws, ab.sqrt() * x0, 1.0 - ab);
}

#[test]
fn p_step_with_zero_prediction() {
    let s = desk();
    let x = DenseTensor::randn(&[5], 1.0, &mut rng(4));
    let zero = DenseTensor::zeros(&[5]);
    let y = p_step(&x, 20, &zero, &s, &zero).unwrap();
    let a = s.alpha[19].sqrt();
    for (yi, xi) in y.data().iter().zip(x.data()) {
        assert!((yi - xi / a).abs() < 1e-15);
    }
}

#[test]
fn final_step_ignores_noise() {
    let s = desk();
    let x = DenseTensor::randn(&[5], 1.0, &mut rng(5));
    let e = DenseTensor::randn(&[5], 1.0, &mut rng(6));
    let z = DenseTensor::randn(&[5], 1.0, &mut rng(7));
    assert_eq!(
        p_step(&x, 1, &e, &s, &z).unwrap(),
        p_step(&x, 1, &e, &s, &DenseTensor::zeros(&[5])).unwrap()
    );
}

#[test]
fn oracle_noise_reconstructs_x0_at_first_step() {
    for s in [
        desk(),
        make_schedule(1000, 1e-4, 0.02, ScheduleShape::Linear).unwrap(),
    ] {
        let x0 = DenseTensor::randn(&[64], 0.5, &mut rng(8));
        let eps = DenseTensor::randn(&[64], 1.0, &mut rng(9));
        let x1 = q_sample(&x0, 1, &eps, &s).unwrap();
        let rec = p_step(&x1, 1, &eps, &s, &DenseTensor::zeros(&[64])).unwrap();
        assert!(rec.max_rel_diff(&x0) < 1e-10);
    }
}

struct Zero;

impl Denoiser for Zero {
    fn predict_noise(&self, x: &DenseTensor, _t: &[usize]) -> Result<DenseTensor> {
        Ok(DenseTensor::zeros(x.shape()))
    }
}

impl Parameterized for Zero {
    fn visit_params(&self, _f: &mut dyn FnMut(&str, &DenseTensor, bool)) {}
    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&str, &mut DenseTensor, bool)) {}
}

impl NoiseModel for Zero {
    fn forward(&self, g: &mut Graph, x: NodeId, _t: &[usize]) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        Ok(g.constant(DenseTensor::zeros(&shape)))
    }
}

#[test]
fn zero_denoiser_sampling_telescopes() {
    let s = desk();
    let shape = [1, 1, 2, 2, 2];
    let got = sample(&Zero, &s, &shape, 11).unwrap();

    // replay the same noise stream
    let mut r = rng(11);
    let x_t = DenseTensor::randn(&shape, 1.0, &mut r);
    let mut oracle = x_t.scale(s.alpha.iter().map(|a| a.powf(-0.5)).product());
    for t in (2..=s.steps()).rev() {
        let z = DenseTensor::randn(&shape, 1.0, &mut r);
        let gain: f64 = s.alpha[..t - 1].iter().map(|a| a.powf(-0.5)).product();
        oracle = oracle.add(&z.scale(s.sigma[t - 1] * gain)).unwrap();
    }
    assert!(got.max_rel_diff(&oracle) < 1e-12);
}

#[test]
fn sampling_is_seeded() {
    let s = desk();
    let shape = [2, 1, 3, 3, 3];
    let a = sample(&Zero, &s, &shape, 5).unwrap();
    assert_eq!(a.shape(), &shape);
    assert_eq!(a, sample(&Zero, &s, &shape, 5).unwrap());
    assert_ne!(a, sample(&Zero, &s, &shape, 6).unwrap());
}

/// Predicts exactly the noise that produced `x_t` from a known `x0`.
struct Oracle {
    x0: DenseTensor,
    schedule: DiffusionSchedule,
}

impl Parameterized for Oracle {
    fn visit_params(&self, _f: &mut dyn FnMut(&str, &DenseTensor, bool)) {}
    fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&str, &mut DenseTensor, bool)) {}
}

impl NoiseModel for Oracle {
    fn forward(&self, g: &mut Graph, x: NodeId, t: &[usize]) -> Result<NodeId> {
        let ab = self.schedule.alpha_bar[t[0]];
        let eps = g
            .value(x)
            .zip_map(&self.x0, |xt, x0| (xt - ab.sqrt() * x0) / (1.0 - ab).sqrt())?;
        Ok(g.constant(eps))
    }
}

#[test]
fn oracle_model_has_zero_loss() {
    let s = desk();
    let x0 = DenseTensor::randn(&[1, 1, 4, 4, 4], 0.5, &mut rng(12)).map(|v| v.clamp(-1.0, 1.0));
    let mut m = Oracle {
        x0: x0.clone(),
        schedule: s.clone(),
    };
    let stats = train_step(&mut m, &[x0], &s, &mut rng(13), &mut Sgd::new(0.1), None).unwrap();
    assert!(stats.loss < 1e-24, "{}", stats.loss);
}

#[test]
fn zero_model_loss_is_noise_variance() {
    let s = desk();
    let x0 = DenseTensor::zeros(&[1, 1, 20, 25, 20]);
    let stats = train_step(&mut Zero, &[x0], &s, &mut rng(14), &mut Sgd::new(0.1), None).unwrap();
    // mean of 10⁴ squared normals: standard error sqrt(2 / 10⁴)
    assert!(
        (stats.loss - 1.0).abs() < 3.0 * (2.0f64 / 1e4).sqrt(),
        "{}",
        stats.loss
    );
}

#[test]
fn empty_batch_is_rejected() {
    let s = desk();
    assert!(train_step(&mut Zero, &[], &s, &mut rng(0), &mut Sgd::new(0.1), None).is_err());
}

fn tiny_unet() -> UNetLite {
    let cfg = crate::nn::UNetConfig {
        widths: vec![4, 8],
        time_dim: 8,
        groups: 2,
        in_channels: 1,
    };
    UNetLite::new(cfg, 50, 0).unwrap()
}

#[test]
fn training_is_reproducible() {
    let s = desk();
    let x0 = DenseTensor::randn(&[1, 1, 8, 8, 8], 0.3, &mut rng(15));
    let run = || {
        let mut m = tiny_unet();
        let mut opt = Adam::new(1e-3);
        let mut r = rng(16);
        let losses: Vec<f64> = (0..3)
            .map(|_| {
                train_step(
                    &mut m,
                    &[x0.clone(), x0.clone()],
                    &s,
                    &mut r,
                    &mut opt,
                    Some(1.0),
                )
                .unwrap()
                .loss
            })
            .collect();
        (losses, m)
    };
    let (la, ma) = run();
    let (lb, mb) = run();
    assert_eq!(la, lb);
    assert_eq!(ma, mb);
}

#[test]
fn adapter_training_leaves_base_weights_untouched() {
    let s = desk();
    let mut m = tiny_unet();
    m.attach_adapters(&crate::nn::AdapterSpec::new(
        crate::adapters::AdapterKind::TenvooL,
        2,
    ))
    .unwrap();
    let base = m.base_params();
    let before = m.clone();
    let x0 = DenseTensor::randn(&[1, 1, 8, 8, 8], 0.3, &mut rng(17));
    let mut opt = Adam::new(1e-2);
    let mut r = rng(18);
    for _ in 0..3 {
        train_step(
            &mut m,
            std::slice::from_ref(&x0),
            &s,
            &mut r,
            &mut opt,
            None,
        )
        .unwrap();
    }
    let after = m.base_params();
    for (name, t) in &base {
        let a = &after[name];
        assert!(
            t.data()
                .iter()
                .zip(a.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            "{name} changed"
        );
    }
    assert_ne!(m, before);
}

#[test]
fn clipping_bounds_the_update() {
    let s = desk();
    let x0 = DenseTensor::randn(&[1, 1, 8, 8, 8], 0.3, &mut rng(19));
    let mut m = tiny_unet();
    let before = m.clone();
    let stats = train_step(
        &mut m,
        &[x0],
        &s,
        &mut rng(20),
        &mut Sgd::new(1.0),
        Some(1e-3),
    )
    .unwrap();
    assert!(stats.grad_norm > 1e-3);
    let mut moved = 0.0;
    let mut p_before = Vec::new();
    before.visit_params(&mut |_, t, _| p_before.extend_from_slice(t.data()));
    let mut i = 0;
    m.visit_params(&mut |_, t, _| {
        for v in t.data() {
            moved += (v - p_before[i]).powi(2);
            i += 1;
        }
    });
    assert!(moved.sqrt() <= 1e-3 * (1.0 + 1e-9));
}
