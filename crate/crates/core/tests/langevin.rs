//! Langevin sampler behaviour against closed forms and exact recurrences.

mod common;

use common::random_model;
use jebm::model::{EnergyHead, JointEbmPrior, LatentStack};
use jebm::nn::Activation;
use jebm::rng::chain_streams;
use jebm::samplers::{
    ancestral_sample, conditional_prior_langevin, epsilon_inverse, epsilon_transform, generate, langevin,
    sample_prior, LangevinConfig, PriorTarget, Space,
};
use jebm::Tensor;

/// Variance after `k` steps of `z <- (1 - s a) z + sqrt(2 s) e` from `v0`.
fn variance_recurrence(a: f64, s: f64, k: usize, v0: f64) -> f64 {
    let mut v = v0;
    for _ in 0..k {
        v = (1.0 - s * a).powi(2) * v + 2.0 * s;
    }
    v
}

fn column_moments(t: &Tensor, j: usize) -> (f64, f64) {
    let n = t.rows() as f64;
    let m = (0..t.rows()).map(|r| t.row(r)[j]).sum::<f64>() / n;
    let v = (0..t.rows()).map(|r| (t.row(r)[j] - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

fn single_layer(coeff: Vec<f64>) -> JointEbmPrior {
    JointEbmPrior::from_parts(vec![coeff.len()], vec![], vec![EnergyHead::quadratic(coeff)]).unwrap()
}

#[test]
fn stationary_variance_matches_the_discrete_chain_recurrence() {
    let (s, k, n) = (0.1, 2000, 10_000);
    // A unit Gaussian, then the same reference tilted by exp(-z^2 / 2).
    for (c, a) in [(0.0, 1.0), (1.0, 2.0)] {
        let prior = single_layer(vec![c, c]);
        let mut rngs = chain_streams(21, "variance", 0, n);
        let z0 = ancestral_sample(&prior, &mut rngs).unwrap();
        let run = langevin(&PriorTarget { prior: &prior }, &z0, &[false], &LangevinConfig::new(k, s), &mut rngs, None)
            .unwrap();
        let oracle = variance_recurrence(a, s, k, 1.0);
        for j in 0..2 {
            let (m, v) = column_moments(run.z.layer(0), j);
            println!("tilt {}: coordinate {} variance {:.4} oracle {:.4} mean {:.4}", c, j, v, oracle, m);
            assert!((v - oracle).abs() < 0.05, "tilt {} coordinate {}: {} vs {}", c, j, v, oracle);
        }
    }
    assert!((variance_recurrence(1.0, 0.1, 2000, 1.0) - 0.2 / (1.0 - 0.81)).abs() < 1e-12);
}

#[test]
fn without_noise_the_sampler_ascends_the_log_target() {
    let prior = single_layer(vec![0.5, 2.0, 1.0]);
    let z0 = LatentStack::single(&[vec![2.0, -1.5, 0.7]]).unwrap();
    for s in [0.01, 0.005] {
        let cfg = LangevinConfig {
            noise_enabled: false,
            ..LangevinConfig::new(200, s)
        };
        let mut rngs = chain_streams(22, "ascent", 0, 1);
        let run = langevin(&PriorTarget { prior: &prior }, &z0, &[false], &cfg, &mut rngs, Some(1)).unwrap();
        let lp = &run.record.unwrap().log_prior;
        for w in lp.windows(2) {
            assert!(w[1][0] >= w[0][0], "log target decreased: {} -> {}", w[0][0], w[1][0]);
        }
    }
}

#[test]
fn forty_steps_thinned_by_ten_keep_five_snapshots() {
    let model = random_model(&[2, 2], 2, 4, Activation::Tanh, 23);
    let mut rngs = chain_streams(23, "thin", 0, 7);
    let run = sample_prior(&model.prior, &LangevinConfig::new(40, 0.1), &mut rngs, Some(10)).unwrap();
    let rec = run.record.unwrap();
    let steps: Vec<usize> = rec.snapshots.iter().map(|(t, _)| *t).collect();
    assert_eq!(steps, vec![0, 10, 20, 30, 40]);
    assert_eq!(rec.energy.len(), 41);
    assert_eq!(rec.snapshots[4].1, run.z);
    for k in [0, 1, 9, 11, 33] {
        let mut rngs = chain_streams(23, "thin", 0, 2);
        let run = sample_prior(&model.prior, &LangevinConfig::new(k, 0.1), &mut rngs, Some(10)).unwrap();
        assert_eq!(run.record.unwrap().snapshots.len(), k / 10 + 1);
    }
}

#[test]
fn identical_seeds_give_identical_chains() {
    let model = random_model(&[2, 3], 2, 4, Activation::Tanh, 24);
    for space in [Space::Z, Space::Epsilon] {
        let cfg = LangevinConfig::new(30, 0.05).with_space(space);
        let a = sample_prior(&model.prior, &cfg, &mut chain_streams(5, "det", 0, 300), None).unwrap();
        let b = sample_prior(&model.prior, &cfg, &mut chain_streams(5, "det", 0, 300), None).unwrap();
        assert_eq!(a.z, b.z);
        let c = sample_prior(&model.prior, &cfg, &mut chain_streams(6, "det", 0, 300), None).unwrap();
        assert_ne!(a.z, c.z);
    }
}

#[test]
fn chains_do_not_depend_on_their_neighbours() {
    let model = random_model(&[2, 2], 2, 4, Activation::Tanh, 25);
    let cfg = LangevinConfig::new(20, 0.1);
    let all = sample_prior(&model.prior, &cfg, &mut chain_streams(7, "solo", 0, 600), None).unwrap();
    let tail = sample_prior(&model.prior, &cfg, &mut chain_streams(7, "solo", 300, 300), None).unwrap();
    assert_eq!(all.z.slice_chains(300, 600), tail.z);
}

#[test]
fn conditional_sampling_with_a_gaussian_prior_matches_the_closed_form() {
    let mut model = random_model(&[1, 1], 1, 4, Activation::Tanh, 26);
    model.prior.zero_energies();
    let top = 0.7;
    let (mu, lv) = model.prior.conditional_params(0, &Tensor::matrix(1, 1, vec![top]).unwrap()).unwrap();
    let (mu, var) = (mu.data()[0], lv.data()[0].exp());
    let n = 10_000;
    let z0 = LatentStack::new(vec![Tensor::zeros(&[n, 1]), Tensor::full(&[n, 1], top)]).unwrap();
    let s = 0.01 * var;
    let k = 3000;
    let z = conditional_prior_langevin(&model.prior, &[1], &z0, &LangevinConfig::new(k, s), &mut chain_streams(8, "cond", 0, n))
        .unwrap();
    assert!(z.layer(1).data().iter().all(|v| *v == top));
    // The chain is linear with contraction 1 - s / var.
    let v_oracle = {
        let (a, b) = ((1.0 - s / var).powi(2), 2.0 * s);
        let mut v = 0.0;
        for _ in 0..k {
            v = a * v + b;
        }
        v
    };
    let m_oracle = mu * (1.0 - (1.0 - s / var).powi(k as i32));
    let (m, v) = column_moments(z.layer(0), 0);
    let se_m = (v_oracle / n as f64).sqrt();
    let se_v = v_oracle * (2.0 / n as f64).sqrt();
    println!("mean {} oracle {}, variance {} oracle {} (closed form {})", m, m_oracle, v, v_oracle, var);
    assert!((m - m_oracle).abs() < 4.0 * se_m);
    assert!((v - v_oracle).abs() < 4.0 * se_v);
    assert!((v_oracle - var).abs() / var < 0.01);

    // In noise space the frozen parent is carried through unchanged as well.
    let cfg = LangevinConfig::new(k, 0.01).with_space(Space::Epsilon);
    let z = conditional_prior_langevin(&model.prior, &[1], &z0, &cfg, &mut chain_streams(9, "cond", 0, n)).unwrap();
    assert!(z.layer(1).data().iter().all(|v| *v == top));
    let (m, v) = column_moments(z.layer(0), 0);
    let v_eps = 0.02 / (1.0 - 0.99f64.powi(2));
    assert!((m - mu).abs() < 4.0 * (var * v_eps / n as f64).sqrt(), "{} vs {}", m, mu);
    assert!((v / (var * v_eps) - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt(), "{} vs {}", v, var * v_eps);
}

#[test]
fn noise_and_latent_spaces_target_the_same_prior() {
    // Self-normalized importance sampling from the Gaussian backbone gives
    // the prior moments to high accuracy for a mild energy.
    let mut model = random_model(&[1, 2], 2, 4, Activation::Tanh, 27);
    for t in model.prior.alpha_tensors_mut() {
        for v in t.data_mut() {
            *v *= 0.5;
        }
    }
    let m_is = 400_000;
    let z = ancestral_sample(&model.prior, &mut chain_streams(10, "is", 0, m_is)).unwrap();
    let f = model.prior.energy_sum(&z).unwrap();
    let fmax = f.iter().cloned().fold(f64::MIN, f64::max);
    let w: Vec<f64> = f.iter().map(|v| (v - fmax).exp()).collect();
    let wsum: f64 = w.iter().sum();
    let flat = z.flatten();
    let d = flat.cols();
    let is_mean: Vec<f64> = (0..d).map(|j| (0..m_is).map(|r| w[r] * flat.row(r)[j]).sum::<f64>() / wsum).collect();

    let n = 4000;
    for space in [Space::Z, Space::Epsilon] {
        let cfg = LangevinConfig::new(1500, 0.02).with_space(space);
        let run = sample_prior(&model.prior, &cfg, &mut chain_streams(11, "spaces", 0, n), None).unwrap();
        let flat = run.z.flatten();
        for j in 0..d {
            let (m, v) = column_moments(&flat, j);
            let se = (v / n as f64).sqrt();
            println!("{:?} coordinate {}: mean {:.4} importance {:.4} (se {:.4})", space, j, m, is_mean[j], se);
            assert!((m - is_mean[j]).abs() < 0.05, "{:?} coordinate {}", space, j);
        }
    }
}

#[test]
fn noise_space_round_trip_is_exact() {
    for seed in 0..20 {
        let model = random_model(&[2, 3, 2], 2, 4, Activation::Tanh, 100 + seed);
        let eps = LatentStack::standard_normal(&[2, 3, 2], &mut chain_streams(seed, "round-trip", 0, 50));
        let z = epsilon_transform(&model.prior, &eps).unwrap();
        let back = epsilon_inverse(&model.prior, &z).unwrap();
        let err = eps
            .flatten()
            .data()
            .iter()
            .zip(back.flatten().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "seed {}: {}", seed, err);
    }
}

#[test]
fn zero_step_generation_is_ancestral_sampling() {
    let mut model = random_model(&[2, 2], 2, 4, Activation::Tanh, 28);
    model.prior.zero_energies();
    let n = 10_000;
    let gen = generate(&model.decoder, &model.prior, &LangevinConfig::new(0, 0.1), &mut chain_streams(12, "gen", 0, n), false)
        .unwrap();
    // Pushforward oracle built directly from the conditional parameters.
    let mut r = jebm::rng::stream(13, "pushforward", 0);
    let top = Tensor::matrix(n, 2, jebm::rng::normal_vec(&mut r, 2 * n)).unwrap();
    let (mu, lv) = model.prior.conditional_params(0, &top).unwrap();
    let e = jebm::rng::normal_vec(&mut r, 2 * n);
    let bottom: Vec<f64> = (0..2 * n).map(|k| mu.data()[k] + (0.5 * lv.data()[k]).exp() * e[k]).collect();
    let oracle = model.decoder.mean(&Tensor::matrix(n, 2, bottom).unwrap()).unwrap();
    for j in 0..2 {
        let (m1, v1) = column_moments(&gen.mean, j);
        let (m2, v2) = column_moments(&oracle, j);
        let se = (v1 / n as f64 + v2 / n as f64).sqrt();
        assert!((m1 - m2).abs() < 3.0 * se, "coordinate {}: {} vs {} (se {})", j, m1, m2, se);
    }
}

#[test]
fn divergent_chains_are_reported_not_resampled() {
    let prior = single_layer(vec![-3.0]);
    let z0 = LatentStack::single(&[vec![1.0]]).unwrap();
    let err = langevin(&PriorTarget { prior: &prior }, &z0, &[false], &LangevinConfig::new(5000, 0.5), &mut chain_streams(14, "div", 0, 1), None)
        .unwrap_err();
    assert!(matches!(err, jebm::Error::DivergedChain { chain: 0, .. }), "{}", err);
}
