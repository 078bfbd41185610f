//! Algebraic identities of the joint prior and the Gaussian special case.

mod common;

use common::{fd_grad, random_model, randn, rel_err, rng};
use jebm::model::{EnergyHead, HierarchicalModel, LatentStack, ModelConfig, ParamGroup};
use jebm::nn::{Activation, Mlp};
use jebm::training::{variational_gradients, Trainable};
use jebm::Tensor;
use proptest::prelude::*;

fn random_dims(r: &mut jebm::rng::StreamRng) -> Vec<usize> {
    let v = randn(r, 5);
    let l = 1 + (v[0].abs() * 2.0) as usize % 4;
    (0..l).map(|i| 1 + (v[i + 1].abs() * 3.0) as usize % 4).collect()
}

#[test]
fn both_groupings_of_the_tilted_prior_agree() {
    let mut r = rng(31, "factorization");
    for m in 0..100 {
        let dims = random_dims(&mut r);
        let act = if m % 2 == 0 { Activation::Tanh } else { Activation::LeakyRelu { slope: 0.2 } };
        let model = random_model(&dims, 2, 5, act, 1000 + m);
        let n = 8;
        let z = LatentStack::new(dims.iter().map(|&d| Tensor::matrix(n, d, randn(&mut r, n * d)).unwrap()).collect()).unwrap();
        let f = model.prior.energy_terms(&z).unwrap();
        let g = model.prior.gaussian_terms(&z).unwrap();
        let joint = model.prior.unnormalized_log_prior(&z).unwrap();
        let (fs, gs) = (model.prior.energy_sum(&z).unwrap(), model.prior.gaussian_prior_logpdf(&z).unwrap());
        for c in 0..n {
            // prod_i exp(f_i) p_i, one tilted factor per layer.
            let layerwise: f64 = (0..dims.len()).map(|i| f[i][c] + g[i][c]).sum();
            // exp(sum_i f_i) * prod_i p_i.
            let grouped = fs[c] + gs[c];
            for (a, b) in [(layerwise, grouped), (joint[c], grouped)] {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "model {} {:?}: {} vs {}", m, dims, a, b);
            }
        }
    }
}

#[test]
fn zero_initialized_energy_heads_leave_the_gaussian_prior() {
    for seed in 0..10 {
        let cfg = ModelConfig {
            latent_dims: vec![3, 2, 2],
            ..ModelConfig::default()
        };
        let model = HierarchicalModel::new(&cfg, &mut rng(seed, "init")).unwrap();
        assert!(model.prior.energy_is_zero());
        let z = LatentStack::standard_normal(&[3, 2, 2], &mut jebm::rng::chain_streams(seed, "z", 0, 64));
        let z = LatentStack::new(z.layers().iter().map(|t| t.scale(3.0).unwrap()).collect()).unwrap();
        assert_eq!(model.prior.unnormalized_log_prior(&z).unwrap(), model.prior.gaussian_prior_logpdf(&z).unwrap());
        assert!(model.prior.energy_sum(&z).unwrap().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn a_single_layer_is_the_plain_latent_ebm() {
    let model = random_model(&[3], 2, 5, Activation::Tanh, 32);
    let mut r = rng(32, "single");
    let zt = Tensor::matrix(10, 3, randn(&mut r, 30)).unwrap();
    let z = LatentStack::new(vec![zt.clone()]).unwrap();
    let lp = model.prior.unnormalized_log_prior(&z).unwrap();
    let EnergyHead::Mlp(net) = &model.prior.energies()[0] else { panic!("mlp head") };
    let f = net.forward(&zt).unwrap();
    for c in 0..10 {
        let row = zt.row(c);
        let log_n = -0.5 * row.iter().map(|v| v * v).sum::<f64>() - 1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lp[c] - (f.data()[c] + log_n)).abs() < 1e-12);
    }
}

fn plain_mlp(m: &Mlp, x: &[f64]) -> Vec<f64> {
    let slope = match m.spec().activation {
        Activation::LeakyRelu { slope } => slope,
        Activation::Tanh => panic!("oracle covers leaky nets"),
    };
    let n = m.layers().len();
    let mut h = x.to_vec();
    for (k, layer) in m.layers().iter().enumerate() {
        let (i, o) = (layer.weight.shape()[0], layer.weight.shape()[1]);
        let mut out = layer.bias.data().to_vec();
        for a in 0..i {
            for b in 0..o {
                out[b] += h[a] * layer.weight.data()[a * o + b];
            }
        }
        if k + 1 < n {
            for v in out.iter_mut() {
                if *v < 0.0 {
                    *v *= slope;
                }
            }
        }
        h = out;
    }
    h
}

fn log_normal(x: f64, m: f64, lv: f64) -> f64 {
    -0.5 * ((x - m).powi(2) * (-lv).exp() + lv + (2.0 * std::f64::consts::PI).ln())
}

/// A from-scratch ELBO for one-dimensional latents and data:
/// `mean[log p(x|z1) + log p(z1|z2) + log p(z2) - log q(z1|x) - log q(z2|z1)]`
/// at the reparameterized draw driven by `eps`.
fn plain_elbo(model: &HierarchicalModel, x: &[f64], eps: &[(f64, f64)]) -> f64 {
    let clamp = |v: f64| v.clamp(-8.0, 8.0);
    let nets = model.inference.nets();
    let sigma = model.decoder.sigma();
    let mut total = 0.0;
    for (xi, (e1, e2)) in x.iter().zip(eps) {
        let q1 = plain_mlp(&nets[0], &[*xi]);
        let z1 = q1[0] + (0.5 * clamp(q1[1])).exp() * e1;
        let q2 = plain_mlp(&nets[1], &[z1]);
        let z2 = q2[0] + (0.5 * clamp(q2[1])).exp() * e2;
        let g = plain_mlp(model.decoder.net(), &[z1])[0];
        let p1 = plain_mlp(model.prior.conditionals()[0].net(), &[z2]);
        total += log_normal(*xi, g, 2.0 * sigma.ln())
            + log_normal(z1, p1[0], clamp(p1[1]))
            + log_normal(z2, 0.0, 0.0)
            - log_normal(z1, q1[0], clamp(q1[1]))
            - log_normal(z2, q2[0], clamp(q2[1]));
    }
    total / x.len() as f64
}

#[test]
fn variational_gradients_reduce_to_the_elbo_gradient() {
    let cfg = ModelConfig {
        latent_dims: vec![1, 1],
        data_dim: 1,
        energy_hidden: vec![4],
        conditional_hidden: vec![5],
        decoder_hidden: vec![5],
        encoder_hidden: vec![5],
        ..ModelConfig::default()
    };
    for seed in 0..5 {
        let model = HierarchicalModel::new(&cfg, &mut rng(seed, "elbo-model")).unwrap();
        let mut r = rng(seed, "elbo-data");
        let n = 16;
        let x = randn(&mut r, n);
        let e1 = randn(&mut r, n);
        let e2 = randn(&mut r, n);
        let eps: Vec<(f64, f64)> = e1.iter().cloned().zip(e2.iter().cloned()).collect();
        let noise = LatentStack::new(vec![Tensor::matrix(n, 1, e1).unwrap(), Tensor::matrix(n, 1, e2).unwrap()]).unwrap();
        let train = Trainable {
            alpha: false,
            ..Trainable::ALL
        };
        let xt = Tensor::matrix(n, 1, x.clone()).unwrap();
        let est = variational_gradients(&model, &xt, &noise, None, train, 0.0, true).unwrap();
        for group in [ParamGroup::Beta0, ParamGroup::BetaPrior, ParamGroup::Omega] {
            let flat: Vec<f64> = model.group_tensors(group).iter().flat_map(|t| t.data().to_vec()).collect();
            let numeric = fd_grad(
                |v| {
                    let mut m = model.clone();
                    let mut off = 0;
                    for t in m.group_tensors_mut(group) {
                        let k = t.len();
                        t.data_mut().copy_from_slice(&v[off..off + k]);
                        off += k;
                    }
                    plain_elbo(&m, &x, &eps)
                },
                &flat,
                1e-5,
            );
            let analytic: Vec<f64> = est.group(group).iter().flat_map(|t| t.data().to_vec()).collect();
            let e = rel_err(&analytic, &numeric);
            assert!(e < 1e-6, "seed {} {:?}: {:e}", seed, group, e);
        }
        // The analytic entropy differs from -log q by (1 - eps^2) / 2 per coordinate.
        let c: f64 = eps.iter().map(|(a, b)| 1.0 - 0.5 * (a * a + b * b)).sum::<f64>() / n as f64;
        let plain = plain_elbo(&model, &x, &eps) + c;
        assert!((est.objective - plain).abs() < 1e-9, "{} vs {}", est.objective, plain);
    }
}

fn shift_energies(model: &HierarchicalModel, c: f64) -> HierarchicalModel {
    let mut m = model.clone();
    for head in m.prior.energies_mut() {
        match head {
            EnergyHead::Mlp(net) => {
                let last = net.layers_mut().last_mut().unwrap();
                last.bias.data_mut()[0] += c;
            }
            EnergyHead::Quadratic { .. } => unreachable!(),
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn energy_shift_moves_the_log_prior_by_l_times_c(seed in 0u64..10_000, c in -5.0f64..5.0) {
        let dims = [2, 1, 3];
        let model = random_model(&dims, 2, 4, Activation::Tanh, seed);
        let shifted = shift_energies(&model, c);
        let z = LatentStack::standard_normal(&dims, &mut jebm::rng::chain_streams(seed, "shift", 0, 5));
        let a = model.prior.unnormalized_log_prior(&z).unwrap();
        let b = shifted.prior.unnormalized_log_prior(&z).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((y - x - 3.0 * c).abs() < 1e-9);
        }
        let ga = jebm::samplers::grad_log_prior(&model.prior, &z).unwrap();
        let gb = jebm::samplers::grad_log_prior(&shifted.prior, &z).unwrap();
        prop_assert_eq!(ga, gb);
    }

    #[test]
    fn noise_space_round_trip(seed in 0u64..10_000, scale in 0.1f64..4.0) {
        let dims = [2, 2, 1];
        let model = random_model(&dims, 2, 4, Activation::LeakyRelu { slope: 0.2 }, seed);
        let eps = LatentStack::standard_normal(&dims, &mut jebm::rng::chain_streams(seed, "rt", 0, 6));
        let eps = LatentStack::new(eps.layers().iter().map(|t| t.scale(scale).unwrap()).collect()).unwrap();
        let z = jebm::samplers::epsilon_transform(&model.prior, &eps).unwrap();
        let back = jebm::samplers::epsilon_inverse(&model.prior, &z).unwrap();
        for (a, b) in eps.flatten().data().iter().zip(back.flatten().data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
