//! Reverse-mode gradients against central finite differences: every tape
//! primitive, the network heads, the latent-space Langevin gradients and
//! the learning gradients of both surrogates.

mod common;

use common::{fd_grad, random_model, randn, rel_err, rng};
use jebm::autodiff::{gaussian_log_density_rows, standard_normal_log_density_rows, Tape, Var};
use jebm::model::{HierarchicalModel, LatentStack, ParamGroup};
use jebm::nn::Activation;
use jebm::samplers::{epsilon_transform, grad_log_posterior, grad_log_prior, grad_log_prior_eps};
use jebm::training::{mle_gradients, variational_gradients, Trainable};
use jebm::Tensor;

const POINTS: usize = 20;
const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn weights(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect()).unwrap()
}

/// `sum(op(inputs) * W)` for fixed weights `W`, so the whole Jacobian is probed.
fn contract<'t>(tape: &'t Tape, out: Var<'t>) -> Var<'t> {
    let w = tape.constant(weights(out.value().shape()));
    out.mul(w).unwrap().sum().unwrap()
}

/// Checks `op` at 20 random input points drawn by `draw`.
fn check_op(
    name: &str,
    shapes: &[&[usize]],
    draw: impl Fn(&mut jebm::rng::StreamRng, usize) -> Vec<f64>,
    op: impl for<'t> Fn(&[Var<'t>]) -> Var<'t>,
) {
    let mut r = rng(1, name);
    for p in 0..POINTS {
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| Tensor::new(s.to_vec(), draw(&mut r, s.iter().product())).unwrap())
            .collect();
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let out = contract(&tape, op(&vars));
        let g = tape.backward(out).unwrap();
        let analytic: Vec<f64> = vars.iter().flat_map(|v| g.wrt(*v).into_data()).collect();

        let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
        let eval = |x: &[f64]| {
            let tape = Tape::new();
            let mut off = 0;
            let vars: Vec<Var> = shapes
                .iter()
                .map(|s| {
                    let n: usize = s.iter().product();
                    let t = Tensor::new(s.to_vec(), x[off..off + n].to_vec()).unwrap();
                    off += n;
                    tape.constant(t)
                })
                .collect();
            contract(&tape, op(&vars)).value().item().unwrap()
        };
        let numeric = fd_grad(eval, &flat, H);
        let e = rel_err(&analytic, &numeric);
        assert!(e < TOL, "{} point {}: relative error {:e}", name, p, e);
    }
}

fn normal(r: &mut jebm::rng::StreamRng, n: usize) -> Vec<f64> {
    randn(r, n)
}

/// Normal draws kept at least `gap` away from every point in `kinks`.
fn away_from(kinks: &'static [f64], gap: f64) -> impl Fn(&mut jebm::rng::StreamRng, usize) -> Vec<f64> {
    move |r, n| {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let v = randn(r, 1)[0];
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                out.push(v);
            }
        }
        out
    }
}

#[test]
fn primitive_ops_match_finite_differences() {
    check_op("matmul", &[&[3, 4], &[4, 2]], normal, |v| v[0].matmul(v[1]).unwrap());
    check_op("add", &[&[3, 4], &[3, 4]], normal, |v| v[0].add(v[1]).unwrap());
    check_op("sub", &[&[3, 4], &[3, 4]], normal, |v| v[0].sub(v[1]).unwrap());
    check_op("mul", &[&[3, 4], &[3, 4]], normal, |v| v[0].mul(v[1]).unwrap());
    check_op("scale", &[&[3, 4]], normal, |v| v[0].scale(1.7).unwrap());
    check_op("neg", &[&[3, 4]], normal, |v| v[0].neg().unwrap());
    check_op("add_scalar", &[&[3, 4]], normal, |v| v[0].add_scalar(0.3).unwrap());
    check_op("add_bias", &[&[3, 4], &[4]], normal, |v| v[0].add_bias(v[1]).unwrap());
    check_op("leaky_relu", &[&[3, 4]], away_from(&[0.0], 1e-3), |v| v[0].leaky_relu(0.2).unwrap());
    check_op("tanh", &[&[3, 4]], normal, |v| v[0].tanh().unwrap());
    check_op("exp", &[&[3, 4]], normal, |v| v[0].exp().unwrap());
    check_op("log", &[&[3, 4]], |r, n| randn(r, n).iter().map(|x| x.abs() + 0.5).collect(), |v| {
        v[0].log().unwrap()
    });
    check_op("square", &[&[3, 4]], normal, |v| v[0].square().unwrap());
    check_op("clamp", &[&[3, 4]], away_from(&[-0.5, 0.5], 1e-3), |v| v[0].clamp(-0.5, 0.5).unwrap());
    check_op("sum", &[&[3, 4]], normal, |v| v[0].sum().unwrap());
    check_op("row_sum", &[&[3, 4]], normal, |v| v[0].row_sum().unwrap());
    check_op("slice_cols", &[&[3, 4]], normal, |v| v[0].slice_cols(1, 3).unwrap());
    check_op("gaussian_log_density", &[&[3, 2], &[3, 2], &[3, 2]], normal, |v| {
        gaussian_log_density_rows(v[0], v[1], v[2]).unwrap()
    });
    check_op("standard_normal_log_density", &[&[3, 2]], normal, |v| {
        standard_normal_log_density_rows(v[0]).unwrap()
    });
    check_op("composite", &[&[3, 4], &[4, 2], &[2]], normal, |v| {
        v[0].matmul(v[1]).unwrap().add_bias(v[2]).unwrap().tanh().unwrap().square().unwrap().row_sum().unwrap()
    });
}

#[test]
fn leaky_relu_takes_the_positive_branch_at_zero() {
    let tape = Tape::new();
    let x = tape.var(Tensor::vector(vec![0.0, -1.0, 2.0]).reshape(vec![1, 3]).unwrap());
    let y = x.leaky_relu(0.2).unwrap().sum().unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).data(), &[1.0, 0.2, 1.0]);
}

#[test]
fn gradient_of_a_sum_is_the_sum_of_gradients() {
    let mut r = rng(2, "linearity");
    let x0 = Tensor::matrix(2, 3, randn(&mut r, 6)).unwrap();
    let grad_of = |which: u8| {
        let tape = Tape::new();
        let x = tape.var(x0.clone());
        let a = x.tanh().unwrap().sum().unwrap();
        let b = x.square().unwrap().exp().unwrap().sum().unwrap();
        let out = match which {
            0 => a,
            1 => b,
            _ => a.add(b).unwrap(),
        };
        tape.backward(out).unwrap().wrt(x).into_data()
    };
    let (ga, gb, gab) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..6 {
        assert_eq!(gab[i], ga[i] + gb[i]);
    }
}

#[test]
fn taping_leaves_values_identical_to_eager_evaluation() {
    let mut r = rng(3, "eager");
    let a = Tensor::matrix(3, 4, randn(&mut r, 12)).unwrap();
    let w = Tensor::matrix(4, 2, randn(&mut r, 8)).unwrap();
    let b = Tensor::vector(randn(&mut r, 2));
    let eager = a.matmul(&w).unwrap().add_bias(&b).unwrap().leaky_relu(0.2).unwrap().exp().unwrap();
    let tape = Tape::new();
    let out = tape
        .var(a.clone())
        .matmul(tape.var(w.clone()))
        .unwrap()
        .add_bias(tape.var(b.clone()))
        .unwrap()
        .leaky_relu(0.2)
        .unwrap()
        .exp()
        .unwrap();
    let before = (*out.value()).clone();
    let _ = tape.backward(out.sum().unwrap()).unwrap();
    assert_eq!(before, eager);
    assert_eq!(*out.value(), eager);
}

/// Finite differences of `f` over every entry of one parameter group.
fn param_fd(model: &HierarchicalModel, group: ParamGroup, f: impl Fn(&HierarchicalModel) -> f64) -> Vec<f64> {
    let flat: Vec<f64> = model.group_tensors(group).iter().flat_map(|t| t.data().to_vec()).collect();
    let eval = |x: &[f64]| {
        let mut m = model.clone();
        let mut off = 0;
        for t in m.group_tensors_mut(group) {
            let n = t.len();
            t.data_mut().copy_from_slice(&x[off..off + n]);
            off += n;
        }
        f(&m)
    };
    fd_grad(eval, &flat, H)
}

fn flat(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().to_vec()).collect()
}

fn random_stack(dims: &[usize], n: usize, r: &mut jebm::rng::StreamRng) -> LatentStack {
    LatentStack::new(dims.iter().map(|&d| Tensor::matrix(n, d, randn(r, n * d)).unwrap()).collect()).unwrap()
}

fn stack_from(dims: &[usize], x: &[f64]) -> LatentStack {
    let mut off = 0;
    LatentStack::new(
        dims.iter()
            .map(|&d| {
                let t = Tensor::matrix(1, d, x[off..off + d].to_vec()).unwrap();
                off += d;
                t
            })
            .collect(),
    )
    .unwrap()
}

const DIMS: [usize; 3] = [2, 3, 2];

#[test]
fn energy_heads_conditionals_and_decoder_match_finite_differences() {
    for act in [Activation::Tanh, Activation::LeakyRelu { slope: 0.2 }] {
        let mut r = rng(4, "heads");
        for p in 0..POINTS {
            let model = random_model(&DIMS, 3, 5, act, 100 + p as u64);
            let z = random_stack(&DIMS, 1, &mut r);
            let x = Tensor::matrix(1, 3, randn(&mut r, 3)).unwrap();

            // Latent-space gradients of each term in isolation.
            let terms: [(&str, Box<dyn Fn(&LatentStack) -> f64>); 3] = [
                ("energy", Box::new(|z: &LatentStack| model.prior.energy_sum(z).unwrap()[0])),
                ("gaussian", Box::new(|z: &LatentStack| model.prior.gaussian_prior_logpdf(z).unwrap()[0])),
                ("decoder", Box::new(|z: &LatentStack| model.decoder.log_likelihood(&x, z.layer(0)).unwrap()[0])),
            ];
            for (name, f) in terms.iter() {
                let zf = z.flatten().into_data();
                let numeric = fd_grad(|v| f(&stack_from(&DIMS, v)), &zf, H);
                let tape = Tape::new();
                let zs: Vec<Var> = z.layers().iter().map(|t| tape.var(t.clone())).collect();
                let bp = model.prior.bind(&tape, false, false);
                let bd = model.decoder.bind(&tape, false);
                let out = match *name {
                    "energy" => bp.energy_sum(&zs).unwrap(),
                    "gaussian" => bp.gaussian_log_prob(&zs).unwrap(),
                    _ => bd.log_likelihood(tape.constant(x.clone()), zs[0]).unwrap(),
                };
                let g = tape.backward(out.sum().unwrap()).unwrap();
                let analytic: Vec<f64> = zs.iter().flat_map(|v| g.wrt(*v).into_data()).collect();
                let e = rel_err(&analytic, &numeric);
                assert!(e < TOL, "{} latent gradient ({:?}, point {}): {:e}", name, act, p, e);
            }

            // Parameter gradients.
            let tape = Tape::new();
            let zs: Vec<Var> = z.layers().iter().map(|t| tape.constant(t.clone())).collect();
            let bp = model.prior.bind(&tape, true, true);
            let bd = model.decoder.bind(&tape, true);
            let out = bp
                .unnormalized_log_prior(&zs)
                .unwrap()
                .add(bd.log_likelihood(tape.constant(x.clone()), zs[0]).unwrap())
                .unwrap()
                .sum()
                .unwrap();
            let g = tape.backward(out).unwrap();
            let objective = |m: &HierarchicalModel| {
                m.prior.unnormalized_log_prior(&z).unwrap()[0] + m.decoder.log_likelihood(&x, z.layer(0)).unwrap()[0]
            };
            for (group, analytic) in [
                (ParamGroup::Alpha, flat(&bp.alpha_grads(&g))),
                (ParamGroup::BetaPrior, flat(&bp.beta_grads(&g))),
                (ParamGroup::Beta0, flat(&bd.grads(&g))),
            ] {
                let numeric = param_fd(&model, group, objective);
                let e = rel_err(&analytic, &numeric);
                assert!(e < TOL, "{:?} parameter gradient ({:?}, point {}): {:e}", group, act, p, e);
            }
        }
    }
}

#[test]
fn quadratic_head_matches_finite_differences() {
    use jebm::model::{EnergyHead, JointEbmPrior};
    let mut r = rng(5, "quadratic");
    for p in 0..POINTS {
        let c = randn(&mut r, 3).iter().map(|v| v.abs()).collect::<Vec<_>>();
        let prior = JointEbmPrior::from_parts(vec![3], vec![], vec![EnergyHead::quadratic(c.clone())]).unwrap();
        let z = random_stack(&[3], 1, &mut r);
        let zf = z.flatten().into_data();
        let numeric = fd_grad(|v| prior.unnormalized_log_prior(&stack_from(&[3], v)).unwrap()[0], &zf, H);
        let analytic = grad_log_prior(&prior, &z).unwrap().flatten().into_data();
        assert!(rel_err(&analytic, &numeric) < TOL, "point {}", p);
        let closed: Vec<f64> = zf.iter().zip(&c).map(|(z, c)| -(1.0 + c) * z).collect();
        assert!(rel_err(&analytic, &closed) < 1e-12);
    }
}

#[test]
fn langevin_gradients_match_finite_differences() {
    let mut r = rng(6, "langevin-grads");
    for p in 0..POINTS {
        let model = random_model(&DIMS, 3, 5, Activation::Tanh, 200 + p as u64);
        let z = random_stack(&DIMS, 1, &mut r);
        let x = Tensor::matrix(1, 3, randn(&mut r, 3)).unwrap();
        let zf = z.flatten().into_data();

        let prior_fd = fd_grad(|v| model.prior.unnormalized_log_prior(&stack_from(&DIMS, v)).unwrap()[0], &zf, H);
        let prior_an = grad_log_prior(&model.prior, &z).unwrap().flatten().into_data();
        let e = rel_err(&prior_an, &prior_fd);
        assert!(e < TOL, "prior latent gradient point {}: {:e}", p, e);

        let post = |v: &[f64]| {
            let s = stack_from(&DIMS, v);
            model.prior.unnormalized_log_prior(&s).unwrap()[0] + model.decoder.log_likelihood(&x, s.layer(0)).unwrap()[0]
        };
        let post_fd = fd_grad(post, &zf, H);
        let post_an = grad_log_posterior(&model.decoder, &model.prior, &x, &z).unwrap().flatten().into_data();
        let e = rel_err(&post_an, &post_fd);
        assert!(e < TOL, "posterior latent gradient point {}: {:e}", p, e);

        // The noise-space target: sum_i f_i(T(eps)_i) + log N(eps; 0, I).
        let eps = z.clone();
        let eps_target = |v: &[f64]| {
            let e = stack_from(&DIMS, v);
            let zz = epsilon_transform(&model.prior, &e).unwrap();
            model.prior.energy_sum(&zz).unwrap()[0] - 0.5 * v.iter().map(|a| a * a).sum::<f64>()
        };
        let eps_fd = fd_grad(eps_target, &zf, H);
        let eps_an = grad_log_prior_eps(&model.prior, &eps).unwrap().flatten().into_data();
        let e = rel_err(&eps_an, &eps_fd);
        assert!(e < TOL, "noise-space gradient point {}: {:e}", p, e);
    }
}

const GROUPS: [ParamGroup; 4] = [ParamGroup::Alpha, ParamGroup::Beta0, ParamGroup::BetaPrior, ParamGroup::Omega];

#[test]
fn learning_gradients_match_finite_differences_of_their_surrogates() {
    let mut r = rng(7, "learning-grads");
    for p in 0..POINTS {
        let model = random_model(&DIMS, 3, 4, Activation::Tanh, 300 + p as u64);
        let n = 3;
        let x = Tensor::matrix(n, 3, randn(&mut r, n * 3)).unwrap();
        let z_pos = random_stack(&DIMS, n, &mut r);
        let z_neg = random_stack(&DIMS, 4, &mut r);
        let noise = random_stack(&DIMS, n, &mut r);

        let mle = |m: &HierarchicalModel| {
            mle_gradients(m, &x, &z_pos, Some(&z_neg), Trainable::ALL, 0.1).unwrap()
        };
        let est = mle(&model);
        for g in GROUPS {
            let numeric = param_fd(&model, g, |m| mle(m).objective);
            let e = rel_err(&flat(est.group(g)), &numeric);
            assert!(e < TOL, "mle {:?} point {}: {:e}", g, p, e);
        }

        for path in [true, false] {
            let var = |m: &HierarchicalModel| {
                variational_gradients(m, &x, &noise, Some(&z_neg), Trainable::ALL, 0.1, path).unwrap()
            };
            let est = var(&model);
            for g in GROUPS {
                if g == ParamGroup::Omega && !path {
                    continue;
                }
                let numeric = param_fd(&model, g, |m| var(m).objective);
                let e = rel_err(&flat(est.group(g)), &numeric);
                assert!(e < TOL, "variational {:?} (energy path {}) point {}: {:e}", g, path, p, e);
            }
        }
    }
}

#[test]
fn detached_energy_path_drops_only_the_energy_term_from_the_encoder_gradient() {
    let model = random_model(&DIMS, 3, 4, Activation::Tanh, 400);
    let mut r = rng(8, "detach");
    let x = Tensor::matrix(2, 3, randn(&mut r, 6)).unwrap();
    let noise = random_stack(&DIMS, 2, &mut r);
    let z_neg = random_stack(&DIMS, 2, &mut r);
    let with = variational_gradients(&model, &x, &noise, Some(&z_neg), Trainable::ALL, 0.0, true).unwrap();
    let without = variational_gradients(&model, &x, &noise, Some(&z_neg), Trainable::ALL, 0.0, false).unwrap();
    // The energy term reaches the encoder only through the codes it produces.
    let energy_only = |m: &HierarchicalModel| {
        let q = m.inference.infer(&x, Some(&noise)).unwrap();
        model.prior.energy_sum(&q.z).unwrap().iter().sum::<f64>() / 2.0
    };
    let numeric = param_fd(&model, ParamGroup::Omega, energy_only);
    let diff: Vec<f64> = flat(&with.omega).iter().zip(flat(&without.omega)).map(|(a, b)| a - b).collect();
    assert!(rel_err(&diff, &numeric) < TOL);
    assert_eq!(flat(&with.alpha), flat(&without.alpha));
    assert_eq!(flat(&with.beta0), flat(&without.beta0));
}
