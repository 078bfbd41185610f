//! Independent reference computations for the model's gradients and
//! identities: central finite differences, brute-force quadrature of a
//! two-layer scalar model, the exact variance recurrence of the discrete
//! Langevin chain, and a from-scratch ELBO. Used by `jebm gradcheck` and
//! the acceptance suite.

use jebm::autodiff::Tape;
use jebm::model::{
    ConditionalGaussianLayer, EnergyHead, GeneratorDecoder, HierarchicalModel, InferenceStack, JointEbmPrior,
    LatentStack, ModelConfig, ParamGroup,
};
use jebm::nn::{Activation, Init, Mlp, MlpSpec};
use jebm::rng::{chain_streams, normal_vec, stream, StreamRng};
use jebm::samplers::{
    ancestral_sample, epsilon_transform, grad_log_posterior, grad_log_prior, grad_log_prior_eps, langevin,
    LangevinConfig, PriorTarget,
};
use jebm::training::{mle_gradients, variational_gradients, Trainable};
use jebm::{Error, Result, Tensor};
use rand::Rng;

/// One oracle comparison: the worst error seen and the bound it must stay under.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub error: f64,
    pub tol: f64,
}

impl Check {
    fn new(name: impl Into<String>, error: f64, tol: f64) -> Self {
        Check {
            name: name.into(),
            error,
            tol,
        }
    }

    pub fn passed(&self) -> bool {
        self.error < self.tol
    }
}

/// Central differences of `f` at `x`.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if a.len() != b.len() {
        f64::INFINITY
    } else if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn mlp(input: usize, hidden: &[usize], output: usize, act: Activation, rng: &mut StreamRng) -> Result<Mlp> {
    let mut spec = MlpSpec::new(input, hidden, output);
    spec.activation = act;
    Mlp::new(spec, Init::Scaled { gain: 1.0 }, rng)
}

/// A model whose every network, energy heads included, has random nonzero
/// weights and activation `act`.
pub fn random_model(dims: &[usize], data_dim: usize, hidden: usize, act: Activation, seed: u64) -> Result<HierarchicalModel> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::Usage(format!("latent dims must be nonempty and positive, got {:?}", dims)));
    }
    let mut r = stream(seed, "oracle-model", 0);
    let l = dims.len();
    let conditionals = (0..l - 1)
        .map(|i| ConditionalGaussianLayer::new(mlp(dims[i + 1], &[hidden], 2 * dims[i], act, &mut r)?))
        .collect::<Result<Vec<_>>>()?;
    let energies = dims
        .iter()
        .map(|&d| Ok(EnergyHead::Mlp(mlp(d, &[hidden], 1, act, &mut r)?)))
        .collect::<Result<Vec<_>>>()?;
    let prior = JointEbmPrior::from_parts(dims.to_vec(), conditionals, energies)?;
    let decoder = GeneratorDecoder::new(mlp(dims[0], &[hidden], data_dim, act, &mut r)?, 0.3)?;
    let mut nets = vec![mlp(data_dim, &[hidden], 2 * dims[0], act, &mut r)?];
    for i in 1..l {
        nets.push(mlp(dims[i - 1], &[hidden], 2 * dims[i], act, &mut r)?);
    }
    HierarchicalModel::from_parts(prior, decoder, InferenceStack::new(nets)?)
}

fn random_stack(dims: &[usize], n: usize, r: &mut StreamRng) -> Result<LatentStack> {
    LatentStack::new(
        dims.iter()
            .map(|&d| Tensor::matrix(n, d, normal_vec(r, n * d)))
            .collect::<Result<Vec<_>>>()?,
    )
}

fn stack_from(dims: &[usize], x: &[f64]) -> LatentStack {
    let mut off = 0;
    let layers = dims
        .iter()
        .map(|&d| {
            let t = Tensor::matrix(1, d, x[off..off + d].to_vec()).expect("layer width");
            off += d;
            t
        })
        .collect();
    LatentStack::new(layers).expect("stack")
}

fn flat(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().to_vec()).collect()
}

/// Finite differences of `f` over every entry of one parameter group.
fn param_fd(model: &HierarchicalModel, group: ParamGroup, h: f64, f: impl Fn(&HierarchicalModel) -> f64) -> Vec<f64> {
    let x0 = flat(&model.group_tensors(group).into_iter().cloned().collect::<Vec<_>>());
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
    fd_grad(eval, &x0, h)
}

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub dims: Vec<usize>,
    pub data_dim: usize,
    pub hidden: usize,
    pub seed: u64,
    pub points: usize,
    pub step: f64,
    pub tol: f64,
    /// Perturb every analytic gradient before comparing, so the checks must fail.
    pub corrupt: bool,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            dims: vec![2, 3, 2],
            data_dim: 3,
            hidden: 5,
            seed: 0,
            points: 20,
            step: 1e-5,
            tol: 1e-6,
            corrupt: false,
        }
    }
}

/// Tracks the worst relative error per named gradient.
struct Worst {
    checks: Vec<Check>,
    tol: f64,
    corrupt: bool,
}

impl Worst {
    fn record(&mut self, name: &str, mut analytic: Vec<f64>, numeric: &[f64]) {
        if self.corrupt {
            if let Some(v) = analytic.first_mut() {
                *v += 1e-3 * (1.0 + v.abs());
            }
        }
        let e = rel_err(&analytic, numeric);
        match self.checks.iter_mut().find(|c| c.name == name) {
            Some(c) if e.is_nan() || e > c.error => c.error = e,
            Some(_) => {}
            None => self.checks.push(Check::new(name, e, self.tol)),
        }
    }
}

const GROUPS: [ParamGroup; 4] = [ParamGroup::Alpha, ParamGroup::Beta0, ParamGroup::BetaPrior, ParamGroup::Omega];

/// Reverse-mode gradients of the heads, the latent targets and both
/// learning surrogates against central differences, at `points` random
/// models and inputs. Heads and latent targets run on tanh and on
/// leaky-ReLU networks, the learning surrogates on tanh only.
pub fn finite_difference_suite(o: &FdOptions) -> Result<Vec<Check>> {
    let dims = &o.dims;
    let mut w = Worst {
        checks: Vec::new(),
        tol: o.tol,
        corrupt: o.corrupt,
    };
    let mut r = stream(o.seed, "oracle-points", 0);
    for p in 0..o.points {
        for (tag, act) in [("tanh", Activation::Tanh), ("leaky", Activation::LeakyRelu { slope: 0.2 })] {
            let model = random_model(dims, o.data_dim, o.hidden, act, o.seed.wrapping_mul(1000).wrapping_add(p as u64))?;
            let z = random_stack(dims, 1, &mut r)?;
            let x = Tensor::matrix(1, o.data_dim, normal_vec(&mut r, o.data_dim))?;
            let zf = z.flatten().into_data();

            // Latent gradients of each model term on its own.
            for term in ["energy heads", "conditional gaussians", "decoder likelihood"] {
                let f = |v: &[f64]| {
                    let s = stack_from(dims, v);
                    match term {
                        "energy heads" => model.prior.energy_sum(&s).expect("energy")[0],
                        "conditional gaussians" => model.prior.gaussian_prior_logpdf(&s).expect("gaussian")[0],
                        _ => model.decoder.log_likelihood(&x, s.layer(0)).expect("likelihood")[0],
                    }
                };
                let numeric = fd_grad(f, &zf, o.step);
                let tape = Tape::new();
                let zs: Vec<_> = z.layers().iter().map(|t| tape.var(t.clone())).collect();
                let bp = model.prior.bind(&tape, false, false);
                let bd = model.decoder.bind(&tape, false);
                let out = match term {
                    "energy heads" => bp.energy_sum(&zs)?,
                    "conditional gaussians" => bp.gaussian_log_prob(&zs)?,
                    _ => bd.log_likelihood(tape.constant(x.clone()), zs[0])?,
                };
                let g = tape.backward(out.sum()?)?;
                let analytic = zs.iter().flat_map(|v| g.wrt(*v).into_data()).collect();
                w.record(&format!("{} latent gradient ({})", term, tag), analytic, &numeric);
            }

            // Parameter gradients of the unnormalized joint log density.
            let tape = Tape::new();
            let zs: Vec<_> = z.layers().iter().map(|t| tape.constant(t.clone())).collect();
            let bp = model.prior.bind(&tape, true, true);
            let bd = model.decoder.bind(&tape, true);
            let out = bp
                .unnormalized_log_prior(&zs)?
                .add(bd.log_likelihood(tape.constant(x.clone()), zs[0])?)?
                .sum()?;
            let g = tape.backward(out)?;
            let joint = |m: &HierarchicalModel| {
                m.prior.unnormalized_log_prior(&z).expect("prior")[0] + m.decoder.log_likelihood(&x, z.layer(0)).expect("likelihood")[0]
            };
            for (group, analytic) in [
                (ParamGroup::Alpha, flat(&bp.alpha_grads(&g))),
                (ParamGroup::BetaPrior, flat(&bp.beta_grads(&g))),
                (ParamGroup::Beta0, flat(&bd.grads(&g))),
            ] {
                let numeric = param_fd(&model, group, o.step, joint);
                w.record(&format!("{:?} parameter gradient ({})", group, tag), analytic, &numeric);
            }

            // The Langevin targets.
            let prior_fd = fd_grad(|v| model.prior.unnormalized_log_prior(&stack_from(dims, v)).expect("prior")[0], &zf, o.step);
            w.record(&format!("prior latent gradient ({})", tag), grad_log_prior(&model.prior, &z)?.flatten().into_data(), &prior_fd);
            let post = |v: &[f64]| {
                let s = stack_from(dims, v);
                model.prior.unnormalized_log_prior(&s).expect("prior")[0] + model.decoder.log_likelihood(&x, s.layer(0)).expect("likelihood")[0]
            };
            let post_fd = fd_grad(post, &zf, o.step);
            w.record(
                &format!("posterior latent gradient ({})", tag),
                grad_log_posterior(&model.decoder, &model.prior, &x, &z)?.flatten().into_data(),
                &post_fd,
            );
            let eps_target = |v: &[f64]| {
                let zz = epsilon_transform(&model.prior, &stack_from(dims, v)).expect("transform");
                model.prior.energy_sum(&zz).expect("energy")[0] - 0.5 * v.iter().map(|a| a * a).sum::<f64>()
            };
            let eps_fd = fd_grad(eps_target, &zf, o.step);
            w.record(&format!("noise-space gradient ({})", tag), grad_log_prior_eps(&model.prior, &z)?.flatten().into_data(), &eps_fd);
        }

        // Learning gradients of both surrogates, on smooth nets only.
        let model = random_model(dims, o.data_dim, 4, Activation::Tanh, o.seed.wrapping_mul(1000).wrapping_add(500 + p as u64))?;
        let n = 3;
        let x = Tensor::matrix(n, o.data_dim, normal_vec(&mut r, n * o.data_dim))?;
        let z_pos = random_stack(dims, n, &mut r)?;
        let z_neg = random_stack(dims, 4, &mut r)?;
        let noise = random_stack(dims, n, &mut r)?;
        let mle = |m: &HierarchicalModel| mle_gradients(m, &x, &z_pos, Some(&z_neg), Trainable::ALL, 0.1);
        let est = mle(&model)?;
        for g in GROUPS {
            let numeric = param_fd(&model, g, o.step, |m| mle(m).expect("mle").objective);
            w.record(&format!("mle {:?} learning gradient", g), flat(est.group(g)), &numeric);
        }
        for path in [true, false] {
            let var = |m: &HierarchicalModel| variational_gradients(m, &x, &noise, Some(&z_neg), Trainable::ALL, 0.1, path);
            let est = var(&model)?;
            for g in GROUPS {
                if g == ParamGroup::Omega && !path {
                    continue;
                }
                let numeric = param_fd(&model, g, o.step, |m| var(m).expect("variational").objective);
                let label = if path { "" } else { ", detached energy path" };
                w.record(&format!("variational {:?} learning gradient{}", g, label), flat(est.group(g)), &numeric);
            }
        }
    }
    Ok(w.checks)
}

/// Grid for the quadrature oracle: `n` points per axis on `[lo, hi]`.
#[derive(Clone, Copy, Debug)]
pub struct QuadratureGrid {
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        QuadratureGrid { n: 2001, lo: -8.0, hi: 8.0 }
    }
}

impl QuadratureGrid {
    fn points(&self) -> Vec<f64> {
        let h = (self.hi - self.lo) / (self.n - 1) as f64;
        (0..self.n).map(|k| self.lo + k as f64 * h).collect()
    }

    fn log_weight(&self, k: usize) -> f64 {
        let h = (self.hi - self.lo) / (self.n - 1) as f64;
        if k == 0 || k == self.n - 1 {
            (h / 2.0).ln()
        } else {
            h.ln()
        }
    }
}

struct Integrand {
    log_joint: f64,
    log_z: f64,
    joint: Vec<f64>,
    prior: Vec<f64>,
}

/// Log integrands of `p(x, z)` (up to the prior normalizer) and of the
/// unnormalized prior on the tensor-product grid, cell `i * n + j` holding
/// `z_1 = g[i]`, `z_2 = g[j]`. Only the log-sums are kept unless `keep`.
fn integrate(model: &HierarchicalModel, grid: &QuadratureGrid, x: f64, keep: bool) -> Result<Integrand> {
    let n = grid.n;
    let gv = grid.points();
    let g = Tensor::matrix(n, 1, gv.clone())?;
    let z = LatentStack::new(vec![g.clone(), g.clone()])?;
    let f = model.prior.energy_terms(&z)?;
    let (mu, lv) = model.prior.conditional_params(0, &g)?;
    let ll = model.decoder.log_likelihood(&Tensor::full(&[n, 1], x), &g)?;
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let a: Vec<f64> = (0..n).map(|i| f[0][i] + grid.log_weight(i)).collect();
    let b: Vec<f64> = (0..n)
        .map(|j| f[1][j] - 0.5 * gv[j] * gv[j] - half_ln_2pi + grid.log_weight(j))
        .collect();
    let cell = |i: usize, j: usize| {
        let d = gv[i] - mu.data()[j];
        let v = lv.data()[j];
        a[i] + b[j] - 0.5 * d * d * (-v).exp() - 0.5 * v - half_ln_2pi
    };
    let (mut mj, mut mp) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        for j in 0..n {
            let p = cell(i, j);
            mp = mp.max(p);
            mj = mj.max(p + ll[i]);
        }
    }
    let (mut sj, mut sp) = (0.0, 0.0);
    let (mut joint, mut prior) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in 0..n {
            let p = cell(i, j);
            sp += (p - mp).exp();
            sj += (p + ll[i] - mj).exp();
            if keep {
                prior.push(p);
                joint.push(p + ll[i]);
            }
        }
    }
    Ok(Integrand {
        log_joint: mj + sj.ln(),
        log_z: mp + sp.ln(),
        joint,
        prior,
    })
}

/// Systematic draws from the grid distribution with log-weights `logw`:
/// one uniform offset, then `count` evenly spaced quantiles. Each draw is
/// marginally exact and the sample mean stays unbiased.
fn draw_cells(logw: &[f64], grid: &QuadratureGrid, count: usize, rng: &mut StreamRng) -> Result<LatentStack> {
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut cdf = Vec::with_capacity(logw.len());
    let mut acc = 0.0;
    for v in logw {
        acc += (v - m).exp();
        cdf.push(acc);
    }
    let g = grid.points();
    let (mut z1, mut z2) = (Vec::with_capacity(count), Vec::with_capacity(count));
    let u0 = rng.random::<f64>();
    for i in 0..count {
        let u = (i as f64 + u0) / count as f64 * acc;
        let k = cdf.partition_point(|c| *c < u).min(cdf.len() - 1);
        z1.push(g[k / grid.n]);
        z2.push(g[k % grid.n]);
    }
    LatentStack::new(vec![Tensor::matrix(count, 1, z1)?, Tensor::matrix(count, 1, z2)?])
}

fn nudged(model: &HierarchicalModel, group: ParamGroup, idx: usize, delta: f64) -> HierarchicalModel {
    let mut m = model.clone();
    let mut off = 0;
    for t in m.group_tensors_mut(group) {
        if idx < off + t.len() {
            t.data_mut()[idx - off] += delta;
            break;
        }
        off += t.len();
    }
    m
}

#[derive(Clone, Debug)]
pub struct QuadratureOptions {
    pub seed: u64,
    pub samples: usize,
    pub grid: QuadratureGrid,
    pub tol: f64,
    pub corrupt: bool,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        QuadratureOptions {
            seed: 11,
            samples: 100_000,
            grid: QuadratureGrid::default(),
            tol: 1e-2,
            corrupt: false,
        }
    }
}

/// The Monte-Carlo learning gradient, which never evaluates the prior
/// normalizer, against the derivative of `log p(x)` by quadrature, which
/// does. Positive and negative samples are exact draws from the grid. For
/// the energy and the prior conditional, the entry with the largest exact
/// gradient is probed.
pub fn quadrature_check(o: &QuadratureOptions) -> Result<Vec<Check>> {
    let model = random_model(&[1, 1], 1, 3, Activation::Tanh, o.seed)?;
    let x = 0.8;
    let it = integrate(&model, &o.grid, x, true)?;
    let mut rng = stream(o.seed, "quadrature-samples", 0);
    let z_pos = draw_cells(&it.joint, &o.grid, o.samples, &mut rng)?;
    let z_neg = draw_cells(&it.prior, &o.grid, o.samples, &mut rng)?;
    let train = Trainable {
        alpha: true,
        beta0: false,
        beta_prior: true,
        omega: false,
    };
    let est = mle_gradients(&model, &Tensor::full(&[o.samples, 1], x), &z_pos, Some(&z_neg), train, 0.0)?;
    let log_marginal = |m: &HierarchicalModel| integrate(m, &o.grid, x, false).map(|i| i.log_joint - i.log_z);
    let mut out = Vec::new();
    for group in [ParamGroup::Alpha, ParamGroup::BetaPrior] {
        let mut mc = flat(est.group(group));
        if o.corrupt {
            for v in mc.iter_mut() {
                *v *= 1.5;
            }
        }
        let h = 1e-4;
        let exact = (0..mc.len())
            .map(|k| Ok((log_marginal(&nudged(&model, group, k, h))? - log_marginal(&nudged(&model, group, k, -h))?) / (2.0 * h)))
            .collect::<Result<Vec<f64>>>()?;
        let k = (0..exact.len())
            .max_by(|&a, &b| exact[a].abs().total_cmp(&exact[b].abs()))
            .ok_or_else(|| Error::Usage("empty parameter group".into()))?;
        let rel = if exact[k] == 0.0 { f64::INFINITY } else { (mc[k] - exact[k]).abs() / exact[k].abs() };
        out.push(Check::new(
            format!("{:?} entry {} (quadrature {:.6}, monte carlo {:.6})", group, k, exact[k], mc[k]),
            rel,
            o.tol,
        ));
    }
    Ok(out)
}

/// Variance after `k` steps of `z <- (1 - s a) z + sqrt(2 s) e` started at `v0`.
pub fn variance_recurrence(a: f64, s: f64, k: usize, v0: f64) -> f64 {
    let mut v = v0;
    for _ in 0..k {
        v = (1.0 - s * a).powi(2) * v + 2.0 * s;
    }
    v
}

/// Empirical per-coordinate variance of unadjusted Langevin chains on a
/// 2-D Gaussian reference, untilted and tilted by `exp(-z^2 / 2)`, against
/// the exact recurrence. The error is the largest absolute deviation.
pub fn langevin_variance_check(seed: u64, chains: usize, steps: usize, step_size: f64, tol: f64) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (c, a, name) in [(0.0, 1.0, "standard normal"), (1.0, 2.0, "quadratic tilt")] {
        let prior = JointEbmPrior::from_parts(vec![2], vec![], vec![EnergyHead::quadratic(vec![c, c])])?;
        let mut rngs = chain_streams(seed, "variance", 0, chains);
        let z0 = ancestral_sample(&prior, &mut rngs)?;
        let run = langevin(&PriorTarget { prior: &prior }, &z0, &[false], &LangevinConfig::new(steps, step_size), &mut rngs, None)?;
        let oracle = variance_recurrence(a, step_size, steps, 1.0);
        let t = run.z.layer(0);
        let n = t.rows() as f64;
        let mut worst = 0.0f64;
        let mut vars = Vec::new();
        for j in 0..2 {
            let m = (0..t.rows()).map(|r| t.row(r)[j]).sum::<f64>() / n;
            let v = (0..t.rows()).map(|r| (t.row(r)[j] - m).powi(2)).sum::<f64>() / (n - 1.0);
            vars.push(v);
            worst = worst.max((v - oracle).abs());
        }
        out.push(Check::new(
            format!("{} (variances {:.4}, {:.4}; recurrence {:.4})", name, vars[0], vars[1], oracle),
            worst,
            tol,
        ));
    }
    Ok(out)
}

/// `sum_i [f_i + log p_i]` against `sum_i f_i + sum_i log p_i` and the
/// model's own joint evaluation, on `models` random depths and widths.
/// The error is the largest relative disagreement.
pub fn factorization_check(seed: u64, models: usize) -> Result<Check> {
    let mut r = stream(seed, "factorization", 0);
    let mut worst = 0.0f64;
    for m in 0..models {
        let v = normal_vec(&mut r, 5);
        let l = 1 + (v[0].abs() * 2.0) as usize % 4;
        let dims: Vec<usize> = (0..l).map(|i| 1 + (v[i + 1].abs() * 3.0) as usize % 4).collect();
        let act = if m % 2 == 0 { Activation::Tanh } else { Activation::LeakyRelu { slope: 0.2 } };
        let model = random_model(&dims, 2, 5, act, 1000 + m as u64)?;
        let z = random_stack(&dims, 8, &mut r)?;
        let f = model.prior.energy_terms(&z)?;
        let g = model.prior.gaussian_terms(&z)?;
        let joint = model.prior.unnormalized_log_prior(&z)?;
        let (fs, gs) = (model.prior.energy_sum(&z)?, model.prior.gaussian_prior_logpdf(&z)?);
        for c in 0..8 {
            let layerwise: f64 = (0..l).map(|i| f[i][c] + g[i][c]).sum();
            let grouped = fs[c] + gs[c];
            for (a, b) in [(layerwise, grouped), (joint[c], grouped)] {
                worst = worst.max((a - b).abs() / a.abs().max(1.0));
            }
        }
    }
    Ok(Check::new(format!("factorized vs grouped log prior over {} models", models), worst, 1e-12))
}

fn plain_mlp(m: &Mlp, x: &[f64]) -> Vec<f64> {
    let act = m.spec().activation;
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
                *v = match act {
                    Activation::LeakyRelu { slope } if *v < 0.0 => *v * slope,
                    Activation::LeakyRelu { .. } => *v,
                    Activation::Tanh => v.tanh(),
                };
            }
        }
        h = out;
    }
    h
}

fn log_normal(x: f64, m: f64, lv: f64) -> f64 {
    -0.5 * ((x - m).powi(2) * (-lv).exp() + lv + (2.0 * std::f64::consts::PI).ln())
}

/// A from-scratch ELBO for scalar latents and data:
/// `mean[log p(x|z1) + log p(z1|z2) + log p(z2) - log q(z1|x) - log q(z2|z1)]`
/// at the reparameterized draw driven by `eps`.
pub fn plain_elbo(model: &HierarchicalModel, x: &[f64], eps: &[(f64, f64)]) -> f64 {
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
        total += log_normal(*xi, g, 2.0 * sigma.ln()) + log_normal(z1, p1[0], clamp(p1[1])) + log_normal(z2, 0.0, 0.0)
            - log_normal(z1, q1[0], clamp(q1[1]))
            - log_normal(z2, q2[0], clamp(q2[1]));
    }
    total / x.len() as f64
}

/// With zero-initialized energy heads: the tilted prior equals the
/// Gaussian backbone exactly, and the variational gradients for the
/// generator and encoder equal finite differences of the plain ELBO.
pub fn gaussian_reduction_check(seed: u64, models: usize) -> Result<Vec<Check>> {
    let mut exact = 0.0f64;
    for s in 0..models as u64 {
        let cfg = ModelConfig {
            latent_dims: vec![3, 2, 2],
            ..ModelConfig::default()
        };
        let model = HierarchicalModel::new(&cfg, &mut stream(seed + s, "init", 0))?;
        let z = LatentStack::standard_normal(&[3, 2, 2], &mut chain_streams(seed + s, "z", 0, 64));
        let z = LatentStack::new(z.layers().iter().map(|t| t.scale(3.0)).collect::<Result<Vec<_>>>()?)?;
        let a = model.prior.unnormalized_log_prior(&z)?;
        let b = model.prior.gaussian_prior_logpdf(&z)?;
        for (u, v) in a.iter().zip(&b) {
            exact = exact.max((u - v).abs() / v.abs().max(1.0));
        }
    }

    let cfg = ModelConfig {
        latent_dims: vec![1, 1],
        data_dim: 1,
        energy_hidden: vec![4],
        conditional_hidden: vec![5],
        decoder_hidden: vec![5],
        encoder_hidden: vec![5],
        ..ModelConfig::default()
    };
    let mut grad_err = 0.0f64;
    let mut objective_err = 0.0f64;
    for s in 0..models as u64 {
        let model = HierarchicalModel::new(&cfg, &mut stream(seed + s, "elbo-model", 0))?;
        let mut r = stream(seed + s, "elbo-data", 0);
        let n = 16;
        let x = normal_vec(&mut r, n);
        let e1 = normal_vec(&mut r, n);
        let e2 = normal_vec(&mut r, n);
        let eps: Vec<(f64, f64)> = e1.iter().cloned().zip(e2.iter().cloned()).collect();
        let noise = LatentStack::new(vec![Tensor::matrix(n, 1, e1)?, Tensor::matrix(n, 1, e2)?])?;
        let train = Trainable {
            alpha: false,
            ..Trainable::ALL
        };
        let xt = Tensor::matrix(n, 1, x.clone())?;
        let est = variational_gradients(&model, &xt, &noise, None, train, 0.0, true)?;
        for group in [ParamGroup::Beta0, ParamGroup::BetaPrior, ParamGroup::Omega] {
            let numeric = param_fd(&model, group, 1e-5, |m| plain_elbo(m, &x, &eps));
            grad_err = grad_err.max(rel_err(&flat(est.group(group)), &numeric));
        }
        // The analytic entropy differs from -log q by (1 - eps^2) / 2 per coordinate.
        let c: f64 = eps.iter().map(|(a, b)| 1.0 - 0.5 * (a * a + b * b)).sum::<f64>() / n as f64;
        objective_err = objective_err.max((est.objective - plain_elbo(&model, &x, &eps) - c).abs());
    }
    Ok(vec![
        Check::new("zero-energy prior vs gaussian backbone", exact, f64::EPSILON),
        Check::new("variational gradients vs plain ELBO finite differences", grad_err, 1e-6),
        Check::new("variational objective vs plain ELBO plus entropy offset", objective_err, 1e-9),
    ])
}
