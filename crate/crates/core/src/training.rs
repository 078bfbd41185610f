//! Learning: maximum likelihood with Langevin posterior sampling,
//! variational learning with the bottom-up inference stack, and the
//! two-stage protocol.
//!
//! All gradients are ascent directions. Each estimator builds one scalar
//! surrogate on a tape whose parameter gradients are the Monte-Carlo
//! estimates of the learning gradients; samples enter as constants except
//! for the reparameterized codes of the inference stack.

use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, HierarchicalModel, LatentStack, ParamGroup};
use crate::rng::{chain_streams, stream};
use crate::samplers::{ancestral_sample, sample_posterior, sample_prior, LangevinConfig, Space};
use crate::tensor::{Tensor, LN_2PI};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Mle,
    #[default]
    Variational,
    TwoStage,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// The `[trainer]` config section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub iterations: u64,
    /// Length of the first stage in two-stage mode; half of `iterations`
    /// when unset.
    pub stage1_iterations: Option<u64>,
    pub lr_alpha: f64,
    pub lr_beta: f64,
    pub lr_omega: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub optimizer: OptimizerKind,
    /// Negative-phase chains per step; the batch size when unset.
    pub n_prior_chains: Option<usize>,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Keep one posterior chain per training example across iterations
    /// (MLE mode) instead of restarting from the Gaussian prior.
    pub persistent_chains: bool,
    /// Weight of an L2 penalty on energy outputs at both phases.
    pub energy_l2: f64,
    /// Whether the inference stack is trained through `sum_i f_i(z_i)` at
    /// its own samples. When false the energy sees detached codes.
    pub energy_path_to_inference: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            mode: TrainMode::Variational,
            batch_size: 64,
            iterations: 1000,
            stage1_iterations: None,
            lr_alpha: 1e-4,
            lr_beta: 1e-4,
            lr_omega: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            optimizer: OptimizerKind::Adam,
            n_prior_chains: None,
            seed: 0,
            checkpoint_every: 0,
            log_every: 10,
            persistent_chains: false,
            energy_l2: 0.0,
            energy_path_to_inference: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, lr) in [("lr_alpha", self.lr_alpha), ("lr_beta", self.lr_beta), ("lr_omega", self.lr_omega)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{} must be positive, got {}", name, lr));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam moments must lie in [0, 1) and adam_eps must be positive".into());
        }
        if self.n_prior_chains == Some(0) {
            return bad("n_prior_chains must be at least 1".into());
        }
        if !(self.energy_l2 >= 0.0) {
            return bad(format!("energy_l2 must be nonnegative, got {}", self.energy_l2));
        }
        if let Some(s1) = self.stage1_iterations {
            if s1 > self.iterations {
                return bad(format!("stage1_iterations {} exceeds iterations {}", s1, self.iterations));
            }
        }
        Ok(())
    }

    pub fn stage1_len(&self) -> u64 {
        self.stage1_iterations.unwrap_or(self.iterations / 2)
    }

    pub fn lr(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Alpha => self.lr_alpha,
            ParamGroup::Beta0 | ParamGroup::BetaPrior => self.lr_beta,
            ParamGroup::Omega => self.lr_omega,
        }
    }
}

/// Which parameter groups receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub alpha: bool,
    pub beta0: bool,
    pub beta_prior: bool,
    pub omega: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        alpha: true,
        beta0: true,
        beta_prior: true,
        omega: true,
    };

    pub fn get(&self, g: ParamGroup) -> bool {
        match g {
            ParamGroup::Alpha => self.alpha,
            ParamGroup::Beta0 => self.beta0,
            ParamGroup::BetaPrior => self.beta_prior,
            ParamGroup::Omega => self.omega,
        }
    }
}

/// Monte-Carlo learning-gradient estimates (ascent directions), one tensor
/// per parameter tensor of each group, plus diagnostics.
#[derive(Clone, Debug)]
pub struct GradEstimates {
    pub alpha: Vec<Tensor>,
    pub beta0: Vec<Tensor>,
    pub beta_prior: Vec<Tensor>,
    pub omega: Vec<Tensor>,
    /// Value of the surrogate objective.
    pub objective: f64,
    /// Mean squared reconstruction error `|x - g(z+)|^2`.
    pub recon: f64,
    /// Mean `-sum_i f_i` at the positive samples.
    pub energy_pos: f64,
    /// Mean `-sum_i f_i` at the negative samples, when drawn.
    pub energy_neg: Option<f64>,
    /// Per-layer single-sample `KL(q || p_beta)` terms (variational only).
    pub kl: Vec<f64>,
}

impl GradEstimates {
    pub fn group(&self, g: ParamGroup) -> &[Tensor] {
        match g {
            ParamGroup::Alpha => &self.alpha,
            ParamGroup::Beta0 => &self.beta0,
            ParamGroup::BetaPrior => &self.beta_prior,
            ParamGroup::Omega => &self.omega,
        }
    }

    pub fn norm(&self, groups: &[ParamGroup]) -> f64 {
        groups
            .iter()
            .flat_map(|&g| self.group(g))
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

fn constants<'t>(tape: &'t Tape, z: &LatentStack) -> Vec<Var<'t>> {
    z.layers().iter().map(|t| tape.constant(t.clone())).collect()
}

fn col_mean(v: Var<'_>) -> f64 {
    let t = v.value();
    if t.is_empty() {
        0.0
    } else {
        t.data().iter().sum::<f64>() / t.len() as f64
    }
}

fn recon_from_loglik(ll: f64, sigma: f64, d: usize) -> f64 {
    let s2 = sigma * sigma;
    let c = -0.5 * d as f64 * (LN_2PI + s2.ln());
    -2.0 * s2 * (ll - c)
}

struct Phases<'t> {
    objective: Var<'t>,
    energy_neg: Option<f64>,
}

/// Subtracts the negative phase `mean[f(z-)] + mean[log p_beta(z-)]` and
/// adds the optional energy penalty. The Gaussian term is dropped when the
/// energy vanishes identically: the normalizer is then exactly one and the
/// term has zero expectation.
fn negative_phase<'t>(
    model: &HierarchicalModel,
    bp: &crate::model::BoundPrior<'t>,
    tape: &'t Tape,
    mut obj: Var<'t>,
    f_pos: Var<'t>,
    z_neg: Option<&LatentStack>,
    energy_l2: f64,
) -> Result<Phases<'t>> {
    let n_pos = f_pos.value().rows().max(1) as f64;
    let mut energy_neg = None;
    if let Some(zn) = z_neg {
        zn.check_dims(model.latent_dims(), "negative_phase")?;
        let m = zn.n().max(1) as f64;
        let zs = constants(tape, zn);
        let f_neg = bp.energy_sum(&zs)?;
        energy_neg = Some(-col_mean(f_neg));
        obj = obj.sub(f_neg.sum()?.scale(1.0 / m)?)?;
        if !model.prior.energy_is_zero() {
            obj = obj.sub(bp.gaussian_log_prob(&zs)?.sum()?.scale(1.0 / m)?)?;
        }
        if energy_l2 > 0.0 {
            obj = obj.sub(f_neg.square()?.sum()?.scale(energy_l2 / m)?)?;
        }
    }
    if energy_l2 > 0.0 {
        obj = obj.sub(f_pos.square()?.sum()?.scale(energy_l2 / n_pos)?)?;
    }
    Ok(Phases { objective: obj, energy_neg })
}

fn finish(
    model: &HierarchicalModel,
    tape: &Tape,
    phases: Phases<'_>,
    bp: &crate::model::BoundPrior<'_>,
    bd: &crate::model::BoundDecoder<'_>,
    bq: Option<&crate::model::BoundInference<'_>>,
    diag: (f64, f64, Vec<f64>),
) -> Result<GradEstimates> {
    let objective = phases.objective.value().item()?;
    let g = tape.backward(phases.objective)?;
    let omega = match bq {
        Some(q) => q.grads(&g),
        None => model.inference.tensors().into_iter().map(|t| Tensor::zeros(t.shape())).collect(),
    };
    Ok(GradEstimates {
        alpha: bp.alpha_grads(&g),
        beta0: bd.grads(&g),
        beta_prior: bp.beta_grads(&g),
        omega,
        objective,
        recon: diag.0,
        energy_pos: diag.1,
        energy_neg: phases.energy_neg,
        kl: diag.2,
    })
}

/// Maximum-likelihood learning gradients from given samples: `z_pos` from
/// the posterior of each row of `x`, `z_neg` from the prior. The surrogate is
/// `mean log p(x | z+) + mean[f(z+) + log p_beta(z+)] - mean[f(z-) + log p_beta(z-)]`.
pub fn mle_gradients(
    model: &HierarchicalModel,
    x: &Tensor,
    z_pos: &LatentStack,
    z_neg: Option<&LatentStack>,
    train: Trainable,
    energy_l2: f64,
) -> Result<GradEstimates> {
    z_pos.check_dims(model.latent_dims(), "mle_gradients")?;
    if x.rows() != z_pos.n() || x.rows() == 0 {
        return Err(Error::usage("mle_gradients needs one positive sample per nonempty batch row"));
    }
    if train.alpha && z_neg.is_none() {
        return Err(Error::usage("energy gradients need negative samples"));
    }
    let n = x.rows() as f64;
    let tape = Tape::new();
    let bp = model.prior.bind(&tape, train.alpha, train.beta_prior);
    let bd = model.decoder.bind(&tape, train.beta0);
    let zp = constants(&tape, z_pos);
    let ll = bd.log_likelihood(tape.constant(x.clone()), zp[0])?;
    let f_pos = bp.energy_sum(&zp)?;
    let obj = ll
        .sum()?
        .add(f_pos.sum()?)?
        .add(bp.gaussian_log_prob(&zp)?.sum()?)?
        .scale(1.0 / n)?;
    let diag = (
        recon_from_loglik(col_mean(ll), model.decoder.sigma(), model.data_dim()),
        -col_mean(f_pos),
        Vec::new(),
    );
    let phases = negative_phase(model, &bp, &tape, obj, f_pos, z_neg, energy_l2)?;
    finish(model, &tape, phases, &bp, &bd, None, diag)
}

/// Variational learning gradients. `q_noise` drives the reparameterized
/// draw `z+ ~ q(z | x)`; the surrogate is
/// `mean[log p(x | z+) + f(z+) + log p_beta(z+) + H(q)] - mean[f(z-) + log p_beta(z-)]`,
/// with `H(q)` the analytic entropy of each layer of `q` given its sampled
/// parent.
pub fn variational_gradients(
    model: &HierarchicalModel,
    x: &Tensor,
    q_noise: &LatentStack,
    z_neg: Option<&LatentStack>,
    train: Trainable,
    energy_l2: f64,
    energy_path_to_inference: bool,
) -> Result<GradEstimates> {
    if x.rows() == 0 {
        return Err(Error::usage("variational_gradients needs a nonempty batch"));
    }
    if train.alpha && z_neg.is_none() {
        return Err(Error::usage("energy gradients need negative samples"));
    }
    let n = x.rows() as f64;
    let l = model.num_layers();
    let tape = Tape::new();
    let bp = model.prior.bind(&tape, train.alpha, train.beta_prior);
    let bd = model.decoder.bind(&tape, train.beta0);
    let bq = model.inference.bind(&tape, train.omega);
    let xv = tape.constant(x.clone());
    let q = bq.infer(xv, Some(q_noise))?;
    let zp = q.z.clone();
    let ll = bd.log_likelihood(xv, zp[0])?;
    let f_pos = if energy_path_to_inference {
        bp.energy_sum(&zp)?
    } else {
        let detached: Vec<Var> = zp.iter().map(|v| tape.constant((*v.value()).clone())).collect();
        bp.energy_sum(&detached)?
    };
    let mut per_row = ll.add(f_pos)?;
    let mut kl = Vec::with_capacity(l);
    for i in 0..l {
        let lp = bp.layer_log_prob(i, &zp)?;
        let h = q.layer_entropy(i)?;
        kl.push(-col_mean(h) - col_mean(lp));
        per_row = per_row.add(lp)?.add(h)?;
    }
    let obj = per_row.sum()?.scale(1.0 / n)?;
    let diag = (
        recon_from_loglik(col_mean(ll), model.decoder.sigma(), model.data_dim()),
        -col_mean(f_pos),
        kl,
    );
    let phases = negative_phase(model, &bp, &tape, obj, f_pos, z_neg, energy_l2)?;
    finish(model, &tape, phases, &bp, &bd, Some(&bq), diag)
}

/// First and second moment estimates for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[&Tensor]) -> Self {
        AdamState {
            m: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam ascent step: `p += lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_update(params: Vec<&mut Tensor>, grads: &[Tensor], state: &mut AdamState, lr: f64, hp: AdamParams) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim("adam_update", "parameter, gradient and state counts differ"));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim("adam_update", format!("{:?} vs {:?}", p.shape(), g.shape())));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = hp.beta1 * *mv + (1.0 - hp.beta1) * gv;
            *vv = hp.beta2 * *vv + (1.0 - hp.beta2) * gv * gv;
            *pv += lr * (*mv / c1) / ((*vv / c2).sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Plain gradient ascent `p += lr * g`.
pub fn sgd_update(params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("sgd_update", "parameter and gradient counts differ"));
    }
    for (p, g) in params.into_iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim("sgd_update", format!("{:?} vs {:?}", p.shape(), g.shape())));
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv += lr * gv;
        }
    }
    Ok(())
}

/// Diagnostics of one training iteration; one metrics line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub iter: u64,
    pub recon: f64,
    pub energy_pos: f64,
    pub energy_neg: Option<f64>,
    pub kl: Option<f64>,
    pub grad_norm_alpha: f64,
    pub grad_norm_beta: f64,
    pub wall_ms: f64,
}

/// Which estimator an iteration runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Mle,
    Variational,
    /// Variational learning of `(beta, omega)` with the energy frozen.
    Stage1,
    /// Energy learning with `(beta, omega)` frozen.
    Stage2,
}

/// A model together with its optimizer state and sampler settings.
pub struct Trainer {
    pub cfg: TrainerConfig,
    pub prior_sampler: LangevinConfig,
    pub posterior_sampler: LangevinConfig,
    pub model: HierarchicalModel,
    /// Number of completed iterations.
    pub iteration: u64,
    adam: Vec<AdamState>,
    persistent: Option<LatentStack>,
}

impl Trainer {
    pub fn new(
        cfg: TrainerConfig,
        prior_sampler: LangevinConfig,
        posterior_sampler: LangevinConfig,
        model: HierarchicalModel,
    ) -> Result<Self> {
        cfg.validate()?;
        prior_sampler.validate()?;
        posterior_sampler.validate()?;
        let adam = ParamGroup::ALL
            .iter()
            .map(|&g| AdamState::new(&model.group_tensors(g)))
            .collect();
        Ok(Trainer {
            cfg,
            prior_sampler,
            posterior_sampler,
            model,
            iteration: 0,
            adam,
            persistent: None,
        })
    }

    pub fn adam_state(&self, g: ParamGroup) -> &AdamState {
        &self.adam[group_index(g)]
    }

    pub fn adam_state_mut(&mut self, g: ParamGroup) -> &mut AdamState {
        &mut self.adam[group_index(g)]
    }

    pub fn persistent_chains(&self) -> Option<&LatentStack> {
        self.persistent.as_ref()
    }

    pub fn set_persistent_chains(&mut self, z: Option<LatentStack>) {
        self.persistent = z;
    }

    /// The estimator used at iteration `iter` (0-based).
    pub fn phase(&self, iter: u64) -> Phase {
        match self.cfg.mode {
            TrainMode::Mle => Phase::Mle,
            TrainMode::Variational => Phase::Variational,
            TrainMode::TwoStage if iter < self.cfg.stage1_len() => Phase::Stage1,
            TrainMode::TwoStage => Phase::Stage2,
        }
    }

    fn batch(&self, data: &Tensor) -> Result<(Vec<usize>, Tensor)> {
        let n = data.rows();
        if n == 0 {
            return Err(Error::usage("training data is empty"));
        }
        let mut rng = stream(self.cfg.seed, "batch", self.iteration);
        let mut idx = index::sample(&mut rng, n, self.cfg.batch_size.min(n)).into_vec();
        idx.sort_unstable();
        let x = data.select_rows(&idx);
        Ok((idx, x))
    }

    fn negative_samples(&self, space: Space, n: usize) -> Result<LatentStack> {
        let purpose = format!("prior/{}", self.iteration);
        let mut rngs = chain_streams(self.cfg.seed, &purpose, 0, n);
        let cfg = LangevinConfig {
            space,
            ..self.prior_sampler.clone()
        };
        Ok(sample_prior(&self.model.prior, &cfg, &mut rngs, None)?.z)
    }

    fn q_noise(&self, n: usize) -> LatentStack {
        let purpose = format!("q/{}", self.iteration);
        LatentStack::standard_normal(self.model.latent_dims(), &mut chain_streams(self.cfg.seed, &purpose, 0, n))
    }

    /// Gradient estimates for the next iteration without touching parameters.
    pub fn estimate(&mut self, data: &Tensor) -> Result<(Phase, Vec<usize>, GradEstimates)> {
        let phase = self.phase(self.iteration);
        let (idx, x) = self.batch(data)?;
        let b = x.rows();
        let n_neg = self.cfg.n_prior_chains.unwrap_or(b);
        let l2 = self.cfg.energy_l2;
        let est = match phase {
            Phase::Mle => {
                let purpose = format!("posterior/{}", self.iteration);
                let mut rngs = chain_streams(self.cfg.seed, &purpose, 0, b);
                let z0 = match &self.persistent {
                    Some(p) if self.cfg.persistent_chains => p.select_chains(&idx),
                    _ => ancestral_sample(&self.model.prior, &mut rngs)?,
                };
                let z_pos = sample_posterior(
                    &self.model.decoder,
                    &self.model.prior,
                    &x,
                    &z0,
                    &self.posterior_sampler,
                    &mut rngs,
                )?;
                if self.cfg.persistent_chains {
                    self.store_persistent(data.rows(), &idx, &z_pos)?;
                }
                let z_neg = self.negative_samples(self.prior_sampler.space, n_neg)?;
                let train = Trainable {
                    omega: false,
                    ..Trainable::ALL
                };
                mle_gradients(&self.model, &x, &z_pos, Some(&z_neg), train, l2)?
            }
            Phase::Variational => {
                let z_neg = self.negative_samples(self.prior_sampler.space, n_neg)?;
                variational_gradients(
                    &self.model,
                    &x,
                    &self.q_noise(b),
                    Some(&z_neg),
                    Trainable::ALL,
                    l2,
                    self.cfg.energy_path_to_inference,
                )?
            }
            Phase::Stage1 => {
                let train = Trainable {
                    alpha: false,
                    ..Trainable::ALL
                };
                let z_neg = if self.model.prior.energy_is_zero() {
                    None
                } else {
                    Some(self.negative_samples(self.prior_sampler.space, n_neg)?)
                };
                variational_gradients(
                    &self.model,
                    &x,
                    &self.q_noise(b),
                    z_neg.as_ref(),
                    train,
                    l2,
                    self.cfg.energy_path_to_inference,
                )?
            }
            Phase::Stage2 => {
                let q = self.model.inference.infer(&x, Some(&self.q_noise(b)))?;
                let z_neg = self.negative_samples(Space::Epsilon, n_neg)?;
                let train = Trainable {
                    alpha: true,
                    beta0: false,
                    beta_prior: false,
                    omega: false,
                };
                let mut est = mle_gradients(&self.model, &x, &q.z, Some(&z_neg), train, l2)?;
                est.kl = Vec::new();
                est
            }
        };
        Ok((phase, idx, est))
    }

    fn store_persistent(&mut self, n_data: usize, idx: &[usize], z: &LatentStack) -> Result<()> {
        if self.persistent.as_ref().map(|p| p.n()) != Some(n_data) {
            let mut rngs = chain_streams(self.cfg.seed, "persistent-init", 0, n_data);
            self.persistent = Some(ancestral_sample(&self.model.prior, &mut rngs)?);
        }
        let p = self.persistent.as_mut().expect("initialized above");
        for i in 0..p.num_layers() {
            let d = z.layer(i).cols();
            for (r, &k) in idx.iter().enumerate() {
                p.layer_mut(i).row_mut(k)[..d].copy_from_slice(z.layer(i).row(r));
            }
        }
        Ok(())
    }

    /// Applies one update with the configured optimizer to the trainable groups.
    pub fn apply(&mut self, est: &GradEstimates, train: Trainable) -> Result<()> {
        let hp = AdamParams {
            beta1: self.cfg.adam_beta1,
            beta2: self.cfg.adam_beta2,
            eps: self.cfg.adam_eps,
        };
        for g in ParamGroup::ALL {
            if !train.get(g) {
                continue;
            }
            let lr = self.cfg.lr(g);
            let grads = est.group(g);
            match self.cfg.optimizer {
                OptimizerKind::Adam => {
                    let state = &mut self.adam[group_index(g)];
                    adam_update(self.model.group_tensors_mut(g), grads, state, lr, hp)?
                }
                OptimizerKind::Sgd => sgd_update(self.model.group_tensors_mut(g), grads, lr)?,
            }
        }
        Ok(())
    }

    /// Runs one iteration and returns its diagnostics.
    pub fn step(&mut self, data: &Tensor) -> Result<StepStats> {
        let start = Instant::now();
        let (phase, _, est) = self.estimate(data)?;
        let train = match phase {
            Phase::Mle => Trainable {
                omega: false,
                ..Trainable::ALL
            },
            Phase::Variational => Trainable::ALL,
            Phase::Stage1 => Trainable {
                alpha: false,
                ..Trainable::ALL
            },
            Phase::Stage2 => Trainable {
                alpha: true,
                beta0: false,
                beta_prior: false,
                omega: false,
            },
        };
        self.apply(&est, train)?;
        self.iteration += 1;
        Ok(StepStats {
            iter: self.iteration,
            recon: est.recon,
            energy_pos: est.energy_pos,
            energy_neg: est.energy_neg,
            kl: if est.kl.is_empty() { None } else { Some(est.kl.iter().sum()) },
            grad_norm_alpha: est.norm(&[ParamGroup::Alpha]),
            grad_norm_beta: est.norm(&[ParamGroup::Beta0, ParamGroup::BetaPrior]),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Trains until `cfg.iterations` iterations are complete, calling `hook`
    /// after every iteration.
    pub fn fit(&mut self, data: &Tensor, mut hook: impl FnMut(&Trainer, &StepStats) -> Result<()>) -> Result<()> {
        if data.cols() != self.model.data_dim() {
            return Err(Error::dim(
                "fit",
                format!("data has {} columns, model expects {}", data.cols(), self.model.data_dim()),
            ));
        }
        while self.iteration < self.cfg.iterations {
            let stats = self.step(data)?;
            hook(self, &stats)?;
        }
        Ok(())
    }
}

impl Trainer {
    /// The model plus optimizer moments and persistent chains, so that
    /// [`Trainer::resume`] continues the run exactly.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.clone());
        ck.iteration = self.iteration;
        for (g, st) in ParamGroup::ALL.iter().zip(&self.adam) {
            ck.extra.push((format!("adam.{}.t", g.name()), Tensor::scalar(st.t as f64)));
            for (k, (m, v)) in st.m.iter().zip(&st.v).enumerate() {
                ck.extra.push((format!("adam.{}.m.{}", g.name(), k), m.clone()));
                ck.extra.push((format!("adam.{}.v.{}", g.name(), k), v.clone()));
            }
        }
        if let Some(p) = &self.persistent {
            for (i, t) in p.layers().iter().enumerate() {
                ck.extra.push((format!("persistent.{}", i), t.clone()));
            }
        }
        ck
    }

    /// Rebuilds a trainer from [`Trainer::checkpoint`] output. Missing
    /// optimizer entries start from zero moments.
    pub fn resume(
        cfg: TrainerConfig,
        prior_sampler: LangevinConfig,
        posterior_sampler: LangevinConfig,
        ckpt: Checkpoint,
    ) -> Result<Self> {
        let mut t = Trainer::new(cfg, prior_sampler, posterior_sampler, ckpt.model)?;
        t.iteration = ckpt.iteration;
        let extra: std::collections::HashMap<String, Tensor> = ckpt.extra.into_iter().collect();
        for (g, st) in ParamGroup::ALL.iter().zip(t.adam.iter_mut()) {
            if let Some(step) = extra.get(&format!("adam.{}.t", g.name())) {
                st.t = step.item()? as u64;
            }
            for k in 0..st.m.len() {
                for (slot, tag) in [(&mut st.m[k], "m"), (&mut st.v[k], "v")] {
                    if let Some(v) = extra.get(&format!("adam.{}.{}.{}", g.name(), tag, k)) {
                        if v.shape() != slot.shape() {
                            return Err(Error::dim("resume", format!("optimizer moment for {} has shape {:?}", g.name(), v.shape())));
                        }
                        *slot = v.clone();
                    }
                }
            }
        }
        let layers: Vec<Tensor> = (0..t.model.num_layers())
            .map_while(|i| extra.get(&format!("persistent.{}", i)).cloned())
            .collect();
        if layers.len() == t.model.num_layers() {
            t.persistent = Some(LatentStack::new(layers)?);
        }
        Ok(t)
    }
}

fn group_index(g: ParamGroup) -> usize {
    ParamGroup::ALL.iter().position(|&h| h == g).expect("listed group")
}

/// Runs both stages of the two-stage protocol on `data`.
pub fn two_stage_fit(trainer: &mut Trainer, data: &Tensor) -> Result<()> {
    if trainer.cfg.mode != TrainMode::TwoStage {
        return Err(Error::Config("two_stage_fit needs mode = two_stage".into()));
    }
    trainer.fit(data, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_by_hand() {
        let mut p = Tensor::vector(vec![0.5]);
        let g = vec![Tensor::vector(vec![1.0])];
        let mut st = AdamState::new(&[&p]);
        adam_update(vec![&mut p], &g, &mut st, 0.1, AdamParams::default()).unwrap();
        // m_hat = 1, v_hat = 1.
        assert_eq!(p.data()[0], 0.5 + 0.1 * 1.0 / (1.0 + 1e-8));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = Tensor::vector(vec![0.5, -2.0]);
        let g = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::new(&[&p]);
        adam_update(vec![&mut p], &g, &mut st, 0.1, AdamParams::default()).unwrap();
        assert_eq!(p.data(), &[0.5, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_constant_gradient_steps_approach_lr() {
        let mut p = Tensor::vector(vec![0.0]);
        let g = vec![Tensor::vector(vec![-3.0])];
        let mut st = AdamState::new(&[&p]);
        let mut last = 0.0;
        for _ in 0..5000 {
            let before = p.data()[0];
            adam_update(vec![&mut p], &g, &mut st, 0.01, AdamParams::default()).unwrap();
            last = p.data()[0] - before;
        }
        assert!((last + 0.01).abs() < 1e-6, "step {}", last);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = Tensor::vector(vec![0.0, 1.0]);
        let mut st = AdamState::new(&[&p]);
        let g = vec![Tensor::vector(vec![1.0])];
        assert!(adam_update(vec![&mut p], &g, &mut st, 0.1, AdamParams::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainerConfig::default().validate().is_ok());
        let bad = TrainerConfig {
            batch_size: 0,
            ..TrainerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainerConfig {
            lr_alpha: 0.0,
            ..TrainerConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
