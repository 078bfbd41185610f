//! Unadjusted Langevin dynamics over latent stacks, in z-space or in the
//! reparameterized noise space of the conditional Gaussian backbone.
//!
//! Chains are processed in fixed-size chunks, one tape per chunk and step.
//! Chain `c` draws all of its noise from `rngs[c]`, so neither the chunk
//! size nor the thread count changes any result.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{standard_normal_log_density_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{GeneratorDecoder, JointEbmPrior, LatentStack};
use crate::rng::{normal_vec, StreamRng};
use crate::tensor::Tensor;

/// Chains per tape.
pub const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    #[default]
    Z,
    #[serde(alias = "eps")]
    Epsilon,
}

impl std::str::FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z" => Ok(Space::Z),
            "eps" | "epsilon" => Ok(Space::Epsilon),
            other => Err(Error::usage(format!("unknown sampling space {:?} (expected z or eps)", other))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LangevinConfig {
    pub steps: usize,
    pub step_size: f64,
    pub noise_enabled: bool,
    pub space: Space,
    /// Per-layer, per-chain cap on the gradient norm.
    pub clamp_grad: Option<f64>,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        LangevinConfig {
            steps: 40,
            step_size: 0.1,
            noise_enabled: true,
            space: Space::Z,
            clamp_grad: None,
        }
    }
}

impl LangevinConfig {
    pub fn new(steps: usize, step_size: f64) -> Self {
        LangevinConfig {
            steps,
            step_size,
            ..Self::default()
        }
    }

    pub fn with_space(mut self, space: Space) -> Self {
        self.space = space;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size must be positive, got {}", self.step_size)));
        }
        if let Some(c) = self.clamp_grad {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clamp_grad must be positive, got {}", c)));
            }
        }
        Ok(())
    }
}

/// Thinned trajectory plus per-step diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainRecord {
    pub thin: usize,
    /// `(step, latent codes)` at steps `0, m, 2m, ...`; codes are always in
    /// z-space, whatever space the chain ran in.
    pub snapshots: Vec<(usize, LatentStack)>,
    /// `-sum_i f_i(z_i)` per step (`steps + 1` entries) and chain.
    pub energy: Vec<Vec<f64>>,
    /// Unnormalized log prior per step and chain.
    pub log_prior: Vec<Vec<f64>>,
}

impl ChainRecord {
    /// Mean over chains of the energy at each step.
    pub fn mean_energy(&self) -> Vec<f64> {
        self.energy.iter().map(|v| mean(v)).collect()
    }

    pub fn mean_log_prior(&self) -> Vec<f64> {
        self.log_prior.iter().map(|v| mean(v)).collect()
    }

    fn merge(parts: Vec<ChainRecord>) -> Result<ChainRecord> {
        let first = parts.first().ok_or_else(|| Error::usage("no chain records to merge"))?;
        let thin = first.thin;
        let steps = first.energy.len();
        let mut out = ChainRecord {
            thin,
            snapshots: Vec::new(),
            energy: vec![Vec::new(); steps],
            log_prior: vec![Vec::new(); steps],
        };
        for s in 0..first.snapshots.len() {
            let step = first.snapshots[s].0;
            let stacks: Vec<LatentStack> = parts.iter().map(|p| p.snapshots[s].1.clone()).collect();
            out.snapshots.push((step, LatentStack::concat(&stacks)?));
        }
        for p in &parts {
            for t in 0..steps {
                out.energy[t].extend_from_slice(&p.energy[t]);
                out.log_prior[t].extend_from_slice(&p.log_prior[t]);
            }
        }
        Ok(out)
    }

    /// Writes `chain,step,layer,coordinate,value` rows for every snapshot.
    pub fn write_states_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("chain,step,layer,coordinate,value\n");
        for (step, z) in &self.snapshots {
            for c in 0..z.n() {
                for (layer, t) in z.layers().iter().enumerate() {
                    for (j, v) in t.row(c).iter().enumerate() {
                        s.push_str(&format!("{},{},{},{},{}\n", c, step, layer + 1, j, v));
                    }
                }
            }
        }
        write_text(path, &s)
    }

    /// Writes `chain,step,energy,log_prior` rows for every step.
    pub fn write_energy_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("chain,step,energy,log_prior\n");
        for (step, (e, lp)) in self.energy.iter().zip(&self.log_prior).enumerate() {
            for (c, (ev, lv)) in e.iter().zip(lp).enumerate() {
                s.push_str(&format!("{},{},{},{}\n", c, step, ev, lv));
            }
        }
        write_text(path, &s)
    }
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(s.as_bytes())?;
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// One evaluation of a Langevin target on a batch of chain states.
pub struct TargetEval {
    /// Gradient of the log target with respect to the state. Rows of
    /// frozen layers are zero.
    pub grad: LatentStack,
    /// The state mapped to latent codes.
    pub latent: LatentStack,
    /// `-sum_i f_i(z_i)`, filled only when values were requested.
    pub energy: Vec<f64>,
    /// Unnormalized log prior at `latent`, filled only when requested.
    pub log_prior: Vec<f64>,
}

/// A differentiable log-density over chain states. `chains` gives the
/// global indices of the rows in `state`, for targets that carry per-chain
/// data such as an observation.
pub trait LangevinTarget: Sync {
    fn dims(&self) -> &[usize];

    fn eval(&self, state: &LatentStack, chains: Range<usize>, frozen: &[bool], values: bool) -> Result<TargetEval>;
}

fn bind_state<'t>(tape: &'t Tape, state: &LatentStack, frozen: &[bool]) -> Vec<Var<'t>> {
    state
        .layers()
        .iter()
        .zip(frozen)
        .map(|(t, &f)| if f { tape.constant(t.clone()) } else { tape.var(t.clone()) })
        .collect()
}

fn collect_grads(tape: &Tape, out: Var<'_>, vars: &[Var<'_>]) -> Result<LatentStack> {
    let g = tape.backward(out.sum()?)?;
    LatentStack::new(vars.iter().map(|v| g.wrt(*v)).collect())
}

fn column(v: Var<'_>) -> Vec<f64> {
    v.value().data().to_vec()
}

fn stack_of(vars: &[Var<'_>]) -> Result<LatentStack> {
    LatentStack::new(vars.iter().map(|v| (*v.value()).clone()).collect())
}

/// The joint prior in z-space.
pub struct PriorTarget<'m> {
    pub prior: &'m JointEbmPrior,
}

impl LangevinTarget for PriorTarget<'_> {
    fn dims(&self) -> &[usize] {
        self.prior.dims()
    }

    fn eval(&self, state: &LatentStack, _: Range<usize>, frozen: &[bool], values: bool) -> Result<TargetEval> {
        let tape = Tape::new();
        let b = self.prior.bind(&tape, false, false);
        let zs = bind_state(&tape, state, frozen);
        let energy = b.energy_sum(&zs)?;
        let lp = energy.add(b.gaussian_log_prob(&zs)?)?;
        let grad = collect_grads(&tape, lp, &zs)?;
        Ok(TargetEval {
            grad,
            latent: state.clone(),
            energy: if values { column(energy).into_iter().map(|v| -v).collect() } else { Vec::new() },
            log_prior: if values { column(lp) } else { Vec::new() },
        })
    }
}

/// The joint prior in noise space. Free layers of the state hold `eps_i`,
/// frozen layers hold latent codes. The log target is
/// `sum_i f_i(z_i) + sum_{free} log N(eps_i; 0, I) + sum_{frozen} log p(z_i | z_{i+1})`,
/// which is the conditional prior of the free layers after the change of
/// variables `z_i = mu_i + sigma_i * eps_i`.
pub struct PriorEpsTarget<'m> {
    pub prior: &'m JointEbmPrior,
}

impl LangevinTarget for PriorEpsTarget<'_> {
    fn dims(&self) -> &[usize] {
        self.prior.dims()
    }

    fn eval(&self, state: &LatentStack, _: Range<usize>, frozen: &[bool], values: bool) -> Result<TargetEval> {
        let tape = Tape::new();
        let b = self.prior.bind(&tape, false, false);
        let st = bind_state(&tape, state, frozen);
        let z = b.transform(&st, frozen)?;
        let energy = b.energy_sum(&z)?;
        let mut obj = energy;
        for i in 0..z.len() {
            let term = if frozen[i] {
                b.layer_log_prob(i, &z)?
            } else {
                standard_normal_log_density_rows(st[i])?
            };
            obj = obj.add(term)?;
        }
        let grad = collect_grads(&tape, obj, &st)?;
        let (energy_v, log_prior) = if values {
            let lp = energy.add(b.gaussian_log_prob(&z)?)?;
            (column(energy).into_iter().map(|v| -v).collect(), column(lp))
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(TargetEval {
            grad,
            latent: stack_of(&z)?,
            energy: energy_v,
            log_prior,
        })
    }
}

/// `log p(x | z_1) + log p(z)` up to the prior's normalizer; chain `c`
/// is paired with row `c` of `x`.
pub struct PosteriorTarget<'m> {
    pub prior: &'m JointEbmPrior,
    pub decoder: &'m GeneratorDecoder,
    pub x: &'m Tensor,
}

impl LangevinTarget for PosteriorTarget<'_> {
    fn dims(&self) -> &[usize] {
        self.prior.dims()
    }

    fn eval(&self, state: &LatentStack, chains: Range<usize>, frozen: &[bool], values: bool) -> Result<TargetEval> {
        if chains.end > self.x.rows() {
            return Err(Error::dim("posterior_target", "more chains than observations"));
        }
        let tape = Tape::new();
        let b = self.prior.bind(&tape, false, false);
        let d = self.decoder.bind(&tape, false);
        let zs = bind_state(&tape, state, frozen);
        let x = tape.constant(self.x.slice_rows(chains.start, chains.end));
        let energy = b.energy_sum(&zs)?;
        let lp = energy.add(b.gaussian_log_prob(&zs)?)?;
        let obj = d.log_likelihood(x, zs[0])?.add(lp)?;
        let grad = collect_grads(&tape, obj, &zs)?;
        Ok(TargetEval {
            grad,
            latent: state.clone(),
            energy: if values { column(energy).into_iter().map(|v| -v).collect() } else { Vec::new() },
            log_prior: if values { column(lp) } else { Vec::new() },
        })
    }
}

fn clamp_rows(g: &mut Tensor, max_norm: f64) {
    let cols = g.cols();
    if cols == 0 {
        return;
    }
    for row in g.data_mut().chunks_mut(cols) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > max_norm {
            let k = max_norm / n;
            row.iter_mut().for_each(|v| *v *= k);
        }
    }
}

fn first_nonfinite_chain(z: &LatentStack) -> Option<usize> {
    (0..z.n()).find(|&c| !z.chain_finite(c))
}

/// Finds the chain whose evaluation fails by evaluating chains one at a time.
fn locate_failure(target: &dyn LangevinTarget, state: &LatentStack, chains: &Range<usize>, frozen: &[bool]) -> usize {
    for c in 0..state.n() {
        let one = state.slice_chains(c, c + 1);
        let g = chains.start + c;
        match target.eval(&one, g..g + 1, frozen, false) {
            Ok(e) if e.grad.all_finite() => continue,
            _ => return c,
        }
    }
    0
}

fn diverged(chain: usize, step: usize, last: &LatentStack, c: usize) -> Error {
    Error::DivergedChain {
        chain,
        step,
        last_finite: last.chain(c),
    }
}

fn run_chunk<T: LangevinTarget + ?Sized>(
    target: &T,
    mut state: LatentStack,
    chains: Range<usize>,
    frozen: &[bool],
    cfg: &LangevinConfig,
    rngs: &mut [StreamRng],
    thin: Option<usize>,
) -> Result<(LatentStack, LatentStack, Option<ChainRecord>)> {
    let dims = target.dims().to_vec();
    let n = state.n();
    let values = thin.is_some();
    let mut record = thin.map(|m| ChainRecord {
        thin: m,
        snapshots: Vec::new(),
        energy: Vec::new(),
        log_prior: Vec::new(),
    });
    let s = cfg.step_size;
    let noise_scale = (2.0 * s).sqrt();
    let as_dyn: &dyn LangevinTarget = &DynRef(target);
    let mut latent = None;
    for t in 0..=cfg.steps {
        let eval = match target.eval(&state, chains.clone(), frozen, values || t == cfg.steps) {
            Ok(e) if e.grad.all_finite() => e,
            Ok(e) => {
                let c = first_nonfinite_chain(&e.grad).unwrap_or(0);
                return Err(diverged(chains.start + c, t, &e.latent, c));
            }
            Err(Error::NonFinite { .. }) => {
                let c = locate_failure(as_dyn, &state, &chains, frozen);
                let last = latent_of(as_dyn, &state, &chains, frozen, c);
                return Err(Error::DivergedChain {
                    chain: chains.start + c,
                    step: t,
                    last_finite: last,
                });
            }
            Err(e) => return Err(e),
        };
        if let Some(r) = record.as_mut() {
            r.energy.push(eval.energy.clone());
            r.log_prior.push(eval.log_prior.clone());
            if t % r.thin == 0 {
                r.snapshots.push((t, eval.latent.clone()));
            }
        }
        if t == cfg.steps {
            latent = Some(eval.latent);
            break;
        }
        let mut grad = eval.grad.into_layers();
        let mut next = state.clone().into_layers();
        for (i, (z, g)) in next.iter_mut().zip(grad.iter_mut()).enumerate() {
            if frozen[i] {
                continue;
            }
            if let Some(c) = cfg.clamp_grad {
                clamp_rows(g, c);
            }
            for (a, b) in z.data_mut().iter_mut().zip(g.data()) {
                *a += s * b;
            }
        }
        if cfg.noise_enabled {
            for (c, rng) in rngs.iter_mut().enumerate() {
                for (i, z) in next.iter_mut().enumerate() {
                    if frozen[i] {
                        continue;
                    }
                    let eps = normal_vec(rng, dims[i]);
                    for (a, e) in z.row_mut(c).iter_mut().zip(eps) {
                        *a += noise_scale * e;
                    }
                }
            }
        }
        let next = LatentStack::new(next)?;
        if let Some(c) = first_nonfinite_chain(&next) {
            return Err(diverged(chains.start + c, t + 1, &eval.latent, c));
        }
        state = next;
    }
    debug_assert_eq!(state.n(), n);
    let latent = latent.expect("final evaluation ran");
    Ok((state, latent, record))
}

fn latent_of(target: &dyn LangevinTarget, state: &LatentStack, chains: &Range<usize>, frozen: &[bool], c: usize) -> Vec<Vec<f64>> {
    let one = state.slice_chains(c, c + 1);
    let g = chains.start + c;
    match target.eval(&one, g..g + 1, frozen, false) {
        Ok(e) => e.latent.chain(0),
        Err(_) => one.chain(0),
    }
}

struct DynRef<'a, T: ?Sized>(&'a T);

impl<T: LangevinTarget + ?Sized> LangevinTarget for DynRef<'_, T> {
    fn dims(&self) -> &[usize] {
        self.0.dims()
    }

    fn eval(&self, state: &LatentStack, chains: Range<usize>, frozen: &[bool], values: bool) -> Result<TargetEval> {
        self.0.eval(state, chains, frozen, values)
    }
}

/// Output of a Langevin run.
#[derive(Clone, Debug)]
pub struct LangevinRun {
    /// Final chain states, in the space the chains ran in.
    pub state: LatentStack,
    /// Final states mapped to latent codes.
    pub z: LatentStack,
    pub record: Option<ChainRecord>,
}

/// Runs `cfg.steps` Langevin updates
/// `z <- z + s * grad log p(z) + sqrt(2 s) * eps` on every non-frozen layer.
/// `thin = Some(m)` records a snapshot every `m` steps and the energy trace.
pub fn langevin<T: LangevinTarget + ?Sized>(
    target: &T,
    z0: &LatentStack,
    frozen: &[bool],
    cfg: &LangevinConfig,
    rngs: &mut [StreamRng],
    thin: Option<usize>,
) -> Result<LangevinRun> {
    cfg.validate()?;
    z0.check_dims(target.dims(), "langevin")?;
    if frozen.len() != z0.num_layers() {
        return Err(Error::dim("langevin", "frozen mask length differs from layer count"));
    }
    if rngs.len() != z0.n() {
        return Err(Error::dim("langevin", format!("{} chains but {} rng streams", z0.n(), rngs.len())));
    }
    if thin == Some(0) {
        return Err(Error::usage("snapshot thinning must be at least 1"));
    }
    if !z0.all_finite() {
        let c = first_nonfinite_chain(z0).unwrap_or(0);
        return Err(Error::DivergedChain {
            chain: c,
            step: 0,
            last_finite: Vec::new(),
        });
    }
    let n = z0.n();
    if n == 0 {
        return Ok(LangevinRun {
            state: z0.clone(),
            z: z0.clone(),
            record: thin.map(|m| ChainRecord {
                thin: m,
                snapshots: (0..=cfg.steps).step_by(m).map(|t| (t, z0.clone())).collect(),
                energy: vec![Vec::new(); cfg.steps + 1],
                log_prior: vec![Vec::new(); cfg.steps + 1],
            }),
        });
    }
    let results: Vec<Result<(LatentStack, LatentStack, Option<ChainRecord>)>> = rngs
        .par_chunks_mut(CHUNK)
        .enumerate()
        .map(|(k, r)| {
            let start = k * CHUNK;
            let end = start + r.len();
            run_chunk(target, z0.slice_chains(start, end), start..end, frozen, cfg, r, thin)
        })
        .collect();
    let mut states = Vec::new();
    let mut latents = Vec::new();
    let mut records = Vec::new();
    for r in results {
        let (s, z, rec) = r?;
        states.push(s);
        latents.push(z);
        if let Some(rec) = rec {
            records.push(rec);
        }
    }
    Ok(LangevinRun {
        state: LatentStack::concat(&states)?,
        z: LatentStack::concat(&latents)?,
        record: if thin.is_some() { Some(ChainRecord::merge(records)?) } else { None },
    })
}

/// `grad_z [sum_i f_i(z_i) + log p_beta(z)]`.
pub fn grad_log_prior(prior: &JointEbmPrior, z: &LatentStack) -> Result<LatentStack> {
    z.check_dims(prior.dims(), "grad_log_prior")?;
    let frozen = vec![false; z.num_layers()];
    Ok(PriorTarget { prior }.eval(z, 0..z.n(), &frozen, false)?.grad)
}

/// `grad_z [log p(x | z_1) + sum_i f_i(z_i) + log p_beta(z)]`.
pub fn grad_log_posterior(
    decoder: &GeneratorDecoder,
    prior: &JointEbmPrior,
    x: &Tensor,
    z: &LatentStack,
) -> Result<LatentStack> {
    z.check_dims(prior.dims(), "grad_log_posterior")?;
    if x.rows() != z.n() {
        return Err(Error::dim("grad_log_posterior", "x rows differ from chain count"));
    }
    let frozen = vec![false; z.num_layers()];
    Ok(PosteriorTarget { prior, decoder, x }.eval(z, 0..z.n(), &frozen, false)?.grad)
}

/// `grad_eps [sum_i f_i(T(eps)_i) + log N(eps; 0, I)]`.
pub fn grad_log_prior_eps(prior: &JointEbmPrior, eps: &LatentStack) -> Result<LatentStack> {
    eps.check_dims(prior.dims(), "grad_log_prior_eps")?;
    let frozen = vec![false; eps.num_layers()];
    Ok(PriorEpsTarget { prior }.eval(eps, 0..eps.n(), &frozen, false)?.grad)
}

/// Top-down map `z_L = eps_L`, `z_i = mu_i(z_{i+1}) + sigma_i(z_{i+1}) * eps_i`.
pub fn epsilon_transform(prior: &JointEbmPrior, eps: &LatentStack) -> Result<LatentStack> {
    mixed_to_latent(prior, eps, &vec![false; eps.num_layers()])
}

/// Inverse of [`epsilon_transform`]: `eps_i = (z_i - mu_i(z_{i+1})) / sigma_i(z_{i+1})`.
pub fn epsilon_inverse(prior: &JointEbmPrior, z: &LatentStack) -> Result<LatentStack> {
    latent_to_mixed(prior, z, &vec![false; z.num_layers()])
}

/// Maps a state whose free layers hold noise and frozen layers hold codes
/// to latent codes.
pub fn mixed_to_latent(prior: &JointEbmPrior, state: &LatentStack, frozen: &[bool]) -> Result<LatentStack> {
    state.check_dims(prior.dims(), "epsilon_transform")?;
    let tape = Tape::new();
    let b = prior.bind(&tape, false, false);
    let st: Vec<Var> = state.layers().iter().map(|t| tape.constant(t.clone())).collect();
    stack_of(&b.transform(&st, frozen)?)
}

/// Inverse of [`mixed_to_latent`].
pub fn latent_to_mixed(prior: &JointEbmPrior, z: &LatentStack, frozen: &[bool]) -> Result<LatentStack> {
    z.check_dims(prior.dims(), "epsilon_inverse")?;
    let l = z.num_layers();
    let mut layers = z.layers().to_vec();
    for i in 0..l - 1 {
        if frozen[i] {
            continue;
        }
        let (m, lv) = prior.conditional_params(i, z.layer(i + 1))?;
        let inv_sd = lv.scale(-0.5)?.exp()?;
        layers[i] = z.layer(i).sub(&m)?.mul(&inv_sd)?;
    }
    LatentStack::new(layers)
}

/// Prior Langevin from `z_init` with the layers in `fixed` held at their
/// initial values. Runs in the space named by `cfg.space`; the result is
/// always in z-space.
pub fn conditional_prior_langevin(
    prior: &JointEbmPrior,
    fixed: &[usize],
    z_init: &LatentStack,
    cfg: &LangevinConfig,
    rngs: &mut [StreamRng],
) -> Result<LatentStack> {
    let l = prior.num_layers();
    let mut frozen = vec![false; l];
    for &i in fixed {
        if i >= l {
            return Err(Error::usage(format!("fixed layer {} out of range for {} layers", i, l)));
        }
        frozen[i] = true;
    }
    Ok(prior_langevin_masked(prior, z_init, &frozen, cfg, rngs, None)?.z)
}

/// Prior Langevin with an explicit frozen mask, started from latent codes.
pub fn prior_langevin_masked(
    prior: &JointEbmPrior,
    z_init: &LatentStack,
    frozen: &[bool],
    cfg: &LangevinConfig,
    rngs: &mut [StreamRng],
    thin: Option<usize>,
) -> Result<LangevinRun> {
    match cfg.space {
        Space::Z => langevin(&PriorTarget { prior }, z_init, frozen, cfg, rngs, thin),
        Space::Epsilon => {
            let state = latent_to_mixed(prior, z_init, frozen)?;
            langevin(&PriorEpsTarget { prior }, &state, frozen, cfg, rngs, thin)
        }
    }
}

/// `n` draws from the hierarchical Gaussian backbone (the energy terms are
/// ignored). Chain `c` consumes `rngs[c]`.
pub fn ancestral_sample(prior: &JointEbmPrior, rngs: &mut [StreamRng]) -> Result<LatentStack> {
    let eps = LatentStack::standard_normal(prior.dims(), rngs);
    epsilon_transform(prior, &eps)
}

/// Prior samples: an ancestral Gaussian draw refined by `cfg.steps`
/// Langevin steps on the joint prior.
pub fn sample_prior(
    prior: &JointEbmPrior,
    cfg: &LangevinConfig,
    rngs: &mut [StreamRng],
    thin: Option<usize>,
) -> Result<LangevinRun> {
    let frozen = vec![false; prior.num_layers()];
    match cfg.space {
        Space::Z => {
            let z0 = ancestral_sample(prior, rngs)?;
            langevin(&PriorTarget { prior }, &z0, &frozen, cfg, rngs, thin)
        }
        Space::Epsilon => {
            let eps = LatentStack::standard_normal(prior.dims(), rngs);
            langevin(&PriorEpsTarget { prior }, &eps, &frozen, cfg, rngs, thin)
        }
    }
}

/// Posterior Langevin for the rows of `x` from `z0`.
pub fn sample_posterior(
    decoder: &GeneratorDecoder,
    prior: &JointEbmPrior,
    x: &Tensor,
    z0: &LatentStack,
    cfg: &LangevinConfig,
    rngs: &mut [StreamRng],
) -> Result<LatentStack> {
    if x.rows() != z0.n() {
        return Err(Error::dim("sample_posterior", "x rows differ from chain count"));
    }
    let frozen = vec![false; z0.num_layers()];
    Ok(langevin(&PosteriorTarget { prior, decoder, x }, z0, &frozen, cfg, rngs, None)?.z)
}

/// Generated data: decoder means, optional noisy observations, and codes.
#[derive(Clone, Debug)]
pub struct Generated {
    pub z: LatentStack,
    pub mean: Tensor,
    pub noisy: Option<Tensor>,
}

/// Draws `rngs.len()` latent stacks with the prior sampler and decodes them.
pub fn generate(
    decoder: &GeneratorDecoder,
    prior: &JointEbmPrior,
    cfg: &LangevinConfig,
    rngs: &mut [StreamRng],
    noisy: bool,
) -> Result<Generated> {
    let z = sample_prior(prior, cfg, rngs, None)?.z;
    let mean = decoder.mean(z.layer(0))?;
    let noisy = if noisy {
        let d = decoder.data_dim();
        let mut data = mean.data().to_vec();
        for (c, rng) in rngs.iter_mut().enumerate() {
            for (v, e) in data[c * d..(c + 1) * d].iter_mut().zip(normal_vec(rng, d)) {
                *v += decoder.sigma() * e;
            }
        }
        Some(Tensor::matrix(mean.rows(), d, data)?)
    } else {
        None
    };
    Ok(Generated { z, mean, noisy })
}
