//! Joint energy-based prior over all latent layers.
//!
//! The unnormalized log-density is
//! `sum_i f_i(z_i) + sum_{i<L} log N(z_i; mu_i(z_{i+1}), sigma_i^2(z_{i+1})) + log N(z_L; 0, I)`.
//! The normalizer is never computed here.

use serde::{Deserialize, Serialize};

use crate::autodiff::{gaussian_log_density_rows, standard_normal_log_density_rows, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::model::latent::LatentStack;
use crate::nn::{BoundMlp, Init, Mlp, MlpSpec};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

pub const LOG_VAR_MIN: f64 = -8.0;
pub const LOG_VAR_MAX: f64 = 8.0;

/// `p(z_i | z_{i+1})`: a shared trunk whose output splits into mean and
/// log-variance halves.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalGaussianLayer {
    net: Mlp,
}

impl ConditionalGaussianLayer {
    pub fn new(net: Mlp) -> Result<Self> {
        if net.spec().output_dim % 2 != 0 {
            return Err(Error::dim("conditional_gaussian", "output must split into mean/log_var halves"));
        }
        Ok(ConditionalGaussianLayer { net })
    }

    pub fn dim(&self) -> usize {
        self.net.spec().output_dim / 2
    }

    pub fn parent_dim(&self) -> usize {
        self.net.spec().input_dim
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    /// Mean and clamped log-variance for each parent row.
    pub fn params(&self, parent: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let b = self.net.bind(&tape, false);
        let (m, lv) = split_gaussian(&b, tape.constant(parent.clone()), self.dim())?;
        let (m, lv) = (m.value(), lv.value());
        Ok(((*m).clone(), (*lv).clone()))
    }
}

pub(crate) fn split_gaussian<'t>(net: &BoundMlp<'t>, input: Var<'t>, dim: usize) -> Result<(Var<'t>, Var<'t>)> {
    let out = net.forward(input)?;
    let mean = out.slice_cols(0, dim)?;
    let log_var = out.slice_cols(dim, 2 * dim)?.clamp(LOG_VAR_MIN, LOG_VAR_MAX)?;
    Ok((mean, log_var))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EnergySpec {
    Mlp(MlpSpec),
    /// `f(z) = -1/2 sum_j c_j z_j^2`, an analytic tilt.
    Quadratic { dim: usize },
}

/// One layer's correction term `f_i(z_i)`; the energy is its negative.
#[derive(Clone, Debug, PartialEq)]
pub enum EnergyHead {
    Mlp(Mlp),
    Quadratic { coeff: Tensor },
}

impl EnergyHead {
    pub fn quadratic(coeff: Vec<f64>) -> Self {
        EnergyHead::Quadratic {
            coeff: Tensor::vector(coeff),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EnergyHead::Mlp(m) => m.spec().input_dim,
            EnergyHead::Quadratic { coeff } => coeff.len(),
        }
    }

    pub fn spec(&self) -> EnergySpec {
        match self {
            EnergyHead::Mlp(m) => EnergySpec::Mlp(m.spec().clone()),
            EnergyHead::Quadratic { coeff } => EnergySpec::Quadratic { dim: coeff.len() },
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            EnergyHead::Mlp(m) => m.tensors(),
            EnergyHead::Quadratic { coeff } => vec![coeff],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            EnergyHead::Mlp(m) => m.tensors_mut(),
            EnergyHead::Quadratic { coeff } => vec![coeff],
        }
    }

    fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundEnergy<'t> {
        match self {
            EnergyHead::Mlp(m) => BoundEnergy::Mlp(m.bind(tape, trainable)),
            EnergyHead::Quadratic { coeff } => {
                let c = coeff.clone().reshape(vec![coeff.len(), 1]).expect("vector");
                BoundEnergy::Quadratic(if trainable { tape.var(c) } else { tape.constant(c) })
            }
        }
    }
}

enum BoundEnergy<'t> {
    Mlp(BoundMlp<'t>),
    Quadratic(Var<'t>),
}

impl<'t> BoundEnergy<'t> {
    fn forward(&self, z: Var<'t>) -> Result<Var<'t>> {
        match self {
            BoundEnergy::Mlp(m) => m.forward(z),
            BoundEnergy::Quadratic(c) => z.square()?.matmul(*c)?.scale(-0.5),
        }
    }

    fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        match self {
            BoundEnergy::Mlp(m) => m.grads(g),
            BoundEnergy::Quadratic(c) => {
                let t = g.wrt(*c);
                let n = t.len();
                vec![t.reshape(vec![n]).expect("vector")]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointEbmPrior {
    dims: Vec<usize>,
    conditionals: Vec<ConditionalGaussianLayer>,
    energies: Vec<EnergyHead>,
}

impl JointEbmPrior {
    /// `conditionals[i]` models layer `i` given layer `i + 1`;
    /// `energies[i]` corrects layer `i`.
    pub fn from_parts(
        dims: Vec<usize>,
        conditionals: Vec<ConditionalGaussianLayer>,
        energies: Vec<EnergyHead>,
    ) -> Result<Self> {
        let l = dims.len();
        if l == 0 || dims.contains(&0) {
            return Err(Error::Config(format!("latent dims must be nonempty and >= 1: {:?}", dims)));
        }
        if conditionals.len() != l - 1 || energies.len() != l {
            return Err(Error::dim(
                "joint_prior",
                format!("{} layers need {} conditionals and {} energies", l, l - 1, l),
            ));
        }
        for (i, c) in conditionals.iter().enumerate() {
            if c.dim() != dims[i] || c.parent_dim() != dims[i + 1] {
                return Err(Error::dim("joint_prior", format!("conditional {} has wrong dims", i)));
            }
        }
        for (i, e) in energies.iter().enumerate() {
            if e.dim() != dims[i] {
                return Err(Error::dim("joint_prior", format!("energy head {} has wrong input dim", i)));
            }
            if let EnergyHead::Mlp(m) = e {
                if m.spec().output_dim != 1 {
                    return Err(Error::dim("joint_prior", "energy heads must output a scalar"));
                }
            }
        }
        Ok(JointEbmPrior {
            dims,
            conditionals,
            energies,
        })
    }

    /// Random conditionals and zero-output energy heads, so the prior
    /// starts exactly at the hierarchical Gaussian.
    pub fn init(
        dims: &[usize],
        conditional_hidden: &[usize],
        energy_hidden: &[usize],
        slope: f64,
        energy_init_std: f64,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let mut conditionals = Vec::new();
        for i in 0..dims.len().saturating_sub(1) {
            let spec = MlpSpec::new(dims[i + 1], conditional_hidden, 2 * dims[i]).with_slope(slope);
            let net = Mlp::new(spec, Init::Scaled { gain: 1.0 }, rng)?;
            conditionals.push(ConditionalGaussianLayer::new(net)?);
        }
        let mut energies = Vec::new();
        for &d in dims {
            let spec = MlpSpec::new(d, energy_hidden, 1).with_slope(slope);
            energies.push(EnergyHead::Mlp(Mlp::new(spec, Init::ZeroOutput { std: energy_init_std }, rng)?));
        }
        Self::from_parts(dims.to_vec(), conditionals, energies)
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn conditionals(&self) -> &[ConditionalGaussianLayer] {
        &self.conditionals
    }

    pub fn conditionals_mut(&mut self) -> &mut [ConditionalGaussianLayer] {
        &mut self.conditionals
    }

    pub fn energies(&self) -> &[EnergyHead] {
        &self.energies
    }

    pub fn energies_mut(&mut self) -> &mut [EnergyHead] {
        &mut self.energies
    }

    pub fn alpha_tensors(&self) -> Vec<&Tensor> {
        self.energies.iter().flat_map(|e| e.tensors()).collect()
    }

    pub fn alpha_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.energies.iter_mut().flat_map(|e| e.tensors_mut()).collect()
    }

    pub fn beta_tensors(&self) -> Vec<&Tensor> {
        self.conditionals.iter().flat_map(|c| c.net.tensors()).collect()
    }

    pub fn beta_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.conditionals.iter_mut().flat_map(|c| c.net.tensors_mut()).collect()
    }

    /// Energy tensors followed by conditional tensors.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.energies.iter_mut().flat_map(|e| e.tensors_mut()).collect();
        out.extend(self.conditionals.iter_mut().flat_map(|c| c.net.tensors_mut()));
        out
    }

    /// True when every head's output layer is zero, so `f` vanishes for all
    /// `z` and the prior is exactly the Gaussian backbone.
    pub fn energy_is_zero(&self) -> bool {
        self.energies.iter().all(|e| match e {
            EnergyHead::Mlp(m) => m
                .layers()
                .last()
                .is_some_and(|l| l.weight.data().iter().chain(l.bias.data()).all(|&v| v == 0.0)),
            EnergyHead::Quadratic { coeff } => coeff.data().iter().all(|&v| v == 0.0),
        })
    }

    /// Sets every energy parameter to zero (the pure Gaussian prior).
    pub fn zero_energies(&mut self) {
        for t in self.alpha_tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, train_alpha: bool, train_beta: bool) -> BoundPrior<'t> {
        BoundPrior {
            dims: self.dims.clone(),
            conditionals: self.conditionals.iter().map(|c| c.net.bind(tape, train_beta)).collect(),
            energies: self.energies.iter().map(|e| e.bind(tape, train_alpha)).collect(),
        }
    }

    fn eval_rows(&self, z: &LatentStack, f: impl for<'t> Fn(&BoundPrior<'t>, &[Var<'t>]) -> Result<Var<'t>>) -> Result<Vec<f64>> {
        z.check_dims(&self.dims, "joint_prior")?;
        let tape = Tape::new();
        let b = self.bind(&tape, false, false);
        let zs: Vec<Var> = z.layers().iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&b, &zs)?;
        let v = out.value();
        Ok(v.data().to_vec())
    }

    /// `log p(z_L) + sum_{i<L} log p(z_i | z_{i+1})` per chain.
    pub fn gaussian_prior_logpdf(&self, z: &LatentStack) -> Result<Vec<f64>> {
        self.eval_rows(z, |b, zs| b.gaussian_log_prob(zs))
    }

    /// `sum_i f_i(z_i)` per chain.
    pub fn energy_sum(&self, z: &LatentStack) -> Result<Vec<f64>> {
        self.eval_rows(z, |b, zs| b.energy_sum(zs))
    }

    /// Log of the joint prior without its normalizer, per chain.
    pub fn unnormalized_log_prior(&self, z: &LatentStack) -> Result<Vec<f64>> {
        self.eval_rows(z, |b, zs| b.unnormalized_log_prior(zs))
    }

    /// Per-layer correction values `f_i(z_i)`, indexed `[layer][chain]`.
    pub fn energy_terms(&self, z: &LatentStack) -> Result<Vec<Vec<f64>>> {
        (0..self.num_layers())
            .map(|i| self.eval_rows(z, |b, zs| b.energy(i, zs[i])))
            .collect()
    }

    /// Per-layer Gaussian factors (`log p(z_i | z_{i+1})`, top layer
    /// `log N(z_L; 0, I)`), indexed `[layer][chain]`.
    pub fn gaussian_terms(&self, z: &LatentStack) -> Result<Vec<Vec<f64>>> {
        (0..self.num_layers())
            .map(|i| self.eval_rows(z, |b, zs| b.layer_log_prob(i, zs)))
            .collect()
    }

    /// Mean and clamped log-variance of `p(z_i | z_{i+1})` for `i < L - 1`.
    pub fn conditional_params(&self, i: usize, parent: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = self
            .conditionals
            .get(i)
            .ok_or_else(|| Error::usage(format!("layer {} has no conditional", i)))?;
        c.params(parent)
    }
}

/// A prior whose parameters are recorded on a tape.
pub struct BoundPrior<'t> {
    dims: Vec<usize>,
    conditionals: Vec<BoundMlp<'t>>,
    energies: Vec<BoundEnergy<'t>>,
}

impl<'t> BoundPrior<'t> {
    pub fn num_layers(&self) -> usize {
        self.dims.len()
    }

    pub fn conditional(&self, i: usize, parent: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        split_gaussian(&self.conditionals[i], parent, self.dims[i])
    }

    /// `log p(z_i | z_{i+1})` (or the standard normal for the top layer), `[n, 1]`.
    pub fn layer_log_prob(&self, i: usize, z: &[Var<'t>]) -> Result<Var<'t>> {
        if i + 1 == self.dims.len() {
            standard_normal_log_density_rows(z[i])
        } else {
            let (m, lv) = self.conditional(i, z[i + 1])?;
            gaussian_log_density_rows(z[i], m, lv)
        }
    }

    pub fn gaussian_log_prob(&self, z: &[Var<'t>]) -> Result<Var<'t>> {
        self.check(z)?;
        let mut acc = self.layer_log_prob(self.dims.len() - 1, z)?;
        for i in 0..self.dims.len() - 1 {
            acc = acc.add(self.layer_log_prob(i, z)?)?;
        }
        Ok(acc)
    }

    pub fn energy(&self, i: usize, zi: Var<'t>) -> Result<Var<'t>> {
        self.energies[i].forward(zi)
    }

    pub fn energy_sum(&self, z: &[Var<'t>]) -> Result<Var<'t>> {
        self.check(z)?;
        let mut acc = self.energy(0, z[0])?;
        for (i, zi) in z.iter().enumerate().skip(1) {
            acc = acc.add(self.energy(i, *zi)?)?;
        }
        Ok(acc)
    }

    pub fn unnormalized_log_prior(&self, z: &[Var<'t>]) -> Result<Var<'t>> {
        self.energy_sum(z)?.add(self.gaussian_log_prob(z)?)
    }

    /// Maps a mixed state top-down into latent codes: a layer marked
    /// `frozen` is taken as its latent value, any other layer as noise
    /// `eps_i` with `z_i = mu_i(z_{i+1}) + sigma_i(z_{i+1}) * eps_i`
    /// (`z_L = eps_L`).
    pub fn transform(&self, state: &[Var<'t>], frozen: &[bool]) -> Result<Vec<Var<'t>>> {
        self.check(state)?;
        let l = self.dims.len();
        let mut z: Vec<Option<Var<'t>>> = vec![None; l];
        for i in (0..l).rev() {
            z[i] = Some(if frozen[i] || i + 1 == l {
                state[i]
            } else {
                let (m, lv) = self.conditional(i, z[i + 1].expect("filled top-down"))?;
                m.add(lv.scale(0.5)?.exp()?.mul(state[i])?)?
            });
        }
        Ok(z.into_iter().map(|v| v.expect("filled")).collect())
    }

    pub fn alpha_grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.energies.iter().flat_map(|e| e.grads(g)).collect()
    }

    pub fn beta_grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.conditionals.iter().flat_map(|c| c.grads(g)).collect()
    }

    fn check(&self, z: &[Var<'t>]) -> Result<()> {
        let dims: Vec<usize> = z.iter().map(|v| v.value().cols()).collect();
        if dims != self.dims {
            return Err(Error::dim(
                "joint_prior",
                format!("latent dims {:?}, model expects {:?}", dims, self.dims),
            ));
        }
        Ok(())
    }
}
