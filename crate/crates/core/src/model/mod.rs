//! Parameterized model families: the joint EBM prior, the generator, and
//! the bottom-up inference stack.

mod checkpoint;
mod decoder;
mod inference;
mod latent;
mod prior;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Checkpoint, CheckpointManifest, TensorEntry};
pub use decoder::{BoundDecoder, GeneratorDecoder};
pub use inference::{BoundInference, BoundInferenceOut, Inference, InferenceStack};
pub use latent::LatentStack;
pub use prior::{BoundPrior, ConditionalGaussianLayer, EnergyHead, EnergySpec, JointEbmPrior, LOG_VAR_MAX, LOG_VAR_MIN};

use crate::error::{Error, Result};
use crate::nn::{FinalActivation, Init, Mlp, MlpSpec, DEFAULT_LEAKY_SLOPE};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F64,
    F32,
}

/// User-facing architecture hyperparameters (the `[model]` config section).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent dims, bottom layer first.
    pub latent_dims: Vec<usize>,
    pub data_dim: usize,
    pub energy_hidden: Vec<usize>,
    pub conditional_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub observation_sigma: f64,
    pub decoder_output: FinalActivation,
    pub leaky_slope: f64,
    pub energy_init_std: f64,
    pub dtype: Dtype,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dims: vec![2, 2],
            data_dim: 2,
            energy_hidden: vec![100, 100],
            conditional_hidden: vec![200, 200, 200],
            decoder_hidden: vec![200, 200],
            encoder_hidden: vec![200, 200],
            observation_sigma: 0.3,
            decoder_output: FinalActivation::None,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            energy_init_std: 0.02,
            dtype: Dtype::F64,
        }
    }
}

/// Exact network shapes of a model, as stored in checkpoint manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub latent_dims: Vec<usize>,
    pub data_dim: usize,
    pub observation_sigma: f64,
    pub energies: Vec<EnergySpec>,
    pub conditionals: Vec<MlpSpec>,
    pub decoder: MlpSpec,
    pub inference: Vec<MlpSpec>,
}

/// Parameter groups with separate learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Energy heads.
    Alpha,
    /// Generator network.
    Beta0,
    /// Conditional Gaussian layers of the prior.
    BetaPrior,
    /// Inference stack.
    Omega,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::Alpha, ParamGroup::Beta0, ParamGroup::BetaPrior, ParamGroup::Omega];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Alpha => "alpha",
            ParamGroup::Beta0 => "beta0",
            ParamGroup::BetaPrior => "beta_prior",
            ParamGroup::Omega => "omega",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalModel {
    pub prior: JointEbmPrior,
    pub decoder: GeneratorDecoder,
    pub inference: InferenceStack,
}

impl HierarchicalModel {
    pub fn new(cfg: &ModelConfig, rng: &mut StreamRng) -> Result<Self> {
        if cfg.latent_dims.is_empty() || cfg.latent_dims.contains(&0) || cfg.data_dim == 0 {
            return Err(Error::Config(format!(
                "latent_dims {:?} and data_dim {} must be positive",
                cfg.latent_dims, cfg.data_dim
            )));
        }
        let slope = cfg.leaky_slope;
        let prior = JointEbmPrior::init(
            &cfg.latent_dims,
            &cfg.conditional_hidden,
            &cfg.energy_hidden,
            slope,
            cfg.energy_init_std,
            rng,
        )?;
        let dec_spec = MlpSpec::new(cfg.latent_dims[0], &cfg.decoder_hidden, cfg.data_dim)
            .with_slope(slope)
            .with_final(cfg.decoder_output);
        let decoder = GeneratorDecoder::new(Mlp::new(dec_spec, Init::Scaled { gain: 1.0 }, rng)?, cfg.observation_sigma)?;
        let mut nets = Vec::new();
        let mut input = cfg.data_dim;
        for &d in &cfg.latent_dims {
            let spec = MlpSpec::new(input, &cfg.encoder_hidden, 2 * d).with_slope(slope);
            nets.push(Mlp::new(spec, Init::Scaled { gain: 1.0 }, rng)?);
            input = d;
        }
        Self::from_parts(prior, decoder, InferenceStack::new(nets)?)
    }

    pub fn from_parts(prior: JointEbmPrior, decoder: GeneratorDecoder, inference: InferenceStack) -> Result<Self> {
        if decoder.latent_dim() != prior.dims()[0] {
            return Err(Error::dim("model", "decoder input differs from bottom latent dim"));
        }
        if inference.dims() != prior.dims() || inference.data_dim() != decoder.data_dim() {
            return Err(Error::dim("model", "inference stack does not match prior/decoder dims"));
        }
        Ok(HierarchicalModel {
            prior,
            decoder,
            inference,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.prior.num_layers()
    }

    pub fn latent_dims(&self) -> &[usize] {
        self.prior.dims()
    }

    pub fn data_dim(&self) -> usize {
        self.decoder.data_dim()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            latent_dims: self.prior.dims().to_vec(),
            data_dim: self.data_dim(),
            observation_sigma: self.decoder.sigma(),
            energies: self.prior.energies().iter().map(|e| e.spec()).collect(),
            conditionals: self.prior.conditionals().iter().map(|c| c.net().spec().clone()).collect(),
            decoder: self.decoder.net().spec().clone(),
            inference: self.inference.nets().iter().map(|n| n.spec().clone()).collect(),
        }
    }

    /// A zero-filled model with the given shapes.
    pub fn from_architecture(arch: &Architecture) -> Result<Self> {
        let mut dummy = crate::rng::stream(0, "zeros", 0);
        let zeros = |spec: &MlpSpec, rng: &mut StreamRng| Mlp::new(spec.clone(), Init::Zeros, rng);
        let conditionals = arch
            .conditionals
            .iter()
            .map(|s| ConditionalGaussianLayer::new(zeros(s, &mut dummy)?))
            .collect::<Result<Vec<_>>>()?;
        let energies = arch
            .energies
            .iter()
            .map(|e| {
                Ok(match e {
                    EnergySpec::Mlp(s) => EnergyHead::Mlp(zeros(s, &mut dummy)?),
                    EnergySpec::Quadratic { dim } => EnergyHead::quadratic(vec![0.0; *dim]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let prior = JointEbmPrior::from_parts(arch.latent_dims.clone(), conditionals, energies)?;
        let decoder = GeneratorDecoder::new(zeros(&arch.decoder, &mut dummy)?, arch.observation_sigma)?;
        let inference = InferenceStack::new(
            arch.inference
                .iter()
                .map(|s| zeros(s, &mut dummy))
                .collect::<Result<Vec<_>>>()?,
        )?;
        Self::from_parts(prior, decoder, inference)
    }

    pub fn group_tensors(&self, group: ParamGroup) -> Vec<&Tensor> {
        match group {
            ParamGroup::Alpha => self.prior.alpha_tensors(),
            ParamGroup::Beta0 => self.decoder.net().tensors(),
            ParamGroup::BetaPrior => self.prior.beta_tensors(),
            ParamGroup::Omega => self.inference.tensors(),
        }
    }

    pub fn group_tensors_mut(&mut self, group: ParamGroup) -> Vec<&mut Tensor> {
        match group {
            ParamGroup::Alpha => self.prior.alpha_tensors_mut(),
            ParamGroup::Beta0 => self.decoder.net_mut().tensors_mut(),
            ParamGroup::BetaPrior => self.prior.beta_tensors_mut(),
            ParamGroup::Omega => self.inference.tensors_mut(),
        }
    }

    /// Every parameter tensor with a stable name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, e) in self.prior.energies().iter().enumerate() {
            match e {
                EnergyHead::Mlp(m) => push_mlp(&mut out, &format!("prior.energy.{}", i), m),
                EnergyHead::Quadratic { coeff } => out.push((format!("prior.energy.{}.coeff", i), coeff)),
            }
        }
        for (i, c) in self.prior.conditionals().iter().enumerate() {
            push_mlp(&mut out, &format!("prior.conditional.{}", i), c.net());
        }
        push_mlp(&mut out, "decoder", self.decoder.net());
        for (i, n) in self.inference.nets().iter().enumerate() {
            push_mlp(&mut out, &format!("inference.{}", i), n);
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names: Vec<String> = self.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut tensors = self.prior.tensors_mut();
        tensors.extend(self.decoder.net_mut().tensors_mut());
        tensors.extend(self.inference.tensors_mut());
        names.into_iter().zip(tensors).collect()
    }

    /// Order-sensitive checksum over all parameters of a group.
    pub fn group_checksum(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.group_tensors(group) {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01B3);
                }
            }
        }
        h
    }
}

fn push_mlp<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, m: &'a Mlp) {
    for (k, l) in m.layers().iter().enumerate() {
        out.push((format!("{}.layer{}.weight", prefix, k), &l.weight));
        out.push((format!("{}.layer{}.bias", prefix, k), &l.bias));
    }
}
