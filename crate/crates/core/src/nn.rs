//! Fully connected networks built from the tape primitives.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{normal_vec, StreamRng};
use crate::tensor::Tensor;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Tanh,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    #[default]
    None,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub final_activation: FinalActivation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            activation: Activation::default(),
            final_activation: FinalActivation::None,
        }
    }

    pub fn with_slope(mut self, slope: f64) -> Self {
        self.activation = Activation::LeakyRelu { slope };
        self
    }

    pub fn with_final(mut self, f: FinalActivation) -> Self {
        self.final_activation = f;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config(format!("all MLP dims must be >= 1: {:?}", self)));
        }
        if let Activation::LeakyRelu { slope } = self.activation {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::Config(format!("leaky slope {} outside (0, 1)", slope)));
            }
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_dims);
        w.push(self.output_dim);
        w
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Every layer `N(0, gain^2 / fan_in)`, zero biases.
    Scaled { gain: f64 },
    /// Hidden layers `N(0, (std / sqrt(fan_in))^2)`, last layer all zeros.
    ZeroOutput { std: f64 },
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(spec: MlpSpec, init: Init, rng: &mut StreamRng) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let n_layers = widths.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (l, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = match init {
                Init::Scaled { gain } => gain / (fan_in as f64).sqrt(),
                Init::ZeroOutput { std } if l + 1 < n_layers => std / (fan_in as f64).sqrt(),
                Init::ZeroOutput { .. } | Init::Zeros => 0.0,
            };
            let weight = if std == 0.0 {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                let data = normal_vec(rng, fan_in * fan_out).into_iter().map(|v| v * std).collect();
                Tensor::matrix(fan_in, fan_out, data)?
            };
            layers.push(Linear {
                weight,
                bias: Tensor::zeros(&[fan_out]),
            });
        }
        Ok(Mlp { spec, layers })
    }

    /// Builds a network from explicit layers, validating their shapes.
    pub fn from_layers(spec: MlpSpec, layers: Vec<Linear>) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        if layers.len() != widths.len() - 1 {
            return Err(Error::dim("mlp", format!("{} layers for spec {:?}", layers.len(), spec)));
        }
        for (l, w) in layers.iter().zip(widths.windows(2)) {
            if l.weight.shape() != [w[0], w[1]] || l.bias.shape() != [w[1]] {
                return Err(Error::dim(
                    "mlp",
                    format!("layer {:?}/{:?} does not fit {}->{}", l.weight.shape(), l.bias.shape(), w[0], w[1]),
                ));
            }
        }
        Ok(Mlp { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Records the parameters on `tape`, as roots when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.var(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundMlp {
            spec: self.spec.clone(),
            layers: self.layers.iter().map(|l| (leaf(&l.weight), leaf(&l.bias))).collect(),
        }
    }

    /// Forward pass on `[n, input_dim]` rows.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = bound.forward(tape.constant(x.clone()))?;
        let v = out.value();
        Ok((*v).clone())
    }
}

pub struct BoundMlp<'t> {
    spec: MlpSpec,
    layers: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> BoundMlp<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        if x.value().cols() != self.spec.input_dim {
            return Err(Error::dim(
                "mlp",
                format!("input has {} columns, expected {}", x.value().cols(), self.spec.input_dim),
            ));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (l, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(*w)?.add_bias(*b)?;
            if l < last {
                h = match self.spec.activation {
                    Activation::LeakyRelu { slope } => h.leaky_relu(slope)?,
                    Activation::Tanh => h.tanh()?,
                };
            }
        }
        match self.spec.final_activation {
            FinalActivation::None => Ok(h),
            FinalActivation::Tanh => h.tanh(),
        }
    }

    /// Gradients in the same order as [`Mlp::tensors`].
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.layers.iter().flat_map(|(w, b)| [g.wrt(*w), g.wrt(*b)]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_output_init_gives_zero_network() {
        let mut rng = stream(0, "t", 0);
        let spec = MlpSpec::new(3, &[8, 8], 1);
        let net = Mlp::new(spec, Init::ZeroOutput { std: 0.02 }, &mut rng).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.1, -0.4]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), &[0.0, 0.0]);
        assert!(net.layers()[0].weight.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn linear_network_without_hidden_layers() {
        let spec = MlpSpec::new(2, &[], 1);
        let net = Mlp::from_layers(
            spec,
            vec![Linear {
                weight: Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap(),
                bias: Tensor::zeros(&[1]),
            }],
        )
        .unwrap();
        let x = Tensor::matrix(1, 2, vec![2.0, 3.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut rng = stream(0, "t", 0);
        assert!(Mlp::new(MlpSpec::new(0, &[], 1), Init::Zeros, &mut rng).is_err());
        assert!(Mlp::new(MlpSpec::new(1, &[4], 1).with_slope(1.5), Init::Zeros, &mut rng).is_err());
    }
}
