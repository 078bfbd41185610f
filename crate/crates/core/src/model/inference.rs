//! Bottom-up amortized posterior `q(z_1 | x) prod_i q(z_{i+1} | z_i)`.

use crate::autodiff::{gaussian_log_density_rows, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::model::latent::LatentStack;
use crate::model::prior::split_gaussian;
use crate::nn::{BoundMlp, Mlp};
use crate::tensor::{Tensor, LN_2PI};

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceStack {
    nets: Vec<Mlp>,
}

/// Output of one bottom-up pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub z: LatentStack,
    pub means: Vec<Tensor>,
    pub log_vars: Vec<Tensor>,
    /// `log q(z | x)` at the returned sample, per row.
    pub log_q: Vec<f64>,
}

impl InferenceStack {
    /// `nets[0]` maps `x` to `(mean, log_var)` of `z_1`; `nets[i]` maps
    /// `z_i` to those of `z_{i+1}`.
    pub fn new(nets: Vec<Mlp>) -> Result<Self> {
        if nets.is_empty() {
            return Err(Error::Config("inference stack needs at least one network".into()));
        }
        for w in nets.windows(2) {
            if w[0].spec().output_dim / 2 != w[1].spec().input_dim {
                return Err(Error::dim("inference_stack", "consecutive encoders do not chain"));
            }
        }
        if nets.iter().any(|n| n.spec().output_dim % 2 != 0) {
            return Err(Error::dim("inference_stack", "encoder outputs must split in halves"));
        }
        Ok(InferenceStack { nets })
    }

    pub fn nets(&self) -> &[Mlp] {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut [Mlp] {
        &mut self.nets
    }

    pub fn data_dim(&self) -> usize {
        self.nets[0].spec().input_dim
    }

    pub fn dims(&self) -> Vec<usize> {
        self.nets.iter().map(|n| n.spec().output_dim / 2).collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.nets.iter().flat_map(|n| n.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.nets.iter_mut().flat_map(|n| n.tensors_mut()).collect()
    }

    /// Reparameterized ancestral pass. `noise` supplies `eps` per layer;
    /// `None` runs the noise-free mean path.
    pub fn infer(&self, x: &Tensor, noise: Option<&LatentStack>) -> Result<Inference> {
        let tape = Tape::new();
        let b = self.bind(&tape, false);
        let out = b.infer(tape.constant(x.clone()), noise)?;
        let log_q = out.log_q()?.value().data().to_vec();
        let val = |v: &Var| (*v.value()).clone();
        Ok(Inference {
            z: LatentStack::new(out.z.iter().map(val).collect())?,
            means: out.means.iter().map(val).collect(),
            log_vars: out.log_vars.iter().map(val).collect(),
            log_q,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundInference<'t> {
        BoundInference {
            nets: self.nets.iter().map(|n| n.bind(tape, trainable)).collect(),
            dims: self.dims(),
            data_dim: self.data_dim(),
        }
    }
}

pub struct BoundInference<'t> {
    nets: Vec<BoundMlp<'t>>,
    dims: Vec<usize>,
    data_dim: usize,
}

pub struct BoundInferenceOut<'t> {
    pub z: Vec<Var<'t>>,
    pub means: Vec<Var<'t>>,
    pub log_vars: Vec<Var<'t>>,
}

impl<'t> BoundInference<'t> {
    pub fn infer(&self, x: Var<'t>, noise: Option<&LatentStack>) -> Result<BoundInferenceOut<'t>> {
        let xv = x.value();
        if xv.rank() != 2 || xv.cols() != self.data_dim {
            return Err(Error::dim(
                "infer",
                format!("x has shape {:?}, data dim is {}", xv.shape(), self.data_dim),
            ));
        }
        let n = xv.rows();
        if let Some(eps) = noise {
            eps.check_dims(&self.dims, "infer")?;
            if eps.n() != n {
                return Err(Error::dim("infer", "noise batch differs from data batch"));
            }
        }
        let tape = x.tape();
        let mut out = BoundInferenceOut {
            z: Vec::new(),
            means: Vec::new(),
            log_vars: Vec::new(),
        };
        let mut h = x;
        for (i, net) in self.nets.iter().enumerate() {
            let (m, lv) = split_gaussian(net, h, self.dims[i])?;
            let z = match noise {
                Some(eps) => m.add(lv.scale(0.5)?.exp()?.mul(tape.constant(eps.layer(i).clone()))?)?,
                None => m,
            };
            out.means.push(m);
            out.log_vars.push(lv);
            out.z.push(z);
            h = z;
        }
        Ok(out)
    }
}

impl<'t> BoundInferenceOut<'t> {
    /// `sum_i log q(z_i | parent)` at the sampled codes, `[n, 1]`.
    pub fn log_q(&self) -> Result<Var<'t>> {
        let mut acc = gaussian_log_density_rows(self.z[0], self.means[0], self.log_vars[0])?;
        for i in 1..self.z.len() {
            acc = acc.add(gaussian_log_density_rows(self.z[i], self.means[i], self.log_vars[i])?)?;
        }
        Ok(acc)
    }

    /// Analytic entropy of `q(z_i | sampled parent)` for layer `i`, `[n, 1]`.
    pub fn layer_entropy(&self, i: usize) -> Result<Var<'t>> {
        self.log_vars[i].add_scalar(LN_2PI + 1.0)?.scale(0.5)?.row_sum()
    }
}

impl BoundInference<'_> {
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.nets.iter().flat_map(|n| n.grads(g)).collect()
    }
}
