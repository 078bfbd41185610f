use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BoundMlp, Mlp};
use crate::tensor::{Tensor, LN_2PI};

/// Generation network `g(z_1)` with isotropic Gaussian observation noise.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorDecoder {
    net: Mlp,
    sigma: f64,
}

impl GeneratorDecoder {
    pub fn new(net: Mlp, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("observation sigma must be positive, got {}", sigma)));
        }
        Ok(GeneratorDecoder { net, sigma })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn data_dim(&self) -> usize {
        self.net.spec().output_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.net.spec().input_dim
    }

    /// Decoder means `g(z_1)`.
    pub fn mean(&self, z1: &Tensor) -> Result<Tensor> {
        self.net.forward(z1)
    }

    /// `log p(x | z_1)` per row.
    pub fn log_likelihood(&self, x: &Tensor, z1: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let b = self.bind(&tape, false);
        let out = b.log_likelihood(tape.constant(x.clone()), tape.constant(z1.clone()))?;
        let v = out.value();
        Ok(v.data().to_vec())
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundDecoder<'t> {
        BoundDecoder {
            net: self.net.bind(tape, trainable),
            sigma: self.sigma,
            data_dim: self.data_dim(),
        }
    }
}

pub struct BoundDecoder<'t> {
    net: BoundMlp<'t>,
    sigma: f64,
    data_dim: usize,
}

impl<'t> BoundDecoder<'t> {
    pub fn mean(&self, z1: Var<'t>) -> Result<Var<'t>> {
        self.net.forward(z1)
    }

    /// `-|x - g(z_1)|^2 / (2 sigma^2) - (d/2) log(2 pi sigma^2)` as an `[n, 1]` column.
    pub fn log_likelihood(&self, x: Var<'t>, z1: Var<'t>) -> Result<Var<'t>> {
        if x.value().cols() != self.data_dim || x.value().rows() != z1.value().rows() {
            return Err(Error::dim(
                "decode_log_likelihood",
                format!("x {:?} vs z1 {:?} (data dim {})", x.value().shape(), z1.value().shape(), self.data_dim),
            ));
        }
        let s2 = self.sigma * self.sigma;
        let constant = -0.5 * self.data_dim as f64 * (LN_2PI + s2.ln());
        x.sub(self.mean(z1)?)?
            .square()?
            .row_sum()?
            .scale(-0.5 / s2)?
            .add_scalar(constant)
    }

    pub fn grads(&self, g: &crate::autodiff::Gradients) -> Vec<Tensor> {
        self.net.grads(g)
    }
}
