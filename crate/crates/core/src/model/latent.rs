use crate::error::{Error, Result};
use crate::rng::{normal_vec, StreamRng};
use crate::tensor::Tensor;

/// Per-layer latent codes for a batch of chains. `layer(0)` is the bottom
/// layer `z_1`, `layer(L-1)` the top layer `z_L`; each layer is an
/// `[n, d_i]` matrix whose row `c` belongs to chain `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStack {
    layers: Vec<Tensor>,
}

impl LatentStack {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::dim("latent_stack", "at least one layer required"));
        }
        let n = layers[0].rows();
        for (i, l) in layers.iter().enumerate() {
            if l.rank() != 2 || l.rows() != n {
                return Err(Error::dim(
                    "latent_stack",
                    format!("layer {} has shape {:?}, expected {} rows", i, l.shape(), n),
                ));
            }
        }
        Ok(LatentStack { layers })
    }

    pub fn zeros(n: usize, dims: &[usize]) -> Self {
        LatentStack {
            layers: dims.iter().map(|&d| Tensor::zeros(&[n, d])).collect(),
        }
    }

    /// Standard-normal draws; chain `c` consumes only `rngs[c]`, layer by layer.
    pub fn standard_normal(dims: &[usize], rngs: &mut [StreamRng]) -> Self {
        let n = rngs.len();
        let mut data: Vec<Vec<f64>> = dims.iter().map(|&d| Vec::with_capacity(n * d)).collect();
        for rng in rngs.iter_mut() {
            for (buf, &d) in data.iter_mut().zip(dims) {
                buf.extend(normal_vec(rng, d));
            }
        }
        LatentStack {
            layers: data
                .into_iter()
                .zip(dims)
                .map(|(v, &d)| Tensor::matrix(n, d, v).expect("sized above"))
                .collect(),
        }
    }

    /// A single chain given as one vector per layer.
    pub fn single(layers: &[Vec<f64>]) -> Result<Self> {
        Self::new(
            layers
                .iter()
                .map(|v| Tensor::matrix(1, v.len(), v.clone()))
                .collect::<Result<_>>()?,
        )
    }

    pub fn n(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.cols()).collect()
    }

    pub fn layer(&self, i: usize) -> &Tensor {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.layers[i]
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Tensor> {
        self.layers
    }

    pub fn check_dims(&self, dims: &[usize], op: &'static str) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::dim(
                op,
                format!("latent dims {:?}, model expects {:?}", self.dims(), dims),
            ));
        }
        Ok(())
    }

    pub fn slice_chains(&self, start: usize, end: usize) -> Self {
        LatentStack {
            layers: self.layers.iter().map(|l| l.slice_rows(start, end)).collect(),
        }
    }

    pub fn select_chains(&self, idx: &[usize]) -> Self {
        LatentStack {
            layers: self.layers.iter().map(|l| l.select_rows(idx)).collect(),
        }
    }

    /// Concatenates chain batches with identical layer dims.
    pub fn concat(parts: &[LatentStack]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::usage("concat of zero stacks"))?;
        let mut layers = Vec::with_capacity(first.num_layers());
        for i in 0..first.num_layers() {
            let ls: Vec<Tensor> = parts.iter().map(|p| p.layers[i].clone()).collect();
            layers.push(Tensor::vstack(&ls)?);
        }
        Self::new(layers)
    }

    /// Chain `c` as one vector per layer.
    pub fn chain(&self, c: usize) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| l.row(c).to_vec()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(Tensor::all_finite)
    }

    pub fn chain_finite(&self, c: usize) -> bool {
        self.layers.iter().all(|l| l.row(c).iter().all(|v| v.is_finite()))
    }

    /// Concatenates all layers of each chain into one row, bottom layer first.
    pub fn flatten(&self) -> Tensor {
        let n = self.n();
        let width: usize = self.dims().iter().sum();
        let mut data = Vec::with_capacity(n * width);
        for c in 0..n {
            for l in &self.layers {
                data.extend_from_slice(l.row(c));
            }
        }
        Tensor::matrix(n, width, data).expect("sized above")
    }
}
