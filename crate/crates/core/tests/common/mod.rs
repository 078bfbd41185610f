#![allow(dead_code)]

use jebm::model::{ConditionalGaussianLayer, EnergyHead, GeneratorDecoder, HierarchicalModel, InferenceStack, JointEbmPrior};
use jebm::nn::{Activation, Init, Mlp, MlpSpec};
use jebm::rng::{normal_vec, stream, StreamRng};

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

/// `|a - b| / max(|a|, |b|)` over whole vectors; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn rng(seed: u64, purpose: &str) -> StreamRng {
    stream(seed, purpose, 0)
}

pub fn randn(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    normal_vec(rng, n)
}

pub fn mlp(input: usize, hidden: &[usize], output: usize, act: Activation, rng: &mut StreamRng) -> Mlp {
    let mut spec = MlpSpec::new(input, hidden, output);
    spec.activation = act;
    Mlp::new(spec, Init::Scaled { gain: 1.0 }, rng).unwrap()
}

/// A small model with random nonzero energy heads. `act` is used by every
/// network, so tanh gives a smooth model for finite differences.
pub fn random_model(dims: &[usize], data_dim: usize, hidden: usize, act: Activation, seed: u64) -> HierarchicalModel {
    let mut r = rng(seed, "test-model");
    let l = dims.len();
    let conditionals = (0..l - 1)
        .map(|i| ConditionalGaussianLayer::new(mlp(dims[i + 1], &[hidden], 2 * dims[i], act, &mut r)).unwrap())
        .collect();
    let energies = dims.iter().map(|&d| EnergyHead::Mlp(mlp(d, &[hidden], 1, act, &mut r))).collect();
    let prior = JointEbmPrior::from_parts(dims.to_vec(), conditionals, energies).unwrap();
    let decoder = GeneratorDecoder::new(mlp(dims[0], &[hidden], data_dim, act, &mut r), 0.3).unwrap();
    let mut nets = vec![mlp(data_dim, &[hidden], 2 * dims[0], act, &mut r)];
    for i in 1..l {
        nets.push(mlp(dims[i - 1], &[hidden], 2 * dims[i], act, &mut r));
    }
    let inference = InferenceStack::new(nets).unwrap();
    HierarchicalModel::from_parts(prior, decoder, inference).unwrap()
}
