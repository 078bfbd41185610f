//! Decision functions for out-of-distribution and anomaly detection,
//! ranking metrics, hierarchical sampling and reconstruction, long-run
//! energy traces, and the toy clustering and mode-coverage statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{HierarchicalModel, LatentStack};
use crate::rng::chain_streams;
use crate::samplers::{mixed_to_latent, prior_langevin_masked, LangevinConfig, Space};
use crate::tensor::Tensor;

/// Settings shared by the hierarchical decision functions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    /// Monte-Carlo replicates of the resampled layers.
    pub n_mc: usize,
    /// Sampler for the resampled layers.
    pub sampler: LangevinConfig,
    /// Draw the inferred codes from `q` instead of following its means.
    pub sampled_inference: bool,
    pub seed: u64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            n_mc: 4,
            sampler: LangevinConfig::default().with_space(Space::Epsilon),
            sampled_inference: false,
            seed: 0,
        }
    }
}

/// `L^{>k}` for one example.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodScore {
    pub k: usize,
    pub value: f64,
    pub n_mc: usize,
}

fn repeat_rows(n: usize, m: usize) -> Vec<usize> {
    (0..n).flat_map(|e| std::iter::repeat_n(e, m)).collect()
}

/// Latent stacks for `m` replicates of each row of `x`: layers at index `k`
/// and above (the layers above the k-th, counting from one) come from the
/// inference stack, layers below `k` are redrawn from the conditional prior.
fn hierarchical_codes(model: &HierarchicalModel, x: &Tensor, k: usize, cfg: &ScoreConfig) -> Result<(Vec<usize>, LatentStack)> {
    let l = model.num_layers();
    if k > l {
        return Err(Error::usage(format!("layer cutoff k = {} exceeds the {} latent layers", k, l)));
    }
    if cfg.n_mc == 0 {
        return Err(Error::usage("n_mc must be at least 1"));
    }
    let n = x.rows();
    let m = cfg.n_mc;
    let idx = repeat_rows(n, m);
    let dims = model.latent_dims().to_vec();
    let inferred = if cfg.sampled_inference {
        let mut rngs = chain_streams(cfg.seed, "score/q", 0, n * m);
        let noise = LatentStack::standard_normal(&dims, &mut rngs);
        model.inference.infer(&x.select_rows(&idx), Some(&noise))?.z
    } else {
        model.inference.infer(x, None)?.z.select_chains(&idx)
    };
    if k == 0 || n == 0 {
        return Ok((idx, inferred));
    }
    let frozen: Vec<bool> = (0..l).map(|i| i >= k).collect();
    let mut rngs = chain_streams(cfg.seed, "score/prior", 0, n * m);
    let mut mixed = LatentStack::standard_normal(&dims, &mut rngs).into_layers();
    for (i, layer) in mixed.iter_mut().enumerate().skip(k) {
        *layer = inferred.layer(i).clone();
    }
    let z0 = mixed_to_latent(&model.prior, &LatentStack::new(mixed)?, &frozen)?;
    let z = prior_langevin_masked(&model.prior, &z0, &frozen, &cfg.sampler, &mut rngs, None)?.z;
    Ok((idx, z))
}

/// `L^{>k}` per row of `x`: the mean over replicates of
/// `log p(x | z_1) + log p_beta(z) + sum_i f_i(z_i)`.
pub fn ood_scores(model: &HierarchicalModel, x: &Tensor, k: usize, cfg: &ScoreConfig) -> Result<Vec<OodScore>> {
    let (idx, z) = hierarchical_codes(model, x, k, cfg)?;
    let xr = x.select_rows(&idx);
    let ll = model.decoder.log_likelihood(&xr, z.layer(0))?;
    let lp = if idx.is_empty() { Vec::new() } else { model.prior.unnormalized_log_prior(&z)? };
    let m = cfg.n_mc;
    Ok((0..x.rows())
        .map(|e| {
            let s: f64 = (e * m..(e + 1) * m).map(|r| ll[r] + lp[r]).sum();
            OodScore {
                k,
                value: s / m as f64,
                n_mc: m,
            }
        })
        .collect())
}

pub fn ood_score_values(model: &HierarchicalModel, x: &Tensor, k: usize, cfg: &ScoreConfig) -> Result<Vec<f64>> {
    Ok(ood_scores(model, x, k, cfg)?.into_iter().map(|s| s.value).collect())
}

/// `LLR^{>k} = L^{>0} - L^{>k}`, both terms sharing the inferred codes.
pub fn llr_scores(model: &HierarchicalModel, x: &Tensor, k: usize, cfg: &ScoreConfig) -> Result<Vec<f64>> {
    let full = ood_score_values(model, x, 0, cfg)?;
    if k == 0 {
        return Ok(vec![0.0; full.len()]);
    }
    let part = ood_score_values(model, x, k, cfg)?;
    Ok(full.iter().zip(part).map(|(a, b)| a - b).collect())
}

/// `L^{>0}`; higher means more normal.
pub fn anomaly_scores(model: &HierarchicalModel, x: &Tensor, cfg: &ScoreConfig) -> Result<Vec<f64>> {
    ood_score_values(model, x, 0, cfg)
}

fn check_scores(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::usage("detection metrics need positive and negative scores"));
    }
    if pos.iter().chain(neg).any(|v| v.is_nan()) {
        return Err(Error::usage("scores contain NaN"));
    }
    Ok(())
}

/// `P(pos > neg) + P(pos = neg) / 2` from mid-ranks of the pooled scores.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores(pos, neg)?;
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Mid-rank of the tie group, 1-based.
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Distinct thresholds from high to low with the cumulative counts of
/// positives and negatives scoring at or above each.
fn operating_points(pos: &[f64], neg: &[f64]) -> Vec<(f64, usize, usize)> {
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((t, tp, fp));
    }
    out
}

/// Average precision: `sum_n (R_n - R_{n-1}) P_n` over distinct thresholds.
pub fn auprc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores(pos, neg)?;
    let np = pos.len() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (_, tp, fp) in operating_points(pos, neg) {
        let recall = tp as f64 / np;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// False-positive rate at the highest threshold whose true-positive rate
/// reaches 0.8.
pub fn fpr80(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores(pos, neg)?;
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    for (_, tp, fp) in operating_points(pos, neg) {
        if tp as f64 / np >= 0.8 {
            return Ok(fp as f64 / nn);
        }
    }
    unreachable!("the lowest threshold admits every positive")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

impl Histogram {
    pub fn new(pos: &[f64], neg: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let finite = pos.iter().chain(neg).copied().filter(|v| v.is_finite());
        let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
        let count = |v: &[f64]| {
            let mut c = vec![0; bins];
            for &x in v.iter().filter(|x| x.is_finite()) {
                c[(((x - lo) / width) as usize).min(bins - 1)] += 1;
            }
            c
        };
        Histogram {
            edges,
            positive: count(pos),
            negative: count(neg),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub auroc: f64,
    pub auprc: f64,
    pub fpr80: f64,
    /// What the positive class is, e.g. `"in-distribution"` or `"anomaly"`.
    pub positive_class: String,
    pub score_type: String,
    pub k: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub histogram: Histogram,
}

impl DetectionReport {
    /// `pos` and `neg` must be oriented so that larger means "positive".
    pub fn new(pos: &[f64], neg: &[f64], positive_class: &str, score_type: &str, k: usize) -> Result<Self> {
        Ok(DetectionReport {
            auroc: auroc(pos, neg)?,
            auprc: auprc(pos, neg)?,
            fpr80: fpr80(pos, neg)?,
            positive_class: positive_class.into(),
            score_type: score_type.into(),
            k,
            n_positive: pos.len(),
            n_negative: neg.len(),
            histogram: Histogram::new(pos, neg, 20),
        })
    }

    pub fn write_json(reports: &[DetectionReport], path: &Path) -> Result<()> {
        let mut s = serde_json::to_vec_pretty(reports)?;
        s.push(b'\n');
        write_atomic(path, &s)
    }
}

/// One row of a scores CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub id: usize,
    pub label: String,
    pub k: usize,
    pub score: f64,
    pub score_type: String,
}

pub fn write_scores_csv(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut s = String::from("id,label,k,score,score_type\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.id, r.label, r.k, r.score, r.score_type));
    }
    write_atomic(path, s.as_bytes())
}

/// Redraws the layers listed in `resample` for `n_variants` copies of the
/// single chain `base_z`, holding the other layers fixed, and decodes
/// every variant. Returns the variant codes and decoder means.
pub fn hierarchical_sample(
    model: &HierarchicalModel,
    base_z: &LatentStack,
    resample: &[usize],
    n_variants: usize,
    cfg: &LangevinConfig,
    seed: u64,
) -> Result<(LatentStack, Tensor)> {
    let l = model.num_layers();
    base_z.check_dims(model.latent_dims(), "hierarchical_sample")?;
    if base_z.n() != 1 {
        return Err(Error::usage("hierarchical_sample takes a single base chain"));
    }
    let mut frozen = vec![true; l];
    for &i in resample {
        if i >= l {
            return Err(Error::usage(format!("layer {} out of range for {} layers", i, l)));
        }
        frozen[i] = false;
    }
    let base = base_z.select_chains(&vec![0; n_variants]);
    let mut rngs = chain_streams(seed, "hierarchical-sample", 0, n_variants);
    let mut mixed = LatentStack::standard_normal(model.latent_dims(), &mut rngs).into_layers();
    for (i, layer) in mixed.iter_mut().enumerate() {
        if frozen[i] {
            *layer = base.layer(i).clone();
        }
    }
    let z0 = mixed_to_latent(&model.prior, &LatentStack::new(mixed)?, &frozen)?;
    let z = prior_langevin_masked(&model.prior, &z0, &frozen, cfg, &mut rngs, None)?.z;
    let x = model.decoder.mean(z.layer(0))?;
    Ok((z, x))
}

/// Infers codes for `x` along the mean path, redraws the layers below
/// index `k` from the conditional prior, and decodes.
pub fn hierarchical_reconstruct(model: &HierarchicalModel, x: &Tensor, k: usize, cfg: &LangevinConfig, seed: u64) -> Result<Tensor> {
    let sc = ScoreConfig {
        n_mc: 1,
        sampler: cfg.clone(),
        sampled_inference: false,
        seed,
    };
    let (_, z) = hierarchical_codes(model, x, k, &sc)?;
    model.decoder.mean(z.layer(0))
}

/// Long-run prior chain statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyProfile {
    /// Mean over chains of `-sum_i f_i`, `steps + 1` entries.
    pub energy: Vec<f64>,
    /// Standard deviation of the energy across chains at each step.
    pub energy_spread: Vec<f64>,
    pub log_prior: Vec<f64>,
    pub final_z: LatentStack,
}

impl EnergyProfile {
    /// Least-squares slope of the last `window` entries of the mean energy
    /// trace, and the single-chain energy standard deviation pooled over the
    /// same window.
    pub fn tail_stats(&self, window: usize) -> (f64, f64) {
        let start = self.energy.len().saturating_sub(window);
        let spread = &self.energy_spread[start..];
        let pooled = (spread.iter().map(|s| s * s).sum::<f64>() / spread.len().max(1) as f64).sqrt();
        (ls_slope(&self.energy[start..]), pooled)
    }

    /// The drift criterion: the fitted change over the window is under
    /// `tol` single-chain standard deviations.
    pub fn is_stationary(&self, window: usize, tol: f64) -> bool {
        let (slope, sd) = self.tail_stats(window);
        slope.is_finite() && (slope * window as f64).abs() < tol * sd
    }
}

pub fn ls_slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if y.len() < 2 {
        return 0.0;
    }
    let tm = (n - 1.0) / 2.0;
    let ym = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, v) in y.iter().enumerate() {
        let dt = t as f64 - tm;
        sxy += dt * (v - ym);
        sxx += dt * dt;
    }
    sxy / sxx
}

pub fn std_dev(y: &[f64]) -> f64 {
    if y.len() < 2 {
        return 0.0;
    }
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    (y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Runs `n_chains` prior chains for `k_long` steps from ancestral Gaussian
/// draws and records the per-step mean energy.
pub fn energy_profile(model: &HierarchicalModel, n_chains: usize, k_long: usize, cfg: &LangevinConfig, seed: u64) -> Result<EnergyProfile> {
    let cfg = LangevinConfig {
        steps: k_long,
        ..cfg.clone()
    };
    let mut rngs = chain_streams(seed, "energy-profile", 0, n_chains);
    let run = crate::samplers::sample_prior(&model.prior, &cfg, &mut rngs, Some(k_long.max(1)))?;
    let rec = run.record.expect("recording requested");
    Ok(EnergyProfile {
        energy: rec.mean_energy(),
        energy_spread: rec.energy.iter().map(|v| std_dev(v)).collect(),
        log_prior: rec.mean_log_prior(),
        final_z: run.z,
    })
}

/// Result of the two-cluster test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    /// 2 when the 2-means split has silhouette at least the threshold, else 1.
    pub clusters: usize,
    pub silhouette: f64,
    /// Fraction of points in each 2-means cluster.
    pub fractions: [f64; 2],
    pub centers: [Vec<f64>; 2],
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's 2-means from a farthest-point start; returns labels and centers.
pub fn two_means(points: &[Vec<f64>]) -> Result<(Vec<usize>, [Vec<f64>; 2])> {
    if points.len() < 2 {
        return Err(Error::usage("2-means needs at least two points"));
    }
    let d = points[0].len();
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / points.len() as f64).collect();
    let far = |from: &[f64]| {
        (0..points.len())
            .max_by(|&a, &b| dist2(&points[a], from).total_cmp(&dist2(&points[b], from)))
            .expect("nonempty")
    };
    let a = far(&mean);
    let b = far(&points[a]);
    let mut centers = [points[a].clone(), points[b].clone()];
    let mut labels = vec![0usize; points.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (p, l) in points.iter().zip(labels.iter_mut()) {
            let new = usize::from(dist2(p, &centers[1]) < dist2(p, &centers[0]));
            changed |= new != *l;
            *l = new;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if !members.is_empty() {
                *center = (0..d).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    Ok((labels, centers))
}

/// Mean silhouette coefficient of a labeling with two clusters.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let sizes = [labels.iter().filter(|&&l| l == 0).count(), labels.iter().filter(|&&l| l == 1).count()];
    if sizes[0] == 0 || sizes[1] == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = [0.0, 0.0];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist2(&points[i], &points[j]).sqrt();
            }
        }
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = sums[1 - own] / sizes[1 - own] as f64;
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

/// Two clusters when 2-means yields silhouette at least `threshold`.
pub fn count_clusters(points: &[Vec<f64>], threshold: f64) -> Result<ClusterSummary> {
    let (labels, centers) = two_means(points)?;
    let s = silhouette(points, &labels);
    let n1 = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n = points.len() as f64;
    Ok(ClusterSummary {
        clusters: if s >= threshold { 2 } else { 1 },
        silhouette: s,
        fractions: [1.0 - n1 / n, n1 / n],
        centers,
    })
}

/// How well samples cover the components of a known mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeCoverage {
    /// Fraction of samples within `n_sigma * std` of some center.
    pub high_quality: f64,
    /// Components that received at least a fifth of their fair share of
    /// high-quality samples.
    pub modes_hit: usize,
    pub n_modes: usize,
    /// `high_quality * modes_hit / n_modes`.
    pub score: f64,
}

pub fn mode_coverage(samples: &Tensor, centers: &[Vec<f64>], std: f64, n_sigma: f64) -> Result<ModeCoverage> {
    if centers.is_empty() || samples.rank() != 2 || samples.cols() != centers[0].len() {
        return Err(Error::usage("mode coverage needs centers matching the sample dimension"));
    }
    let n = samples.rows();
    let radius2 = (n_sigma * std).powi(2);
    let mut counts = vec![0usize; centers.len()];
    let mut good = 0;
    for i in 0..n {
        let row = samples.row(i);
        let (best, d2) = centers
            .iter()
            .enumerate()
            .map(|(k, c)| (k, dist2(row, c)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("centers nonempty");
        if d2 <= radius2 {
            good += 1;
            counts[best] += 1;
        }
    }
    let fair = n as f64 / centers.len() as f64;
    let hit = counts.iter().filter(|&&c| c > 0 && c as f64 >= 0.2 * fair).count();
    let hq = if n == 0 { 0.0 } else { good as f64 / n as f64 };
    Ok(ModeCoverage {
        high_quality: hq,
        modes_hit: hit,
        n_modes: centers.len(),
        score: hq * hit as f64 / centers.len() as f64,
    })
}

/// Seeded helper: `n` prior samples decoded to data space.
pub fn sample_data(model: &HierarchicalModel, n: usize, cfg: &LangevinConfig, seed: u64) -> Result<Tensor> {
    let mut rngs = chain_streams(seed, "sample", 0, n);
    let g = crate::samplers::generate(&model.decoder, &model.prior, cfg, &mut rngs, false)?;
    Ok(g.mean)
}
