use std::path::{Path, PathBuf};

use clap::Args;
use jebm::data::load_dataset;
use jebm::evaluation::{anomaly_scores, llr_scores, ood_score_values, write_scores_csv, DetectionReport, ScoreConfig, ScoreRow};
use jebm::LangevinConfig;

use crate::common::{self, data_matrix};
use crate::{usage, CmdResult};

/// Settings for the Monte-Carlo decision functions.
#[derive(Args, Debug, Clone)]
pub struct ScoreArgs {
    /// Replicates of the resampled layers per example.
    #[arg(long, default_value_t = 4)]
    pub n_mc: usize,
    /// Seed for the resampled layers.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Langevin steps for the resampled layers.
    #[arg(long, default_value_t = 40)]
    pub steps: usize,
    /// Langevin step size for the resampled layers.
    #[arg(long, default_value_t = 0.1)]
    pub step_size: f64,
    /// Sampling space for the resampled layers: z or eps.
    #[arg(long, default_value = "eps")]
    pub space: String,
    /// Cap on the per-layer gradient norm.
    #[arg(long)]
    pub clamp_grad: Option<f64>,
    /// Draw the inferred layers from q instead of using its means.
    #[arg(long)]
    pub sampled_inference: bool,
}

impl ScoreArgs {
    fn config(&self) -> jebm::Result<ScoreConfig> {
        let sampler = LangevinConfig {
            steps: self.steps,
            step_size: self.step_size,
            space: self.space.parse()?,
            clamp_grad: self.clamp_grad,
            ..LangevinConfig::default()
        };
        sampler.validate()?;
        Ok(ScoreConfig {
            n_mc: self.n_mc,
            sampler,
            sampled_inference: self.sampled_inference,
            seed: self.seed,
        })
    }
}

#[derive(Args, Debug)]
pub struct EvalOodArgs {
    /// Checkpoint directory (or a training output directory).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// In-distribution examples.
    #[arg(long)]
    pub in_data: PathBuf,
    /// Out-of-distribution examples.
    #[arg(long)]
    pub out_data: PathBuf,
    /// Layer cutoff: layers above k are inferred, layers 1..=k resampled.
    #[arg(long)]
    pub k: usize,
    #[command(flatten)]
    pub score: ScoreArgs,
    /// Detection report (JSON).
    #[arg(long)]
    pub report: PathBuf,
    /// Per-example scores (CSV); next to the report by default.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalAdArgs {
    /// Checkpoint directory (or a training output directory).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Labeled examples, anomalies included.
    #[arg(long)]
    pub data: PathBuf,
    /// Label of the anomalous class.
    #[arg(long)]
    pub heldout_label: u32,
    #[command(flatten)]
    pub score: ScoreArgs,
    /// Detection report (JSON).
    #[arg(long)]
    pub report: PathBuf,
    /// Per-example scores (CSV); next to the report by default.
    #[arg(long)]
    pub scores: Option<PathBuf>,
}

fn scores_path(explicit: &Option<PathBuf>, report: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| report.with_extension("csv"))
}

fn ensure_parent(p: &Path) -> std::io::Result<()> {
    match p.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(d) => std::fs::create_dir_all(d),
        None => Ok(()),
    }
}

fn rows(values: &[f64], label: impl Fn(usize) -> String, k: usize, score_type: &str) -> Vec<ScoreRow> {
    values
        .iter()
        .enumerate()
        .map(|(i, &score)| ScoreRow {
            id: i,
            label: label(i),
            k,
            score,
            score_type: score_type.into(),
        })
        .collect()
}

pub fn run_ood(a: EvalOodArgs) -> CmdResult {
    let cfg = a.score.config()?;
    let loaded = common::load(&a.ckpt)?;
    let model = &loaded.ckpt.model;
    if a.k > model.num_layers() {
        return Err(usage(format!("--k {} exceeds the {} latent layers", a.k, model.num_layers())));
    }
    let d = model.data_dim();
    let x_in = data_matrix(&load_dataset(&a.in_data)?, d, "--in-data")?;
    let x_out = data_matrix(&load_dataset(&a.out_data)?, d, "--out-data")?;

    let l_in = ood_score_values(model, &x_in, a.k, &cfg)?;
    let l_out = ood_score_values(model, &x_out, a.k, &cfg)?;
    let r_in = llr_scores(model, &x_in, a.k, &cfg)?;
    let r_out = llr_scores(model, &x_out, a.k, &cfg)?;

    let n_in = l_in.len();
    let side = |n: usize| move |i: usize| if i < n { "in".to_string() } else { "out".to_string() };
    let l_all: Vec<f64> = l_in.iter().chain(&l_out).copied().collect();
    let r_all: Vec<f64> = r_in.iter().chain(&r_out).copied().collect();
    let mut table = rows(&l_all, side(n_in), a.k, "L");
    table.extend(rows(&r_all, side(n_in), a.k, "LLR"));

    // Higher scores mean more in-distribution for both functions.
    let reports = [
        DetectionReport::new(&l_in, &l_out, "in-distribution", "L", a.k)?,
        DetectionReport::new(&r_in, &r_out, "in-distribution", "LLR", a.k)?,
    ];
    let scores = scores_path(&a.scores, &a.report);
    ensure_parent(&scores)?;
    ensure_parent(&a.report)?;
    write_scores_csv(&table, &scores)?;
    DetectionReport::write_json(&reports, &a.report)?;
    for r in &reports {
        println!(
            "{}^(>{}): AUROC {:.4}  AUPRC {:.4}  FPR80 {:.4}",
            r.score_type, r.k, r.auroc, r.auprc, r.fpr80
        );
    }
    Ok(())
}

pub fn run_ad(a: EvalAdArgs) -> CmdResult {
    let cfg = a.score.config()?;
    let loaded = common::load(&a.ckpt)?;
    let model = &loaded.ckpt.model;
    let ds = load_dataset(&a.data)?;
    let labels = ds
        .labels()
        .ok_or_else(|| usage(format!("{} has no labels", a.data.display())))?
        .to_vec();
    let x = data_matrix(&ds, model.data_dim(), "--data")?;
    // Anomalies are the positive class, so the anomaly score is -L^(>0).
    let s: Vec<f64> = anomaly_scores(model, &x, &cfg)?.into_iter().map(|v| -v).collect();
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (v, &l) in s.iter().zip(&labels) {
        if l == a.heldout_label {
            pos.push(*v);
        } else {
            neg.push(*v);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(usage(format!(
            "label {} splits the data into {} anomalies and {} normal examples",
            a.heldout_label,
            pos.len(),
            neg.len()
        )));
    }
    let report = DetectionReport::new(&pos, &neg, "anomaly", "-L", 0)?;
    let table = rows(&s, |i| labels[i].to_string(), 0, "-L");
    let scores = scores_path(&a.scores, &a.report);
    ensure_parent(&scores)?;
    ensure_parent(&a.report)?;
    write_scores_csv(&table, &scores)?;
    DetectionReport::write_json(std::slice::from_ref(&report), &a.report)?;
    println!(
        "held-out label {}: AUPRC {:.4}  AUROC {:.4}  FPR80 {:.4}",
        a.heldout_label, report.auprc, report.auroc, report.fpr80
    );
    Ok(())
}
