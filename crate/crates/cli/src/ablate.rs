use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use jebm::config::DataSource;
use jebm::evaluation::{mode_coverage, sample_data};
use jebm::LangevinConfig;

use crate::common::{self, parse_list, write_text};
use crate::{usage, CmdResult};

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Checkpoint of a model trained on a Gaussian mixture.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Prior step counts to compare.
    #[arg(long, default_value = "0,10,20,40,80")]
    pub steps_list: String,
    /// Samples per step count.
    #[arg(long, default_value_t = 4000)]
    pub n: usize,
    /// Langevin step size.
    #[arg(long, default_value_t = 0.1)]
    pub step_size: f64,
    /// Sampling seed, shared by every step count.
    #[arg(long, default_value_t = 9)]
    pub seed: u64,
    /// Mixture centers as "x1,y1;x2,y2;..."; from the training config by default.
    #[arg(long)]
    pub centers: Option<String>,
    /// Mixture component std; from the training config by default.
    #[arg(long)]
    pub std: Option<f64>,
    /// A sample counts as high quality within this many stds of a center.
    #[arg(long, default_value_t = 3.0)]
    pub n_sigma: f64,
    /// Results table (CSV).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One row of the step-count ablation.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub steps: usize,
    pub score: f64,
    pub high_quality: f64,
    pub modes_hit: usize,
    /// Binomial standard error of the score.
    pub se: f64,
}

fn parse_centers(s: &str) -> jebm::Result<Vec<Vec<f64>>> {
    s.split(';').map(|c| parse_list(c, "--centers")).collect()
}

pub fn run(a: AblateArgs) -> CmdResult {
    let steps: Vec<usize> = parse_list(&a.steps_list, "--steps-list")?;
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let loaded = common::load(&a.ckpt)?;
    let data = loaded.config.as_ref().map(|c| &c.data);
    let centers = match (&a.centers, data) {
        (Some(s), _) => parse_centers(s)?,
        (None, Some(d)) if d.source == DataSource::Mixture => d.centers.clone(),
        _ => return Err(usage("the checkpoint was not trained on a mixture; pass --centers and --std")),
    };
    let std = match (a.std, data) {
        (Some(s), _) => s,
        (None, Some(d)) if d.source == DataSource::Mixture => d.std,
        _ => return Err(usage("pass --std with --centers")),
    };
    let model = &loaded.ckpt.model;

    let mut rows = Vec::new();
    for &k in &steps {
        let cfg = LangevinConfig::new(k, a.step_size);
        cfg.validate()?;
        let xs = sample_data(model, a.n, &cfg, a.seed)?;
        let m = mode_coverage(&xs, &centers, std, a.n_sigma)?;
        let se = (m.score * (1.0 - m.score) / a.n as f64).sqrt();
        rows.push(AblationRow {
            steps: k,
            score: m.score,
            high_quality: m.high_quality,
            modes_hit: m.modes_hit,
            se,
        });
    }

    println!("{:>6} {:>8} {:>8} {:>6} {:>8}", "steps", "coverage", "quality", "modes", "se");
    let mut csv = String::from("steps,coverage,high_quality,modes_hit,n_modes,se\n");
    for r in &rows {
        println!("{:>6} {:>8.4} {:>8.4} {:>3}/{:<2} {:>8.4}", r.steps, r.score, r.high_quality, r.modes_hit, centers.len(), r.se);
        let _ = writeln!(csv, "{},{},{},{},{},{}", r.steps, r.score, r.high_quality, r.modes_hit, centers.len(), r.se);
    }
    if let Some(p) = &a.out {
        write_text(p, &csv)?;
    }
    Ok(())
}
