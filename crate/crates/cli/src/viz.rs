use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use jebm::data::load_dataset;
use jebm::rng::chain_streams;
use jebm::samplers::sample_prior;
use jebm::Tensor;

use crate::common::{self, data_matrix, write_text};
use crate::{usage, CmdResult, SamplerArgs};

#[derive(Args, Debug)]
pub struct VizArgs {
    /// Checkpoint directory (or a training output directory).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Examples whose inferred codes are written alongside the prior chains.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Snapshot interval along the prior chains.
    #[arg(long, default_value_t = 10)]
    pub thin: usize,
    /// Number of prior chains.
    #[arg(long, default_value_t = 500)]
    pub n_chains: usize,
    /// Seed for the prior chains.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the per-layer CSVs.
    #[arg(long)]
    pub out: PathBuf,
}

fn header(first: &str, width: usize) -> String {
    let cols = ["x", "y"];
    format!("{},{}\n", first, cols[..width].join(","))
}

fn push_coords(s: &mut String, t: &Tensor, row: usize, width: usize) {
    for v in &t.row(row)[..width] {
        let _ = write!(s, ",{}", v);
    }
    s.push('\n');
}

pub fn run(a: VizArgs) -> CmdResult {
    let cfg = a.sampler.config()?;
    if a.thin == 0 {
        return Err(usage("--thin must be at least 1"));
    }
    let loaded = common::load(&a.ckpt)?;
    let model = &loaded.ckpt.model;
    let ds = load_dataset(&a.data)?;
    let x = data_matrix(&ds, model.data_dim(), "--data")?;
    let dims = model.latent_dims().to_vec();
    if dims.iter().any(|&d| d != 2) {
        eprintln!("warning: latent widths {:?} are not all 2; writing the first two coordinates", dims);
    }

    let mut rngs = chain_streams(a.seed, "viz", 0, a.n_chains);
    let run = sample_prior(&model.prior, &cfg, &mut rngs, Some(a.thin))?;
    let rec = run.record.as_ref().expect("recording requested");
    let q = model.inference.infer(&x, None)?;
    let labels = ds.labels();

    std::fs::create_dir_all(&a.out)?;
    for (i, &d) in dims.iter().enumerate() {
        let width = d.min(2);
        let mut s = header("chain,step", width);
        for (step, z) in &rec.snapshots {
            for c in 0..z.n() {
                let _ = write!(s, "{},{}", c, step);
                push_coords(&mut s, z.layer(i), c, width);
            }
        }
        write_text(&a.out.join(format!("prior_layer{}.csv", i + 1)), &s)?;

        let mut s = header("example,label", width);
        let codes = q.z.layer(i);
        for e in 0..codes.rows() {
            let label = labels.map(|l| l[e].to_string()).unwrap_or_default();
            let _ = write!(s, "{},{}", e, label);
            push_coords(&mut s, codes, e, width);
        }
        write_text(&a.out.join(format!("posterior_layer{}.csv", i + 1)), &s)?;
    }
    println!(
        "wrote {} snapshots of {} chains and {} inferred codes per layer to {}",
        rec.snapshots.len(),
        a.n_chains,
        x.rows(),
        a.out.display()
    );
    Ok(())
}
