use std::path::PathBuf;

use clap::Args;
use jebm::data::{save_dataset, write_image_grid};
use jebm::rng::{chain_streams, normal_vec};
use jebm::samplers::sample_prior;
use jebm::{Dataset, Error};

use crate::common;
use crate::{usage, CmdResult, SamplerArgs};

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Checkpoint directory (or a training output directory).
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Number of samples.
    #[arg(long)]
    pub n: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Output file: `.ebmd` or `.csv` for data, `.pgm`/`.ppm` for an image grid.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for the prior chains and observation noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `states.csv` and `energy.csv` chain traces.
    #[arg(long)]
    pub record_chains: Option<PathBuf>,
    /// Snapshot interval for --record-chains.
    #[arg(long, default_value_t = 10)]
    pub thin: usize,
    /// Add observation noise to the decoder means.
    #[arg(long)]
    pub noisy: bool,
    /// Grid layout ROWSxCOLS for image output; the largest near-square
    /// grid that fits by default.
    #[arg(long)]
    pub grid: Option<String>,
}

fn grid_shape(spec: Option<&str>, n: usize) -> Result<(usize, usize), crate::Failure> {
    match spec {
        Some(s) => {
            let (r, c) = s.split_once('x').ok_or_else(|| usage(format!("--grid expects ROWSxCOLS, got {:?}", s)))?;
            let r = r.parse().map_err(|_| usage(format!("bad grid rows {:?}", r)))?;
            let c = c.parse().map_err(|_| usage(format!("bad grid cols {:?}", c)))?;
            Ok((r, c))
        }
        None => {
            let c = (n as f64).sqrt().ceil().max(1.0) as usize;
            Ok(((n / c).max(1), c))
        }
    }
}

pub fn run(a: SampleArgs) -> CmdResult {
    let cfg = a.sampler.config()?;
    if a.record_chains.is_some() && a.thin == 0 {
        return Err(usage("--thin must be at least 1"));
    }
    let loaded = common::load(&a.ckpt)?;
    let model = &loaded.ckpt.model;
    let mut rngs = chain_streams(a.seed, "sample", 0, a.n);
    let thin = a.record_chains.as_ref().map(|_| a.thin);
    let run = sample_prior(&model.prior, &cfg, &mut rngs, thin)?;
    let mean = model.decoder.mean(run.z.layer(0))?;
    let d = model.data_dim();
    let mut values: Vec<f32> = mean.data().iter().map(|&v| v as f32).collect();
    if a.noisy {
        for (c, rng) in rngs.iter_mut().enumerate() {
            for (v, e) in values[c * d..(c + 1) * d].iter_mut().zip(normal_vec(rng, d)) {
                *v += (model.decoder.sigma() * e) as f32;
            }
        }
    }
    let shape = common::data_shape(&loaded.ckpt)
        .filter(|s| s.iter().product::<usize>() == d)
        .unwrap_or_else(|| vec![d]);
    let ds = Dataset::new(shape, values, None)?;

    if let Some(dir) = &a.record_chains {
        let rec = run.record.as_ref().expect("recording requested");
        std::fs::create_dir_all(dir)?;
        rec.write_states_csv(&dir.join("states.csv"))?;
        rec.write_energy_csv(&dir.join("energy.csv"))?;
    }
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let ext = a.out.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if ext == "pgm" || ext == "ppm" {
        if !ds.is_image() {
            return Err(Error::Usage(format!("image output needs image-shaped samples, got {:?}", ds.shape())).into());
        }
        let (r, c) = grid_shape(a.grid.as_deref(), a.n)?;
        write_image_grid(&ds, r, c, &a.out)?;
    } else {
        save_dataset(&ds, &a.out)?;
    }
    println!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}
