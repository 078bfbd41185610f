use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use jebm::model::{save_checkpoint, Checkpoint};
use jebm::rng::stream;
use jebm::training::Trainer;
use jebm::{Dataset, Error, HierarchicalModel, RunConfig};

use crate::common::{self, write_text};
use crate::manifest::{RunManifest, RunOutputs, RunStatus};
use crate::CmdResult;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for the manifest, metrics and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn checkpoint_meta(cfg: &RunConfig, ds: &Dataset) -> jebm::Result<serde_json::Value> {
    Ok(serde_json::json!({
        "config": serde_json::to_value(cfg)?,
        "data_shape": ds.shape(),
    }))
}

fn write_checkpoint(trainer: &Trainer, meta: &serde_json::Value, cfg: &RunConfig, dir: &Path) -> jebm::Result<()> {
    let mut ck: Checkpoint = trainer.checkpoint();
    ck.meta = meta.clone();
    save_checkpoint(&ck, cfg.model.dtype, dir)
}

pub fn run(a: TrainArgs) -> CmdResult {
    let cfg = common::read_config(&a.config)?;
    let ds = cfg.data.build(cfg.trainer.seed)?;
    let x = common::data_matrix(&ds, cfg.model.data_dim, "training data")?;

    fs::create_dir_all(&a.out)?;
    let resolved = cfg.to_toml_string()?;
    let config_path = a.out.join("config.toml");
    write_text(&config_path, &resolved)?;
    let metrics_path = a.out.join("metrics.jsonl");
    let manifest_path = a.out.join("run.json");
    let outputs = RunOutputs {
        config: config_path,
        metrics: metrics_path.clone(),
        ..RunOutputs::default()
    };
    let mut manifest = RunManifest::start(resolved, cfg.trainer.seed, a.resume.clone(), outputs);
    manifest.write(&manifest_path)?;

    let res = train(&a, &cfg, &ds, &x, &metrics_path, &mut manifest);
    match &res {
        Ok(()) => manifest.finish(RunStatus::Completed),
        Err(_) => manifest.finish(RunStatus::Failed),
    }
    manifest.write(&manifest_path)?;
    res
}

fn train(
    a: &TrainArgs,
    cfg: &RunConfig,
    ds: &Dataset,
    x: &jebm::Tensor,
    metrics_path: &Path,
    manifest: &mut RunManifest,
) -> CmdResult {
    let fresh = HierarchicalModel::new(&cfg.model, &mut stream(cfg.trainer.seed, "init", 0))?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let loaded = common::load(p)?;
            if loaded.ckpt.model.architecture() != fresh.architecture() {
                return Err(Error::Config(format!("checkpoint {} does not match the [model] section", p.display())).into());
            }
            Trainer::resume(
                cfg.trainer.clone(),
                cfg.prior_sampler.clone(),
                cfg.posterior_sampler.clone(),
                loaded.ckpt,
            )?
        }
        None => Trainer::new(cfg.trainer.clone(), cfg.prior_sampler.clone(), cfg.posterior_sampler.clone(), fresh)?,
    };
    let meta = checkpoint_meta(cfg, ds)?;
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume.is_some())
        .truncate(a.resume.is_none())
        .open(metrics_path)?;
    let mut metrics = BufWriter::new(file);
    let total = cfg.trainer.iterations;
    let log_every = cfg.trainer.log_every;
    let ck_every = cfg.trainer.checkpoint_every;
    let ck_root = a.out.join("checkpoints");
    let mut written = Vec::new();

    trainer.fit(x, |t, s| {
        if (log_every > 0 && s.iter % log_every == 0) || s.iter == total {
            serde_json::to_writer(&mut metrics, s)?;
            metrics.write_all(b"\n")?;
        }
        if ck_every > 0 && s.iter % ck_every == 0 && s.iter < total {
            let dir = ck_root.join(format!("iter-{:06}", s.iter));
            write_checkpoint(t, &meta, cfg, &dir)?;
            written.push(dir);
        }
        Ok(())
    })?;
    metrics.flush()?;

    let final_dir = a.out.join("final");
    write_checkpoint(&trainer, &meta, cfg, &final_dir)?;
    manifest.outputs.checkpoints = written;
    manifest.outputs.final_checkpoint = Some(final_dir.clone());
    println!(
        "trained {} iterations on {} examples; final checkpoint {}",
        trainer.iteration,
        x.rows(),
        final_dir.display()
    );
    Ok(())
}
