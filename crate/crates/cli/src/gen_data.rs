use std::path::PathBuf;

use clap::Args;
use jebm::data::save_dataset;
use crate::common;

use crate::CmdResult;

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Run config whose [data] section describes the dataset.
    #[arg(long)]
    pub config: PathBuf,
    /// Output file (`.ebmd` or `.csv`).
    #[arg(long)]
    pub out: PathBuf,
    /// Override the number of examples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Override the generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(a: GenDataArgs) -> CmdResult {
    let cfg = common::read_config(&a.config)?;
    let mut data = cfg.data.clone();
    if let Some(n) = a.n {
        data.n = n;
    }
    if let Some(s) = a.seed {
        data.seed = Some(s);
    }
    let ds = data.build(cfg.trainer.seed)?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let csv = a.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if csv && ds.labels().is_some() {
        eprintln!("warning: CSV holds no labels; write .ebmd to keep them");
    }
    save_dataset(&ds, &a.out)?;
    println!("wrote {} examples of shape {:?} to {}", ds.n(), ds.shape(), a.out.display());
    Ok(())
}
