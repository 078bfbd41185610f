use std::time::Instant;

use clap::Args;

use crate::common::parse_list;
use crate::oracles::{finite_difference_suite, quadrature_check, Check, FdOptions, QuadratureOptions};
use crate::{CmdResult, Failure};

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Latent layer widths, bottom first, e.g. "2,3,2". "1,1" also runs the
    /// quadrature check of the learning gradient.
    #[arg(long, default_value = "2,3,2")]
    pub dims: String,
    /// Seed for the random models and evaluation points.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random points per finite-difference check.
    #[arg(long, default_value_t = 20)]
    pub points: usize,
    /// Relative-error bound for the finite-difference checks.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Posterior and prior samples for the quadrature check.
    #[arg(long, default_value_t = 100_000)]
    pub quadrature_samples: usize,
    /// Perturb the analytic gradients so every check fails.
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

fn report(checks: &[Check]) -> usize {
    let mut failed = 0;
    for c in checks {
        let tag = if c.passed() { "ok  " } else { "FAIL" };
        println!("{} {:<64} {:.3e} (< {:.0e})", tag, c.name, c.error, c.tol);
        failed += usize::from(!c.passed());
    }
    failed
}

pub fn run(a: GradcheckArgs) -> CmdResult {
    let dims: Vec<usize> = parse_list(&a.dims, "--dims")?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(crate::usage(format!("--dims needs positive widths, got {:?}", a.dims)));
    }
    if a.points == 0 {
        return Err(crate::usage("--points must be at least 1"));
    }
    let t = Instant::now();
    let fd = FdOptions {
        dims: dims.clone(),
        seed: a.seed,
        points: a.points,
        tol: a.tol,
        corrupt: a.corrupt,
        ..FdOptions::default()
    };
    let mut failed = report(&finite_difference_suite(&fd)?);
    if dims == [1, 1] {
        let q = QuadratureOptions {
            seed: a.seed,
            samples: a.quadrature_samples,
            corrupt: a.corrupt,
            ..QuadratureOptions::default()
        };
        println!("quadrature check of the learning gradient:");
        failed += report(&quadrature_check(&q)?);
    }
    println!("finished in {:.1} s", t.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(Failure::Check(format!("{} oracle check(s) over tolerance", failed)));
    }
    Ok(())
}
