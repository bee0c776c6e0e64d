use clap::Parser;
use lc_core::gradcheck::run_suite;
use lc_core::{LcError, Result};

use super::Ctx;

#[derive(Parser, Debug)]
pub struct Args {
    /// Random seeds per op.
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,

    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
}

pub fn run(args: Args, _ctx: &Ctx) -> Result<()> {
    let outcomes = run_suite(args.seeds, args.step);
    println!(
        "{:<24} {:>12} {:>10} {:>6}",
        "op", "max_rel_err", "threshold", "result"
    );
    let mut all_ok = true;
    for o in &outcomes {
        let ok = o.passed();
        all_ok &= ok;
        println!(
            "{:<24} {:>12.3e} {:>10.0e} {:>6}",
            o.op,
            o.max_rel_err,
            o.threshold,
            if ok { "pass" } else { "FAIL" }
        );
    }
    if all_ok {
        Ok(())
    } else {
        Err(LcError::config("gradient check failed"))
    }
}
