//! Two wing-rock agents with different disturbance weights, simulated in
//! parallel, compared against the MPC-only baseline.
//!
//! ```text
//! cargo run --release --example wingrock_agents
//! ```

use tubempc::cli::{cmd_compare, ExperimentConfig};

fn main() -> tubempc::Result<()> {
    let cfg: ExperimentConfig = "model = wingrock:1,wingrock:2\nsteps = 400\n".parse()?;
    let out = std::env::temp_dir().join("tubempc_wingrock");
    let outcome = cmd_compare(&cfg, &out, true)?;
    print!("{}", outcome.table());
    for run in &outcome.adaptive {
        let tail = run.log.rows.last().expect("non-empty log");
        println!("{}: final |K~|_F = {:.3e}, residual = {:.3e}", run.selector, tail.k_tilde_norm, tail.residual);
    }
    println!("plots and logs in {}", out.display());
    Ok(())
}
