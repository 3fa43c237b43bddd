//! Offline reference plans for both benchmarks, written as CSV.
//!
//! ```text
//! cargo run --release --example reference_governor [out_dir]
//! ```

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use tubempc::cli::ExperimentConfig;
use tubempc::governor::solve_reference;

fn main() -> tubempc::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out".into()));
    std::fs::create_dir_all(&out)?;
    for selector in ["cstr", "wingrock:1", "wingrock:2"] {
        let cfg = ExperimentConfig::defaults(vec![selector.to_string()])?;
        let model = cfg.build_model(selector)?;
        let x0 = cfg.initial_state(selector)?;
        let plan = solve_reference(&model, &x0, &cfg.governor_config(&model))?;
        let n = plan.horizon();
        let path = out.join(format!("plan_{}.csv", selector.replace(':', "")));
        plan.write_csv(BufWriter::new(File::create(&path)?))?;
        println!(
            "{selector:<11} N={n:<4} x0={:?} x_N={:?} defect={:.2e} -> {}",
            x0.as_slice(),
            plan.state(n).as_slice(),
            plan.dynamics_defect(&model)?,
            path.display()
        );
    }
    Ok(())
}
