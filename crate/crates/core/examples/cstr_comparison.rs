//! Reactor benchmark with and without adaptation, plus the invariant report
//! of the adaptive run.
//!
//! ```text
//! cargo run --release --example cstr_comparison [steps]
//! ```

use tubempc::cli::{prepare, ExperimentConfig};
use tubempc::orchestrator::{check_invariants, run_closed_loop};

fn main() -> tubempc::Result<()> {
    let steps = std::env::args().nth(1).map_or(Ok(200), |s| s.parse()).expect("steps must be an integer");
    for adaptation in [true, false] {
        let mut cfg = ExperimentConfig::defaults(vec!["cstr".into()])?;
        cfg.steps = steps;
        cfg.adaptation = adaptation;
        let p = prepare(&cfg)?.remove(0);
        let log = run_closed_loop(&p.model, &p.plan, &p.loop_cfg)?;
        let x_e = p.model.x_eq();
        println!("adaptation {}", if adaptation { "on" } else { "off" });
        for r in log.rows.iter().step_by((steps / 10).max(1)) {
            let u = r.control.as_ref().map_or(f64::NAN, |c| c.u[0]);
            println!("  t={:<4} x=({:.4}, {:.4}) |x-x_e|={:.4} u={u:.4} V_m={:.3e}", r.t, r.x[0], r.x[1], (&r.x - x_e).norm(), r.v_m);
        }
        println!("  final |x-x_e| = {:.4e}", (log.final_state() - x_e).norm());
        if adaptation {
            print!("{}", check_invariants(&log, &p.model, &p.plan, &p.loop_cfg).to_text());
        }
    }
    Ok(())
}
