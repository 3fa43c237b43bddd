//! Adjoint gradient against finite differences, and a short-horizon solve
//! against brute-force enumeration of a control grid.
//!
//! ```text
//! cargo run --release --example solver_checks
//! ```

use nalgebra::{DMatrix, DVector};
use tubempc::dynamics::{wingrock_model, Bounds};
use tubempc::trajopt::{gradient_check, rollout, OcpSolver, OcpSpec, SolverSettings, Terminal};

fn main() -> tubempc::Result<()> {
    let model = wingrock_model(1)?;
    let dynamics = model.dynamics().as_ref();
    let x0 = DVector::from_row_slice(&[0.1, -0.05]);
    let spec = OcpSpec::regulate(
        dynamics,
        x0.clone(),
        2,
        &DVector::zeros(2),
        &DVector::zeros(1),
        DMatrix::identity(2, 2),
        DMatrix::identity(1, 1) * 0.1,
        Bounds::symmetric(1.0, 1)?,
    )
    .with_terminal(Terminal::Cost { target: DVector::zeros(2), weight: DMatrix::identity(2, 2) * 10.0 });

    let guess = vec![DVector::from_element(1, 0.3), DVector::from_element(1, -0.2)];
    println!("gradient check: max relative error {:.3e}", gradient_check(&spec, &guess, 0.0)?);

    let sol = OcpSolver::new(SolverSettings::default())?.solve(&spec, None)?;
    println!("solver: cost {:.9} in {} iterations, u = ({:.5}, {:.5})", sol.cost, sol.iterations, sol.controls[0][0], sol.controls[1][0]);

    let points = 401;
    let level = |k: usize| DVector::from_element(1, -1.0 + 2.0 * k as f64 / (points - 1) as f64);
    let mut best = (f64::INFINITY, 0, 0);
    for a in 0..points {
        for b in 0..points {
            let controls = [level(a), level(b)];
            let xs = rollout(dynamics, &x0, &controls)?;
            let cost: f64 = (0..2).map(|i| xs[i].norm_squared() + 0.1 * controls[i][0].powi(2)).sum::<f64>() + 10.0 * xs[2].norm_squared();
            if cost < best.0 {
                best = (cost, a, b);
            }
        }
    }
    println!("grid:   cost {:.9} at u = ({:.5}, {:.5})", best.0, level(best.1)[0], level(best.2)[0]);
    println!("solver - grid = {:.3e}", sol.cost - best.0);
    Ok(())
}
