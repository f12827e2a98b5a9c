//! The weight game on its own: exponential updates, per-label edges, and the
//! closed form that recovers the same state from the residual history.

use bdistil::game::{md_update, recompute_from_history, weak_learning_check, WeightState};
use bdistil::rng::RngStream;
use bdistil::Mat;

fn main() -> bdistil::Result<()> {
    let (n, labels, eta) = (6, 2, 0.5);
    let mut rng = RngStream::new(3);
    let start = WeightState::init_uniform(n, labels)?;
    let mut state = start.clone();
    let mut residuals = Vec::new();
    for t in 1..=4 {
        let l = Mat::from_vec(n, labels, (0..n * labels).map(|_| rng.uniform_in(-1.0, 1.0)).collect())?;
        let outcome = weak_learning_check(&state, &l, 0.0)?;
        let (next, rec) = md_update(&state, &l, eta)?;
        println!("round {t}: {outcome:?}, edge {:?}, z {:?}", rec.edge_gamma, rec.z);
        state = next;
        residuals.push(l);
    }
    println!("column mass {:?}", state.column_mass());
    let closed = recompute_from_history(&start, &residuals, &vec![eta; residuals.len()])?;
    let diff = closed
        .kplus
        .sub(&state.kplus)?
        .max_abs()
        .max(closed.kminus.sub(&state.kminus)?.max_abs());
    println!("closed form vs iterated: max difference {diff:.2e}");
    println!("K+ - K-:");
    for row in state.signed().to_rows() {
        println!("  {row:+.4?}");
    }
    Ok(())
}
