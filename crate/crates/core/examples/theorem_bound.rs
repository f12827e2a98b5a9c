//! Run the loop with a constructed weak-learner source and compare the
//! ensemble's sup-norm error against the convergence bound.

use bdistil::eval::verify_bound;
use bdistil::oracle::constructed_run;

fn main() -> bdistil::Result<()> {
    let n = 100;
    let mut errors = Vec::new();
    println!("{:>5} {:>10} {:>10} {:>10}  status", "T", "error", "bound", "appendix");
    for t in [8, 32, 128] {
        let run = constructed_run(n, 2, t, 1.0, 11)?;
        let report = verify_bound(&run.history.rows(), &run.ensemble, &run.x, &run.teacher_logits, 1.0)?;
        let appendix = report.appendix_bound.iter().cloned().fold(f64::INFINITY, f64::min);
        println!(
            "{t:>5} {:>10.5} {:>10.5} {:>10.5}  {:?}",
            report.measured_error, report.theorem_bound, appendix, report.status
        );
        errors.push(report.measured_error);
    }
    println!("error(128) / error(32) = {:.3}", errors[2] / errors[1]);
    Ok(())
}
