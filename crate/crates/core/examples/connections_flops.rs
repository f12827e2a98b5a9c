//! Class expansion with each connection kind and its analytic FLOP cost.

use bdistil::learner::{expand_class, init_params, mlp_spec, ConnectionKind};
use bdistil::rng::RngStream;
use bdistil::Mat;

fn main() -> bdistil::Result<()> {
    let base = mlp_spec(&[32, 16, 16, 2])?;
    let mut rng = RngStream::new(0);
    let first = init_params(&expand_class(&base, ConnectionKind::None, 0, &[])?, &mut rng)?;
    let x = Mat::from_vec(4, 32, rng.gaussian(128))?;
    let tap = first.forward_with_tap(&x, None)?;
    println!("{:<13} {:>7} {:>9} {:>9}", "kind", "flops", "overhead", "percent");
    for kind in [
        ConnectionKind::None,
        ConnectionKind::ResidualAdd,
        ConnectionKind::DenseConcat,
        ConnectionKind::Delta,
    ] {
        let class = expand_class(&base, kind, 1, std::slice::from_ref(&first))?;
        let member = init_params(&class, &mut rng.split(1))?;
        let src = class
            .connection
            .is_active()
            .then(|| &tap.outputs[class.connection.source_layer]);
        let logits = member.forward_with_tap(&x, src)?.into_logits();
        let overhead = class.connection.overhead_flops();
        println!(
            "{:<13} {:>7} {:>9} {:>8.3}%  logits {:?}",
            format!("{kind:?}"),
            class.flops(),
            overhead,
            100.0 * overhead as f64 / class.flops() as f64,
            logits.shape()
        );
    }
    Ok(())
}
