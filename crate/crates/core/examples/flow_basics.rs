//! A volume-preserving flow on its own: sampling, inversion, likelihood,
//! posterior, and a finite-difference check of the likelihood gradient.
//!
//! `cargo run --release --example flow_basics`

use icon::autodiff::grad_check;
use icon::flow::init_flow;
use icon::numerics::RngStream;
use icon::objectives::tape_mean_nll;

fn main() -> icon::Result<()> {
    let mut rng = RngStream::new(0, 0);
    let mut flow = init_flow(6, 3, 4, 16, &mut rng)?;
    // Move away from the identity-like initialisation.
    for v in flow.params.values_mut() {
        *v += 0.2 * rng.normal();
    }

    let z = rng.normal_matrix(1000, 6);
    let (x, log_scales) = flow.forward_with_log_scales(&z)?;
    let back = flow.inverse(&x)?;
    println!("round-trip error      {:.2e}", back.max_abs_diff(&z));
    println!("max |log-det|         {:.2e}", log_scales.iter().fold(0.0_f64, |m, v| m.max(v.abs())));

    let ll = flow.log_likelihood(&x)?;
    println!("mean log-likelihood   {:.4}", ll.iter().sum::<f64>() / ll.len() as f64);
    println!("entropy of N(0, I_6)  {:.4}", -3.0 * (1.0 + (2.0 * std::f64::consts::PI).ln()));

    let post = flow.posterior(&x.select_rows(&[0, 1]))?;
    println!("posterior mean, row 0 {:?}", post.mu.row(0));
    println!("posterior sigma       {:?}", flow.sigma());

    let arch = flow.arch.clone();
    let batch = x.select_rows(&(0..64).collect::<Vec<_>>());
    let worst = grad_check(
        |t, s, p| tape_mean_nll(&arch, t, s, p, &batch),
        &flow.params,
        20,
        &mut rng,
    )?;
    println!("gradient check        worst relative error {worst:.2e}");
    Ok(())
}
