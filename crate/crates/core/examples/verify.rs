//! Checks the identifiability assumptions on the benchmark's own mixer,
//! comparing the true latents with those recovered by the exact inverse.
//!
//! `cargo run --release --example verify`

use icon::numerics::RngStream;
use icon::synthdata::{generate, SynthSpec};
use icon::theory::{verify_theorem, VerifyConfig};

fn main() -> icon::Result<()> {
    let bench = generate(
        &SynthSpec {
            tasks: 1,
            n_per_task: 1000,
            ..SynthSpec::default()
        },
        3,
    )?;
    let task = bench.full_task(1)?;
    let z = task.z_true.as_ref().expect("synthetic data has latents");
    let recovered = bench.mixer.inverse(&task.x)?;
    let cfg = VerifyConfig {
        n: 1000,
        ..VerifyConfig::default()
    };
    let g = bench.mixer.point_map();
    let report = verify_theorem(&g, z, &recovered, &task.x, &cfg, &mut RngStream::new(3, 0))?;
    println!("cloud distance        {:.2e}", report.manifold_distance);
    println!("intersection points   {}", report.intersection_size);
    println!("connected             {} / {}", report.connected_pta, report.connected_ata);
    println!("line-integral order   {:.2}", report.line_integral.observed_order);
    println!("Jacobian bound slack  {:?}", report.assumption5.slack);
    println!("assumptions           {:?}", report.assumptions);
    for f in &report.failures {
        println!("  {f}");
    }
    Ok(())
}
