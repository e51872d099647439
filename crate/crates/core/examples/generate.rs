//! Builds the synthetic benchmark, writes it to disk and reads it back.
//!
//! `cargo run --release --example generate -- [out_dir]`

use icon::synthdata::{generate, read_benchmark, write_benchmark, SynthSpec};

fn main() -> icon::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example-data".into());
    let spec = SynthSpec::fast();
    let bench = generate(&spec, 0)?;
    write_benchmark(&bench, out.as_ref())?;
    let back = read_benchmark(out.as_ref())?;
    for (tr, te) in back.train.iter().zip(&back.test) {
        let z = tr.z_true.as_ref().expect("synthetic data has latents");
        let means = z.column_means();
        println!(
            "task {}: {} train / {} test rows, variant latent means {:.2?}",
            tr.task_id,
            tr.len(),
            te.len(),
            &means[spec.d_inv..spec.d_inv + 3]
        );
    }
    println!("mixer hash {}", back.mixer.hash());
    println!("written to {out}");
    Ok(())
}
