//! Scores a freshly trained model bank and exports the latent scatter plot.
//!
//! `cargo run --release --example evaluate -- [out_dir]`

use icon::eval::{evaluate_bank, export_scatter, write_csv, write_svg};
use icon::synthdata::{generate, SynthSpec};
use icon::trainer::{run_sequence, FlowConfig, TrainConfig};

fn main() -> icon::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/example-eval".into()));
    let bench = generate(
        &SynthSpec {
            tasks: 2,
            n_per_task: 1000,
            ..SynthSpec::default()
        },
        2,
    )?;
    let cfg = TrainConfig {
        epochs_stage1: 10,
        epochs_stage2: 10,
        lr_stage2: Some(5e-4),
        replay_size: 100,
        ..TrainConfig::default()
    };
    let flow = FlowConfig {
        n_blocks: 4,
        width: 32,
        latent_dim: None,
    };
    let state = run_sequence(&bench.train, &cfg, &flow, None, 2)?;
    let m = evaluate_bank(&state.bank, &bench.train, &bench.test)?;
    println!("latent RMSE   pta {:.4}  ata {:.4}", m.rmse.pta, m.rmse.ata);
    println!("forgetting    {:.4} nats", m.forgetting);
    println!("alignment     {:.3}", m.alignment_mean);
    if let Some(r2) = m.recovery_r2 {
        println!("recovery R²   {r2:.3}");
    }

    let full: Vec<_> = (1..=2).map(|t| bench.full_task(t)).collect::<icon::Result<_>>()?;
    let scatter = export_scatter(&state.bank, &full, 500, 2)?;
    std::fs::create_dir_all(&out)?;
    write_csv(&scatter, &out.join("scatter.csv"))?;
    write_svg(&scatter, &out.join("scatter.svg"))?;
    println!("scatter ({} points) in {}", scatter.points.len(), out.display());
    Ok(())
}
