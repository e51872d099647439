//! Trains both flows over the task sequence and saves the checkpoints.
//!
//! `cargo run --release --example train -- [out_dir]`

use icon::synthdata::{generate, SynthSpec};
use icon::trainer::{run_sequence, save_run, FlowConfig, TrainConfig};

fn main() -> icon::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/example-run".into());
    let bench = generate(
        &SynthSpec {
            tasks: 3,
            n_per_task: 1000,
            ..SynthSpec::default()
        },
        1,
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
    let state = run_sequence(&bench.train, &cfg, &flow, None, 1)?;
    for h in &state.history {
        println!(
            "task {}: final stage-1 NLL pta {:.3} ata {:.3}; KL {:.4} -> {:.4}",
            h.task,
            h.stage1_pta.last().copied().unwrap_or(f64::NAN),
            h.stage1_ata.last().copied().unwrap_or(f64::NAN),
            h.kl_entry.unwrap_or(f64::NAN),
            h.kl_exit.unwrap_or(f64::NAN),
        );
    }
    save_run(&state, &cfg, &flow, 1, out.as_ref())?;
    println!("checkpoints in {out}");
    Ok(())
}
