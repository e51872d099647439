//! Paired with/without-KL runs on the synthetic benchmark and the resulting
//! latent RMSE table.
//!
//! `cargo run --release --example table1 -- [seed] [epochs_stage1] [epochs_stage2]`

use icon::eval::table1;
use icon::synthdata::{generate, SynthSpec};
use icon::trainer::{run_sequence, FlowConfig, TrainConfig};

fn main() -> icon::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let seed = args.first().copied().unwrap_or(0);
    let cfg = TrainConfig {
        epochs_stage1: args.get(1).copied().unwrap_or(30) as usize,
        epochs_stage2: args.get(2).copied().unwrap_or(40) as usize,
        lr_stage2: Some(5e-4),
        replay_size: 100,
        batch_size: 256,
        ..TrainConfig::default()
    };
    let flow = FlowConfig {
        n_blocks: 4,
        width: 32,
        latent_dim: None,
    };
    let bench = generate(&SynthSpec::fast(), seed)?;
    let with_kl = run_sequence(&bench.train, &cfg, &flow, None, seed)?;
    let without_kl = run_sequence(&bench.train, &TrainConfig { kl: false, ..cfg.clone() }, &flow, None, seed)?;
    for h in &with_kl.history {
        println!(
            "task {}: KL {:.4} -> {:.4}, alignment {:.3} -> {:.3}",
            h.task,
            h.kl_entry.unwrap_or(f64::NAN),
            h.kl_exit.unwrap_or(f64::NAN),
            h.alignment_entry.unwrap_or(f64::NAN),
            h.alignment_exit.unwrap_or(f64::NAN)
        );
    }
    let t = table1(&with_kl.bank, &without_kl.bank, &bench.train, &bench.test)?;
    println!("            PTA      ATA");
    println!("w/o KL   {:.4}   {:.4}", t.without_kl.pta, t.without_kl.ata);
    println!("w/  KL   {:.4}   {:.4}", t.with_kl.pta, t.with_kl.ata);
    println!("ATA improvement {:.1}%", 100.0 * t.ata_improvement());
    Ok(())
}
