//! Continual classification on synthetic embeddings, with and without the
//! KL alignment stage.
//!
//! `cargo run --release --example classify -- [seed]`

use icon::classify::{continual_classify, synth_embeddings, SynthEmbedSpec};
use icon::trainer::{FlowConfig, TrainConfig};

fn main() -> icon::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("integer seed"));
    let ds = synth_embeddings(&SynthEmbedSpec::default(), seed)?;
    let flow = FlowConfig {
        n_blocks: 2,
        width: 32,
        latent_dim: None,
    };
    let cfg = TrainConfig {
        epochs_stage1: 10,
        epochs_stage2: 5,
        batch_size: 128,
        replay_size: 200,
        ..TrainConfig::default()
    };
    for kl in [false, true] {
        let (report, _) = continual_classify(&ds, &TrainConfig { kl, ..cfg.clone() }, &flow, seed)?;
        let per_task: Vec<String> = report.per_task.iter().map(|a| format!("{:.2}", a)).collect();
        println!("kl {kl:5}: average {:.3}, per task [{}]", report.average, per_task.join(", "));
    }
    Ok(())
}
