//! Runs the adaptive switch strategy end to end on a synthetic corpus and
//! prints the epoch log: the gate stays shut while the threshold warms up,
//! then generated tokens start replacing gold ones.
//!
//!     cargo run --example train_adapbridge

use adapbridge::corpus::SynthParams;
use adapbridge::model::ModelConfig;
use adapbridge::sampler::Strategy;
use adapbridge::schedule::ScheduleParams;
use adapbridge::trainer::{train, DataSource, EpochLog, TrainConfig};

fn main() -> adapbridge::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = TrainConfig {
        model: ModelConfig {
            vocab_size: 128,
            model_dim: 32,
            num_heads: 2,
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            feedforward_dim: 64,
            max_sequence_length: 14,
            dropout_rate: 0.0,
        },
        schedule: ScheduleParams::new(5.0, 12, 0.9)?,
        strategy: Strategy::Adapbridge,
        epochs: 16,
        batch_tokens: 512,
        learning_rate: 2e-3,
        seed: 5,
        checkpoint: dir.path().join("adap.ckpt"),
        data: DataSource::Synth(SynthParams {
            num_contexts: 120,
            responses_per_context: 3,
            response_len: (5, 7),
            seed: 8,
            ..SynthParams::default()
        }),
        ..TrainConfig::default()
    };

    let outcome = train(&config)?;
    println!("{}", EpochLog::tsv_header());
    for row in &outcome.logs {
        println!("{}", row.to_tsv_row());
    }

    let early: f64 = outcome.logs[..4].iter().map(|r| r.replaced_fraction).sum::<f64>() / 4.0;
    let late = outcome.logs.last().unwrap().replaced_fraction;
    println!("\nmean replaced fraction over the first 4 epochs: {:.4}", early);
    println!("replaced fraction in the final epoch:           {:.4}", late);
    println!("training nll fell from {:.3} to {:.3}",
        outcome.logs[0].mean_train_nll,
        outcome.logs.last().unwrap().mean_train_nll);
    if let Some(ppl) = outcome.best_val_ppl {
        println!("best validation perplexity: {:.2}", ppl);
    }
    Ok(())
}
