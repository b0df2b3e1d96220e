//! Shows beam search against greedy decoding on a briefly trained model:
//! width 1 reproduces greedy token for token, and wider beams never score
//! worse under the length-normalized log-probability.
//!
//!     cargo run --example beam_decode

use adapbridge::sampler::Strategy;
use adapbridge::trainer::{train, DataSource, TrainConfig};
use adapbridge::corpus::SynthParams;
use adapbridge::model::ModelConfig;

fn main() -> adapbridge::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = TrainConfig {
        model: ModelConfig {
            vocab_size: 128,
            model_dim: 24,
            num_heads: 2,
            num_encoder_layers: 1,
            num_decoder_layers: 1,
            feedforward_dim: 48,
            max_sequence_length: 12,
            dropout_rate: 0.0,
        },
        strategy: Strategy::Teacher,
        epochs: 10,
        seed: 23,
        checkpoint: dir.path().join("beam.ckpt"),
        data: DataSource::Synth(SynthParams {
            num_contexts: 60,
            responses_per_context: 2,
            response_len: (4, 6),
            seed: 2,
            ..SynthParams::default()
        }),
        ..TrainConfig::default()
    };
    println!("training a toy teacher-forced model for {} epochs...", config.epochs);
    let outcome = train(&config)?;
    let model = outcome.model;

    let context = &outcome.test.first().unwrap_or(&outcome.valid[0]).context;
    println!("context ids: {:?}\n", context);

    let max_len = 8;
    let penalty = 0.7;
    let (greedy, greedy_score) = model.generate_greedy_scored(context, max_len, penalty)?;
    println!("greedy        : score {:+.4}  {:?}", greedy_score, greedy);
    for width in [1usize, 2, 3, 5, 8] {
        let (tokens, score) = model.generate_beam_scored(context, width, max_len, penalty)?;
        println!("beam width {:>2} : score {:+.4}  {:?}", width, score, tokens);
        if width == 1 {
            assert_eq!(tokens, greedy, "width-1 beam must equal greedy");
        }
        assert!(score >= greedy_score - 1e-12, "beam must never lose to greedy");
    }
    println!("\nwidth 1 equals greedy exactly; wider beams only improve the score");
    Ok(())
}
