//! Scratch probe: evaluates existing study checkpoints on their test splits.

use adapbridge::corpus::SynthParams;
use adapbridge::model::{Model, ModelConfig};
use adapbridge::trainer::{prepare_data, DataSource, EvalOptions, TrainConfig};

fn study_config(seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            vocab_size: 200,
            model_dim: 48,
            num_heads: 4,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            feedforward_dim: 96,
            max_sequence_length: 12,
            dropout_rate: 0.0,
        },
        seed,
        batch_tokens: 4096,
        learning_rate: 2e-3,
        data: DataSource::Synth(SynthParams {
            num_contexts: 2000,
            responses_per_context: 4,
            context_pool: 142,
            context_len: 4,
            common_pool: 30,
            stem_len: 2,
            specific_pool: 24,
            response_len: (5, 8),
            hot_stems: 4,
            hot_frac: 0.5,
            seed: 101,
        }),
        ..TrainConfig::default()
    }
}

fn main() -> adapbridge::Result<()> {
    let opts = EvalOptions { greedy: true, max_decode_len: 12, batch_tokens: 4096, ..EvalOptions::default() };
    println!("ckpt\tseed\tsplit\tPPL\tDIS-1\tDIS-2\tAH-BLEU-2");
    for arg in std::env::args().skip(1) {
        let (name, seed) = arg.split_once(':').expect("NAME:SEED");
        let seed: u64 = seed.parse().expect("seed number");
        let cfg = study_config(seed);
        let data = prepare_data(&cfg)?;
        let (model, _vocab) = Model::<f32>::load(format!("/tmp/clismoke/{}.ckpt", name))?;
        for (split, groups) in [("train", &data.train_groups), ("test", &data.test)] {
            let report = adapbridge::trainer::evaluate(&model, groups, &opts)?;
            println!(
                "{}\t{}\t{}\t{:.3}\t{:.4}\t{:.4}\t{:.4}",
                name, seed, split, report.ppl, report.distinct1, report.distinct2, report.ah_bleu2
            );
        }
    }
    Ok(())
}
