//! Trains a tiny model on one (context, response) pair until greedy
//! decoding reproduces the response exactly. A quick end-to-end check
//! that the forward pass, gradients, and optimizer cooperate.
//!
//!     cargo run --example overfit_single_pair

use adapbridge::model::{Model, ModelConfig};
use adapbridge::tensor::AdamState;

fn main() -> adapbridge::Result<()> {
    let config = ModelConfig {
        vocab_size: 32,
        model_dim: 24,
        num_heads: 2,
        num_encoder_layers: 1,
        num_decoder_layers: 1,
        feedforward_dim: 48,
        max_sequence_length: 12,
        dropout_rate: 0.0,
    };
    let mut model: Model<f32> = Model::new(config, 17)?;
    let mut adam = AdamState::new(&model.param_lengths(), 5e-3);

    let context = [9usize, 21, 5];
    let response = [14usize, 30, 7, 22, 11];

    for step in 0..200 {
        let mut session = model.session(true, 0);
        let fwd = session.forward_teacher_batch(&[&context], &[&response])?;
        let nll = session.graph.scalar_value(fwd.nll)?;
        session.graph.backward(fwd.nll)?;
        let grads = session.param_gradients()?;
        drop(session);
        model.apply_adam(&grads, &mut adam)?;
        if step % 25 == 0 || step == 199 {
            println!("step {:>3}: nll per token {:.4}", step, nll / fwd.token_count as f32);
        }
    }

    let decoded = model.generate_greedy(&context, 10)?;
    println!("\ntarget response: {:?}", response);
    println!("greedy decode:   {:?}", decoded);
    assert_eq!(decoded, response, "the model should memorize one pair");
    println!("memorized after 200 optimizer steps");
    Ok(())
}
