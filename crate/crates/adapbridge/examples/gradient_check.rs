//! Verifies the analytic gradients of the full encoder-decoder against
//! central finite differences, parameter by parameter, in f64.
//!
//!     cargo run --example gradient_check

use adapbridge::model::{Model, ModelConfig};

fn loss(model: &Model<f64>, context: &[usize], response: &[usize]) -> f64 {
    let mut session = model.session(true, 0);
    let fwd = session
        .forward_teacher_batch(&[context], &[response])
        .expect("forward");
    session.graph.scalar_value(fwd.nll).expect("scalar")
}

fn main() -> adapbridge::Result<()> {
    let config = ModelConfig {
        vocab_size: 16,
        model_dim: 12,
        num_heads: 2,
        num_encoder_layers: 1,
        num_decoder_layers: 1,
        feedforward_dim: 24,
        max_sequence_length: 10,
        dropout_rate: 0.0,
    };
    let mut model: Model<f64> = Model::new(config, 41)?;
    let context = [5usize, 9, 12];
    let response = [7usize, 4, 11, 6];

    let mut session = model.session(true, 0);
    let fwd = session.forward_teacher_batch(&[&context], &[&response])?;
    session.graph.backward(fwd.nll)?;
    let analytic = session.param_gradients()?;
    drop(session);

    // Each element must satisfy |analytic - fd| < 1e-8 + 1e-5 * scale,
    // where scale is the larger gradient magnitude. The margin column is
    // the worst observed error over that bound; below 1 passes.
    let h = 1e-5;
    let names: Vec<String> = model.param_names().to_vec();
    let mut worst_margin = 0.0f64;
    let mut worst_name = String::new();
    println!("{:<16} {:>10} {:>12} {:>12}", "tensor", "elements", "max abs err", "margin");
    for (t, name) in names.iter().enumerate() {
        let len = analytic[t].len();
        let mut tensor_abs = 0.0f64;
        let mut tensor_margin = 0.0f64;
        for i in 0..len {
            let original = model.param_values_mut(name).expect("tensor")[i];
            model.param_values_mut(name).expect("tensor")[i] = original + h;
            let up = loss(&model, &context, &response);
            model.param_values_mut(name).expect("tensor")[i] = original - h;
            let down = loss(&model, &context, &response);
            model.param_values_mut(name).expect("tensor")[i] = original;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[t][i];
            let abs = (a - fd).abs();
            let bound = 1e-8 + 1e-5 * a.abs().max(fd.abs());
            tensor_abs = tensor_abs.max(abs);
            tensor_margin = tensor_margin.max(abs / bound);
        }
        println!("{:<16} {:>10} {:>12.3e} {:>12.3e}", name, len, tensor_abs, tensor_margin);
        if tensor_margin > worst_margin {
            worst_margin = tensor_margin;
            worst_name = name.clone();
        }
    }
    println!("\nworst margin {:.3e} of the allowed error bound, in {}", worst_margin, worst_name);
    assert!(worst_margin < 1.0, "gradients disagree with finite differences");
    println!("analytic gradients match central finite differences");
    Ok(())
}
