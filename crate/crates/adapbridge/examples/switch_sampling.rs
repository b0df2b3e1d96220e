//! Walks through one adaptive switch decision by hand: the cosine
//! similarity matrix between generated and gold tokens, the per-row
//! maxima, the threshold mask, and the mixed decoder input.
//!
//!     cargo run --example switch_sampling

use adapbridge::sampler::{mix, protect_special, sim_matrix, switch_mask};

fn main() -> adapbridge::Result<()> {
    // A hand-built 9-token embedding table, 4 dims per token. Token 7
    // points exactly the way token 4 does (a scaled synonym), token 8 is
    // a looser neighbor of token 5, and token 3 points away from all of
    // the gold tokens.
    let dim = 4;
    let emb: Vec<f64> = vec![
        0.0, 0.0, 0.0, 0.0, // pad
        0.1, 0.0, 0.0, 0.0, // bos
        0.0, 0.1, 0.0, 0.0, // eos
        1.0, -1.0, 0.0, 0.0, // unk: unrelated to the gold tokens below
        1.0, 1.0, 0.0, 0.0, // 4
        0.0, 0.0, 0.0, 1.0, // 5
        0.0, 1.0, 1.0, 0.0, // 6
        2.0, 2.0, 0.0, 0.0, // 7: token 4 scaled, cosine 1 with it
        0.5, 0.0, 0.0, 1.0, // 8: leans toward 5, cosine just under 0.9
    ];

    let gold = [4usize, 5, 6];
    let generated = [7usize, 8, 3];
    let sim = sim_matrix(&generated, &gold, &emb, dim)?;

    println!("gold tokens:      {:?}", gold);
    println!("generated tokens: {:?}\n", generated);
    println!("similarity matrix (rows = generated, cols = gold):");
    for i in 0..generated.len() {
        let row: Vec<String> = (0..gold.len()).map(|j| format!("{:+.3}", sim.entry(i, j))).collect();
        println!("  gen {} -> [{}]  row max {:+.3}", generated[i], row.join(", "), sim.row_max(i));
    }

    for beta in [0.5, 0.9, 0.999] {
        let mut mask = switch_mask(&sim, beta)?;
        protect_special(&mut mask, &gold);
        let mixed = mix(&generated, &gold, &mask)?;
        println!(
            "\nbeta = {:>5}: mask {:?} -> decoder input {:?} ({} of {} positions replaced)",
            beta,
            mask.0,
            mixed.tokens,
            mixed.replaced_count(),
            gold.len()
        );
    }
    println!("\nhigher beta admits fewer generated tokens: the loose neighbor");
    println!("passes only the 0.5 threshold, while the scaled synonym (cosine 1");
    println!("with its gold counterpart) survives every threshold below 1.");
    Ok(())
}
