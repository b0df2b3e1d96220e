//! Computes every evaluation metric on small hand-checkable inputs:
//! sentence BLEU with brevity penalty, corpus Distinct-n, the
//! averaged-highest BLEU over multi-reference sets, and perplexity.
//!
//!     cargo run --example metrics_report

use adapbridge::metrics::{ah_bleu, bleu, distinct_n, perplexity, BleuConfig};

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn main() -> adapbridge::Result<()> {
    let two = BleuConfig::order(2);

    let cand = words("the cat sat");
    let same = vec![words("the cat sat")];
    println!("BLEU-2 of a sentence against itself:        {:.4}", bleu(&cand, &same, &two)?);

    let longer = vec![words("the cat sat down")];
    let clipped = bleu(&cand, &longer, &two)?;
    println!("BLEU-2 of \"the cat sat\" vs a longer ref:    {:.4} (brevity penalized)", clipped);

    let repeats = vec![words("a a a a")];
    println!("Distinct-1 of \"a a a a\":                    {:.4}", distinct_n(&repeats, 1)?);

    // Two contexts; the metric takes each candidate's best single
    // reference, then averages across contexts.
    let candidates = vec![words("the cat sat"), words("dogs bark loudly")];
    let reference_sets = vec![
        vec![words("the cat sat"), words("a dog stood up")],
        vec![words("cats meow"), words("dogs bark quietly today")],
    ];
    let per_context_best: Vec<f64> = candidates
        .iter()
        .zip(&reference_sets)
        .map(|(c, refs)| {
            refs.iter()
                .map(|r| bleu(c, std::slice::from_ref(r), &two).unwrap())
                .fold(0.0, f64::max)
        })
        .collect();
    let averaged = ah_bleu(&candidates, &reference_sets, 2)?;
    println!(
        "AH-BLEU-2: per-context maxima {:.4} and {:.4}, mean {:.4}",
        per_context_best[0], per_context_best[1], averaged
    );
    assert!((averaged - (per_context_best[0] + per_context_best[1]) / 2.0).abs() < 1e-12);

    let vocab = 50usize;
    let tokens = 400usize;
    let uniform_nll = tokens as f64 * (vocab as f64).ln();
    println!(
        "perplexity of a uniform model over {} tokens:  {:.4}",
        vocab,
        perplexity(uniform_nll, tokens)?
    );
    Ok(())
}
