//! Prints the two sampling schedules side by side: the decaying
//! keep-probability used by scheduled sampling and the rising replace
//! gate plus similarity threshold used by the adaptive switch.
//!
//!     cargo run --example schedule_curves

use adapbridge::schedule::{adap_alpha, adap_beta, ss_decay_alpha, ScheduleParams};

fn main() -> adapbridge::Result<()> {
    let params = ScheduleParams::default();
    println!(
        "schedules with k = {}, w = {}, gamma = {}\n",
        params.k, params.w, params.gamma
    );
    println!("{:>5}  {:>12}  {:>12}  {:>12}", "epoch", "decay alpha", "adap alpha", "adap beta");
    for n in (0..=64).step_by(4) {
        let decay = ss_decay_alpha(n, params.k)?;
        let alpha = adap_alpha(n, &params);
        let beta = adap_beta(alpha, params.gamma)?;
        println!("{:>5}  {:>12.6}  {:>12.6}  {:>12.6}", n, decay, alpha, beta);
    }

    let mid = adap_alpha(params.w, &params);
    println!("\nat the warmup midpoint n = w = {}: alpha = {} (exactly 1/6: {})",
        params.w, mid, mid == 1.0 / 6.0);
    println!("early gate stays shut: alpha(0) = {:.6}", adap_alpha(0, &params));
    println!("late gate is open:     alpha(64) = {:.6}", adap_alpha(64, &params));
    Ok(())
}
