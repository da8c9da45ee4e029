//! Analytic vs central-difference gradients of the whole matcher.
//!
//! `cargo run --release --example gradient_check [seed] [max-per-group] [step] [free]`
//!
//! Passing `free` evaluates the perturbed losses without freezing the
//! piecewise branches, which shows how many entries straddle a kink.

use std::time::Instant;

use loopy_rnn::gradcheck::{reference_gradcheck, GradCheckOptions};

fn main() {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let max_per_group = args.next().map(|s| s.parse().expect("max-per-group"));
    let mut opts = GradCheckOptions { max_per_group, seed, ..Default::default() };
    if let Some(s) = args.next() {
        opts.step = s.parse().expect("step");
    }
    opts.freeze_branches = args.next().as_deref() != Some("free");
    let t = Instant::now();
    let report = reference_gradcheck(seed, &opts).expect("model builds");
    println!("{report}");
    println!("{:.1}s", t.elapsed().as_secs_f64());
}
