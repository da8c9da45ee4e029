//! Layer-by-layer activation shapes of both FeatureNet configurations, plus a
//! forward pass through the full network.

use std::time::Instant;

use loopy_rnn::data::generate_synthetic;
use loopy_rnn::featurenet::{extract_features, normalize_patch, FeatureConfig, FeatureNetParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    for cfg in [FeatureConfig::full(), FeatureConfig::tiny()] {
        println!("{} ({}x{} input)", cfg.kind.name(), cfg.input_size, cfg.input_size);
        for [c, h, w] in cfg.activation_shapes() {
            println!("  {h:>3} x {w:>3} x {c:>3}");
        }
        println!("  output dim {}", cfg.output_dim());
        let params = FeatureNetParams::zeros(cfg.clone());
        for (name, t) in params.named_tensors() {
            println!("  {name:<22} {:?}", t.shape());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = FeatureNetParams::init(FeatureConfig::full(), &mut rng);
    let patch = generate_synthetic(2, 1, 64, 0).store.patch(0);
    let x = normalize_patch(&patch.pixels, patch.height, patch.width).unwrap();
    let t = Instant::now();
    let f = extract_features(&x, &params).unwrap();
    let nonzero = f.data().iter().filter(|&&v| v != 0.0).count();
    println!(
        "full forward: {} features, {nonzero} non-zero, {:.2}s",
        f.len(),
        t.elapsed().as_secs_f64()
    );
}
