//! Small grid over node count N and hidden size D on synthetic data, printing
//! held-out FPR95 for each setting. Mirrors what shell loops over `loopy
//! train` and `loopy eval` do at larger scale.
//!
//! `cargo run --release --example sweep [epochs]`

use loopy_rnn::data::{generate_synthetic, AugmentationSpec};
use loopy_rnn::evaluator::evaluate;
use loopy_rnn::featurenet::FeatureConfig;
use loopy_rnn::metricnet::LoopyConfig;
use loopy_rnn::model::LoopyModel;
use loopy_rnn::trainer::{train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let epochs = std::env::args().nth(1).map_or(20, |s| s.parse().expect("epochs"));
    let train_ds = generate_synthetic(8, 4, 16, 1);
    let test_ds = generate_synthetic(10, 4, 16, 2);
    println!("{:>3} {:>4} {:>8} {:>8}", "N", "D", "fpr95", "mAP");
    for n in [4, 6, 8, 10] {
        for d in [8, 16, 32] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let model = LoopyModel::init(FeatureConfig::tiny(), LoopyConfig::new(n, d, 0), &mut rng).unwrap();
            let cfg = TrainConfig {
                learning_rate: 0.2,
                batch_size: 8,
                max_epochs: epochs,
                augmentation: AugmentationSpec::none(),
                ..TrainConfig::default()
            };
            let (ck, _) = train(&train_ds, model, &cfg).unwrap();
            let r = evaluate(&ck.model, &test_ds, cfg.aggregation()).unwrap();
            println!("{n:>3} {d:>4} {:>8.3} {:>8.3}", r.fpr95, r.map);
        }
    }
}
