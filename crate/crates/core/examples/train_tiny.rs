//! Trains the tiny configuration on a small synthetic set and reports training
//! accuracy and held-out FPR95 as it goes. Training stops at the first epoch
//! whose training accuracy reaches 95%.
//!
//! `cargo run --release --example train_tiny [lr] [epochs] [lambda] [augment:0|1] [seed] [batch] [decay-interval]`

use std::time::Instant;

use loopy_rnn::data::{generate_synthetic, AugmentationSpec};
use loopy_rnn::evaluator::{evaluate, score_dataset};
use loopy_rnn::featurenet::FeatureConfig;
use loopy_rnn::metricnet::LoopyConfig;
use loopy_rnn::model::LoopyModel;
use loopy_rnn::trainer::{TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let lr: f64 = arg(0, "0.1").parse().unwrap();
    let epochs: u64 = arg(1, "200").parse().unwrap();
    let lambda: f64 = arg(2, "0.4").parse().unwrap();
    let augment = arg(3, "0") == "1";
    let seed: u64 = arg(4, "0").parse().unwrap();

    let train = generate_synthetic(8, 4, 16, seed);
    let test = generate_synthetic(25, 4, 16, seed + 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = LoopyModel::init(FeatureConfig::tiny(), LoopyConfig::new(6, 16, 0), &mut rng).unwrap();
    let cfg = TrainConfig {
        learning_rate: lr,
        batch_size: arg(5, "32").parse().unwrap(),
        max_epochs: epochs,
        lambda,
        augmentation: if augment { AugmentationSpec::all() } else { AugmentationSpec::none() },
        seed,
        decay_interval: arg(6, "1000").parse().unwrap(),
        ..TrainConfig::default()
    };
    let agg = cfg.aggregation();
    let before = evaluate(&model, &test, agg).unwrap();
    println!("untrained: test fpr95 {:.3} map {:.3}", before.fpr95, before.map);
    let start = Instant::now();
    let mut trainer = Trainer::new(model, cfg).unwrap();
    while trainer.epoch < epochs {
        let log = trainer.train_epoch(&train).unwrap();
        let scored = score_dataset(&trainer.model, &train, agg).unwrap();
        let acc = scored.iter().filter(|p| (p.score > 0.5) == p.label.is_match()).count() as f64 / scored.len() as f64;
        let loss = log.iter().map(|e| e.loss).sum::<f64>() / log.len() as f64;
        if trainer.epoch % 10 == 0 || acc >= 0.95 {
            println!(
                "epoch {:>4}  loss {loss:.4}  train acc {acc:.3}  {:.1}s",
                trainer.epoch,
                start.elapsed().as_secs_f64()
            );
        }
        if acc >= 0.95 {
            break;
        }
    }
    let after = evaluate(&trainer.model, &test, agg).unwrap();
    println!("trained: test fpr95 {:.3} map {:.3}", after.fpr95, after.map);
}
