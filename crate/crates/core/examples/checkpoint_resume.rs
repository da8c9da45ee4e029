//! Interrupting training, saving a checkpoint and resuming from it gives the
//! same parameters as an uninterrupted run.

use loopy_rnn::data::generate_synthetic;
use loopy_rnn::featurenet::FeatureConfig;
use loopy_rnn::metricnet::LoopyConfig;
use loopy_rnn::model::LoopyModel;
use loopy_rnn::trainer::{Checkpoint, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let ds = generate_synthetic(4, 2, 16, 3);
    let model = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        LoopyModel::init(FeatureConfig::tiny(), LoopyConfig::new(6, 8, 0), &mut rng).unwrap()
    };
    let cfg = TrainConfig { learning_rate: 0.1, batch_size: 4, max_epochs: 4, seed: 3, ..Default::default() };

    let mut straight = Trainer::new(model(), cfg.clone()).unwrap();
    straight.run(&ds, |_, _| Ok(())).unwrap();

    let path = std::env::temp_dir().join("loopy-resume.lpmc");
    let mut first = Trainer::new(model(), cfg).unwrap();
    for _ in 0..2 {
        first.train_epoch(&ds).unwrap();
    }
    first.checkpoint().save(&path).unwrap();
    let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
    resumed.run(&ds, |t, log| {
        println!("epoch {} done, last loss {}", t.epoch, log.last().unwrap().loss);
        Ok(())
    })
    .unwrap();

    let same = straight.checkpoint().to_bytes() == resumed.checkpoint().to_bytes();
    println!("checkpoint {} bytes, resumed run identical: {same}", std::fs::metadata(&path).unwrap().len());
}
