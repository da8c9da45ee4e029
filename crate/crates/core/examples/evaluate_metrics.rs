//! FPR95, average precision and the ROC sweep on hand-written scores.

use loopy_rnn::evaluator::{fpr_at_recall, MetricsReport, ScoredPair};
use loopy_rnn::losses::Label;

fn main() {
    let raw = [
        (0.97, 1), (0.91, 1), (0.88, 0), (0.84, 1), (0.80, 1), (0.62, 0),
        (0.61, 1), (0.40, 0), (0.33, 1), (0.21, 0), (0.12, 0), (0.05, 0),
    ];
    let scored: Vec<ScoredPair> = raw
        .iter()
        .map(|&(score, l)| ScoredPair { score, label: Label::from_bit(l).unwrap() })
        .collect();
    let report = MetricsReport::from_scores(&scored).unwrap();
    println!("fpr95 {:.3}  mAP {:.3}", report.fpr95, report.map);
    for r in [0.5, 0.8, 1.0] {
        println!("fpr at recall {r}: {:.3}", fpr_at_recall(&scored, r).unwrap());
    }
    println!("{}", report.to_json());
}
