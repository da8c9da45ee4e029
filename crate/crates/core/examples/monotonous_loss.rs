//! Cross-entropy, monotonous penalty and their weighted sum on a few score
//! sequences.

use loopy_rnn::losses::{combined_loss, cross_entropy, monotonous_loss, Label, LossConfig};

fn main() {
    let sequences: [(&str, Vec<f64>); 4] = [
        ("rising", vec![0.55, 0.62, 0.71, 0.80, 0.86]),
        ("dip", vec![0.60, 0.75, 0.52, 0.78, 0.81]),
        ("falling", vec![0.80, 0.70, 0.60, 0.50, 0.40]),
        ("flat", vec![0.5; 5]),
    ];
    for label in [Label::Match, Label::NonMatch] {
        println!("label {label:?}");
        for (name, s) in &sequences {
            let ce: Vec<f64> = s.iter().map(|&v| cross_entropy(v, label)).collect();
            let mono = monotonous_loss(s, label);
            let total0 = combined_loss(s, label, &LossConfig::new(0.0)).unwrap();
            let total4 = combined_loss(s, label, &LossConfig::new(0.4)).unwrap();
            println!("  {name:<8} ce {:>8.4}  mono {:?}", ce.iter().sum::<f64>() / ce.len() as f64, round(&mono));
            println!("  {:<8} total λ=0 {total0:.4}  λ=0.4 {total4:.4}", "");
        }
    }
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}
