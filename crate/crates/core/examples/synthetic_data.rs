//! Generates a synthetic dataset, saves it, reloads it and exports the first
//! pairs as PGM files.
//!
//! `cargo run --example synthetic_data [out-dir]`

use std::path::PathBuf;

use loopy_rnn::data::{load_dataset, save_dataset, write_pgm, SyntheticConfig};

fn main() {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("loopy-synthetic"), PathBuf::from);
    let cfg = SyntheticConfig::new(6, 2, 64, 11);
    let ds = cfg.generate();
    save_dataset(&ds, &out).unwrap();
    let back = load_dataset(&out).unwrap();
    assert_eq!(back, ds);
    let (pos, neg) = ds.count_labels();
    println!("{} patches, {pos} positive and {neg} negative pairs in {}", ds.store.len(), out.display());
    for i in [0, cfg.pairs_per_base] {
        let p = ds.pair(i);
        let a = out.join(format!("pair{i}_a.pgm"));
        let b = out.join(format!("pair{i}_b.pgm"));
        write_pgm(&p.a, &a).unwrap();
        write_pgm(&p.b, &b).unwrap();
        println!("pair {i} ({:?}): {} {}", p.label, a.display(), b.display());
    }
}
