use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AugmentationSpec, PairIndex, Patch, PatchDataset, PatchStore, Split};
use crate::data::augment::augment;
use crate::losses::Label;

/// Parameters of the synthetic patch-pair generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub count_bases: usize,
    pub pairs_per_base: usize,
    pub size: usize,
    pub seed: u64,
    /// Maximum translation, in pixels, applied to every jittered copy.
    pub max_shift: usize,
    /// Standard deviation of additive Gaussian noise, in gray levels.
    pub noise_sigma: f64,
    /// Geometric transforms drawn for jittered copies.
    pub augmentation: AugmentationSpec,
    pub split: Split,
}

impl SyntheticConfig {
    pub fn new(count_bases: usize, pairs_per_base: usize, size: usize, seed: u64) -> Self {
        Self {
            count_bases,
            pairs_per_base,
            size,
            seed,
            max_shift: 2,
            noise_sigma: 8.0,
            augmentation: AugmentationSpec::all(),
            split: Split::Train,
        }
    }

    /// Store layout: all bases first, then for every base its positive copies
    /// followed by its negative partners. Each pair is `(base, jittered patch)`,
    /// so both classes see exactly one clean and one perturbed patch.
    pub fn generate(&self) -> PatchDataset {
        assert!(self.count_bases >= 2, "need at least two bases to form negatives");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let size = self.size;
        let bases: Vec<Patch> = (0..self.count_bases).map(|_| texture(size, &mut rng)).collect();
        let mut store = PatchStore::new(size, size);
        for b in &bases {
            store.push(b).expect("uniform size");
        }
        let mut pairs = Vec::with_capacity(2 * self.count_bases * self.pairs_per_base);
        for (bi, base) in bases.iter().enumerate() {
            for _ in 0..self.pairs_per_base {
                let copy = self.jitter(base, &mut rng);
                let idx = store.push(&copy).expect("uniform size");
                pairs.push(PairIndex { a: bi, b: idx, label: Label::Match });
            }
            for _ in 0..self.pairs_per_base {
                let mut other = rng.random_range(0..self.count_bases - 1);
                if other >= bi {
                    other += 1;
                }
                let copy = self.jitter(&bases[other], &mut rng);
                let idx = store.push(&copy).expect("uniform size");
                pairs.push(PairIndex { a: bi, b: idx, label: Label::NonMatch });
            }
        }
        PatchDataset::new(store, pairs, self.split).expect("indices are in range by construction")
    }

    fn jitter<R: Rng + ?Sized>(&self, base: &Patch, rng: &mut R) -> Patch {
        let s = self.max_shift as i64;
        let dy = rng.random_range(-s..=s) as isize;
        let dx = rng.random_range(-s..=s) as isize;
        let n = base.height as isize;
        let mut shifted = base.clone();
        for y in 0..n {
            for x in 0..n {
                let sy = (y + dy).clamp(0, n - 1) as usize;
                let sx = (x + dx).clamp(0, n - 1) as usize;
                shifted.pixels[(y * n + x) as usize] = base.get(sy, sx);
            }
        }
        let mut out = augment(&shifted, &self.augmentation, rng);
        if self.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.noise_sigma).expect("finite sigma");
            for p in &mut out.pixels {
                *p = (*p as f64 + noise.sample(rng)).round().clamp(0.0, 255.0) as u8;
            }
        }
        out
    }
}

/// Seeded texture: bilinear-upsampled coarse noise plus one to three flat shapes.
fn texture<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Patch {
    const GRID: usize = 5;
    let coarse: Vec<f64> = (0..GRID * GRID).map(|_| rng.random_range(0.0..1.0)).collect();
    let offset = rng.random_range(40.0..140.0);
    let contrast = rng.random_range(40.0..110.0);
    let mut img = vec![0.0f64; size * size];
    let step = (GRID - 1) as f64 / (size.max(2) - 1) as f64;
    for y in 0..size {
        let gy = y as f64 * step;
        let y0 = (gy.floor() as usize).min(GRID - 2);
        let fy = gy - y0 as f64;
        for x in 0..size {
            let gx = x as f64 * step;
            let x0 = (gx.floor() as usize).min(GRID - 2);
            let fx = gx - x0 as f64;
            let c = |yy: usize, xx: usize| coarse[yy * GRID + xx];
            let v = c(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + c(y0, x0 + 1) * (1.0 - fy) * fx
                + c(y0 + 1, x0) * fy * (1.0 - fx)
                + c(y0 + 1, x0 + 1) * fy * fx;
            img[y * size + x] = offset + contrast * v;
        }
    }
    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let intensity = rng.random_range(0.0..255.0);
        let extent = rng.random_range((size / 4).max(1)..=(size / 2).max(1));
        let cy = rng.random_range(0..size) as f64;
        let cx = rng.random_range(0..size) as f64;
        let disk = rng.random_bool(0.5);
        let r = extent as f64 / 2.0;
        for y in 0..size {
            for x in 0..size {
                let (ddy, ddx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disk {
                    ddy * ddy + ddx * ddx <= r * r
                } else {
                    ddy.abs() <= r && ddx.abs() <= r * 0.6
                };
                if inside {
                    img[y * size + x] = intensity;
                }
            }
        }
    }
    let pixels = img.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    Patch { height: size, width: size, pixels }
}

/// Default synthetic dataset: `2 · count_bases · pairs_per_base` pairs, half positive.
pub fn generate_synthetic(count_bases: usize, pairs_per_base: usize, size: usize, seed: u64) -> PatchDataset {
    SyntheticConfig::new(count_bases, pairs_per_base, size, seed).generate()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_labels() {
        let ds = generate_synthetic(10, 4, 16, 1);
        assert_eq!(ds.count_labels(), (40, 40));
        assert_eq!(ds.store.len(), 10 + 80);
        for p in &ds.pairs {
            assert!(p.a < 10, "first patch is always a base");
        }
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(generate_synthetic(4, 3, 16, 42), generate_synthetic(4, 3, 16, 42));
        assert_ne!(generate_synthetic(4, 3, 16, 42).store, generate_synthetic(4, 3, 16, 43).store);
    }

    #[test]
    fn copies_are_close_to_their_base() {
        let mut cfg = SyntheticConfig::new(6, 2, 16, 3);
        cfg.augmentation = AugmentationSpec::none();
        let ds = cfg.generate();
        let mad = |a: &[u8], b: &[u8]| {
            a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.len() as f64
        };
        let (mut pos, mut neg) = (0.0, 0.0);
        for p in &ds.pairs {
            let d = mad(ds.store.pixels(p.a), ds.store.pixels(p.b));
            if p.label.is_match() {
                pos += d;
            } else {
                neg += d;
            }
        }
        assert!(pos < neg, "positive mean abs diff {pos} vs negative {neg}");
    }

    #[test]
    fn full_size_patches() {
        let ds = generate_synthetic(2, 1, 64, 0);
        assert_eq!(ds.patch_size(), (64, 64));
    }
}
