use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Patch;

/// Lossless geometric transforms; each is a pixel permutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    HFlip,
    VFlip,
    /// Counter-clockwise quarter turn.
    Rot90,
    Rot180,
    Rot270,
}

impl Transform {
    pub const ALL: [Transform; 6] = [
        Transform::Identity,
        Transform::HFlip,
        Transform::VFlip,
        Transform::Rot90,
        Transform::Rot180,
        Transform::Rot270,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::HFlip => "hflip",
            Transform::VFlip => "vflip",
            Transform::Rot90 => "rot90",
            Transform::Rot180 => "rot180",
            Transform::Rot270 => "rot270",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn apply(self, p: &Patch) -> Patch {
        let (h, w) = (p.height, p.width);
        if matches!(self, Transform::Rot90 | Transform::Rot270) {
            assert_eq!(h, w, "quarter-turn rotation needs a square patch");
        }
        let mut out = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = match self {
                    Transform::Identity => (y, x),
                    Transform::HFlip => (y, w - 1 - x),
                    Transform::VFlip => (h - 1 - y, x),
                    Transform::Rot90 => (x, w - 1 - y),
                    Transform::Rot180 => (h - 1 - y, w - 1 - x),
                    Transform::Rot270 => (h - 1 - x, y),
                };
                out[y * w + x] = p.get(sy, sx);
            }
        }
        Patch { height: h, width: w, pixels: out }
    }
}

/// Which transforms on-the-fly augmentation may draw. Identity is always a candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub enabled: Vec<Transform>,
}

impl AugmentationSpec {
    /// Flips plus the three rotations.
    pub fn all() -> Self {
        Self { enabled: Transform::ALL[1..].to_vec() }
    }

    pub fn none() -> Self {
        Self { enabled: Vec::new() }
    }

    pub fn candidates(&self) -> Vec<Transform> {
        let mut c = vec![Transform::Identity];
        for &t in &self.enabled {
            if !c.contains(&t) {
                c.push(t);
            }
        }
        c
    }

    pub fn is_identity_only(&self) -> bool {
        self.candidates().len() == 1
    }
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self::all()
    }
}

/// Applies one transform drawn uniformly from the candidate set.
pub fn augment<R: Rng + ?Sized>(patch: &Patch, spec: &AugmentationSpec, rng: &mut R) -> Patch {
    let c = spec.candidates();
    let t = c[rng.random_range(0..c.len())];
    t.apply(patch)
}
