//! Per-node cross-entropy, the monotonous loss, and their weighted combination.
//!
//! Node indices here are relative to the scored nodes: `scores[0]` is `s_1`.
//! The unscored node 0 never reaches these functions.

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Scores are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeReduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the monotonous term; zero disables it entirely.
    pub lambda: f64,
    pub reduction: NodeReduction,
}

impl LossConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            reduction: NodeReduction::Mean,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::new(0.4)
    }
}

/// Binary label of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    NonMatch = 0,
    Match = 1,
}

impl Label {
    pub fn from_bit(b: u8) -> Option<Self> {
        match b {
            0 => Some(Label::NonMatch),
            1 => Some(Label::Match),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        self as u8
    }

    pub fn is_match(self) -> bool {
        self == Label::Match
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Match => Label::NonMatch,
            Label::NonMatch => Label::Match,
        }
    }
}

/// `-(y ln s + (1 - y) ln(1 - s))` with `s` clamped away from 0 and 1.
pub fn cross_entropy(s: f64, y: Label) -> f64 {
    let s = s.clamp(EPS, 1.0 - EPS);
    match y {
        Label::Match => -s.ln(),
        Label::NonMatch => -(1.0 - s).ln(),
    }
}

/// Hinge penalty per scored node. A matching pair is charged when its score
/// drops below the best score so far; a non-matching pair when its score rises
/// above the lowest so far. The first scored node has no predecessor and is 0.
pub fn monotonous_loss(scores: &[f64], y: Label) -> Vec<f64> {
    let mut out = Vec::with_capacity(scores.len());
    let Some((&first, rest)) = scores.split_first() else {
        return out;
    };
    out.push(0.0);
    let mut pre = first;
    for &s in rest {
        let loss = match y {
            Label::Match => (pre - s).max(0.0),
            Label::NonMatch => (s - pre).max(0.0),
        };
        out.push(loss);
        pre = match y {
            Label::Match => pre.max(s),
            Label::NonMatch => pre.min(s),
        };
    }
    out
}

/// Cross-entropy of one score node on a graph.
pub fn cross_entropy_node(g: &mut Graph<'_>, s: Var, y: Label) -> Var {
    let c = g.clamp(s, EPS, 1.0 - EPS);
    let p = match y {
        Label::Match => c,
        Label::NonMatch => {
            let neg = g.scale(c, -1.0);
            g.shift(neg, 1.0)
        }
    };
    let l = g.ln(p);
    g.scale(l, -1.0)
}

/// Monotonous loss nodes for `scores[1..]`; gradient through the running
/// max/min goes to the earliest node achieving it.
pub fn monotonous_loss_nodes(g: &mut Graph<'_>, scores: &[Var], y: Label) -> Result<Vec<Var>, TensorError> {
    let mut out = Vec::with_capacity(scores.len().saturating_sub(1));
    let Some((&first, rest)) = scores.split_first() else {
        return Ok(out);
    };
    let mut pre = first;
    for &s in rest {
        let diff = match y {
            Label::Match => g.sub(pre, s)?,
            Label::NonMatch => g.sub(s, pre)?,
        };
        out.push(g.relu(diff));
        pre = match y {
            Label::Match => g.maximum(pre, s)?,
            Label::NonMatch => g.minimum(pre, s)?,
        };
    }
    Ok(out)
}

/// `L_n = L_n^c + λ L_n^m` reduced over the scored nodes.
pub fn combined_loss_node(g: &mut Graph<'_>, scores: &[Var], y: Label, cfg: &LossConfig) -> Result<Var, TensorError> {
    if scores.is_empty() {
        return Err(TensorError::Invalid("combined loss over zero nodes".into()));
    }
    let mut per_node: Vec<Var> = scores.iter().map(|&s| cross_entropy_node(g, s, y)).collect();
    if cfg.lambda != 0.0 {
        let mono = monotonous_loss_nodes(g, scores, y)?;
        for (node, m) in per_node.iter_mut().skip(1).zip(mono) {
            let w = g.scale(m, cfg.lambda);
            *node = g.add(*node, w)?;
        }
    }
    let total = g.sum_scalars(&per_node)?;
    Ok(match cfg.reduction {
        NodeReduction::Sum => total,
        NodeReduction::Mean => g.scale(total, 1.0 / scores.len() as f64),
    })
}

/// Value of [`combined_loss_node`] for plain scores.
pub fn combined_loss(scores: &[f64], y: Label, cfg: &LossConfig) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = scores.iter().map(|&s| g.input(Tensor::scalar(s))).collect();
    let l = combined_loss_node(&mut g, &vars, y, cfg)?;
    Ok(g.scalar(l))
}
