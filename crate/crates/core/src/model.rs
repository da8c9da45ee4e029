//! Full matcher: shared FeatureNet, recurrent head, and the pair pipeline
//! `normalize → extract → unroll → symmetrize → aggregate`.

use rand::Rng;
use thiserror::Error;

use crate::data::Patch;
use crate::featurenet::{normalize_patch, BoundFeatureNet, FeatureConfig, FeatureNetParams};
use crate::losses::{combined_loss_node, Label, LossConfig};
use crate::metricnet::{
    aggregate, symmetrize, Aggregation, BoundLstm, LoopyConfig, LstmParams, MetricError, ScoreSequence, StreamMode,
    UnrolledVars,
};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("patch is {got:?} but the feature network expects {expected}x{expected}")]
    PatchSize { expected: usize, got: (usize, usize) },
    #[error("feature network emits {features} values but the recurrent head expects {expected}")]
    FeatureDim { features: usize, expected: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopyModel {
    pub loopy: LoopyConfig,
    pub features: FeatureNetParams,
    pub metric: LstmParams,
}

/// All model weights registered on one graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub features: BoundFeatureNet,
    pub metric: BoundLstm,
}

impl BoundModel {
    /// Parameter handles in [`LoopyModel::named_tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.features.vars();
        v.extend(self.metric.vars());
        v
    }
}

impl LoopyModel {
    /// Random initialization; `loopy.feature_dim` is overwritten with the
    /// feature network's output size.
    pub fn init<R: Rng + ?Sized>(feature: FeatureConfig, mut loopy: LoopyConfig, rng: &mut R) -> Result<Self, ModelError> {
        loopy.feature_dim = feature.output_dim();
        loopy.validate()?;
        let features = FeatureNetParams::init(feature, rng);
        let metric = LstmParams::init(loopy.hidden_dim, loopy.feature_dim, rng);
        Ok(Self { loopy, features, metric })
    }

    pub fn zeros(feature: FeatureConfig, mut loopy: LoopyConfig) -> Result<Self, ModelError> {
        loopy.feature_dim = feature.output_dim();
        loopy.validate()?;
        let metric = LstmParams::zeros(loopy.hidden_dim, loopy.feature_dim);
        Ok(Self {
            loopy,
            features: FeatureNetParams::zeros(feature),
            metric,
        })
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        &self.features.config
    }

    pub fn input_size(&self) -> usize {
        self.features.config.input_size
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.features.named_tensors();
        v.extend(self.metric.named_tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.features.tensors_mut();
        v.extend(self.metric.tensors_mut());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>) -> BoundModel {
        BoundModel {
            features: self.features.bind(g),
            metric: self.metric.bind(g),
        }
    }

    fn check_patch(&self, p: &Patch) -> Result<(), ModelError> {
        let s = self.input_size();
        if (p.height, p.width) != (s, s) {
            return Err(ModelError::PatchSize { expected: s, got: (p.height, p.width) });
        }
        Ok(())
    }

    /// Records the whole pair pipeline on `g` up to the per-node scores.
    pub fn forward_pair(
        &self,
        g: &mut Graph<'_>,
        bound: &BoundModel,
        a: &Patch,
        b: &Patch,
    ) -> Result<UnrolledVars, ModelError> {
        self.check_patch(a)?;
        self.check_patch(b)?;
        let xa = g.input(normalize_patch(&a.pixels, a.height, a.width)?);
        let xb = g.input(normalize_patch(&b.pixels, b.height, b.width)?);
        let fa = bound.features.forward(g, xa)?;
        let fb = bound.features.forward(g, xb)?;
        let n = g.value(fa).len();
        if n != self.loopy.feature_dim {
            return Err(ModelError::FeatureDim { features: n, expected: self.loopy.feature_dim });
        }
        Ok(bound.metric.unroll(g, fa, fb, &self.loopy)?)
    }

    /// Scalar training loss of one pair on `g`.
    pub fn pair_loss(
        &self,
        g: &mut Graph<'_>,
        bound: &BoundModel,
        a: &Patch,
        b: &Patch,
        label: Label,
        loss: &LossConfig,
    ) -> Result<(Var, UnrolledVars), ModelError> {
        let u = self.forward_pair(g, bound, a, b)?;
        let l = combined_loss_node(g, &u.scores, label, loss)?;
        Ok((l, u))
    }

    /// Score sequence for a pair, symmetrized in dual-stream mode.
    pub fn score_sequence(&self, a: &Patch, b: &Patch) -> Result<ScoreSequence, ModelError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let u = self.forward_pair(&mut g, &bound, a, b)?;
        let seq = ScoreSequence::from_graph(&g, &u);
        Ok(match self.loopy.mode {
            StreamMode::DualStream => symmetrize(seq)?,
            StreamMode::SingleStream => seq,
        })
    }

    /// Final similarity and the per-node trace.
    pub fn match_pair(&self, a: &Patch, b: &Patch, aggregation: Aggregation) -> Result<(f64, ScoreSequence), ModelError> {
        let seq = self.score_sequence(a, b)?;
        let score = aggregate(seq.scores(), aggregation)?;
        Ok((score, seq))
    }

    /// [`match_pair`](Self::match_pair) with the aggregation stored in the config.
    pub fn match_patches(&self, a: &Patch, b: &Patch) -> Result<(f64, ScoreSequence), ModelError> {
        self.match_pair(a, b, self.loopy.aggregation)
    }
}
