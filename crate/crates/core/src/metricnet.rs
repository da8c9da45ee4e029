//! Recurrent similarity head.
//!
//! A peephole LSTM consumes the two descriptors alternately (`x_A, x_B, x_A, …`)
//! for `N` steps from a zero state, and every step after the first is scored
//! with `σ(θᵀh_t)`. In dual-stream mode the same cell also runs on the reversed
//! ordering and the two score sequences are averaged node by node, which makes
//! the result exactly invariant to swapping the patches.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurenet::{glorot_bound, uniform_tensor};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("node count must be even and at least 4, got {0}")]
    InvalidNodeCount(usize),
    #[error("hidden and feature dimensions must be positive (hidden {hidden}, feature {feature})")]
    InvalidDimension { hidden: usize, feature: usize },
    #[error("symmetrized scores need both streams; sequence was produced in single-stream mode")]
    MissingStream,
    #[error("score sequence is empty")]
    EmptySequence,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StreamMode {
    DualStream,
    SingleStream,
}

impl StreamMode {
    pub fn name(self) -> &'static str {
        match self {
            StreamMode::DualStream => "dual-stream",
            StreamMode::SingleStream => "single-stream",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dual-stream" => Some(Self::DualStream),
            "single-stream" => Some(Self::SingleStream),
            _ => None,
        }
    }
}

/// Test-time rule reducing a score sequence to one similarity value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    /// Mean of `s_1 … s_{N-1}`; used for models trained without the monotonous loss.
    MeanAll,
    /// `(s_{N-2} + s_{N-1}) / 2`; used for models trained with it.
    MeanLastTwo,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Aggregation::MeanAll => "mean-all",
            Aggregation::MeanLastTwo => "last-two",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean-all" => Some(Self::MeanAll),
            "last-two" | "mean-last-two" => Some(Self::MeanLastTwo),
            _ => None,
        }
    }

    /// Aggregation matching a training weight for the monotonous term.
    pub fn for_lambda(lambda: f64) -> Self {
        if lambda > 0.0 {
            Aggregation::MeanLastTwo
        } else {
            Aggregation::MeanAll
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopyConfig {
    /// Number of unrolled nodes `N` (twice the number of `(x_A, x_B)` repeats).
    pub n_nodes: usize,
    /// LSTM output dimension `D`.
    pub hidden_dim: usize,
    /// Descriptor dimension `F`.
    pub feature_dim: usize,
    pub mode: StreamMode,
    pub aggregation: Aggregation,
}

impl LoopyConfig {
    pub const STANDARD_NODE_COUNTS: [usize; 4] = [6, 8, 10, 12];
    pub const STANDARD_HIDDEN_DIMS: [usize; 4] = [512, 1024, 1536, 2048];

    pub fn new(n_nodes: usize, hidden_dim: usize, feature_dim: usize) -> Self {
        Self {
            n_nodes,
            hidden_dim,
            feature_dim,
            mode: StreamMode::DualStream,
            aggregation: Aggregation::MeanLastTwo,
        }
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        if self.n_nodes < 4 || self.n_nodes % 2 != 0 {
            return Err(MetricError::InvalidNodeCount(self.n_nodes));
        }
        if self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(MetricError::InvalidDimension {
                hidden: self.hidden_dim,
                feature: self.feature_dim,
            });
        }
        Ok(())
    }

    /// Whether `N` and `D` lie on the standard search grid.
    pub fn is_standard_grid(&self) -> bool {
        Self::STANDARD_NODE_COUNTS.contains(&self.n_nodes) && Self::STANDARD_HIDDEN_DIMS.contains(&self.hidden_dim)
    }
}

/// Weights of the peephole LSTM cell and the scoring vector, shared by every
/// unrolled node and both streams.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_i: Tensor,
    pub w_f: Tensor,
    pub w_o: Tensor,
    pub w_c: Tensor,
    pub u_i: Tensor,
    pub u_f: Tensor,
    pub u_o: Tensor,
    pub u_c: Tensor,
    pub v_i: Tensor,
    pub v_f: Tensor,
    pub v_o: Tensor,
    pub b_i: Tensor,
    pub b_f: Tensor,
    pub b_o: Tensor,
    pub b_c: Tensor,
    pub theta: Tensor,
}

impl LstmParams {
    pub const NAMES: [&'static str; 16] = [
        "w_i", "w_f", "w_o", "w_c", "u_i", "u_f", "u_o", "u_c", "v_i", "v_f", "v_o", "b_i", "b_f", "b_o", "b_c", "theta",
    ];

    pub fn zeros(hidden: usize, feature: usize) -> Self {
        let w = || Tensor::zeros([hidden, feature]);
        let u = || Tensor::zeros([hidden, hidden]);
        let b = || Tensor::zeros([hidden]);
        Self {
            w_i: w(),
            w_f: w(),
            w_o: w(),
            w_c: w(),
            u_i: u(),
            u_f: u(),
            u_o: u(),
            u_c: u(),
            v_i: u(),
            v_f: u(),
            v_o: u(),
            b_i: b(),
            b_f: b(),
            b_o: b(),
            b_c: b(),
            theta: b(),
        }
    }

    /// Glorot-uniform matrices and scoring vector, zero biases except the
    /// forget bias, which starts at 1.
    pub fn init<R: Rng + ?Sized>(hidden: usize, feature: usize, rng: &mut R) -> Self {
        let wb = glorot_bound(feature, hidden);
        let ub = glorot_bound(hidden, hidden);
        let mut p = Self::zeros(hidden, feature);
        for w in [&mut p.w_i, &mut p.w_f, &mut p.w_o, &mut p.w_c] {
            *w = uniform_tensor(&[hidden, feature], wb, rng);
        }
        for u in [&mut p.u_i, &mut p.u_f, &mut p.u_o, &mut p.u_c, &mut p.v_i, &mut p.v_f, &mut p.v_o] {
            *u = uniform_tensor(&[hidden, hidden], ub, rng);
        }
        p.b_f = Tensor::filled([hidden], 1.0);
        p.theta = uniform_tensor(&[hidden], glorot_bound(hidden, 1), rng);
        p
    }

    pub fn hidden_dim(&self) -> usize {
        self.b_i.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.w_i.shape()[1]
    }

    fn all(&self) -> [&Tensor; 16] {
        [
            &self.w_i, &self.w_f, &self.w_o, &self.w_c, &self.u_i, &self.u_f, &self.u_o, &self.u_c, &self.v_i,
            &self.v_f, &self.v_o, &self.b_i, &self.b_f, &self.b_o, &self.b_c, &self.theta,
        ]
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        Self::NAMES
            .iter()
            .zip(self.all())
            .map(|(n, t)| (format!("metric.{n}"), t))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_i,
            &mut self.w_f,
            &mut self.w_o,
            &mut self.w_c,
            &mut self.u_i,
            &mut self.u_f,
            &mut self.u_o,
            &mut self.u_c,
            &mut self.v_i,
            &mut self.v_f,
            &mut self.v_o,
            &mut self.b_i,
            &mut self.b_f,
            &mut self.b_o,
            &mut self.b_c,
            &mut self.theta,
        ]
    }

    pub fn bind<'p>(&'p self, g: &mut Graph<'p>) -> BoundLstm {
        let [w_i, w_f, w_o, w_c, u_i, u_f, u_o, u_c, v_i, v_f, v_o, b_i, b_f, b_o, b_c, theta] =
            self.all().map(|t| g.param(t));
        BoundLstm {
            w: [w_i, w_f, w_o, w_c],
            u: [u_i, u_f, u_o, u_c],
            v: [v_i, v_f, v_o],
            b: [b_i, b_f, b_o, b_c],
            theta,
            hidden: self.hidden_dim(),
        }
    }

    /// One cell update outside any training graph.
    pub fn step(&self, x: &Tensor, h_prev: &Tensor, c_prev: &Tensor) -> Result<(Tensor, Tensor), MetricError> {
        let mut g = Graph::new();
        let cell = self.bind(&mut g);
        let (x, h, c) = (g.input(x.clone()), g.input(h_prev.clone()), g.input(c_prev.clone()));
        let (h, c) = cell.step(&mut g, x, h, c)?;
        Ok((g.tensor(h), g.tensor(c)))
    }
}

/// Input projections `W_* x` for one descriptor, reusable across steps.
#[derive(Debug, Clone, Copy)]
pub struct InputProjection {
    i: Var,
    f: Var,
    o: Var,
    c: Var,
}

/// LSTM weights registered on a graph. Gate order in the arrays is i, f, o, c.
#[derive(Debug, Clone)]
pub struct BoundLstm {
    w: [Var; 4],
    u: [Var; 4],
    v: [Var; 3],
    b: [Var; 4],
    theta: Var,
    hidden: usize,
}

/// Graph handles for one unrolled stream.
#[derive(Debug, Clone)]
pub struct StreamVars {
    /// `s_1 … s_{N-1}`.
    pub scores: Vec<Var>,
    /// `h_0 … h_{N-1}`.
    pub hidden: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct UnrolledVars {
    pub ab: StreamVars,
    pub ba: Option<StreamVars>,
    /// Per-node symmetrized scores in dual-stream mode, stream AB otherwise.
    pub scores: Vec<Var>,
}

impl BoundLstm {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = Vec::with_capacity(16);
        v.extend(self.w);
        v.extend(self.u);
        v.extend(self.v);
        v.extend(self.b);
        v.push(self.theta);
        v
    }

    pub fn project(&self, g: &mut Graph<'_>, x: Var) -> Result<InputProjection, TensorError> {
        Ok(InputProjection {
            i: g.matvec(self.w[0], x)?,
            f: g.matvec(self.w[1], x)?,
            o: g.matvec(self.w[2], x)?,
            c: g.matvec(self.w[3], x)?,
        })
    }

    fn gate_pre(&self, g: &mut Graph<'_>, wx: Var, gate: usize, h: Var, peep: Option<Var>) -> Result<Var, TensorError> {
        let uh = g.matvec(self.u[gate], h)?;
        let mut z = g.add(wx, uh)?;
        if let Some(c) = peep {
            let vc = g.matvec(self.v[gate], c)?;
            z = g.add(z, vc)?;
        }
        g.add(z, self.b[gate])
    }

    /// Peephole update: the input and forget gates read `c_prev`, the output
    /// gate reads the new cell `c`.
    pub fn step_projected(
        &self,
        g: &mut Graph<'_>,
        x: &InputProjection,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var), TensorError> {
        let zi = self.gate_pre(g, x.i, 0, h_prev, Some(c_prev))?;
        let i = g.sigmoid(zi);
        let zf = self.gate_pre(g, x.f, 1, h_prev, Some(c_prev))?;
        let f = g.sigmoid(zf);
        let zc = self.gate_pre(g, x.c, 3, h_prev, None)?;
        let cand = g.tanh(zc);
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let zo = self.gate_pre(g, x.o, 2, h_prev, Some(c))?;
        let o = g.sigmoid(zo);
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }

    pub fn step(&self, g: &mut Graph<'_>, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var), TensorError> {
        let p = self.project(g, x)?;
        self.step_projected(g, &p, h_prev, c_prev)
    }

    pub fn score(&self, g: &mut Graph<'_>, h: Var) -> Result<Var, TensorError> {
        let z = g.dot(self.theta, h)?;
        Ok(g.sigmoid(z))
    }

    fn run_stream(
        &self,
        g: &mut Graph<'_>,
        first: &InputProjection,
        second: &InputProjection,
        n_nodes: usize,
    ) -> Result<StreamVars, TensorError> {
        let mut h = g.input(Tensor::zeros([self.hidden]));
        let mut c = g.input(Tensor::zeros([self.hidden]));
        let mut hidden = Vec::with_capacity(n_nodes);
        let mut scores = Vec::with_capacity(n_nodes - 1);
        for t in 0..n_nodes {
            let x = if t % 2 == 0 { first } else { second };
            (h, c) = self.step_projected(g, x, h, c)?;
            hidden.push(h);
            if t > 0 {
                scores.push(self.score(g, h)?);
            }
        }
        Ok(StreamVars { scores, hidden })
    }

    /// Unrolls `N` nodes over the alternating sequence and scores nodes `1..N`.
    pub fn unroll(&self, g: &mut Graph<'_>, xa: Var, xb: Var, cfg: &LoopyConfig) -> Result<UnrolledVars, MetricError> {
        cfg.validate()?;
        let pa = self.project(g, xa)?;
        let pb = self.project(g, xb)?;
        let ab = self.run_stream(g, &pa, &pb, cfg.n_nodes)?;
        match cfg.mode {
            StreamMode::SingleStream => Ok(UnrolledVars {
                scores: ab.scores.clone(),
                ab,
                ba: None,
            }),
            StreamMode::DualStream => {
                let ba = self.run_stream(g, &pb, &pa, cfg.n_nodes)?;
                let scores = ab
                    .scores
                    .iter()
                    .zip(&ba.scores)
                    .map(|(&s1, &s2)| {
                        let s = g.add(s1, s2)?;
                        Ok(g.scale(s, 0.5))
                    })
                    .collect::<Result<Vec<_>, TensorError>>()?;
                Ok(UnrolledVars { ab, ba: Some(ba), scores })
            }
        }
    }
}

/// Scores and hidden states of one unrolled stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamTrace {
    /// `s_1 … s_{N-1}`; the first node carries no score.
    pub scores: Vec<f64>,
    /// `h_0 … h_{N-1}`.
    pub hidden: Vec<Vec<f64>>,
}

impl StreamTrace {
    fn from_graph(g: &Graph<'_>, s: &StreamVars) -> Self {
        Self {
            scores: s.scores.iter().map(|&v| g.scalar(v)).collect(),
            hidden: s.hidden.iter().map(|&v| g.value(v).to_vec()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSequence {
    pub ab: StreamTrace,
    pub ba: Option<StreamTrace>,
    pub symmetric: Option<Vec<f64>>,
}

impl ScoreSequence {
    /// Reads stream values back from a graph; `symmetric` is left for [`symmetrize`].
    pub fn from_graph(g: &Graph<'_>, u: &UnrolledVars) -> Self {
        Self {
            ab: StreamTrace::from_graph(g, &u.ab),
            ba: u.ba.as_ref().map(|s| StreamTrace::from_graph(g, s)),
            symmetric: None,
        }
    }

    /// Symmetrized scores when present, stream AB otherwise.
    pub fn scores(&self) -> &[f64] {
        self.symmetric.as_deref().unwrap_or(&self.ab.scores)
    }
}

/// Per-node `(s^AB + s^BA) / 2`.
pub fn symmetrize(mut seq: ScoreSequence) -> Result<ScoreSequence, MetricError> {
    let ba = seq.ba.as_ref().ok_or(MetricError::MissingStream)?;
    seq.symmetric = Some(
        seq.ab
            .scores
            .iter()
            .zip(&ba.scores)
            .map(|(&a, &b)| (a + b) * 0.5)
            .collect(),
    );
    Ok(seq)
}

pub fn aggregate(scores: &[f64], mode: Aggregation) -> Result<f64, MetricError> {
    match (mode, scores.len()) {
        (_, 0) => Err(MetricError::EmptySequence),
        (Aggregation::MeanAll, n) => Ok(scores.iter().sum::<f64>() / n as f64),
        (Aggregation::MeanLastTwo, 1) => Ok(scores[0]),
        (Aggregation::MeanLastTwo, n) => Ok((scores[n - 2] + scores[n - 1]) / 2.0),
    }
}
