//! Finite-difference check of the full matcher: FeatureNet, both recurrent
//! streams and the combined loss, compared parameter group by parameter group.
//!
//! ReLU, max pooling, the running max/min and the log clamp make the loss
//! piecewise smooth. A central difference whose stencil straddles one of their
//! switch points measures the jump, not the derivative. By default the
//! perturbed losses are therefore evaluated on the branches selected at the
//! unperturbed point ([`Graph::replaying`]); that function coincides with the
//! loss around the point, so its derivative there is the one under test. The
//! report still counts the stencils that crossed a switch.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::PatchPair;
use crate::featurenet::FeatureConfig;
use crate::losses::{Label, LossConfig};
use crate::metricnet::LoopyConfig;
use crate::model::{LoopyModel, ModelError};
use crate::tensor::{BranchTrace, GradCheckReport, GradCheckTolerance, Graph};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: GradCheckTolerance,
    /// Groups larger than this are checked on a seeded random subset.
    pub max_per_group: Option<usize>,
    pub seed: u64,
    /// Evaluate perturbed losses on the unperturbed branches.
    pub freeze_branches: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: GradCheckTolerance::default(), max_per_group: None, seed: 0, freeze_branches: true }
    }
}

/// Summed loss over `pairs`, its analytic gradient per parameter tensor, and
/// the branch trace of every pair.
pub fn loss_and_grad(
    model: &LoopyModel,
    pairs: &[PatchPair],
    loss: &LossConfig,
) -> Result<(f64, Vec<Vec<f64>>, Vec<BranchTrace>), ModelError> {
    let mut grads: Vec<Vec<f64>> = model.named_tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let mut traces = Vec::with_capacity(pairs.len());
    let mut total = 0.0;
    for p in pairs {
        let mut g = Graph::recording();
        let bound = model.bind(&mut g);
        let (l, _) = model.pair_loss(&mut g, &bound, &p.a, &p.b, p.label, loss)?;
        total += g.scalar(l);
        g.backward(l)?;
        for (acc, v) in grads.iter_mut().zip(bound.vars()) {
            if let Some(pg) = g.grad(v) {
                acc.iter_mut().zip(pg).for_each(|(x, y)| *x += y);
            }
        }
        traces.push(g.take_branch_trace().expect("recording graph"));
    }
    Ok((total, grads, traces))
}

/// Summed loss with every pair replayed on its trace, plus the number of
/// piecewise choices that differ from the natural ones.
fn replayed_loss(
    model: &LoopyModel,
    pairs: &[PatchPair],
    loss: &LossConfig,
    traces: &[BranchTrace],
    freeze: bool,
) -> Result<(f64, usize), ModelError> {
    let (mut total, mut diverged) = (0.0, 0);
    for (p, trace) in pairs.iter().zip(traces) {
        let mut g = Graph::replaying(trace.clone());
        let bound = model.bind(&mut g);
        let (l, _) = model.pair_loss(&mut g, &bound, &p.a, &p.b, p.label, loss)?;
        diverged += g.diverged();
        if freeze {
            total += g.scalar(l);
        } else {
            let mut free = Graph::new();
            let bound = model.bind(&mut free);
            let (l, _) = model.pair_loss(&mut free, &bound, &p.a, &p.b, p.label, loss)?;
            total += free.scalar(l);
        }
    }
    Ok((total, diverged))
}

/// Compares analytic and central-difference gradients of the summed pair loss.
pub fn check_model_gradients(
    model: &LoopyModel,
    pairs: &[PatchPair],
    loss: &LossConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, ModelError> {
    let (_, analytic, traces) = loss_and_grad(model, pairs, loss)?;
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut work = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::new(opts.tolerance);
    for (t, name) in names.iter().enumerate() {
        let len = analytic[t].len();
        let mut idx: Vec<usize> = match opts.max_per_group {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        idx.sort_unstable();
        let mut numeric = Vec::with_capacity(idx.len());
        let mut kinks = 0;
        for &i in &idx {
            let orig = work.tensors_mut()[t].data()[i];
            work.tensors_mut()[t].data_mut()[i] = orig + opts.step;
            let (plus, d_plus) = replayed_loss(&work, pairs, loss, &traces, opts.freeze_branches)?;
            work.tensors_mut()[t].data_mut()[i] = orig - opts.step;
            let (minus, d_minus) = replayed_loss(&work, pairs, loss, &traces, opts.freeze_branches)?;
            work.tensors_mut()[t].data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * opts.step));
            if d_plus + d_minus > 0 {
                kinks += 1;
            }
        }
        let picked: Vec<f64> = idx.iter().map(|&i| analytic[t][i]).collect();
        report.add_group(name.clone(), &picked, &numeric);
        report.groups.last_mut().expect("group just added").kinks = kinks;
    }
    Ok(report)
}

/// The reference check: tiny FeatureNet, `D = 8`, `N = 6`, dual-stream,
/// `λ = 0.4`, one matching and one non-matching synthetic pair.
pub fn reference_gradcheck(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = LoopyModel::init(FeatureConfig::tiny(), LoopyConfig::new(6, 8, 0), &mut rng)?;
    let ds = crate::data::generate_synthetic(3, 1, 16, seed);
    let pos = ds.pairs.iter().position(|p| p.label == Label::Match).expect("synthetic data has positives");
    let neg = ds.pairs.iter().position(|p| p.label == Label::NonMatch).expect("synthetic data has negatives");
    let pairs = [ds.pair(pos), ds.pair(neg)];
    check_model_gradients(&model, &pairs, &LossConfig::new(0.4), opts)
}
