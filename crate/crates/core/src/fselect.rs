//! Feature selection from smoothed input masks.
//!
//! A network is trained with one mask bit per input feature. Features whose
//! smoothed mask value ends at or above a cutoff are selected: 0.5 for a given
//! penalty, or a cutoff in `[0.2, 0.8]` found together with the penalty by an
//! exponential search when an exact feature count is requested.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{duplicate_to_min_batches, split_and_normalize, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::mask::mask_converged;
use crate::metrics::ci95;
use crate::nn::MlpSpec;
use crate::train::{build_network, train, EpochMetrics, EvalSets, MaskTarget, Regularizer, TrainConfig, TrainedModel};

pub const DEFAULT_LAMBDA0: f64 = 1e-3;
pub const DEFAULT_BUDGET: usize = 12;
const CUT_LO: f64 = 0.2;
const CUT_HI: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected feature indices, ascending.
    pub selected: Vec<usize>,
    pub lambda_star: f64,
    pub cutoff: f64,
    pub v_smooth_final: Vec<f64>,
    pub converged: bool,
    /// Training runs consumed.
    pub search_steps: usize,
}

impl SelectionResult {
    fn from_smoothed(v: Vec<f64>, lambda: f64, cutoff: f64, steps: usize) -> Result<Self> {
        Ok(Self {
            selected: (0..v.len()).filter(|&i| v[i] >= cutoff).collect(),
            lambda_star: lambda,
            cutoff,
            converged: mask_converged(&v)?,
            v_smooth_final: v,
            search_steps: steps,
        })
    }
}

/// One BinMask training run on the inputs at penalty `lambda`.
pub fn selection_run(
    train_set: &Dataset,
    mlp: &MlpSpec,
    cfg: &TrainConfig,
    lambda: f64,
    eval: EvalSets<'_>,
) -> Result<TrainedModel> {
    if lambda < 0.0 {
        return Err(Error::Input(format!("negative penalty {lambda}")));
    }
    let cfg = TrainConfig {
        regularizer: Regularizer::BinMask { lambda },
        mask_target: MaskTarget::Inputs,
        early_stopping: false,
        ..cfg.clone()
    };
    let mlp = mlp.with_input_dim(train_set.n_features());
    let net = build_network(&mlp, &cfg)?;
    train(net, train_set, eval, &cfg)
}

fn final_smoothed(model: &TrainedModel) -> Result<Vec<f64>> {
    let state = model
        .mask_state()
        .ok_or_else(|| Error::State("selection run produced no mask".into()))?;
    Ok(state.smoothed().to_vec())
}

/// Final smoothed input mask of one training run at penalty `lambda`.
pub fn smoothed_mask(train_set: &Dataset, mlp: &MlpSpec, cfg: &TrainConfig, lambda: f64) -> Result<Vec<f64>> {
    final_smoothed(&selection_run(train_set, mlp, cfg, lambda, EvalSets::default())?)
}

/// [`select_by_lambda`] or [`select_exact_k`], also returning the epoch log of
/// the run that produced the selection.
pub fn select_logged(
    train_set: &Dataset,
    mlp: &MlpSpec,
    cfg: &TrainConfig,
    request: SelectionRequest,
    eval: EvalSets<'_>,
) -> Result<(SelectionResult, Vec<EpochMetrics>)> {
    match request {
        SelectionRequest::Lambda(lambda) => {
            let model = selection_run(train_set, mlp, cfg, lambda, eval)?;
            let r = SelectionResult::from_smoothed(final_smoothed(&model)?, lambda, 0.5, 1)?;
            Ok((r, model.metrics))
        }
        SelectionRequest::Count { k, lambda0, budget } => {
            check_count(train_set, k)?;
            let mut last = Vec::new();
            let r = exponential_search(k, lambda0, budget, |lambda, _| {
                let model = selection_run(train_set, mlp, cfg, lambda, eval)?;
                last = model.metrics.clone();
                final_smoothed(&model)
            })?;
            Ok((r, last))
        }
    }
}

/// A fixed penalty, or an exact feature count searched for from `lambda0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionRequest {
    Lambda(f64),
    Count { k: usize, lambda0: f64, budget: usize },
}

/// Selects every feature whose smoothed mask value is at least 0.5.
pub fn select_by_lambda(train_set: &Dataset, mlp: &MlpSpec, cfg: &TrainConfig, lambda: f64) -> Result<SelectionResult> {
    let v = smoothed_mask(train_set, mlp, cfg, lambda)?;
    SelectionResult::from_smoothed(v, lambda, 0.5, 1)
}

/// How a smoothed mask relates to a requested count `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CountOutcome {
    /// A cutoff in `[0.2, 0.8]` selects exactly `k`.
    Exact(f64),
    /// Every admissible cutoff selects more than `k`; the penalty should grow.
    TooMany,
    /// Every admissible cutoff selects fewer than `k`; the penalty should shrink.
    TooFew,
}

/// Finds a cutoff `c ∈ [0.2, 0.8]` with exactly `k` values `≥ c`, as far as
/// possible from the nearest values on both sides.
pub fn exact_cutoff(v: &[f64], k: usize) -> CountOutcome {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let max_count = s.iter().filter(|&&x| x >= CUT_LO).count();
    let min_count = s.iter().filter(|&&x| x >= CUT_HI).count();
    if k == 0 || max_count < k {
        return if k == 0 && min_count == 0 {
            CountOutcome::Exact(CUT_HI)
        } else if k == 0 {
            CountOutcome::TooMany
        } else {
            CountOutcome::TooFew
        };
    }
    if min_count > k {
        return CountOutcome::TooMany;
    }
    // c must satisfy next < c ≤ kth.
    let kth = s[k - 1];
    let next = s.get(k).copied().unwrap_or(f64::NEG_INFINITY);
    if next >= kth {
        // A tie straddles position k: every admissible cutoff keeps all of it.
        return CountOutcome::TooMany;
    }
    let c = if next.is_finite() { 0.5 * (kth + next) } else { CUT_LO };
    let c = c.clamp(CUT_LO, CUT_HI);
    if c <= kth && c > next {
        CountOutcome::Exact(c)
    } else {
        CountOutcome::TooMany
    }
}

/// Exponential search over `λ` for an exact feature count.
///
/// `oracle(λ, step)` returns the smoothed mask after training at `λ`. Starting
/// at `lambda0`, `λ` doubles while too many features survive and halves while
/// too few do; once both directions have been seen it bisects on `log λ`.
pub fn exponential_search<F>(k: usize, lambda0: f64, budget: usize, mut oracle: F) -> Result<SelectionResult>
where
    F: FnMut(f64, usize) -> Result<Vec<f64>>,
{
    if !(lambda0 > 0.0) || budget == 0 {
        return Err(Error::Config("exponential search needs lambda0 > 0 and a positive budget".into()));
    }
    let mut lambda = lambda0;
    let mut too_many_at: Option<f64> = None;
    let mut too_few_at: Option<f64> = None;
    let mut closest = Vec::new();
    for step in 0..budget {
        let v = oracle(lambda, step)?;
        if k == 0 || k > v.len() {
            return Err(Error::Input(format!("requested {k} features out of {}", v.len())));
        }
        match exact_cutoff(&v, k) {
            CountOutcome::Exact(c) => return SelectionResult::from_smoothed(v, lambda, c, step + 1),
            outcome => {
                let lo = v.iter().filter(|&&x| x >= CUT_HI).count();
                let hi = v.iter().filter(|&&x| x >= CUT_LO).count();
                closest.push((lambda, lo, hi));
                if outcome == CountOutcome::TooMany {
                    too_many_at = Some(too_many_at.map_or(lambda, |l: f64| l.max(lambda)));
                } else {
                    too_few_at = Some(too_few_at.map_or(lambda, |l: f64| l.min(lambda)));
                }
            }
        }
        lambda = match (too_many_at, too_few_at) {
            (Some(a), Some(b)) => (a * b).sqrt(),
            (Some(a), None) => 2.0 * a,
            (None, Some(b)) => 0.5 * b,
            (None, None) => unreachable!("every failed step records a direction"),
        };
    }
    Err(Error::SearchExhausted {
        k,
        steps: budget,
        closest,
    })
}

/// Exactly `k` features via [`exponential_search`], one training run per step.
pub fn select_exact_k(
    train_set: &Dataset,
    mlp: &MlpSpec,
    cfg: &TrainConfig,
    k: usize,
    lambda0: f64,
    budget: usize,
) -> Result<SelectionResult> {
    check_count(train_set, k)?;
    exponential_search(k, lambda0, budget, |lambda, _| smoothed_mask(train_set, mlp, cfg, lambda))
}

fn check_count(train_set: &Dataset, k: usize) -> Result<()> {
    if k == 0 || k > train_set.n_features() {
        return Err(Error::Input(format!(
            "requested {k} features out of {}",
            train_set.n_features()
        )));
    }
    Ok(())
}

/// Feature counts `n_t − i·⌊n_t/5⌋` for `i = 0..=4`, distinct and positive.
pub fn feature_count_sweep(n_t: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..5).map(|i| n_t - i * (n_t / 5)).filter(|&n| n > 0).collect();
    out.dedup();
    out
}

/// Split, normalization and duplication settings shared by every trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Protocol {
    pub test_fraction: f64,
    pub validation_fraction: f64,
    /// Training sets are repeated until they give this many minibatches.
    pub min_batches: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            validation_fraction: 0.0,
            min_batches: 30,
        }
    }
}

/// Normalized train (duplicated), optional validation and test sets for one trial.
pub fn prepare_trial(
    data: &Dataset,
    protocol: &Protocol,
    split_seed: u64,
    batch_size: usize,
) -> Result<(Dataset, Option<Dataset>, Dataset)> {
    let parts = split_and_normalize(
        data,
        &SplitSpec {
            test_fraction: protocol.test_fraction,
            validation_fraction: protocol.validation_fraction,
            seed: split_seed,
        },
    )?;
    let train = duplicate_to_min_batches(&parts.train, batch_size, protocol.min_batches);
    Ok((train, parts.validation, parts.test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub accuracies: Vec<f64>,
    pub losses: Vec<f64>,
    pub mean_accuracy: f64,
    pub ci95_halfwidth: Option<f64>,
}

/// Retrains from scratch on the `selected` columns. Trial `i` splits with
/// `base_seed + i` and initializes with `base_seed + 10000 + i`.
pub fn retrain_eval(
    data: &Dataset,
    selected: &[usize],
    mlp: &MlpSpec,
    cfg: &TrainConfig,
    protocol: &Protocol,
    trials: usize,
    base_seed: u64,
) -> Result<RetrainReport> {
    if selected.is_empty() {
        return Err(Error::Input("retraining needs at least one selected feature".into()));
    }
    if trials == 0 {
        return Err(Error::Input("retraining needs at least one trial".into()));
    }
    let sub = data.select_features(selected)?;
    let mlp = mlp.with_input_dim(selected.len());
    let runs: Vec<(f64, f64)> = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let (tr, _, te) = prepare_trial(&sub, protocol, base_seed + i, cfg.batch_size)?;
            let cfg = TrainConfig {
                regularizer: Regularizer::None,
                early_stopping: false,
                seed: base_seed + 10_000 + i,
                ..cfg.clone()
            };
            let model = train(build_network(&mlp, &cfg)?, &tr, EvalSets::default(), &cfg)?;
            let ev = model.evaluate(&te)?;
            Ok((ev.accuracy, ev.loss))
        })
        .collect::<Result<_>>()?;
    let accuracies: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let (mean, hw) = match ci95(&accuracies) {
        Ok((m, h)) => (m, Some(h)),
        Err(_) => (accuracies[0], None),
    };
    Ok(RetrainReport {
        losses: runs.iter().map(|r| r.1).collect(),
        accuracies,
        mean_accuracy: mean,
        ci95_halfwidth: hw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cutoff_picks_margin_midpoint() {
        let v = [0.95, 0.1, 0.7, 0.3];
        assert_eq!(exact_cutoff(&v, 2), CountOutcome::Exact(0.5));
        assert_eq!(exact_cutoff(&v, 1), CountOutcome::Exact(0.8));
        assert_eq!(exact_cutoff(&v, 3), CountOutcome::Exact(0.2));
        assert_eq!(exact_cutoff(&v, 4), CountOutcome::TooFew);
        let all = [0.9, 0.95, 0.99];
        assert_eq!(exact_cutoff(&all, 3), CountOutcome::Exact(0.2));
        assert_eq!(exact_cutoff(&all, 2), CountOutcome::TooMany);
        // tie at the boundary
        assert_eq!(exact_cutoff(&[0.5, 0.5, 0.0], 1), CountOutcome::TooMany);
    }

    #[test]
    fn cutoff_is_threshold_consistent() {
        let v = [0.61, 0.12, 0.33, 0.79, 0.45, 0.05, 0.91];
        for k in 1..=v.len() {
            if let CountOutcome::Exact(c) = exact_cutoff(&v, k) {
                assert!((CUT_LO..=CUT_HI).contains(&c));
                assert_eq!(v.iter().filter(|&&x| x >= c).count(), k);
            }
        }
    }

    // Feature j survives while λ < τ_j.
    fn stub(thresholds: Vec<f64>) -> impl FnMut(f64, usize) -> Result<Vec<f64>> {
        move |lambda, _| Ok(thresholds.iter().map(|&t| if lambda < t { 1.0 } else { 0.0 }).collect())
    }

    #[test]
    fn search_with_monotone_stub() {
        let taus: Vec<f64> = (0..16).map(|j| 1e-3 * 2f64.powi(j - 8)).collect();
        for k in 1..=16 {
            let r = exponential_search(k, 1e-3, DEFAULT_BUDGET, stub(taus.clone())).unwrap();
            assert_eq!(r.selected.len(), k);
            // target interval [a, b) of λ values leaving exactly k features
            let b = taus[16 - k];
            let a = if k < 16 { taus[15 - k] } else { 0.0 };
            // span from λ₀ to the far end of the target, one doubling wider
            // for the evaluation at λ₀ itself
            let range = 2.0 * b.max(1e-3) / a.clamp(f64::MIN_POSITIVE, 1e-3);
            let bound = range.log2().ceil() as usize;
            assert!(r.search_steps <= bound, "k={k}: {} steps, bound {bound}", r.search_steps);
        }
    }

    #[test]
    fn search_bisects_narrow_intervals() {
        let taus: Vec<f64> = (0..20).map(|j| 1e-3 * 1.3f64.powi(j)).collect();
        for k in 1..=20 {
            let r = exponential_search(k, 1e-3, DEFAULT_BUDGET, stub(taus.clone())).unwrap();
            assert_eq!(r.selected.len(), k);
        }
    }

    #[test]
    fn search_is_deterministic() {
        let taus: Vec<f64> = (0..10).map(|j| 1e-4 * 1.7f64.powi(j)).collect();
        let a = exponential_search(4, 1e-3, 12, stub(taus.clone())).unwrap();
        let b = exponential_search(4, 1e-3, 12, stub(taus)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn search_exhaustion_reports_counts() {
        // Two features always share one value: k = 1 is never reachable.
        let r = exponential_search(1, 1e-3, 5, |l, _| {
            let v = if l < 1e-2 { 1.0 } else { 0.0 };
            Ok(vec![v, v])
        });
        match r {
            Err(Error::SearchExhausted { k: 1, steps: 5, closest }) => assert_eq!(closest.len(), 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sweep_formula() {
        assert_eq!(feature_count_sweep(50), vec![50, 40, 30, 20, 10]);
        assert_eq!(feature_count_sweep(12), vec![12, 10, 8, 6, 4]);
        assert_eq!(feature_count_sweep(3), vec![3]);
    }
}
