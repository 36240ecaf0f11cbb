//! Per-channel optimal transport between feature stacks.
//!
//! Each channel of a stage is treated as a 1D empirical distribution of its
//! activations. With a quadratic ground cost the optimal coupling between two
//! 1D distributions matches sorted samples, so the per-channel cost has a
//! closed form. Channel costs are weighted by the confounder dictionary,
//! averaged over the causal channels of a stage, and summed across stages with
//! the configured stage weights.
//!
//! [`ot_oracle`] solves the general discrete transport problem exactly for
//! small instances and exists to check the closed form.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureStack;
use crate::confounder::ConfounderDictionary;
use crate::error::{Error, Result};

/// A channel's flattened activations.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalDistribution {
    samples: Vec<f64>,
    sorted: bool,
}

impl EmpiricalDistribution {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDistribution);
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("distribution has non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sorted: false,
        })
    }

    pub fn from_f32(samples: &[f32]) -> Result<Self> {
        Self::new(samples.iter().map(|v| *v as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.sorted
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_sorted(mut self) -> Self {
        if !self.sorted {
            self.samples.sort_unstable_by(f64::total_cmp);
            self.sorted = true;
        }
        self
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMetric {
    #[default]
    Wasserstein2,
    Wasserstein1,
    /// Absolute difference of the channel means.
    MeanAbsDiff,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistanceConfig {
    #[serde(default)]
    pub per_channel_metric: ChannelMetric,
    /// One weight per stage, summing to one. Empty means uniform.
    #[serde(default)]
    pub stage_weights: Vec<f64>,
}

impl DistanceConfig {
    pub fn with_metric(metric: ChannelMetric) -> Self {
        Self {
            per_channel_metric: metric,
            stage_weights: Vec::new(),
        }
    }

    /// Resolved stage weights for a stack with `num_stages` stages.
    pub fn weights_for(&self, num_stages: usize) -> Result<Vec<f64>> {
        if self.stage_weights.is_empty() {
            return Ok(vec![1.0 / num_stages as f64; num_stages]);
        }
        if self.stage_weights.len() != num_stages {
            return Err(Error::InvalidConfig(format!(
                "{} stage weights for {num_stages} stages",
                self.stage_weights.len()
            )));
        }
        if self.stage_weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidConfig("stage weights must be non-negative".into()));
        }
        let sum: f64 = self.stage_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("stage weights sum to {sum}, not 1")));
        }
        Ok(self.stage_weights.clone())
    }
}

/// p-Wasserstein distance between two 1D empirical distributions.
///
/// Equal sample counts use the sorted-sample coupling directly. Unequal
/// counts integrate the difference of the two empirical quantile functions
/// over the merged grid of their breakpoints, which is exact.
pub fn channel_wasserstein(x: &EmpiricalDistribution, y: &EmpiricalDistribution, order: u32) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    if order != 1 && order != 2 {
        return Err(Error::InvalidConfig(format!("unsupported Wasserstein order {order}")));
    }
    let xs = x.clone().into_sorted();
    let ys = y.clone().into_sorted();
    Ok(wasserstein_sorted(xs.samples(), ys.samples(), order))
}

fn pow_abs(d: f64, order: u32) -> f64 {
    if order == 1 {
        d.abs()
    } else {
        d * d
    }
}

fn root(v: f64, order: u32) -> f64 {
    if order == 1 {
        v
    } else {
        v.sqrt()
    }
}

/// Wasserstein distance between already sorted samples.
pub(crate) fn wasserstein_sorted(xs: &[f64], ys: &[f64], order: u32) -> f64 {
    let (n, m) = (xs.len(), ys.len());
    if n == m {
        let sum: f64 = xs.iter().zip(ys).map(|(a, b)| pow_abs(a - b, order)).sum();
        return root(sum / n as f64, order);
    }
    // Walk the merged breakpoints i/n and j/m of the two quantile functions.
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0.0f64;
    let mut acc = 0.0f64;
    while i < n && j < m {
        let next_x = (i + 1) as f64 / n as f64;
        let next_y = (j + 1) as f64 / m as f64;
        let next = next_x.min(next_y);
        acc += (next - prev) * pow_abs(xs[i] - ys[j], order);
        prev = next;
        // Advance both on exact ties of the rational breakpoints.
        let adv_x = (i + 1) * m <= (j + 1) * n;
        let adv_y = (j + 1) * n <= (i + 1) * m;
        if adv_x {
            i += 1;
        }
        if adv_y {
            j += 1;
        }
    }
    root(acc, order)
}

/// Per-channel cost between two channels stored as f32 slices.
pub(crate) fn channel_cost_f32(a: &[f32], b: &[f32], metric: ChannelMetric) -> f64 {
    match metric {
        ChannelMetric::MeanAbsDiff => {
            let ma = a.iter().map(|v| *v as f64).sum::<f64>() / a.len() as f64;
            let mb = b.iter().map(|v| *v as f64).sum::<f64>() / b.len() as f64;
            (ma - mb).abs()
        }
        ChannelMetric::Wasserstein1 | ChannelMetric::Wasserstein2 => {
            let order = if metric == ChannelMetric::Wasserstein1 { 1 } else { 2 };
            let mut sa = a.to_vec();
            let mut sb = b.to_vec();
            sa.sort_unstable_by(f32::total_cmp);
            sb.sort_unstable_by(f32::total_cmp);
            wasserstein_sorted_f32(&sa, &sb, order)
        }
    }
}

fn wasserstein_sorted_f32(xs: &[f32], ys: &[f32], order: u32) -> f64 {
    if xs.len() == ys.len() {
        let sum: f64 = xs
            .iter()
            .zip(ys)
            .map(|(a, b)| pow_abs(*a as f64 - *b as f64, order))
            .sum();
        return root(sum / xs.len() as f64, order);
    }
    let xs: Vec<f64> = xs.iter().map(|v| *v as f64).collect();
    let ys: Vec<f64> = ys.iter().map(|v| *v as f64).collect();
    wasserstein_sorted(&xs, &ys, order)
}

/// Per-channel costs of every stage, computed in parallel across channels.
/// The result order is fixed, whatever the thread count.
pub fn channel_costs(f_i: &FeatureStack, f_d: &FeatureStack, metric: ChannelMetric) -> Result<Vec<Vec<f64>>> {
    f_i.ensure_compatible(f_d)?;
    Ok((0..f_i.num_stages())
        .map(|s| {
            let channels = f_i.stages[s].dim().0;
            (0..channels)
                .into_par_iter()
                .map(|c| channel_cost_f32(f_i.channel(s, c), f_d.channel(s, c), metric))
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportResult {
    /// Weighted mean cost over the causal channels of each stage (0 for skipped stages).
    pub per_stage_cost: Vec<f64>,
    /// Unweighted metric value of every channel.
    pub per_channel_cost: Vec<Vec<f64>>,
    pub total: f64,
    /// Stages with no channel of non-zero weight.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped_stages: Vec<usize>,
}

/// Aggregate precomputed channel costs under per-channel weights.
pub fn aggregate(per_channel_cost: Vec<Vec<f64>>, weights: &[Vec<f64>], cfg: &DistanceConfig) -> Result<TransportResult> {
    if weights.len() != per_channel_cost.len()
        || weights.iter().zip(&per_channel_cost).any(|(w, c)| w.len() != c.len())
    {
        return Err(Error::ShapeMismatch("dictionary shape does not match feature stack".into()));
    }
    let stage_weights = cfg.weights_for(per_channel_cost.len())?;
    let mut per_stage_cost = Vec::with_capacity(per_channel_cost.len());
    let mut skipped_stages = Vec::new();
    let mut total = 0.0;
    for (s, (costs, gammas)) in per_channel_cost.iter().zip(weights).enumerate() {
        let causal: Vec<(f64, f64)> = costs
            .iter()
            .zip(gammas)
            .filter(|(_, g)| **g > 0.0)
            .map(|(c, g)| (*c, *g))
            .collect();
        if causal.is_empty() {
            log::warn!("stage {s} has no causal channel, skipped");
            skipped_stages.push(s);
            per_stage_cost.push(0.0);
            continue;
        }
        let stage = causal.iter().map(|(c, g)| c * g).sum::<f64>() / causal.len() as f64;
        per_stage_cost.push(stage);
        total += stage_weights[s] * stage;
    }
    if skipped_stages.len() == per_channel_cost.len() {
        return Err(Error::EmptyCausalSet);
    }
    Ok(TransportResult {
        per_stage_cost,
        per_channel_cost,
        total,
        skipped_stages,
    })
}

/// Dictionary-weighted transport cost between two feature stacks.
pub fn cot_distance(
    f_i: &FeatureStack,
    f_d: &FeatureStack,
    gamma: &ConfounderDictionary,
    cfg: &DistanceConfig,
) -> Result<TransportResult> {
    gamma.check_matches(&f_i.backbone_id, &f_i.channel_counts())?;
    cot_distance_weights(f_i, f_d, &gamma.weights, cfg)
}

pub fn cot_distance_weights(
    f_i: &FeatureStack,
    f_d: &FeatureStack,
    weights: &[Vec<f64>],
    cfg: &DistanceConfig,
) -> Result<TransportResult> {
    let costs = channel_costs(f_i, f_d, cfg.per_channel_metric)?;
    aggregate(costs, weights, cfg)
}

/// Largest side accepted by [`ot_oracle`].
pub const ORACLE_MAX_POINTS: usize = 6;

/// Exact minimal transport cost between two discrete distributions.
///
/// `a` and `b` are the masses of the source and target points and `cost[i][j]`
/// is the ground cost of moving mass from source `i` to target `j`. The
/// transportation linear program is solved with a dense two-phase simplex
/// using Bland's rule, which terminates at an optimal vertex of the
/// transportation polytope.
pub fn ot_oracle(a: &[f64], b: &[f64], cost: &[Vec<f64>]) -> Result<f64> {
    let (m, n) = (a.len(), b.len());
    if m == 0 || n == 0 {
        return Err(Error::EmptyDistribution);
    }
    if m > ORACLE_MAX_POINTS || n > ORACLE_MAX_POINTS {
        return Err(Error::InvalidConfig(format!(
            "oracle supports at most {ORACLE_MAX_POINTS} points per side"
        )));
    }
    for (side, w) in [("source", a), ("target", b)] {
        if w.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::WeightMismatch(format!("{side} has negative weights")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::WeightMismatch(format!("{side} weights sum to {sum}")));
        }
    }
    if cost.len() != m || cost.iter().any(|row| row.len() != n) {
        return Err(Error::ShapeMismatch(format!("cost matrix must be {m}x{n}")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvalidConfig("cost matrix has non-finite entries".into()));
    }

    // Variables x[i*n + j]; row sums equal a, column sums equal b. The last
    // column constraint is implied by the others and dropped.
    let vars = m * n;
    let mut rows = Vec::with_capacity(m + n - 1);
    let mut rhs = Vec::with_capacity(m + n - 1);
    for (i, ai) in a.iter().enumerate() {
        let mut row = vec![0.0; vars];
        row[i * n..(i + 1) * n].iter_mut().for_each(|v| *v = 1.0);
        rows.push(row);
        rhs.push(*ai);
    }
    for (j, bj) in b.iter().enumerate().take(n - 1) {
        let mut row = vec![0.0; vars];
        (0..m).for_each(|i| row[i * n + j] = 1.0);
        rows.push(row);
        rhs.push(*bj);
    }
    let c: Vec<f64> = cost.iter().flatten().copied().collect();
    simplex_minimize(&c, &rows, &rhs)
}

/// Uniform-weight 1D instance: returns the optimal cost with ground cost |x - y|^p.
pub fn ot_oracle_1d(xs: &[f64], ys: &[f64], order: u32) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    let a = vec![1.0 / xs.len() as f64; xs.len()];
    let b = vec![1.0 / ys.len() as f64; ys.len()];
    let cost: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| ys.iter().map(|y| (x - y).abs().powi(order as i32)).collect())
        .collect();
    // Uniform weights from 1/n may miss the 1e-12 sum check by rounding.
    let fix = |mut w: Vec<f64>| {
        let s: f64 = w.iter().sum();
        let last = w.len() - 1;
        w[last] += 1.0 - s;
        w
    };
    ot_oracle(&fix(a), &fix(b), &cost)
}

const SIMPLEX_EPS: f64 = 1e-12;

/// min c·x subject to rows·x = rhs, x >= 0 (rhs >= 0).
fn simplex_minimize(c: &[f64], rows: &[Vec<f64>], rhs: &[f64]) -> Result<f64> {
    let (k, vars) = (rows.len(), c.len());
    // Tableau columns: original vars, then one artificial per row, then rhs.
    let width = vars + k + 1;
    let mut t: Vec<Vec<f64>> = rows
        .iter()
        .zip(rhs)
        .enumerate()
        .map(|(r, (row, b))| {
            let mut line = row.clone();
            line.extend((0..k).map(|a| if a == r { 1.0 } else { 0.0 }));
            line.push(*b);
            line
        })
        .collect();
    let mut basis: Vec<usize> = (vars..vars + k).collect();

    // Phase one: minimize the sum of artificials.
    let mut phase1 = vec![0.0; vars + k];
    phase1[vars..].iter_mut().for_each(|v| *v = 1.0);
    run_simplex(&mut t, &mut basis, &phase1, vars + k)?;
    let infeasibility: f64 = basis
        .iter()
        .zip(&t)
        .filter(|(b, _)| **b >= vars)
        .map(|(_, row)| row[width - 1])
        .sum();
    if infeasibility > 1e-9 {
        return Err(Error::WeightMismatch("transport problem is infeasible".into()));
    }
    // Drive remaining (zero-valued) artificials out of the basis where possible.
    for r in 0..k {
        if basis[r] >= vars {
            if let Some(col) = (0..vars).find(|&j| t[r][j].abs() > SIMPLEX_EPS) {
                pivot(&mut t, r, col);
                basis[r] = col;
            }
        }
    }

    // Phase two on the original variables only.
    run_simplex(&mut t, &mut basis, c, vars)?;
    Ok(basis
        .iter()
        .zip(&t)
        .filter(|(b, _)| **b < vars)
        .map(|(b, row)| c[*b] * row[width - 1])
        .sum())
}

fn pivot(t: &mut [Vec<f64>], r: usize, col: usize) {
    let p = t[r][col];
    t[r].iter_mut().for_each(|v| *v /= p);
    let pivot_row = t[r].clone();
    for (i, row) in t.iter_mut().enumerate() {
        if i != r {
            let f = row[col];
            if f != 0.0 {
                row.iter_mut().zip(&pivot_row).for_each(|(v, p)| *v -= f * p);
            }
        }
    }
}

/// Bland's-rule simplex over the first `active` columns.
fn run_simplex(t: &mut [Vec<f64>], basis: &mut [usize], cost: &[f64], active: usize) -> Result<()> {
    let width = t[0].len();
    for _ in 0..10_000 {
        // Reduced costs c_j - c_B B^-1 A_j.
        let entering = (0..active).find(|&j| {
            if basis.contains(&j) {
                return false;
            }
            let reduced = cost[j]
                - basis
                    .iter()
                    .zip(t.iter())
                    .map(|(b, row)| cost.get(*b).copied().unwrap_or(0.0) * row[j])
                    .sum::<f64>();
            reduced < -SIMPLEX_EPS
        });
        let Some(col) = entering else {
            return Ok(());
        };
        let mut leave: Option<(usize, f64)> = None;
        for (r, row) in t.iter().enumerate() {
            if row[col] > SIMPLEX_EPS {
                let ratio = row[width - 1] / row[col];
                let better = match leave {
                    None => true,
                    Some((lr, best)) => {
                        ratio < best - SIMPLEX_EPS || (ratio <= best + SIMPLEX_EPS && basis[r] < basis[lr])
                    }
                };
                if better {
                    leave = Some((r, ratio));
                }
            }
        }
        let Some((r, _)) = leave else {
            return Err(Error::InvalidConfig("transport problem is unbounded".into()));
        };
        pivot(t, r, col);
        basis[r] = col;
    }
    Err(Error::InvalidConfig("simplex did not terminate".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(v: &[f64]) -> EmpiricalDistribution {
        EmpiricalDistribution::new(v.to_vec()).unwrap()
    }

    /// Brute force over permutations: optimal for uniform equal-count instances.
    fn best_permutation(xs: &[f64], ys: &[f64], order: u32) -> f64 {
        fn permute(k: usize, idx: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
            if k == idx.len() {
                f(idx);
                return;
            }
            for i in k..idx.len() {
                idx.swap(k, i);
                permute(k + 1, idx, f);
                idx.swap(k, i);
            }
        }
        let mut best = f64::INFINITY;
        let mut idx: Vec<usize> = (0..ys.len()).collect();
        permute(0, &mut idx, &mut |p| {
            let c: f64 = xs.iter().zip(p).map(|(x, j)| (x - ys[*j]).abs().powi(order as i32)).sum();
            best = best.min(c / xs.len() as f64);
        });
        best
    }

    #[test]
    fn identical_distributions_are_at_zero() {
        let x = dist(&[0.3, -1.0, 2.5]);
        assert_eq!(channel_wasserstein(&x, &x, 2).unwrap(), 0.0);
        assert_eq!(channel_wasserstein(&x, &dist(&[2.5, 0.3, -1.0]), 1).unwrap(), 0.0);
    }

    #[test]
    fn translation_by_two() {
        let w = channel_wasserstein(&dist(&[0.0, 1.0]), &dist(&[2.0, 3.0]), 2).unwrap();
        assert_eq!(w, 2.0);
    }

    #[test]
    fn empty_distribution_is_rejected() {
        assert!(matches!(EmpiricalDistribution::new(vec![]), Err(Error::EmptyDistribution)));
    }

    #[test]
    fn unequal_counts_match_oracle() {
        let xs = [0.0, 1.0, 5.0];
        let ys = [2.0, -1.0];
        for order in [1, 2] {
            let w = channel_wasserstein(&dist(&xs), &dist(&ys), order).unwrap();
            let oracle = ot_oracle_1d(&xs, &ys, order).unwrap();
            let expected = if order == 1 { oracle } else { oracle.sqrt() };
            assert!((w - expected).abs() < 1e-12, "order {order}: {w} vs {expected}");
        }
    }

    #[test]
    fn oracle_point_masses() {
        let c = ot_oracle(&[1.0], &[1.0], &[vec![1.0]]).unwrap();
        assert_eq!(c, 1.0);
        // delta_0 to delta_1 under quadratic cost.
        assert_eq!(ot_oracle_1d(&[0.0], &[1.0], 2).unwrap(), 1.0);
    }

    #[test]
    fn oracle_uniform_same_support_is_zero() {
        assert_eq!(ot_oracle_1d(&[0.0, 1.0], &[0.0, 1.0], 2).unwrap(), 0.0);
    }

    #[test]
    fn oracle_shifted_two_points_absolute_cost() {
        // Vertices of the 2x2 polytope: identity coupling costs (1+1)/2 = 1,
        // the crossed coupling costs (2+0)/2 = 1. Both give 1.
        let c = ot_oracle_1d(&[0.0, 1.0], &[1.0, 2.0], 1).unwrap();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_rejects_unnormalized_weights() {
        let cost = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(matches!(
            ot_oracle(&[0.5, 0.6], &[0.5, 0.5], &cost),
            Err(Error::WeightMismatch(_))
        ));
    }

    #[test]
    fn oracle_handles_uneven_masses() {
        // All mass of the source at 0 must move: 0.25 to 1 and 0.75 to 3.
        let cost = vec![vec![1.0, 9.0]];
        let c = ot_oracle(&[1.0], &[0.25, 0.75], &cost).unwrap();
        assert!((c - (0.25 + 6.75)).abs() < 1e-12);
    }

    #[test]
    fn mean_abs_diff_is_mean_gap() {
        let c = channel_cost_f32(&[0.0, 2.0], &[5.0, 1.0], ChannelMetric::MeanAbsDiff);
        assert_eq!(c, 2.0);
    }

    #[test]
    fn stage_weights_validation() {
        let cfg = DistanceConfig {
            per_channel_metric: ChannelMetric::Wasserstein2,
            stage_weights: vec![0.5, 0.4],
        };
        assert!(cfg.weights_for(2).is_err());
        assert!(cfg.weights_for(3).is_err());
        assert_eq!(DistanceConfig::default().weights_for(4).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn aggregate_skips_empty_stage_and_errors_when_all_empty() {
        let costs = vec![vec![1.0, 3.0], vec![2.0]];
        let r = aggregate(costs.clone(), &[vec![1.0, 0.0], vec![0.0]], &DistanceConfig::default()).unwrap();
        assert_eq!(r.skipped_stages, vec![1]);
        assert_eq!(r.total, 0.5);
        assert!(matches!(
            aggregate(costs, &[vec![0.0, 0.0], vec![0.0]], &DistanceConfig::default()),
            Err(Error::EmptyCausalSet)
        ));
    }

    proptest! {
        #[test]
        fn closed_form_matches_permutation_brute_force(
            xs in proptest::collection::vec(-5.0f64..5.0, 1..=6),
            seed in proptest::collection::vec(-5.0f64..5.0, 6),
        ) {
            let ys = &seed[..xs.len()];
            for order in [1u32, 2] {
                let w = channel_wasserstein(&dist(&xs), &dist(ys), order).unwrap();
                let brute = best_permutation(&xs, ys, order);
                let brute = if order == 1 { brute } else { brute.sqrt() };
                prop_assert!((w - brute).abs() < 1e-9);
            }
        }

        #[test]
        fn simplex_matches_permutation_brute_force(
            xs in proptest::collection::vec(-5.0f64..5.0, 1..=5),
            seed in proptest::collection::vec(-5.0f64..5.0, 5),
        ) {
            let ys = &seed[..xs.len()];
            let lp = ot_oracle_1d(&xs, ys, 2).unwrap();
            let brute = best_permutation(&xs, ys, 2);
            prop_assert!((lp - brute).abs() < 1e-9);
        }

        #[test]
        fn metric_axioms(
            x in proptest::collection::vec(-3.0f64..3.0, 4),
            y in proptest::collection::vec(-3.0f64..3.0, 4),
            z in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            for order in [1u32, 2] {
                let (dx, dy, dz) = (dist(&x), dist(&y), dist(&z));
                let xy = channel_wasserstein(&dx, &dy, order).unwrap();
                let yx = channel_wasserstein(&dy, &dx, order).unwrap();
                let xz = channel_wasserstein(&dx, &dz, order).unwrap();
                let zy = channel_wasserstein(&dz, &dy, order).unwrap();
                prop_assert!(xy >= 0.0);
                prop_assert_eq!(xy, yx);
                prop_assert!(xy <= xz + zy + 1e-12);
            }
        }
    }
}
