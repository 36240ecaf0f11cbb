//! Correlation metrics and the logistic mapping applied before PLCC.

use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetManifest, PairRecord};
use crate::error::{Error, Result};

fn check_pair(x: &[f64], y: &[f64], min_len: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < min_len {
        return Err(Error::TooFewSamples {
            needed: min_len,
            got: x.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("correlation inputs must be finite".into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Pearson linear correlation coefficient.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 3)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based fractional ranks; tied values share the mean of their ranks.
pub fn fractional_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of fractional ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 3)?;
    plcc(&fractional_ranks(x), &fractional_ranks(y))
}

/// `(β1 - β2) / (1 + exp(-(x - β3) / |β4|)) + β2`
pub fn logistic4(x: f64, beta: &[f64; 4]) -> f64 {
    let [b1, b2, b3, b4] = *beta;
    (b1 - b2) / (1.0 + (-(x - b3) / b4.abs()).exp()) + b2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub params: [f64; 4],
    pub mapped: Vec<f64>,
    /// False when the simplex search failed and the affine fallback was used.
    pub converged: bool,
}

fn sse(beta: &[f64; 4], pred: &[f64], mos: &[f64]) -> f64 {
    let s: f64 = pred.iter().zip(mos).map(|(p, m)| (logistic4(*p, beta) - m).powi(2)).sum();
    if s.is_finite() {
        s
    } else {
        f64::INFINITY
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn population_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Nelder–Mead minimization from `start` with per-coordinate initial steps.
fn nelder_mead(f: &dyn Fn(&[f64; 4]) -> f64, start: [f64; 4], steps: [f64; 4], max_iter: usize) -> ([f64; 4], f64) {
    const ALPHA: f64 = 1.0;
    const GAMMA: f64 = 2.0;
    const RHO: f64 = 0.5;
    const SIGMA: f64 = 0.5;

    let mut simplex: Vec<([f64; 4], f64)> = Vec::with_capacity(5);
    simplex.push((start, f(&start)));
    for i in 0..4 {
        let mut p = start;
        p[i] += steps[i];
        simplex.push((p, f(&p)));
    }
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[4].1);
        let spread = (worst - best).abs();
        let size = simplex[1..]
            .iter()
            .map(|(p, _)| p.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if spread <= 1e-30 + 1e-15 * best.abs() && size < 1e-12 {
            break;
        }
        let mut centroid = [0.0; 4];
        for (p, _) in &simplex[..4] {
            for i in 0..4 {
                centroid[i] += p[i] / 4.0;
            }
        }
        let along = |t: f64| {
            let mut q = [0.0; 4];
            for i in 0..4 {
                q[i] = centroid[i] + t * (simplex[4].0[i] - centroid[i]);
            }
            q
        };
        let reflected = along(-ALPHA);
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = along(-ALPHA * GAMMA);
            let fe = f(&expanded);
            simplex[4] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[3].1 {
            simplex[4] = (reflected, fr);
        } else {
            let contracted = if fr < simplex[4].1 { along(-ALPHA * RHO) } else { along(RHO) };
            let fc = f(&contracted);
            if fc < fr.min(simplex[4].1) {
                simplex[4] = (contracted, fc);
            } else {
                let anchor = simplex[0].0;
                for (p, fp) in simplex[1..].iter_mut() {
                    for i in 0..4 {
                        p[i] = anchor[i] + SIGMA * (p[i] - anchor[i]);
                    }
                    *fp = f(p);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

/// Least-squares fit of the 4-parameter logistic by Nelder–Mead simplex search.
///
/// Initialization: β1 = max(mos), β2 = min(mos), β3 = median(pred),
/// β4 = std(pred), plus the same start with β1 and β2 swapped; the better of
/// the two searches is kept. When the fitted curve correlates worse with
/// `mos` than the raw predictions do (the affine limit of the family, reached
/// as |β4| grows), the affine least-squares map is returned instead and the
/// fit is flagged as not converged.
pub fn logistic4_fit(pred: &[f64], mos: &[f64]) -> Result<LogisticFit> {
    check_pair(pred, mos, 5)?;
    let mos_range = mos.iter().copied().fold(f64::NEG_INFINITY, f64::max) - mos.iter().copied().fold(f64::INFINITY, f64::min);
    let pred_std = population_std(pred);
    if mos_range == 0.0 || pred_std == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let (hi, lo) = (
        mos.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mos.iter().copied().fold(f64::INFINITY, f64::min),
    );
    let objective = |b: &[f64; 4]| sse(b, pred, mos);
    let mut best = [hi, lo, median(pred), pred_std];
    let mut best_f = f64::INFINITY;
    for (b1, b2) in [(hi, lo), (lo, hi)] {
        let (p, fp) = search_from(&objective, [b1, b2, median(pred), pred_std], mos_range, pred_std);
        if fp < best_f {
            best = p;
            best_f = fp;
        }
    }

    let mapped: Vec<f64> = pred.iter().map(|p| logistic4(*p, &best)).collect();
    let raw = plcc(pred, mos)?;
    let fitted = plcc(&mapped, mos).unwrap_or(f64::NEG_INFINITY);
    if best_f.is_finite() && mapped.iter().all(|v| v.is_finite()) && fitted >= raw - 1e-9 {
        return Ok(LogisticFit {
            params: best,
            mapped,
            converged: true,
        });
    }
    log::warn!("logistic fit did not improve on the raw predictions, using affine fallback");
    let (slope, intercept) = affine_fit(pred, mos);
    Ok(LogisticFit {
        params: best,
        mapped: pred.iter().map(|p| slope * p + intercept).collect(),
        converged: false,
    })
}

/// Nelder–Mead from `start`, restarted from its own optimum until the
/// objective stops improving.
fn search_from(objective: &dyn Fn(&[f64; 4]) -> f64, start: [f64; 4], mos_range: f64, pred_std: f64) -> ([f64; 4], f64) {
    let steps = [0.1 * mos_range, 0.1 * mos_range, 0.5 * pred_std, 0.5 * pred_std];
    let (mut best, mut best_f) = nelder_mead(objective, start, steps, 20_000);
    for _ in 0..20 {
        let restart_steps = [
            0.05 * mos_range,
            0.05 * mos_range,
            0.1 * pred_std,
            0.1 * best[3].abs().max(1e-6 * pred_std),
        ];
        let (p, fp) = nelder_mead(objective, best, restart_steps, 20_000);
        let improved = fp < best_f * (1.0 - 1e-12) && best_f - fp > 1e-300;
        if fp <= best_f {
            best = p;
            best_f = fp;
        }
        if !improved {
            break;
        }
    }
    (best, best_f)
}

fn affine_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub plcc: f64,
    pub srcc: f64,
    /// Logistic parameters, fitted on min-max normalized predictions.
    pub logistic_params: [f64; 4],
    pub n_pairs: usize,
    /// Lower-better scores were negated before regression.
    pub reversed: bool,
    pub fit_converged: bool,
    /// PLCC of the normalized predictions before the logistic mapping.
    pub plcc_raw: f64,
    /// `mos_norm - mapped prediction`, in manifest order.
    pub residuals: Vec<f64>,
}

impl MetricsReport {
    pub const TSV_HEADER: &'static str = "name\tn_pairs\tplcc\tsrcc\tplcc_raw\treversed\tfit_converged";

    pub fn tsv_line(&self, name: &str) -> String {
        format!(
            "{name}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
            self.n_pairs, self.plcc, self.srcc, self.plcc_raw, self.reversed, self.fit_converged
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Per pair `(mos_norm, mapped prediction)`.
    pub scatter: Vec<(f64, f64)>,
}

/// Correlate precomputed scores with normalized MOS.
pub fn evaluate_scores(mos_norm: &[f64], scores: &[f64], lower_better_score: bool) -> Result<Evaluation> {
    check_pair(scores, mos_norm, 3)?;
    let oriented: Vec<f64> = scores
        .iter()
        .map(|s| if lower_better_score { -s } else { *s })
        .collect();
    let lo = oriented.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = oriented.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Err(Error::ZeroVariance);
    }
    let normalized: Vec<f64> = oriented.iter().map(|v| (v - lo) / (hi - lo)).collect();

    let srcc = srcc(&normalized, mos_norm)?;
    let plcc_raw = plcc(&normalized, mos_norm)?;
    let (params, mapped, converged) = if normalized.len() >= 5 {
        let fit = logistic4_fit(&normalized, mos_norm)?;
        (fit.params, fit.mapped, fit.converged)
    } else {
        let (a, b) = affine_fit(&normalized, mos_norm);
        ([f64::NAN; 4], normalized.iter().map(|p| a * p + b).collect(), false)
    };
    let plcc = plcc(&mapped, mos_norm).unwrap_or(plcc_raw);
    let residuals = mos_norm.iter().zip(&mapped).map(|(m, p)| m - p).collect();
    Ok(Evaluation {
        report: MetricsReport {
            plcc,
            srcc,
            logistic_params: params,
            n_pairs: scores.len(),
            reversed: lower_better_score,
            fit_converged: converged,
            plcc_raw,
            residuals,
        },
        scatter: mos_norm.iter().copied().zip(mapped).collect(),
    })
}

/// Score every pair of a normalized manifest and correlate with its MOS.
pub fn evaluate(
    manifest: &DatasetManifest,
    mut scorer: impl FnMut(&PairRecord) -> Result<f64>,
    lower_better_score: bool,
) -> Result<Evaluation> {
    if !manifest.normalized {
        return Err(Error::InvalidConfig("manifest must be normalized before evaluation".into()));
    }
    let scores = manifest.records.iter().map(&mut scorer).collect::<Result<Vec<_>>>()?;
    let mos: Vec<f64> = manifest.records.iter().map(|r| r.mos_norm).collect();
    evaluate_scores(&mos, &scores, lower_better_score)
}
