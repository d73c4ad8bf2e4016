//! Evaluation backend: equal error rate, minimum and actual detection cost,
//! logistic-regression score calibration, and equal-weight fusion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::score::{ScoreSet, Trial};

#[derive(Error, Debug)]
pub enum BackendError {
    #[error("metric argument error: {0}")]
    Arg(String),
    #[error("score sets are not aligned: {0}")]
    Alignment(String),
    #[error("calibration fit failed: {0}")]
    Fit(String),
    #[error(transparent)]
    Score(#[from] crate::score::ScoreError),
}

/// Detection-cost operating points: target priors (averaged), miss cost and
/// false-alarm cost.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcfParams {
    pub p_targets: Vec<f64>,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            p_targets: vec![0.01, 0.005],
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn single(p_target: f64) -> Self {
        DcfParams {
            p_targets: vec![p_target],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.p_targets.is_empty() {
            return Err(BackendError::Arg("need at least one target prior".into()));
        }
        for &p in &self.p_targets {
            if !(0.0 < p && p < 1.0) {
                return Err(BackendError::Arg(format!("prior {p} outside (0, 1)")));
            }
        }
        if self.c_miss <= 0.0 || self.c_fa <= 0.0 {
            return Err(BackendError::Arg("costs must be positive".into()));
        }
        Ok(())
    }
}

fn partition(scores: &ScoreSet) -> Result<(Vec<f64>, Vec<f64>), BackendError> {
    let (tar, non) = scores.partition_by_label()?;
    if tar.is_empty() || non.is_empty() {
        return Err(BackendError::Arg(format!(
            "need both classes: {} target, {} nontarget trials",
            tar.len(),
            non.len()
        )));
    }
    if tar.iter().chain(&non).any(|v| !v.is_finite()) {
        return Err(BackendError::Arg("non-finite score".into()));
    }
    Ok((tar, non))
}

/// ROC operating points for the accept-if-score≥threshold rule, ordered
/// from accept-everything to reject-everything.
fn operating_points(tar: &[f64], non: &[f64]) -> Vec<(f64, f64)> {
    let nt = tar.len() as f64;
    let nn = non.len() as f64;
    let mut all: Vec<f64> = tar.iter().chain(non).cloned().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();
    let mut tar_sorted = tar.to_vec();
    tar_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut non_sorted = non.to_vec();
    non_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // At threshold t: miss = #targets < t, fa = #nontargets >= t.
    let mut points = Vec::with_capacity(all.len() + 1);
    let mut ti = 0; // targets strictly below the current threshold
    let mut ni = 0;
    for &t in &all {
        while ti < tar_sorted.len() && tar_sorted[ti] < t {
            ti += 1;
        }
        while ni < non_sorted.len() && non_sorted[ni] < t {
            ni += 1;
        }
        points.push((ti as f64 / nt, (non_sorted.len() - ni) as f64 / nn));
    }
    // Reject everything.
    points.push((1.0, 0.0));
    points
}

/// Equal error rate: the P_miss = P_fa crossing of the ROC, linearly
/// interpolated between adjacent operating points.
pub fn compute_eer(scores: &ScoreSet) -> Result<f64, BackendError> {
    let (tar, non) = partition(scores)?;
    Ok(eer_from_points(&operating_points(&tar, &non)))
}

fn eer_from_points(points: &[(f64, f64)]) -> f64 {
    for k in 1..points.len() {
        let (m1, f1) = points[k - 1];
        let (m2, f2) = points[k];
        let d1 = m1 - f1;
        let d2 = m2 - f2;
        if d1 <= 0.0 && d2 >= 0.0 {
            let denom = d2 - d1;
            if denom.abs() < 1e-300 {
                return 0.5 * (m1 + f1);
            }
            let alpha = -d1 / denom;
            return m1 + alpha * (m2 - m1);
        }
    }
    // The sweep always brackets the crossing (starts at miss 0 / fa 1 and
    // ends at miss 1 / fa 0); defend against degenerate input anyway.
    0.5
}

fn normalized_cost(pmiss: f64, pfa: f64, p: f64, c_miss: f64, c_fa: f64) -> f64 {
    (c_miss * p * pmiss + c_fa * (1.0 - p) * pfa) / (c_miss * p).min(c_fa * (1.0 - p))
}

/// Minimum normalized detection cost over all thresholds, averaged over the
/// configured priors (each prior takes its own minimum).
pub fn compute_min_dcf(scores: &ScoreSet, params: &DcfParams) -> Result<f64, BackendError> {
    params.validate()?;
    let (tar, non) = partition(scores)?;
    let points = operating_points(&tar, &non);
    let mut total = 0.0;
    for &p in &params.p_targets {
        let best = points
            .iter()
            .map(|&(pm, pf)| normalized_cost(pm, pf, p, params.c_miss, params.c_fa))
            .fold(f64::INFINITY, f64::min);
        total += best;
    }
    Ok(total / params.p_targets.len() as f64)
}

/// Normalized detection cost at the Bayes threshold
/// `ln(c_fa(1-p) / (c_miss p))`, treating scores as log-likelihood ratios;
/// averaged over the configured priors.
pub fn compute_act_dcf(scores: &ScoreSet, params: &DcfParams) -> Result<f64, BackendError> {
    params.validate()?;
    let (tar, non) = partition(scores)?;
    let nt = tar.len() as f64;
    let nn = non.len() as f64;
    let mut total = 0.0;
    for &p in &params.p_targets {
        let threshold = ((params.c_fa * (1.0 - p)) / (params.c_miss * p)).ln();
        let pmiss = tar.iter().filter(|&&s| s < threshold).count() as f64 / nt;
        let pfa = non.iter().filter(|&&s| s >= threshold).count() as f64 / nn;
        total += normalized_cost(pmiss, pfa, p, params.c_miss, params.c_fa);
    }
    Ok(total / params.p_targets.len() as f64)
}

/// Affine score-to-LLR map fitted by prior-weighted logistic regression.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub a: f64,
    pub b: f64,
}

impl CalibrationModel {
    pub fn apply(&self, scores: &ScoreSet) -> ScoreSet {
        ScoreSet {
            trials: scores.trials.clone(),
            scores: scores.scores.iter().map(|s| self.a * s + self.b).collect(),
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fit `llr(s) = a·s + b` by minimizing the prior-weighted binomial
/// negative log-likelihood with effective prior `p_target` (Newton's method
/// with backtracking, gradient norm ≤ 1e-8).
pub fn calibrate_fit(
    dev_scores: &ScoreSet,
    p_target: f64,
) -> Result<CalibrationModel, BackendError> {
    if !(0.0 < p_target && p_target < 1.0) {
        return Err(BackendError::Arg(format!(
            "effective prior {p_target} outside (0, 1)"
        )));
    }
    let (tar, non) = partition(dev_scores)?;
    let spread = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    };
    if spread(&tar).max(spread(&non)) <= 0.0 && (tar[0] - non[0]).abs() <= 0.0 {
        return Err(BackendError::Fit(
            "scores are a single constant value".into(),
        ));
    }
    let tau = (p_target / (1.0 - p_target)).ln();
    let wt = p_target / tar.len() as f64;
    let wn = (1.0 - p_target) / non.len() as f64;

    let objective = |a: f64, b: f64| -> f64 {
        let mut obj = 0.0;
        for &s in &tar {
            obj += wt * softplus(-(a * s + b + tau));
        }
        for &s in &non {
            obj += wn * softplus(a * s + b + tau);
        }
        obj
    };

    let mut a = 1.0;
    let mut b = 0.0;
    let mut obj = objective(a, b);
    for _ in 0..200 {
        // Gradient and Hessian of the weighted NLL.
        let (mut ga, mut gb) = (0.0, 0.0);
        let (mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0);
        for &s in &tar {
            let z = a * s + b + tau;
            let d = -wt * sigmoid(-z);
            ga += d * s;
            gb += d;
            let w = wt * sigmoid(z) * sigmoid(-z);
            haa += w * s * s;
            hab += w * s;
            hbb += w;
        }
        for &s in &non {
            let z = a * s + b + tau;
            let d = wn * sigmoid(z);
            ga += d * s;
            gb += d;
            let w = wn * sigmoid(z) * sigmoid(-z);
            haa += w * s * s;
            hab += w * s;
            hbb += w;
        }
        if ga.abs().max(gb.abs()) <= 1e-8 {
            return Ok(CalibrationModel { a, b });
        }
        let det = haa * hbb - hab * hab;
        let (mut da, mut db) = if det.abs() > 1e-30 {
            ((-(ga * hbb - gb * hab)) / det, (-(gb * haa - ga * hab)) / det)
        } else {
            (-ga, -gb) // fall back to steepest descent
        };
        // Backtracking line search.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = objective(a + step * da, b + step * db);
            if cand < obj {
                a += step * da;
                b += step * db;
                obj = cand;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            da = -ga;
            db = -gb;
            let mut step = 1.0;
            let mut ok = false;
            for _ in 0..80 {
                let cand = objective(a + step * da, b + step * db);
                if cand < obj {
                    a += step * da;
                    b += step * db;
                    obj = cand;
                    ok = true;
                    break;
                }
                step *= 0.5;
            }
            if !ok {
                return Err(BackendError::Fit(format!(
                    "no descent direction at a={a}, b={b}"
                )));
            }
        }
    }
    Err(BackendError::Fit(
        "did not reach gradient tolerance within 200 iterations".into(),
    ))
}

/// Equal-weight fusion: per-trial arithmetic mean over systems aligned to
/// the same trial list.
pub fn fuse(score_sets: &[ScoreSet]) -> Result<ScoreSet, BackendError> {
    let first = score_sets
        .first()
        .ok_or_else(|| BackendError::Arg("no systems to fuse".into()))?;
    for (k, other) in score_sets.iter().enumerate().skip(1) {
        if other.trials.len() != first.trials.len() {
            return Err(BackendError::Alignment(format!(
                "system {k} has {} trials, expected {}",
                other.trials.len(),
                first.trials.len()
            )));
        }
        for (a, b) in first.trials.iter().zip(&other.trials) {
            if a.enroll_id != b.enroll_id || a.test_id != b.test_id {
                return Err(BackendError::Alignment(format!(
                    "system {k}: trial {} {} does not match {} {}",
                    b.enroll_id, b.test_id, a.enroll_id, a.test_id
                )));
            }
        }
    }
    let n = score_sets.len() as f64;
    let trials: Vec<Trial> = first.trials.clone();
    let scores: Vec<f64> = (0..first.scores.len())
        .map(|i| score_sets.iter().map(|s| s.scores[i]).sum::<f64>() / n)
        .collect();
    Ok(ScoreSet { trials, scores })
}

/// One row of an evaluation report.
#[derive(Clone, Debug)]
pub struct ReportRow {
    pub system: String,
    pub eer: f64,
    pub min_dcf: f64,
    pub act_dcf: Option<f64>,
}

/// Plain-text table plus a machine-readable key=value block.
pub fn format_report(rows: &[ReportRow], params: &DcfParams) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    writeln!(out, "{:<24} {:>8} {:>10} {:>10}", "system", "EER%", "minDCF", "actDCF").unwrap();
    for r in rows {
        let act = r
            .act_dcf
            .map(|v| format!("{:.4}", v))
            .unwrap_or_else(|| "-".into());
        writeln!(
            out,
            "{:<24} {:>8.3} {:>10.4} {:>10}",
            r.system,
            r.eer * 100.0,
            r.min_dcf,
            act
        )
        .unwrap();
    }
    writeln!(out).unwrap();
    let priors = params
        .p_targets
        .iter()
        .map(|p| p.to_string())
        .collect::<Vec<_>>()
        .join(",");
    writeln!(out, "dcf_priors={priors}").unwrap();
    writeln!(out, "dcf_c_miss={}", params.c_miss).unwrap();
    writeln!(out, "dcf_c_fa={}", params.c_fa).unwrap();
    for r in rows {
        writeln!(out, "{}.eer={:.6}", r.system, r.eer).unwrap();
        writeln!(out, "{}.min_dcf={:.6}", r.system, r.min_dcf).unwrap();
        if let Some(act) = r.act_dcf {
            writeln!(out, "{}.act_dcf={:.6}", r.system, act).unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::TrialLabel;

    pub(crate) fn labeled(tar: &[f64], non: &[f64]) -> ScoreSet {
        let mut trials = Vec::new();
        let mut scores = Vec::new();
        for (i, &s) in tar.iter().enumerate() {
            trials.push(Trial {
                enroll_id: format!("t{i}"),
                test_id: format!("t{i}x"),
                label: Some(TrialLabel::Target),
            });
            scores.push(s);
        }
        for (i, &s) in non.iter().enumerate() {
            trials.push(Trial {
                enroll_id: format!("n{i}"),
                test_id: format!("n{i}x"),
                label: Some(TrialLabel::NonTarget),
            });
            scores.push(s);
        }
        ScoreSet::new(trials, scores).unwrap()
    }

    #[test]
    fn perfectly_separated_scores_have_zero_eer_and_min_dcf() {
        let s = labeled(&[0.9, 0.8], &[0.2, 0.1]);
        assert_eq!(compute_eer(&s).unwrap(), 0.0);
        assert_eq!(compute_min_dcf(&s, &DcfParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn perfectly_anti_separated_scores_have_eer_one() {
        let s = labeled(&[0.1, 0.2], &[0.8, 0.9]);
        assert_eq!(compute_eer(&s).unwrap(), 1.0);
    }

    #[test]
    fn hand_example_eer_is_one_third() {
        let s = labeled(&[0.9, 0.8, 0.5], &[0.6, 0.2, 0.1]);
        let eer = compute_eer(&s).unwrap();
        assert!((eer - 1.0 / 3.0).abs() < 1e-15, "got {eer}");
    }

    #[test]
    fn min_dcf_capped_at_one() {
        // Inseparable scores: both boundary thresholds give cost 1.
        let s = labeled(&[0.5, 0.5], &[0.5, 0.5]);
        let dcf = compute_min_dcf(&s, &DcfParams::default()).unwrap();
        assert!(dcf <= 1.0 + 1e-12);
    }

    #[test]
    fn act_dcf_hand_set() {
        // Verified independently: threshold 0, pmiss 0, pfa 0.5 -> 0.5.
        let s = labeled(&[2.0], &[-2.0, 1.0]);
        let act = compute_act_dcf(&s, &DcfParams::single(0.5)).unwrap();
        assert!((act - 0.5).abs() < 1e-15, "got {act}");
    }

    #[test]
    fn act_dcf_near_zero_for_well_separated_llrs() {
        let s = labeled(&[20.0, 15.0, 30.0], &[-25.0, -18.0, -40.0]);
        let act = compute_act_dcf(&s, &DcfParams::default()).unwrap();
        assert_eq!(act, 0.0);
    }

    #[test]
    fn missing_class_is_an_error() {
        let s = labeled(&[0.5], &[]);
        assert!(compute_eer(&s).is_err());
    }

    #[test]
    fn calibration_identity_and_rank_invariance() {
        let s = labeled(&[0.9, 0.7, 0.4], &[0.5, 0.2, -0.1]);
        let ident = CalibrationModel { a: 1.0, b: 0.0 };
        assert_eq!(ident.apply(&s).scores, s.scores);

        let cal = CalibrationModel { a: 2.5, b: -0.3 };
        let mapped = cal.apply(&s);
        let params = DcfParams::default();
        let before = compute_min_dcf(&s, &params).unwrap();
        let after = compute_min_dcf(&mapped, &params).unwrap();
        assert_eq!(before, after);
        assert_eq!(
            compute_eer(&s).unwrap(),
            compute_eer(&mapped).unwrap()
        );
    }

    #[test]
    fn degenerate_constant_scores_fail_to_fit() {
        let s = labeled(&[0.5, 0.5], &[0.5, 0.5]);
        assert!(matches!(
            calibrate_fit(&s, 0.01),
            Err(BackendError::Fit(_))
        ));
    }

    #[test]
    fn fusion_hand_values_and_alignment() {
        let a = labeled(&[0.2], &[0.0]);
        let b = labeled(&[0.6], &[0.4]);
        let fused = fuse(&[a.clone(), b]).unwrap();
        assert!((fused.scores[0] - 0.4).abs() < 1e-15);
        assert!((fused.scores[1] - 0.2).abs() < 1e-15);

        let same = fuse(&[a.clone()]).unwrap();
        assert_eq!(same.scores, a.scores);
        let twice = fuse(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(twice.scores, a.scores);

        let mut misaligned = a.clone();
        misaligned.trials[0].test_id = "other".into();
        assert!(matches!(
            fuse(&[a, misaligned]),
            Err(BackendError::Alignment(_))
        ));
    }
}
