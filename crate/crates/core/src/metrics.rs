//! Presentation-attack detection metrics. Spoof is the positive class and
//! a sample is called spoof when `score >= threshold`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

/// Scores (higher = more spoof) with their ground-truth labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<Label>,
    /// Attack type per sample, used for the per-attack APCER breakdown.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_types: Option<Vec<String>>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Metric(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Metric(format!("non-finite score {s}")));
        }
        Ok(Self {
            scores,
            labels,
            attack_types: None,
        })
    }

    pub fn with_attack_types(mut self, types: Vec<String>) -> Result<Self> {
        if types.len() != self.scores.len() {
            return Err(Error::Metric("attack type list differs in length from scores".into()));
        }
        self.attack_types = Some(types);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn n_spoof(&self) -> usize {
        self.labels.iter().filter(|l| l.is_spoof()).count()
    }

    pub fn n_live(&self) -> usize {
        self.len() - self.n_spoof()
    }

    fn require_both(&self) -> Result<()> {
        if self.n_live() == 0 || self.n_spoof() == 0 {
            return Err(Error::Metric(format!(
                "need both classes, got {} live / {} spoof",
                self.n_live(),
                self.n_spoof()
            )));
        }
        Ok(())
    }

    fn class_scores(&self, spoof: bool) -> impl Iterator<Item = f64> + '_ {
        self.scores
            .iter()
            .zip(&self.labels)
            .filter(move |(_, l)| l.is_spoof() == spoof)
            .map(|(&s, _)| s)
    }
}

/// Percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

pub fn acer(apcer: f64, bpcer: f64) -> f64 {
    (apcer + bpcer) / 2.0
}

pub fn error_rates(s: &ScoreSet, threshold: f64) -> Result<ErrorRates> {
    s.require_both()?;
    let missed = s.class_scores(true).filter(|&x| x < threshold).count();
    let rejected = s.class_scores(false).filter(|&x| x >= threshold).count();
    let apcer = 100.0 * missed as f64 / s.n_spoof() as f64;
    let bpcer = 100.0 * rejected as f64 / s.n_live() as f64;
    Ok(ErrorRates {
        apcer,
        bpcer,
        acer: acer(apcer, bpcer),
    })
}

/// Rounds to `decimals` places, half away from zero, after snapping to the
/// nearest 1e-6 so that binary noise such as `9.4499999999` rounds as 9.45.
pub fn round_half_away(x: f64, decimals: u32) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let micro = (x * 1e6).round() as i128;
    let step = 10i128.pow(6 - decimals.min(6));
    let half = step / 2;
    let q = if micro >= 0 {
        (micro + half) / step
    } else {
        (micro - half) / step
    };
    q as f64 / 10f64.powi(decimals.min(6) as i32)
}

/// One ROC vertex: predicting spoof for `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// `+∞` for the origin vertex.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Vertices from `(0, 0)` to `(1, 1)`, one per distinct score, thresholds
/// descending.
pub fn roc_curve(s: &ScoreSet) -> Result<Vec<RocPoint>> {
    s.require_both()?;
    let (np, nn) = (s.n_spoof() as f64, s.n_live() as f64);
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = s.scores[order[i]];
        while i < order.len() && s.scores[order[i]] == t {
            if s.labels[order[i]].is_spoof() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / nn,
            tpr: tp as f64 / np,
        });
    }
    Ok(points)
}

/// Trapezoid area under the ROC polyline.
pub fn auc_trapezoid(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// TPR at `target` FPR by linear interpolation; at a vertical ROC segment the
/// highest TPR reached at that FPR is used.
pub fn tpr_at_fpr(points: &[RocPoint], target: f64) -> f64 {
    let Some(k) = points.iter().rposition(|p| p.fpr <= target) else {
        return 0.0;
    };
    let a = points[k];
    match points.get(k + 1) {
        Some(b) if b.fpr > a.fpr => a.tpr + (b.tpr - a.tpr) * (target - a.fpr) / (b.fpr - a.fpr),
        _ => a.tpr,
    }
}

/// Equal error rate in `[0, 1]` where FPR = FNR on the ROC polyline.
pub fn equal_error_rate(points: &[RocPoint]) -> f64 {
    let diff = |p: &RocPoint| p.fpr - (1.0 - p.tpr);
    for w in points.windows(2) {
        let (d0, d1) = (diff(&w[0]), diff(&w[1]));
        if d0 <= 0.0 && d1 >= 0.0 {
            if d1 == d0 {
                return w[0].fpr;
            }
            let a = -d0 / (d1 - d0);
            return w[0].fpr + a * (w[1].fpr - w[0].fpr);
        }
    }
    // Unreachable for a complete curve: the origin has d = −1, the end d = 1.
    0.5
}

/// Vertex minimising `|FPR − FNR|`; the first (highest threshold) on ties.
pub fn eer_vertex(points: &[RocPoint]) -> RocPoint {
    *points
        .iter()
        .min_by(|a, b| {
            let da = (a.fpr - (1.0 - a.tpr)).abs();
            let db = (b.fpr - (1.0 - b.tpr)).abs();
            da.total_cmp(&db)
        })
        .unwrap()
}

/// Vertex with the highest TPR subject to `FPR <= target`.
pub fn operating_vertex(points: &[RocPoint], target: f64) -> RocPoint {
    *points
        .iter()
        .filter(|p| p.fpr <= target)
        .max_by(|a, b| a.tpr.total_cmp(&b.tpr).then(b.threshold.total_cmp(&a.threshold)))
        .unwrap_or(&points[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocAnalysis {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    /// Keyed by the FPR target as written, e.g. `"0.005"`.
    pub tpr_at_fpr: BTreeMap<String, f64>,
    /// Percentage.
    pub eer: f64,
    /// Percentage, at the EER vertex.
    pub hter: f64,
    pub eer_threshold: f64,
}

pub fn fpr_key(target: f64) -> String {
    format!("{target}")
}

pub fn roc_analysis(s: &ScoreSet, fpr_targets: &[f64]) -> Result<RocAnalysis> {
    if let Some(t) = fpr_targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Metric(format!("FPR target {t} outside [0, 1]")));
    }
    let points = roc_curve(s)?;
    let v = eer_vertex(&points);
    Ok(RocAnalysis {
        auc: auc_trapezoid(&points),
        tpr_at_fpr: fpr_targets.iter().map(|&t| (fpr_key(t), tpr_at_fpr(&points, t))).collect(),
        eer: 100.0 * equal_error_rate(&points),
        hter: 100.0 * (v.fpr + 1.0 - v.tpr) / 2.0,
        eer_threshold: v.threshold,
        points,
    })
}

/// `P(score_spoof > score_live) + ½ P(tie)` over all pairs.
pub fn pairwise_auc(s: &ScoreSet) -> Result<f64> {
    s.require_both()?;
    let spoofs: Vec<f64> = s.class_scores(true).collect();
    let mut total = 0.0;
    for l in s.class_scores(false) {
        for &p in &spoofs {
            total += if p > l {
                1.0
            } else if p == l {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(total / (spoofs.len() * s.n_live()) as f64)
}

/// Summary written into `report.json`; percentages unrounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` when no finite threshold satisfies the operating FPR, i.e. all
    /// samples are accepted as live.
    pub threshold: Option<f64>,
    pub operating_fpr: f64,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub auc: f64,
    pub tpr_at_fpr: BTreeMap<String, f64>,
    pub eer: f64,
    pub hter: f64,
    pub eer_threshold: f64,
    pub n_live: usize,
    pub n_spoof: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub apcer_per_attack: BTreeMap<String, f64>,
}

/// Report values rounded to one decimal for tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundedMetrics {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub auc_percent: f64,
    pub tpr_at_fpr_percent: BTreeMap<String, f64>,
    pub eer: f64,
    pub hter: f64,
}

impl MetricsReport {
    pub fn rounded(&self) -> RoundedMetrics {
        RoundedMetrics {
            apcer: round_half_away(self.apcer, 1),
            bpcer: round_half_away(self.bpcer, 1),
            acer: round_half_away(self.acer, 1),
            auc_percent: round_half_away(100.0 * self.auc, 1),
            tpr_at_fpr_percent: self
                .tpr_at_fpr
                .iter()
                .map(|(k, v)| (k.clone(), round_half_away(100.0 * v, 1)))
                .collect(),
            eer: round_half_away(self.eer, 1),
            hter: round_half_away(self.hter, 1),
        }
    }
}

/// Full report; APCER/BPCER at the vertex reaching `operating_fpr`.
pub fn evaluate_scores(s: &ScoreSet, fpr_targets: &[f64], operating_fpr: f64) -> Result<MetricsReport> {
    let roc = roc_analysis(s, fpr_targets)?;
    let op = operating_vertex(&roc.points, operating_fpr);
    let rates = error_rates(s, op.threshold)?;
    let mut apcer_per_attack = BTreeMap::new();
    if let Some(types) = &s.attack_types {
        let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for ((&score, label), ty) in s.scores.iter().zip(&s.labels).zip(types) {
            if label.is_spoof() {
                let e = counts.entry(ty.as_str()).or_default();
                e.0 += usize::from(score < op.threshold);
                e.1 += 1;
            }
        }
        apcer_per_attack = counts
            .into_iter()
            .map(|(k, (miss, n))| (k.to_string(), 100.0 * miss as f64 / n as f64))
            .collect();
    }
    Ok(MetricsReport {
        threshold: op.threshold.is_finite().then_some(op.threshold),
        operating_fpr,
        apcer: rates.apcer,
        bpcer: rates.bpcer,
        acer: rates.acer,
        auc: roc.auc,
        tpr_at_fpr: roc.tpr_at_fpr,
        eer: roc.eer,
        hter: roc.hter,
        eer_threshold: roc.eer_threshold,
        n_live: s.n_live(),
        n_spoof: s.n_spoof(),
        apcer_per_attack,
    })
}

/// `threshold,fpr,tpr` rows; the origin threshold is written as `inf`.
pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(spoof: &[f64], live: &[f64]) -> ScoreSet {
        let scores = spoof.iter().chain(live).copied().collect();
        let labels = spoof
            .iter()
            .map(|_| Label::Spoof)
            .chain(live.iter().map(|_| Label::Live))
            .collect();
        ScoreSet::new(scores, labels).unwrap()
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(round_half_away(acer(9.4, 9.5), 1), 9.5);
        assert_eq!(round_half_away(acer(8.9, 8.0), 1), 8.5);
        assert_eq!(round_half_away(acer(11.4, 10.1), 1), 10.8);
        assert_eq!(round_half_away(-0.25, 1), -0.3);
        assert_eq!(round_half_away(0.0499, 1), 0.0);
        assert_eq!(round_half_away(1.23456789, 3), 1.235);
    }

    #[test]
    fn perfect_separation() {
        let s = set(&[0.9, 0.8], &[0.1, 0.2]);
        let r = error_rates(&s, 0.5).unwrap();
        assert_eq!((r.apcer, r.bpcer, r.acer), (0.0, 0.0, 0.0));
        let roc = roc_analysis(&s, &[0.005]).unwrap();
        assert_eq!(roc.auc, 1.0);
        assert_eq!(roc.tpr_at_fpr["0.005"], 1.0);
        assert_eq!(roc.eer, 0.0);
        assert_eq!(roc.hter, 0.0);
    }

    #[test]
    fn constant_scores() {
        let s = set(&[0.3; 4], &[0.3; 5]);
        let roc = roc_analysis(&s, &[0.005]).unwrap();
        assert_eq!(roc.auc, 0.5);
        assert_eq!(roc.eer, 50.0);
        assert_eq!(roc.points.len(), 2);
    }

    #[test]
    fn small_pairwise_examples() {
        let s = set(&[0.9, 0.8, 0.7], &[0.6, 0.4, 0.2]);
        assert_eq!(roc_analysis(&s, &[]).unwrap().auc, 1.0);
        let s = set(&[0.9, 0.8, 0.5], &[0.6, 0.4, 0.2]);
        assert!((roc_analysis(&s, &[]).unwrap().auc - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_an_error() {
        let s = set(&[0.1, 0.2], &[]);
        assert!(matches!(error_rates(&s, 0.5), Err(Error::Metric(_))));
        assert!(matches!(roc_analysis(&s, &[0.1]), Err(Error::Metric(_))));
        assert!(ScoreSet::new(vec![0.1], vec![]).is_err());
    }

    #[test]
    fn threshold_boundary_counts_as_spoof() {
        let s = set(&[0.5], &[0.5]);
        let r = error_rates(&s, 0.5).unwrap();
        assert_eq!((r.apcer, r.bpcer), (0.0, 100.0));
    }

    #[test]
    fn report_uses_operating_vertex() {
        let s = set(&[0.9, 0.8, 0.3], &[0.5, 0.2, 0.1, 0.05]);
        let r = evaluate_scores(&s, &[0.005], 0.005).unwrap();
        assert_eq!(r.threshold, Some(0.8));
        assert!((r.apcer - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.bpcer, 0.0);
        assert_eq!(r.acer, acer(r.apcer, r.bpcer));
        let all_live_top = set(&[0.1], &[0.9]);
        let r = evaluate_scores(&all_live_top, &[0.005], 0.005).unwrap();
        assert_eq!(r.threshold, None);
        assert_eq!(r.apcer, 100.0);
    }

    #[test]
    fn per_attack_breakdown() {
        let s = set(&[0.9, 0.1], &[0.5, 0.2])
            .with_attack_types(vec!["print".into(), "replay".into(), "live".into(), "live".into()])
            .unwrap();
        let r = evaluate_scores(&s, &[], 0.0).unwrap();
        assert_eq!(r.apcer_per_attack["print"], 0.0);
        assert_eq!(r.apcer_per_attack["replay"], 100.0);
    }

    proptest! {
        #[test]
        fn trapezoid_matches_pairwise(
            spoof in prop::collection::vec(0u32..20, 1..60),
            live in prop::collection::vec(0u32..20, 1..60),
        ) {
            let s = set(
                &spoof.iter().map(|&v| v as f64 / 20.0).collect::<Vec<_>>(),
                &live.iter().map(|&v| v as f64 / 20.0).collect::<Vec<_>>(),
            );
            let a = auc_trapezoid(&roc_curve(&s).unwrap());
            prop_assert!((a - pairwise_auc(&s).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn monotone_transform_invariance(
            spoof in prop::collection::vec(0u32..200, 1..40),
            live in prop::collection::vec(0u32..200, 1..40),
        ) {
            let spoof: Vec<f64> = spoof.iter().map(|&k| k as f64 / 16.0 - 6.0).collect();
            let live: Vec<f64> = live.iter().map(|&k| k as f64 / 16.0 - 6.0).collect();
            let s = set(&spoof, &live);
            let f = |x: f64| x * x * x + 2.0 * x;
            let t = set(&spoof.iter().map(|&x| f(x)).collect::<Vec<_>>(), &live.iter().map(|&x| f(x)).collect::<Vec<_>>());
            let (a, b) = (roc_analysis(&s, &[0.005, 0.1]).unwrap(), roc_analysis(&t, &[0.005, 0.1]).unwrap());
            prop_assert_eq!(a.auc, b.auc);
            prop_assert_eq!(a.eer, b.eer);
            prop_assert_eq!(a.tpr_at_fpr, b.tpr_at_fpr);
            prop_assert_eq!(f(a.eer_threshold), b.eer_threshold);
        }
    }
}
