//! Evaluation protocol: rank-statistic AUC, Youden-J threshold chosen on
//! validation scores, per-subgroup TPR/FPR at that fixed threshold, and
//! max-minus-min disparities.
//!
//! A sample is classified positive iff `score >= threshold`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{NirError, Result};
use crate::model::{forward, ModelParams};

pub const DECISION_RULE: &str = "score >= threshold";
pub const AUC_ESTIMATOR: &str = "midrank Mann-Whitney statistic";

fn check_scored(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(NirError::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(NirError::Evaluation("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    Ok((pos, labels.len() - pos))
}

fn require_both_classes(pos: usize, neg: usize) -> Result<()> {
    if pos == 0 || neg == 0 {
        return Err(NirError::Evaluation(format!(
            "both classes are required ({pos} positive, {neg} negative)"
        )));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half, computed from midranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_scored(scores, labels)?;
    require_both_classes(pos, neg)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks start+1..=end share their average.
        let midrank = (start + 1 + end) as f64 / 2.0;
        let tied_pos = order[start..end]
            .iter()
            .filter(|&&i| labels[i] == 1)
            .count();
        rank_sum_pos += midrank * tied_pos as f64;
        start = end;
    }
    let (p, n) = (pos as f64, neg as f64);
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

/// A threshold together with the rates it induces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    /// Youden's J, `tpr − fpr`.
    pub j: f64,
}

/// Threshold maximizing `J = TPR − FPR` over the distinct scores plus one
/// sentinel just above the maximum. Ties on J prefer the higher TPR, then
/// the lower threshold.
pub fn youden_threshold(scores: &[f64], labels: &[u8]) -> Result<OperatingPoint> {
    let (pos, neg) = check_scored(scores, labels)?;
    require_both_classes(pos, neg)?;

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let max = scores[order[0]];

    // J compared exactly as the integer numerator tp·N − fp·P.
    let key = |tp: usize, fp: usize| (tp as i128 * neg as i128 - fp as i128 * pos as i128, tp);
    let mut best = (key(0, 0), max.next_up(), 0usize, 0usize);
    let (mut tp, mut fp) = (0, 0);
    let mut k = 0;
    while k < order.len() {
        let t = scores[order[k]];
        while k < order.len() && scores[order[k]] == t {
            if labels[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        // Thresholds are visited in decreasing order, so `>=` keeps the lower one.
        if key(tp, fp) >= best.0 {
            best = (key(tp, fp), t, tp, fp);
        }
    }
    let (_, threshold, tp, fp) = best;
    let tpr = tp as f64 / pos as f64;
    let fpr = fp as f64 / neg as f64;
    Ok(OperatingPoint {
        threshold,
        tpr,
        fpr,
        j: tpr - fpr,
    })
}

/// `(TPR, FPR)` at `threshold`; a rate is `None` when its class is absent.
pub fn confusion_rates(
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<(Option<f64>, Option<f64>)> {
    if !threshold.is_finite() {
        return Err(NirError::Contract("threshold must be finite".into()));
    }
    let (pos, neg) = check_scored(scores, labels)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        if s >= threshold {
            if y == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let tpr = (pos > 0).then(|| tp as f64 / pos as f64);
    let fpr = (neg > 0).then(|| fp as f64 / neg as f64);
    Ok((tpr, fpr))
}

/// `max_g rate_g − min_g rate_g`.
pub fn disparity(per_group: &BTreeMap<String, Option<f64>>) -> Result<f64> {
    if per_group.len() < 2 {
        return Err(NirError::Contract(format!(
            "disparity needs at least 2 groups, got {}",
            per_group.len()
        )));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (group, rate) in per_group {
        let r = rate.ok_or_else(|| NirError::UndefinedRate {
            group: group.clone(),
            reason: "the group lacks the class this rate is conditioned on".into(),
        })?;
        lo = lo.min(r);
        hi = hi.max(r);
    }
    Ok(hi - lo)
}

/// Scores, labels and one grouping column.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSamples {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub groups: Vec<String>,
}

impl ScoredSamples {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>, groups: Vec<String>) -> Result<Self> {
        check_scored(&scores, &labels)?;
        if groups.len() != labels.len() {
            return Err(NirError::Contract(format!(
                "{} group entries for {} samples",
                groups.len(),
                labels.len()
            )));
        }
        Ok(Self {
            scores,
            labels,
            groups,
        })
    }

    pub fn group_names(&self) -> BTreeSet<&str> {
        self.groups.iter().map(String::as_str).collect()
    }

    fn group_view(&self, group: &str) -> (Vec<f64>, Vec<u8>) {
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, g)| g.as_str() == group)
            .map(|(i, _)| (self.scores[i], self.labels[i]))
            .unzip()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Audit of one attribute at a validation-selected threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub attribute: String,
    /// Test-set AUC.
    pub auc: f64,
    pub threshold: f64,
    /// Youden's J of the threshold on the validation set.
    pub validation_j: f64,
    pub per_group: BTreeMap<String, GroupRates>,
    /// `None` when some group's TPR is undefined.
    pub delta_tpr: Option<f64>,
    pub delta_fpr: Option<f64>,
    pub decision_rule: String,
    pub auc_estimator: String,
    /// Identifies the split the threshold was chosen on.
    pub threshold_source: String,
}

fn optional_disparity(rates: &BTreeMap<String, Option<f64>>) -> Result<Option<f64>> {
    match disparity(rates) {
        Ok(d) => Ok(Some(d)),
        Err(NirError::UndefinedRate { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

impl FairnessReport {
    pub fn tpr_by_group(&self) -> BTreeMap<String, Option<f64>> {
        self.per_group
            .iter()
            .map(|(g, r)| (g.clone(), r.tpr))
            .collect()
    }

    pub fn fpr_by_group(&self) -> BTreeMap<String, Option<f64>> {
        self.per_group
            .iter()
            .map(|(g, r)| (g.clone(), r.fpr))
            .collect()
    }

    /// Aligned plain-text table: one row per group, then the disparities.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("undef".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "attribute: {}   threshold: {:.6} ({})   test AUC: {:.2}",
            self.attribute,
            self.threshold,
            self.threshold_source,
            100.0 * self.auc
        );
        let _ = writeln!(
            s,
            "{:<16} {:>7} {:>7} {:>9} {:>9}",
            "group", "n_pos", "n_neg", "TPR (%)", "FPR (%)"
        );
        for (g, r) in &self.per_group {
            let _ = writeln!(
                s,
                "{:<16} {:>7} {:>7} {:>9} {:>9}",
                g,
                r.n_pos,
                r.n_neg,
                pct(r.tpr),
                pct(r.fpr)
            );
        }
        let _ = writeln!(
            s,
            "{:<16} {:>7} {:>7} {:>9} {:>9}",
            "disparity",
            "",
            "",
            pct(self.delta_tpr),
            pct(self.delta_fpr)
        );
        s
    }
}

/// Threshold from the validation scores, everything else on the test set.
pub fn audit_scores(
    val_scores: &[f64],
    val_labels: &[u8],
    test: &ScoredSamples,
    attribute: &str,
    threshold_source: &str,
) -> Result<FairnessReport> {
    let op = youden_threshold(val_scores, val_labels)?;
    let auc = roc_auc(&test.scores, &test.labels)?;
    let mut per_group = BTreeMap::new();
    for g in test.group_names() {
        let (s, y) = test.group_view(g);
        let (tpr, fpr) = confusion_rates(&s, &y, op.threshold)?;
        let n_pos = y.iter().filter(|&&v| v == 1).count();
        per_group.insert(
            g.to_string(),
            GroupRates {
                tpr,
                fpr,
                n_pos,
                n_neg: y.len() - n_pos,
            },
        );
    }
    let mut report = FairnessReport {
        attribute: attribute.to_string(),
        auc,
        threshold: op.threshold,
        validation_j: op.j,
        per_group,
        delta_tpr: None,
        delta_fpr: None,
        decision_rule: DECISION_RULE.into(),
        auc_estimator: AUC_ESTIMATOR.into(),
        threshold_source: threshold_source.to_string(),
    };
    report.delta_tpr = optional_disparity(&report.tpr_by_group())?;
    report.delta_fpr = optional_disparity(&report.fpr_by_group())?;
    Ok(report)
}

/// Positive-class probabilities of every row.
pub fn predict(params: &ModelParams, ds: &Dataset) -> Result<Vec<f64>> {
    Ok(forward(params, ds.features())?.probs)
}

pub fn fairness_report(
    params: &ModelParams,
    val: &Dataset,
    test: &Dataset,
    attribute: &str,
) -> Result<FairnessReport> {
    fairness_report_with_source(params, val, test, attribute, "validation")
}

pub fn fairness_report_with_source(
    params: &ModelParams,
    val: &Dataset,
    test: &Dataset,
    attribute: &str,
    threshold_source: &str,
) -> Result<FairnessReport> {
    let test_groups = test.attribute(attribute)?;
    let val_groups = val.attribute(attribute)?;
    let present: BTreeSet<&String> = test_groups.iter().collect();
    if let Some(missing) = val_groups.iter().find(|g| !present.contains(g)) {
        return Err(NirError::EmptyGroup(format!(
            "{attribute}={missing} (test split)"
        )));
    }
    let val_scores = predict(params, val)?;
    let test_samples = ScoredSamples::new(
        predict(params, test)?,
        test.labels().to_vec(),
        test_groups.to_vec(),
    )?;
    audit_scores(
        &val_scores,
        val.labels(),
        &test_samples,
        attribute,
        threshold_source,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: [f64; 4] = [0.1, 0.4, 0.35, 0.8];
    const Y: [u8; 4] = [0, 0, 1, 1];

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&S, &Y).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &Y).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 4], &Y).unwrap(), 0.5);
        assert!(matches!(
            roc_auc(&S, &[1, 1, 1, 1]),
            Err(NirError::Evaluation(_))
        ));
    }

    #[test]
    fn youden_examples() {
        let op = youden_threshold(&S, &Y).unwrap();
        assert_eq!(op.threshold, 0.35);
        assert_eq!((op.tpr, op.fpr, op.j), (1.0, 0.5, 0.5));

        let op = youden_threshold(&[0.1, 0.2, 0.8, 0.9], &Y).unwrap();
        assert_eq!((op.threshold, op.j), (0.8, 1.0));

        let op = youden_threshold(&[0.3; 4], &Y).unwrap();
        assert_eq!((op.threshold, op.j), (0.3, 0.0));
        assert!(youden_threshold(&S, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(
            confusion_rates(&S, &Y, 0.0).unwrap(),
            (Some(1.0), Some(1.0))
        );
        assert_eq!(
            confusion_rates(&S, &Y, 0.9).unwrap(),
            (Some(0.0), Some(0.0))
        );
        assert_eq!(
            confusion_rates(&S, &Y, 0.35).unwrap(),
            (Some(1.0), Some(0.5))
        );
        assert_eq!(
            confusion_rates(&[0.5], &[1], 0.2).unwrap(),
            (Some(1.0), None)
        );
        assert!(confusion_rates(&S, &Y, f64::NAN).is_err());
    }

    fn rates(pairs: &[(&str, Option<f64>)]) -> BTreeMap<String, Option<f64>> {
        pairs.iter().map(|(g, r)| (g.to_string(), *r)).collect()
    }

    #[test]
    fn disparity_examples() {
        let d = disparity(&rates(&[
            ("A", Some(0.8)),
            ("B", Some(0.7)),
            ("C", Some(0.9)),
        ]))
        .unwrap();
        assert!((d - 0.2).abs() < 1e-15);
        assert_eq!(
            disparity(&rates(&[("A", Some(0.4)), ("B", Some(0.4))])).unwrap(),
            0.0
        );
        let d = disparity(&rates(&[("young", Some(0.6319)), ("old", Some(0.7400))])).unwrap();
        assert!((d - 0.1081).abs() < 1e-12);
        let err = disparity(&rates(&[("A", Some(0.8)), ("B", None)])).unwrap_err();
        assert!(matches!(err, NirError::UndefinedRate { ref group, .. } if group == "B"));
        assert!(matches!(
            disparity(&rates(&[("A", Some(0.8))])),
            Err(NirError::Contract(_))
        ));
    }

    #[test]
    fn report_is_self_consistent() {
        let test = ScoredSamples::new(
            vec![0.9, 0.2, 0.7, 0.4, 0.6, 0.1, 0.8, 0.3],
            vec![1, 0, 1, 0, 1, 0, 1, 1],
            ["A", "A", "A", "A", "B", "B", "B", "B"]
                .map(String::from)
                .to_vec(),
        )
        .unwrap();
        let r = audit_scores(&S, &Y, &test, "group", "validation").unwrap();
        assert_eq!(r.threshold, 0.35);
        assert_eq!(r.delta_tpr, Some(disparity(&r.tpr_by_group()).unwrap()));
        assert_eq!(r.delta_fpr, Some(disparity(&r.fpr_by_group()).unwrap()));
        assert_eq!(r.per_group["B"].n_pos, 3);
        assert!(r.to_table().contains("disparity"));
    }

    #[test]
    fn constant_scores_have_parity() {
        let test = ScoredSamples::new(
            vec![0.5; 6],
            vec![1, 0, 1, 0, 1, 0],
            ["A", "A", "B", "B", "C", "C"].map(String::from).to_vec(),
        )
        .unwrap();
        let r = audit_scores(&[0.5; 4], &Y, &test, "g", "validation").unwrap();
        assert_eq!(r.delta_tpr, Some(0.0));
        assert_eq!(r.delta_fpr, Some(0.0));
    }

    #[test]
    fn undefined_group_rate_is_surfaced() {
        let test = ScoredSamples::new(
            vec![0.9, 0.2, 0.7, 0.1],
            vec![1, 0, 0, 0],
            ["A", "A", "B", "B"].map(String::from).to_vec(),
        )
        .unwrap();
        let r = audit_scores(&S, &Y, &test, "g", "validation").unwrap();
        assert_eq!(r.per_group["B"].tpr, None);
        assert_eq!(r.delta_tpr, None);
        assert!(r.delta_fpr.is_some());
    }
}
