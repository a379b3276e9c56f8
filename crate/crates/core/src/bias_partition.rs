//! Bias scores, mean-threshold pseudo labels and partition quality.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifiers::{softmax, Classifier};
use crate::dataset_forge::{Image, LabeledExample};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasScoreRecord {
    pub example_id: String,
    pub score: f64,
    pub correct: bool,
    pub max_prob: f64,
}

/// `|1[argmax == target] − max softmax|`, computed in f64.
pub fn bias_score(example_id: &str, logits: &[f64], target: usize) -> Result<BiasScoreRecord> {
    let k = logits.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 logits, got {k}")));
    }
    if target >= k {
        return Err(Error::InvalidArgument(format!("target {target} >= K = {k}")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite logits for {example_id}")));
    }
    let p = softmax(logits);
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    let correct = best == target;
    let max_prob = p[best];
    let score = ((correct as u8 as f64) - max_prob).abs();
    Ok(BiasScoreRecord { example_id: example_id.to_string(), score, correct, max_prob })
}

/// Scores every example with a frozen classifier.
pub fn score_examples(classifier: &Classifier, examples: &[LabeledExample]) -> Result<Vec<BiasScoreRecord>> {
    let images: Vec<&Image> = examples.iter().map(|e| &e.image).collect();
    let logits = classifier.predict_logits(&images)?;
    examples
        .iter()
        .zip(logits)
        .map(|(e, l)| {
            let l: Vec<f64> = l.into_iter().map(f64::from).collect();
            bias_score(&e.example_id, &l, e.target)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub threshold: f64,
    pub guiding_ids: BTreeSet<String>,
    pub contrary_ids: BTreeSet<String>,
    pub scores: BTreeMap<String, f64>,
}

impl Partition {
    /// `1` for bias-contrary, `0` for bias-guiding.
    pub fn label(&self, id: &str) -> Option<u8> {
        if self.contrary_ids.contains(id) {
            Some(1)
        } else if self.guiding_ids.contains(id) {
            Some(0)
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.guiding_ids.len() + self.contrary_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(guiding, contrary)` counts per target class.
    pub fn per_class_counts(&self, examples: &[LabeledExample], num_classes: usize) -> Vec<(usize, usize)> {
        let mut counts = vec![(0, 0); num_classes];
        for e in examples {
            match self.label(&e.example_id) {
                Some(0) => counts[e.target].0 += 1,
                Some(_) => counts[e.target].1 += 1,
                None => {}
            }
        }
        counts
    }

    /// Writes `pseudo_bias_label` onto the matching examples.
    pub fn apply(&self, examples: &mut [LabeledExample]) {
        for e in examples {
            if let Some(l) = self.label(&e.example_id) {
                e.pseudo_bias_label = Some(l);
            }
        }
    }
}

/// Global mean threshold; strictly-above-mean examples are bias-contrary.
pub fn assign_pseudo_labels(records: &[BiasScoreRecord]) -> Result<Partition> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("cannot partition an empty score list".into()));
    }
    // sort before summing so the threshold does not depend on input order
    let mut sorted: Vec<f64> = records.iter().map(|r| r.score).collect();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let mut p = Partition {
        threshold,
        guiding_ids: BTreeSet::new(),
        contrary_ids: BTreeSet::new(),
        scores: BTreeMap::new(),
    };
    for r in records {
        if p.scores.insert(r.example_id.clone(), r.score).is_some() {
            return Err(Error::IdCollision(r.example_id.clone()));
        }
        if r.score > threshold {
            p.contrary_ids.insert(r.example_id.clone());
        } else {
            p.guiding_ids.insert(r.example_id.clone());
        }
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Precision, recall and F1 with each side as the positive class, averaged.
/// Examples without ground truth (synthetic ones) are an error, never skipped.
pub fn partition_metrics(partition: &Partition, examples: &[LabeledExample]) -> Result<PartitionMetrics> {
    let mut m = [[0usize; 2]; 2]; // [truth][predicted], 1 = contrary
    for e in examples {
        let truth = e.gt_bias_flag.ok_or_else(|| Error::MissingGroundTruth(e.example_id.clone()))?;
        let pred = partition
            .label(&e.example_id)
            .ok_or_else(|| Error::InvalidArgument(format!("{} is not in the partition", e.example_id)))?;
        m[truth as usize][pred as usize] += 1;
    }
    let (pc, rc, fc) = prf(m[1][1], m[0][1], m[1][0]);
    let (pg, rg, fg) = prf(m[0][0], m[1][0], m[0][1]);
    Ok(PartitionMetrics { precision: (pc + pg) / 2.0, recall: (rc + rg) / 2.0, f1: (fc + fg) / 2.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub threshold: f64,
    pub total: usize,
    pub contrary: usize,
    /// Fraction of each class labelled bias-contrary.
    pub class_contrary_fraction: Vec<f64>,
}

impl ThresholdReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "threshold {:.6}\ncontrary {} of {} ({:.2}%)\n",
            self.threshold,
            self.contrary,
            self.total,
            100.0 * self.contrary as f64 / self.total.max(1) as f64
        );
        for (c, f) in self.class_contrary_fraction.iter().enumerate() {
            s.push_str(&format!("class {c}: {:.2}% contrary\n", 100.0 * f));
        }
        s
    }
}

pub fn report_thresholds(partition: &Partition, examples: &[LabeledExample], num_classes: usize) -> ThresholdReport {
    let class_contrary_fraction = partition
        .per_class_counts(examples, num_classes)
        .into_iter()
        .map(|(g, c)| if g + c == 0 { 0.0 } else { c as f64 / (g + c) as f64 })
        .collect();
    ThresholdReport {
        threshold: partition.threshold,
        total: partition.len(),
        contrary: partition.contrary_ids.len(),
        class_contrary_fraction,
    }
}

/// `example_id,score,pseudo_bias_label` rows in id order.
pub fn write_partition_csv(partition: &Partition, path: &Path) -> Result<()> {
    let mut s = String::from("example_id,score,pseudo_bias_label\n");
    for (id, score) in &partition.scores {
        s.push_str(&format!("{id},{score:.17e},{}\n", partition.label(id).unwrap_or(0)));
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_partition_csv(path: &Path) -> Result<Partition> {
    let text = fs::read_to_string(path)?;
    let mut records = Vec::new();
    let mut labels = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::InvalidArgument(format!("{}:{}: malformed partition row", path.display(), n + 1));
        let mut parts = line.split(',');
        let (Some(id), Some(score), Some(label), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad());
        };
        let score: f64 = score.parse().map_err(|_| bad())?;
        labels.insert(id.to_string(), label.parse::<u8>().map_err(|_| bad())?);
        records.push(BiasScoreRecord { example_id: id.to_string(), score, correct: false, max_prob: 0.0 });
    }
    let p = assign_pseudo_labels(&records)?;
    if labels.iter().any(|(id, l)| p.label(id) != Some(*l)) {
        return Err(Error::InvalidArgument(format!("{}: labels disagree with scores", path.display())));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, score: f64) -> BiasScoreRecord {
        BiasScoreRecord { example_id: id.into(), score, correct: true, max_prob: 1.0 - score }
    }

    #[test]
    fn scoring_examples() {
        let r = bias_score("a", &[5.0, 0.0, 0.0], 0).unwrap();
        let e5 = 5f64.exp();
        assert!((r.max_prob - e5 / (e5 + 2.0)).abs() < 1e-15);
        assert!((r.score - 2.0 / (e5 + 2.0)).abs() < 1e-15);
        assert!((r.score - 0.0133).abs() < 1e-4);
        // max_prob 0.99 correct, 0.90 wrong
        let l99 = [(0.99f64 / 0.01 * 9.0).ln(), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let r = bias_score("b", &l99, 0).unwrap();
        assert!((r.score - 0.01).abs() < 1e-12);
        let l90 = [(0.9f64 / 0.1 * 9.0).ln(), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let r = bias_score("c", &l90, 3).unwrap();
        assert!(!r.correct);
        assert!((r.score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn score_errors() {
        assert!(bias_score("a", &[1.0], 0).is_err());
        assert!(bias_score("a", &[1.0, f64::NAN], 0).is_err());
        assert!(bias_score("a", &[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        assert!(bias_score("a", &[1.0, 1.0], 0).unwrap().correct);
        assert!(!bias_score("a", &[1.0, 1.0], 1).unwrap().correct);
    }

    #[test]
    fn mean_threshold_examples() {
        let p = assign_pseudo_labels(&[rec("a", 0.0), rec("b", 0.1), rec("c", 0.9)]).unwrap();
        assert!((p.threshold - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.contrary_ids.iter().collect::<Vec<_>>(), vec!["c"]);
        let p = assign_pseudo_labels(&[rec("a", 0.4), rec("b", 0.4)]).unwrap();
        assert!(p.contrary_ids.is_empty());
        assert!(assign_pseudo_labels(&[]).is_err());
        let p = assign_pseudo_labels(&[rec("a", 0.0), rec("b", 0.0)]).unwrap();
        assert_eq!(p.threshold, 0.0);
        let p = assign_pseudo_labels(&[rec("a", 0.0), rec("b", 1.0)]).unwrap();
        assert_eq!(p.threshold, 0.5);
        assert_eq!(p.contrary_ids.len(), 1);
    }

    fn ex(id: &str, target: usize, flag: Option<bool>) -> LabeledExample {
        LabeledExample {
            example_id: id.into(),
            image: Image::zeros(1, 1, 3),
            target,
            gt_bias_flag: flag,
            pseudo_bias_label: None,
            bias_attribute: None,
            provenance: None,
        }
    }

    #[test]
    fn metrics_perfect_and_inverted() {
        let examples: Vec<_> = (0..10).map(|i| ex(&format!("e{i}"), 0, Some(i % 2 == 1))).collect();
        let good: Vec<_> = examples
            .iter()
            .map(|e| rec(&e.example_id, if e.gt_bias_flag == Some(true) { 0.99 } else { 0.01 }))
            .collect();
        let m = partition_metrics(&assign_pseudo_labels(&good).unwrap(), &examples).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let bad: Vec<_> = good.iter().map(|r| rec(&r.example_id, 1.0 - r.score)).collect();
        let m = partition_metrics(&assign_pseudo_labels(&bad).unwrap(), &examples).unwrap();
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.precision, 0.0);
    }

    #[test]
    fn metrics_hand_confusion() {
        // truth: 6 guiding, 4 contrary; predicted contrary: 2 true contrary + 1 guiding
        let mut examples = Vec::new();
        let mut records = Vec::new();
        for i in 0..10 {
            let contrary = i >= 6;
            let pred = matches!(i, 0 | 6 | 7);
            examples.push(ex(&format!("e{i}"), 0, Some(contrary)));
            records.push(rec(&format!("e{i}"), if pred { 1.0 } else { 0.0 }));
        }
        let m = partition_metrics(&assign_pseudo_labels(&records).unwrap(), &examples).unwrap();
        // contrary: P 2/3 R 2/4; guiding: P 5/7 R 5/6
        let (pc, rc, pg, rg) = (2.0 / 3.0, 0.5, 5.0 / 7.0, 5.0 / 6.0);
        let f = |p: f64, r: f64| 2.0 * p * r / (p + r);
        assert!((m.precision - (pc + pg) / 2.0).abs() < 1e-15);
        assert!((m.recall - (rc + rg) / 2.0).abs() < 1e-15);
        assert!((m.f1 - (f(pc, rc) + f(pg, rg)) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn missing_ground_truth_is_an_error() {
        let examples = vec![ex("a", 0, Some(false)), ex("syn-b", 0, None)];
        let p = assign_pseudo_labels(&[rec("a", 0.0), rec("syn-b", 1.0)]).unwrap();
        assert!(matches!(partition_metrics(&p, &examples), Err(Error::MissingGroundTruth(id)) if id == "syn-b"));
    }

    #[test]
    fn report_and_csv_roundtrip() {
        let examples = vec![ex("a", 0, None), ex("b", 0, None), ex("c", 1, None), ex("d", 1, None)];
        let p = assign_pseudo_labels(&[rec("a", 0.1), rec("b", 0.9), rec("c", 0.1), rec("d", 0.12)]).unwrap();
        let r = report_thresholds(&p, &examples, 2);
        assert_eq!(r.class_contrary_fraction, vec![0.5, 0.0]);
        assert!(r.to_text().contains("threshold 0.3050"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_partition_csv(&p, &path).unwrap();
        assert_eq!(read_partition_csv(&path).unwrap(), p);
        let mut ex2 = examples.clone();
        p.apply(&mut ex2);
        assert_eq!(ex2[1].pseudo_bias_label, Some(1));
        assert_eq!(ex2[0].pseudo_bias_label, Some(0));
    }
}
