//! Evaluation metrics (AUC, F1, average precision) and the line-delimited
//! metrics record emitted once per evaluation.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mann-Whitney AUC: the probability that a random positive outscores a
/// random negative, with ties counting one half. Computed through average
/// ranks, so it is exact.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Evaluation("auc: length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Evaluation(
            "auc needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("NaN score"));
    // Average ranks over tied runs (1-based ranks).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1.0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// F1 at a threshold: predictions are `score > theta`; returns 0 when
/// precision + recall is 0.
pub fn f1(scores: &[f64], labels: &[f64], theta: f64) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&s, &y) in scores.iter().zip(labels) {
        let pred = s > theta;
        match (pred, y == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    2.0 * p * r / (p + r)
}

/// Average precision over the score-descending ranking; ties are broken by
/// stable input order.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Evaluation("ap: length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    if n_pos == 0 {
        return Err(Error::Evaluation("ap needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("NaN score"));
    let mut seen_pos = 0usize;
    let mut ap = 0.0;
    for (k, &idx) in order.iter().enumerate() {
        if labels[idx] == 1.0 {
            seen_pos += 1;
            let precision = seen_pos as f64 / (k + 1) as f64;
            ap += precision / n_pos as f64;
        }
    }
    Ok(ap)
}

/// One evaluation record of the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub stage: String,
    pub epoch: usize,
    pub split: String,
    pub auc: f64,
    pub f1: f64,
    pub ap: f64,
    pub loss_link: f64,
    pub loss_con: f64,
    pub loss_total: f64,
    pub seconds_per_epoch: f64,
    pub trainable_params: usize,
}

/// Collects records and optionally mirrors them to a JSONL sink.
#[derive(Default)]
pub struct MetricsLog {
    records: Vec<MetricsRecord>,
    sink: Option<Box<dyn Write>>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn with_file(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::create(path.as_ref()).map_err(|source| Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        })?;
        Ok(MetricsLog {
            records: Vec::new(),
            sink: Some(Box::new(std::io::BufWriter::new(file))),
        })
    }

    pub fn push(&mut self, record: MetricsRecord) {
        if let Some(sink) = &mut self.sink {
            let line = serde_json::to_string(&record).expect("metrics record serializes");
            let _ = writeln!(sink, "{line}");
        }
        self.records.push(record);
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn into_records(mut self) -> Vec<MetricsRecord> {
        self.flush();
        self.records
    }

    pub fn flush(&mut self) {
        if let Some(sink) = &mut self.sink {
            let _ = sink.flush();
        }
    }
}

/// Parse a JSONL metrics stream.
pub fn read_metrics_stream(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|source| Error::Io {
        path: path.as_ref().display().to_string(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| Error::MalformedInput(format!("bad metrics line: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_hand_cases() {
        // Perfect separation.
        let a = auc(&[0.9, 0.8, 0.2, 0.1], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(a, 1.0);
        // All ties: 0.5 exactly.
        let a = auc(&[0.4, 0.4, 0.4, 0.4], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(a, 0.5);
        // Mixed: 3 of 4 (pos, neg) pairs correctly ordered.
        let a = auc(&[0.9, 0.8, 0.4, 0.3], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((a - 0.75).abs() < 1e-12);
        // Single-class input is an error.
        assert!(auc(&[0.5, 0.6], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_counting_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::substream(3, crate::rng::Stream::ParamInit);
        for _ in 0..50 {
            let n = rng.random_range(4..40usize);
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
            let labels: Vec<f64> = (0..n)
                .map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 })
                .collect();
            let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
            if n_pos == 0 || n_pos == n {
                continue;
            }
            // Brute-force pair counting.
            let mut wins = 0.0;
            let mut total = 0.0;
            for i in 0..n {
                if labels[i] != 1.0 {
                    continue;
                }
                for j in 0..n {
                    if labels[j] != 0.0 {
                        continue;
                    }
                    total += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
            let expect = wins / total;
            let got = auc(&scores, &labels).unwrap();
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
        }
    }

    #[test]
    fn auc_is_invariant_under_increasing_transforms() {
        let scores = [0.9, 0.1, 0.5, 0.3, 0.7, 0.5];
        let labels = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let base = auc(&scores, &labels).unwrap();
        let exp_scores: Vec<f64> = scores.iter().map(|&s| s.exp()).collect();
        assert_eq!(auc(&exp_scores, &labels).unwrap(), base);
        let affine: Vec<f64> = scores.iter().map(|&s| 3.5 * s - 2.0).collect();
        assert_eq!(auc(&affine, &labels).unwrap(), base);
    }

    #[test]
    fn f1_hand_cases() {
        // All correct.
        assert_eq!(f1(&[0.9, 0.1], &[1.0, 0.0], 0.5), 1.0);
        // TP=1, FP=1, FN=1.
        let v = f1(&[0.9, 0.8, 0.4, 0.3], &[1.0, 0.0, 1.0, 0.0], 0.5);
        assert!((v - 0.5).abs() < 1e-12);
        // No positive predictions but positives exist.
        assert_eq!(f1(&[0.1, 0.2], &[1.0, 0.0], 0.5), 0.0);
    }

    #[test]
    fn ap_hand_cases() {
        // Positives ranked first.
        let v = average_precision(&[0.9, 0.8, 0.1], &[1.0, 1.0, 0.0]).unwrap();
        assert_eq!(v, 1.0);
        // Labels (1,0,1) in score order: 1/2 * 1 + 1/2 * 2/3 = 5/6.
        let v = average_precision(&[0.9, 0.5, 0.1], &[1.0, 0.0, 1.0]).unwrap();
        assert!((v - 5.0 / 6.0).abs() < 1e-12);
        // Single positive ranked last of N: AP = 1/N.
        let v = average_precision(&[0.9, 0.8, 0.7, 0.1], &[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((v - 0.25).abs() < 1e-12);
        // No positives is an error.
        assert!(average_precision(&[0.5], &[0.0]).is_err());
    }

    #[test]
    fn metrics_stream_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let record = MetricsRecord {
            stage: "pretrain".into(),
            epoch: 3,
            split: "val".into(),
            auc: 0.91,
            f1: 0.8,
            ap: 0.85,
            loss_link: 0.4,
            loss_con: 0.2,
            loss_total: 0.5,
            seconds_per_epoch: 0.12,
            trainable_params: 12345,
        };
        {
            let mut log = MetricsLog::with_file(&path).unwrap();
            log.push(record.clone());
            log.push(MetricsRecord {
                epoch: 4,
                ..record.clone()
            });
            log.flush();
        }
        let back = read_metrics_stream(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], record);
        assert_eq!(back[1].epoch, 4);
    }
}
