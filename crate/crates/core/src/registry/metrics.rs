//! Classification metrics: confusion counts, CCR, false positive and
//! negative rates, and ROC AUC.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// `(tn + tp) / total`; 0 for an empty matrix.
    pub fn ccr(&self) -> f64 {
        ratio(self.tn + self.tp, self.total())
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn fnr(&self) -> f64 {
        ratio(self.fn_, self.fn_ + self.tp)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Area under the ROC curve of `(score, actual)` pairs, by the trapezoidal
/// rule with tied scores forming one diagonal step. 0.5 when either class is
/// absent.
pub fn auc(scored: &[(f64, bool)]) -> f64 {
    let pos = scored.iter().filter(|s| s.1).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return 0.5;
    }
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let (tp0, fp0) = (tp, fp);
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    area / (pos as f64 * neg as f64)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub ccr: f64,
    pub auc: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub predict_micros_mean: f64,
    pub predict_micros_max: f64,
}

impl Metrics {
    /// Metrics over `(predicted, score, actual, micros)` rows.
    pub fn from_predictions(rows: &[(bool, f64, bool, f64)]) -> Metrics {
        let mut c = Confusion::default();
        for r in rows {
            c.add(r.0, r.2);
        }
        let scored: Vec<(f64, bool)> = rows.iter().map(|r| (r.1, r.2)).collect();
        let micros: Vec<f64> = rows.iter().map(|r| r.3).collect();
        let mean = if micros.is_empty() { 0.0 } else { micros.iter().sum::<f64>() / micros.len() as f64 };
        let max = micros.iter().copied().fold(0.0, f64::max);
        Metrics::from_confusion(&c, auc(&scored), mean, max)
    }

    pub fn from_confusion(c: &Confusion, auc: f64, micros_mean: f64, micros_max: f64) -> Metrics {
        Metrics {
            ccr: c.ccr(),
            auc,
            fpr: c.fpr(),
            fnr: c.fnr(),
            tp: c.tp,
            tn: c.tn,
            fp: c.fp,
            fn_: c.fn_,
            predict_micros_mean: micros_mean,
            predict_micros_max: micros_max,
        }
    }

    pub fn confusion(&self) -> Confusion {
        Confusion { tp: self.tp, tn: self.tn, fp: self.fp, fn_: self.fn_ }
    }

    pub fn n(&self) -> usize {
        self.confusion().total()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ccr_formula() {
        let c = Confusion { tp: 9, tn: 90, fp: 1, fn_: 0 };
        assert!((c.ccr() - 0.99).abs() < 1e-12);
        assert_eq!(c.fnr(), 0.0);
        assert!((c.fpr() - 1.0 / 91.0).abs() < 1e-12);
        assert_eq!(Confusion::default().fpr(), 0.0);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[(0.9, true), (0.8, true), (0.2, false)]), 1.0);
        assert_eq!(auc(&[(0.5, true), (0.5, false), (0.5, true)]), 0.5);
        assert_eq!(auc(&[(0.1, true), (0.9, false)]), 0.0);
        assert_eq!(auc(&[(0.1, true)]), 0.5);
        // one inversion among 2x2 pairs
        assert_eq!(auc(&[(0.9, true), (0.7, false), (0.6, true), (0.1, false)]), 0.75);
    }
}
