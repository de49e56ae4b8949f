use crate::error::{contract, EsaError, Result};

/// `K × K` counts indexed `[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    k: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return contract(format!("confusion needs {} counts, got {}", k * k, counts.len()));
        }
        Ok(Self { k, counts })
    }

    pub fn from_labels(k: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        let mut c = Self::new(k);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= k || p >= k {
                return contract(format!("label {} out of range for {k} classes", t.max(p)));
            }
            c.counts[t * k + p] += 1;
        }
        Ok(c)
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.k).map(|i| self.get(i, i)).sum();
        correct as f64 / self.total() as f64
    }
}

/// Multiclass Matthews correlation coefficient; 0 when undefined.
pub fn mcc(c: &Confusion) -> f64 {
    let k = c.classes();
    let s = c.total() as f64;
    let correct: f64 = (0..k).map(|i| c.get(i, i) as f64).sum();
    let t: Vec<f64> = (0..k).map(|i| (0..k).map(|j| c.get(i, j) as f64).sum()).collect();
    let p: Vec<f64> = (0..k).map(|j| (0..k).map(|i| c.get(i, j) as f64).sum()).collect();
    let tp: f64 = t.iter().zip(&p).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|x| x * x).sum();
    let tt: f64 = t.iter().map(|x| x * x).sum();
    let denom = ((s * s - pp) * (s * s - tt)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (correct * s - tp) / denom
    }
}

/// Coefficient of determination, `1 − SS_res / SS_tot`.
pub fn r2(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() {
        return contract("r2: length mismatch");
    }
    if targets.len() < 2 {
        return Err(EsaError::UndefinedSignal("r2 needs at least two samples".into()));
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(EsaError::UndefinedSignal("r2 of constant targets".into()));
    }
    let ss_res: f64 = preds.iter().zip(targets).map(|(p, y)| (p - y).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> f64 {
    let n = preds.len() as f64;
    (preds.iter().zip(targets).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn mae(preds: &[f64], targets: &[f64]) -> f64 {
    let n = preds.len() as f64;
    preds.iter().zip(targets).map(|(p, y)| (p - y).abs()).sum::<f64>() / n
}

/// Area under the step precision-recall curve, tied scores grouped.
/// `None` without positive labels.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Some(ap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
        let ap = average_precision(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert!((ap - 0.8333333333333333).abs() < 1e-12);
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(average_precision(&[0.5], &[false]), None);
    }
}
