//! Classification metrics: accuracy, macro-F1, confusion counts.

/// Confusion counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_pairs(truth: &[usize], pred: &[usize], num_classes: usize) -> Self {
        let mut c = Confusion::new(num_classes);
        for (&t, &p) in truth.iter().zip(pred) {
            c.record(t, p);
        }
        c
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let hits: usize = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        hits as f64 / total as f64
    }

    /// Unweighted mean of per-class F1. A class absent from both truth and
    /// prediction contributes F1 = 0.
    pub fn macro_f1(&self) -> f64 {
        let c = self.counts.len();
        let mut sum = 0.0;
        for k in 0..c {
            let tp = self.counts[k][k];
            let fp: usize = (0..c).filter(|&i| i != k).map(|i| self.counts[i][k]).sum();
            let fneg: usize = (0..c).filter(|&j| j != k).map(|j| self.counts[k][j]).sum();
            let precision = if tp + fp == 0 {
                0.0
            } else {
                tp as f64 / (tp + fp) as f64
            };
            let recall = if tp + fneg == 0 {
                0.0
            } else {
                tp as f64 / (tp + fneg) as f64
            };
            if precision + recall > 0.0 {
                sum += 2.0 * precision * recall / (precision + recall);
            }
        }
        sum / c as f64
    }
}

impl std::fmt::Display for Confusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for row in &self.counts {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    write!(f, " ")?;
                }
                write!(f, "{v}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
