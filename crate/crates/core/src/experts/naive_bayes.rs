//! Order-0 Lidstone estimator over a sliding count window.

use std::collections::VecDeque;

use super::spec::MIN_ALPHA;
use super::{check_symbol, Expert, ExpertError, LidstoneTable};
use crate::Symbol;

/// Predicts `(c(x) + alpha) / (N + alpha * D)` where `c` counts the most recent
/// `window` observations of the current chunk (all of them when unbounded).
pub struct NaiveBayes {
    counts: Vec<u32>,
    total: u64,
    window: Option<u32>,
    recent: VecDeque<Symbol>,
    table: LidstoneTable,
}

impl NaiveBayes {
    pub fn new(alphabet_size: usize, alpha: f64, window: Option<u32>) -> Result<Self, ExpertError> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(ExpertError::Config(format!("lidstone alpha must be positive, got {alpha}")));
        }
        if window == Some(0) {
            return Err(ExpertError::Config("count window must be at least 1".into()));
        }
        Ok(Self {
            counts: vec![0; alphabet_size],
            total: 0,
            window,
            recent: VecDeque::new(),
            table: LidstoneTable::new(alpha.max(MIN_ALPHA), alphabet_size),
        })
    }

    pub fn count(&self, symbol: Symbol) -> u32 {
        self.counts[symbol as usize]
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

impl Expert for NaiveBayes {
    fn alphabet_size(&self) -> usize {
        self.counts.len()
    }

    fn begin_chunk(&mut self) -> Result<(), ExpertError> {
        self.counts.fill(0);
        self.total = 0;
        self.recent.clear();
        Ok(())
    }

    fn predict_into(&mut self, _context: &[Symbol], out: &mut [f64]) -> Result<(), ExpertError> {
        self.table.fill(&self.counts, self.total, out);
        Ok(())
    }

    fn predict_probs_into(&mut self, _context: &[Symbol], out: &mut [f64]) -> Result<(), ExpertError> {
        self.table.fill_probs(&self.counts, self.total, out);
        Ok(())
    }

    fn observe(&mut self, symbol: Symbol, _context: &[Symbol]) -> Result<(), ExpertError> {
        check_symbol(symbol, self.counts.len())?;
        self.counts[symbol as usize] += 1;
        self.total += 1;
        if let Some(w) = self.window {
            self.recent.push_back(symbol);
            if self.recent.len() > w as usize {
                let old = self.recent.pop_front().expect("window is non-empty");
                self.counts[old as usize] -= 1;
                self.total -= 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(e: &mut NaiveBayes) -> Vec<f64> {
        e.predict(&[]).unwrap().probs()
    }

    #[test]
    fn laplace_counts() {
        let mut e = NaiveBayes::new(3, 1.0, None).unwrap();
        assert!(probs(&mut e).iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        for s in [0, 0, 1] {
            e.observe(s, &[]).unwrap();
        }
        let p = probs(&mut e);
        assert!((p[0] - 3.0 / 6.0).abs() < 1e-15);
        assert!((p[1] - 2.0 / 6.0).abs() < 1e-15);
        assert!((p[2] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn kt_single_observation() {
        let mut e = NaiveBayes::new(2, 0.5, None).unwrap();
        e.observe(0, &[]).unwrap();
        let p = probs(&mut e);
        assert!((p[0] - 0.75).abs() < 1e-15);
        assert!((p[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn window_keeps_most_recent() {
        let mut e = NaiveBayes::new(3, 1.0, Some(2)).unwrap();
        for s in [0, 1, 2] {
            e.observe(s, &[]).unwrap();
        }
        assert_eq!((e.count(0), e.count(1), e.count(2), e.total()), (0, 1, 1, 2));
    }

    #[test]
    fn reset_restores_uniform() {
        let mut e = NaiveBayes::new(256, 1.0, None).unwrap();
        e.observe(7, &[]).unwrap();
        e.begin_chunk().unwrap();
        assert!(probs(&mut e).iter().all(|p| (p - 1.0 / 256.0).abs() < 1e-15));
    }

    #[test]
    fn tiny_alpha_is_clamped() {
        let mut e = NaiveBayes::new(4, 1e-300, None).unwrap();
        e.observe(1, &[]).unwrap();
        let d = e.predict(&[]).unwrap();
        assert!(d.log_probs().iter().all(|l| l.is_finite()));
        assert!(NaiveBayes::new(4, 0.0, None).is_err());
        assert!(NaiveBayes::new(4, 1.0, Some(0)).is_err());
    }
}
