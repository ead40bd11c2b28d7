//! Fitting mixture weights by minimizing cross-entropy on a calibration sample.
//!
//! Weights are the softmax of `K - 1` free logits (the last logit is pinned at zero),
//! which keeps them on the simplex without constraints. The objective is minimized
//! with BFGS and a backtracking Armijo line search using the closed-form gradient.
//! The returned weights are the best of the optimizer's answer and every one-hot
//! vertex, so the fit is never worse than the best single expert.

mod sample;

pub use sample::CalibrationSample;

use std::io::Write;

use thiserror::Error;

use crate::experts::ExpertError;
use crate::mix::{MixError, WeightVector};

/// Smallest improvement that displaces an earlier candidate.
pub const IMPROVEMENT_EPS: f64 = 1e-12;
/// Largest change of any logit in one optimizer step. Longer quasi-Newton steps can
/// land where the softmax saturates and the gradient vanishes.
pub const MAX_LOGIT_STEP: f64 = 2.0;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("no experts to fit")]
    NoExperts,

    #[error("weight fitting needs at least two experts")]
    NeedTwo,

    #[error("calibration sample is empty")]
    EmptySample,

    #[error("cross-entropy is not finite")]
    NonFinite,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("grid step {0} does not divide the unit interval")]
    BadStep(f64),

    #[error(transparent)]
    Mix(#[from] MixError),

    #[error(transparent)]
    Expert(#[from] ExpertError),

    #[error("writing report: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Stop when the largest gradient entry or logit step falls below this.
    pub tolerance: f64,
    /// Length of the first step along the steepest-descent direction.
    pub learning_rate: f64,
    /// Starting point; uniform when absent.
    pub init: Option<WeightVector>,
    /// More candidates considered alongside the vertices and the optimizer result.
    pub candidates: Vec<WeightVector>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 20,
            tolerance: 1e-5,
            learning_rate: 0.5,
            init: None,
            candidates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub iteration: usize,
    pub weights: Vec<f64>,
    pub ce: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub weights: WeightVector,
    /// Optimizer iterates, starting with the initial point as iteration 0.
    pub trace: Vec<TracePoint>,
    pub iterations: usize,
    pub converged: bool,
    /// Standalone cross-entropy of each expert, nats per symbol.
    pub endpoint_ce: Vec<f64>,
    /// Cross-entropy of the optimizer's own answer.
    pub optimizer_ce: f64,
    pub final_ce: f64,
}

impl FitReport {
    pub fn best_expert_ce(&self) -> f64 {
        self.endpoint_ce.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// CSV with columns `iteration, alpha_1..alpha_K, ce_nats`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), FitError> {
        let mut w = csv::Writer::from_writer(out);
        let k = self.weights.len();
        let mut header = vec!["iteration".to_string()];
        header.extend((1..=k).map(|i| format!("alpha_{i}")));
        header.push("ce_nats".into());
        w.write_record(&header)?;
        for p in &self.trace {
            let mut rec = vec![p.iteration.to_string()];
            rec.extend(p.weights.iter().map(|x| format!("{x:.9}")));
            rec.push(format!("{:.9}", p.ce));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Line-oriented human summary.
    pub fn summary(&self) -> String {
        let fmt_w = |w: &[f64]| w.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        for p in &self.trace {
            s.push_str(&format!("iter {:>3}  ce {:.6} nats  weights {}\n", p.iteration, p.ce, fmt_w(&p.weights)));
        }
        for (k, ce) in self.endpoint_ce.iter().enumerate() {
            s.push_str(&format!("expert {k}  ce {ce:.6} nats\n"));
        }
        s.push_str(&format!(
            "final  ce {:.6} nats ({:.6} bits)  weights {}  iterations {}  converged {}\n",
            self.final_ce,
            self.final_ce / std::f64::consts::LN_2,
            fmt_w(self.weights.as_slice()),
            self.iterations,
            self.converged
        ));
        s
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    // z holds K-1 free logits; the K-th is 0.
    let max = z.iter().copied().fold(0.0f64, f64::max);
    let mut w: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    w.push((-max).exp());
    let s: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= s;
    }
    w
}

/// Logits for a starting point; zero weights are pulled slightly into the interior.
fn logits(w: &[f64]) -> Vec<f64> {
    const FLOOR: f64 = 1e-6;
    let last = w[w.len() - 1].max(FLOOR);
    w[..w.len() - 1].iter().map(|&v| (v.max(FLOOR) / last).ln()).collect()
}

/// Objective and gradient in logit space.
fn objective(sample: &CalibrationSample, z: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let w = softmax(z);
    let e = sample.evaluate(&w, true);
    let wg: f64 = w.iter().zip(&e.grad).map(|(a, b)| a * b).sum();
    let gz = (0..z.len()).map(|j| w[j] * (e.grad[j] - wg)).collect();
    (e.ce, gz, w)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn fit_weights(sample: &CalibrationSample, config: &FitConfig) -> Result<FitReport, FitError> {
    let k = sample.num_experts();
    if k < 2 {
        return Err(FitError::NeedTwo);
    }
    if sample.is_empty() {
        return Err(FitError::EmptySample);
    }
    let init = match &config.init {
        Some(w) if w.len() == k => w.clone(),
        Some(w) => return Err(FitError::Shape(format!("initial point has {} weights for {k} experts", w.len()))),
        None => WeightVector::uniform(k),
    };

    let n = k - 1;
    let mut z = logits(init.as_slice());
    let (mut f, mut g, mut w) = objective(sample, &z);
    if !f.is_finite() {
        return Err(FitError::NonFinite);
    }
    let mut trace = vec![TracePoint {
        iteration: 0,
        weights: w.clone(),
        ce: f,
    }];
    // Inverse Hessian approximation, row-major n x n.
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    let mut converged = inf_norm(&g) <= config.tolerance;
    let mut iterations = 0;
    let mut first = true;

    while !converged && iterations < config.max_iters {
        let mut d: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &g)).collect();
        let mut slope = dot(&d, &g);
        if slope >= 0.0 {
            // Curvature estimate went bad; restart from steepest descent.
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] = if i == j { 1.0 } else { 0.0 };
                }
            }
            d = g.iter().map(|x| -x).collect();
            slope = dot(&d, &g);
            first = true;
        }
        let mut t = if first {
            let l1: f64 = g.iter().map(|x| x.abs()).sum();
            config.learning_rate * (1.0f64).min(1.0 / l1.max(f64::MIN_POSITIVE))
        } else {
            1.0
        };
        t = t.min(MAX_LOGIT_STEP / inf_norm(&d).max(f64::MIN_POSITIVE));

        let mut accepted = None;
        for _ in 0..40 {
            let zt: Vec<f64> = z.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let (ft, gt, wt) = objective(sample, &zt);
            if ft.is_finite() && ft <= f + 1e-4 * t * slope {
                accepted = Some((zt, ft, gt, wt));
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        let Some((zn, fnew, gn, wn)) = accepted else {
            // No descent along any step length: at a minimum to working precision.
            converged = true;
            break;
        };

        let s: Vec<f64> = zn.iter().zip(&z).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-18 {
            if first {
                let scale = sy / dot(&y, &y);
                for v in h.iter_mut() {
                    *v *= scale;
                }
            }
            // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (s[i] * hy[j] + hy[i] * s[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
            first = false;
        }

        z = zn;
        f = fnew;
        g = gn;
        w = wn;
        trace.push(TracePoint {
            iteration: iterations,
            weights: w.clone(),
            ce: f,
        });
        converged = inf_norm(&g) <= config.tolerance || inf_norm(&s) <= config.tolerance;
    }

    let optimizer_w = WeightVector::new(w)?;
    let optimizer_ce = sample.cross_entropy(&optimizer_w)?;
    let endpoint_ce: Vec<f64> = (0..k).map(|i| sample.expert_cross_entropy(i)).collect();

    let mut best = WeightVector::one_hot(k, 0);
    let mut best_ce = endpoint_ce[0];
    let mut consider = |cand: &WeightVector, ce: f64| {
        if ce < best_ce - IMPROVEMENT_EPS {
            best = cand.clone();
            best_ce = ce;
        }
    };
    for (i, &ce) in endpoint_ce.iter().enumerate().skip(1) {
        consider(&WeightVector::one_hot(k, i), ce);
    }
    for c in &config.candidates {
        if c.len() == k {
            consider(c, sample.cross_entropy(c)?);
        }
    }
    consider(&optimizer_w, optimizer_ce);

    Ok(FitReport {
        weights: best,
        trace,
        iterations,
        converged,
        endpoint_ce,
        optimizer_ce,
        final_ce: best_ce,
    })
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub weights: WeightVector,
    pub ce: f64,
    /// Every lattice point in visit order with its cross-entropy.
    pub curve: Vec<(WeightVector, f64)>,
}

impl GridResult {
    /// For two experts: `(alpha, ce)` with alpha the weight on the first expert.
    pub fn alpha_curve(&self) -> Vec<(f64, f64)> {
        self.curve.iter().map(|(w, ce)| (w.as_slice()[0], *ce)).collect()
    }
}

/// Exhaustive search over the simplex lattice with spacing `step`.
///
/// For two experts the lattice is `alpha = i * step` on the first expert, visited in
/// increasing `alpha`; ties keep the smaller alpha. For more experts, points are
/// visited in lexicographic order of their weights and ties keep the first.
pub fn grid_search(sample: &CalibrationSample, step: f64) -> Result<GridResult, FitError> {
    let k = sample.num_experts();
    if k < 2 {
        return Err(FitError::NeedTwo);
    }
    let m = (1.0 / step).round();
    if !(step > 0.0) || m < 1.0 || ((m * step) - 1.0).abs() > 1e-9 {
        return Err(FitError::BadStep(step));
    }
    let m = m as u32;
    let mut curve = Vec::new();
    let mut parts = vec![0u32; k];
    lattice(&mut parts, 0, m, &mut |p| {
        let w: Vec<f64> = p.iter().map(|&c| c as f64 / m as f64).collect();
        curve.push(w);
    });
    let mut best: Option<(WeightVector, f64)> = None;
    let mut out = Vec::with_capacity(curve.len());
    for w in curve {
        let w = WeightVector::new(w)?;
        let ce = sample.cross_entropy(&w)?;
        if best.as_ref().is_none_or(|(_, b)| ce < *b) {
            best = Some((w.clone(), ce));
        }
        out.push((w, ce));
    }
    let (weights, ce) = best.expect("lattice is non-empty");
    Ok(GridResult { weights, ce, curve: out })
}

fn lattice(parts: &mut [u32], at: usize, left: u32, visit: &mut dyn FnMut(&[u32])) {
    if at == parts.len() - 1 {
        parts[at] = left;
        visit(parts);
        return;
    }
    for c in 0..=left {
        parts[at] = c;
        lattice(parts, at + 1, left - c, visit);
    }
}

/// True when a sequence first never rises and then never falls.
pub fn is_unimodal(values: &[f64]) -> bool {
    let mut i = 1;
    while i < values.len() && values[i] <= values[i - 1] {
        i += 1;
    }
    while i < values.len() && values[i] >= values[i - 1] {
        i += 1;
    }
    i >= values.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic(truth: &[f64], n: usize, seed: u64) -> CalibrationSample {
        let d = truth.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let good: Vec<f64> = truth.iter().map(|p| p.ln()).collect();
        let flat = vec![-(d as f64).ln(); d];
        let mut s = CalibrationSample::new(2, d);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut x = d - 1;
            for (i, p) in truth.iter().enumerate() {
                acc += p;
                if u < acc {
                    x = i;
                    break;
                }
            }
            s.push(x as u32, &[&good, &flat]).unwrap();
        }
        s
    }

    #[test]
    fn true_model_takes_the_weight() {
        let s = synthetic(&[0.6, 0.2, 0.1, 0.05, 0.05], 4000, 1);
        let grid = grid_search(&s, 0.001).unwrap();
        let fit = fit_weights(&s, &FitConfig::default()).unwrap();
        assert!(fit.weights.as_slice()[0] >= 0.95, "{:?}", fit.weights);
        assert!(grid.weights.as_slice()[0] >= 0.95);
        assert!(grid.ce <= fit.final_ce + 1e-4);
    }

    #[test]
    fn identical_experts_pick_the_first() {
        let row = [0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()];
        let mut s = CalibrationSample::new(2, 3);
        for x in [0, 1, 2, 0, 0] {
            s.push(x, &[&row, &row]).unwrap();
        }
        let fit = fit_weights(&s, &FitConfig::default()).unwrap();
        assert_eq!(fit.weights.as_slice(), &[1.0, 0.0]);
        let grid = grid_search(&s, 0.01).unwrap();
        assert!(grid.curve.iter().all(|(_, ce)| (ce - fit.final_ce).abs() < 1e-12));
    }

    #[test]
    fn never_worse_than_best_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let k = rng.random_range(2..5);
            let d = rng.random_range(2..20);
            let mut s = CalibrationSample::new(k, d);
            for _ in 0..50 {
                let rows: Vec<Vec<f64>> = (0..k)
                    .map(|_| {
                        let r: Vec<f64> = (0..d).map(|_| rng.random::<f64>() + 1e-3).collect();
                        let t: f64 = r.iter().sum();
                        r.iter().map(|v| (v / t).ln()).collect()
                    })
                    .collect();
                let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
                s.push(rng.random_range(0..d as u32), &refs).unwrap();
            }
            let fit = fit_weights(&s, &FitConfig::default()).unwrap();
            assert!(fit.final_ce <= fit.best_expert_ce() + 1e-9);
            assert!((s.cross_entropy(&fit.weights).unwrap() - fit.final_ce).abs() < 1e-15);
        }
    }

    #[test]
    fn grid_endpoints_match_experts() {
        let s = synthetic(&[0.7, 0.2, 0.1], 500, 3);
        let g = grid_search(&s, 0.01).unwrap();
        let c = g.alpha_curve();
        assert_eq!(c.len(), 101);
        assert_eq!(c[0].1, s.expert_cross_entropy(1));
        assert_eq!(c[100].1, s.expert_cross_entropy(0));
        assert!(is_unimodal(&c.iter().map(|p| p.1).collect::<Vec<_>>()));
    }

    #[test]
    fn three_expert_lattice_size() {
        let row = [0.5f64.ln(), 0.5f64.ln()];
        let mut s = CalibrationSample::new(3, 2);
        s.push(0, &[&row, &row, &row]).unwrap();
        assert_eq!(grid_search(&s, 0.1).unwrap().curve.len(), 66);
        assert!(grid_search(&s, 0.3).is_err());
    }

    #[test]
    fn unimodality() {
        assert!(is_unimodal(&[3.0, 2.0, 1.0, 1.0, 2.0]));
        assert!(is_unimodal(&[1.0, 2.0]));
        assert!(!is_unimodal(&[1.0, 2.0, 1.0, 2.0]));
    }

    #[test]
    fn csv_report() {
        let s = synthetic(&[0.7, 0.2, 0.1], 200, 5);
        let fit = fit_weights(&s, &FitConfig::default()).unwrap();
        let mut buf = Vec::new();
        fit.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,alpha_1,alpha_2,ce_nats\n"));
        assert_eq!(text.lines().count(), fit.trace.len() + 1);
    }
}
