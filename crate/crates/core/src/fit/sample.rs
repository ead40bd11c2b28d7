//! Cached expert predictions over a calibration sample.
//!
//! Count-based experts give every symbol they have not seen the same probability, so
//! most of a row is one repeated value. Each position is stored as the target's
//! log-probabilities, one shared "base" tuple (each expert's minimum) with the number
//! of symbols taking it in every expert at once, and explicit tuples for the rest.
//! Identical explicit tuples are merged with a multiplicity. The compaction is exact;
//! dense experts simply store every symbol explicitly.

use super::FitError;
use crate::experts::Expert;
use crate::mix::WeightVector;
use crate::Symbol;

pub struct CalibrationSample {
    k: usize,
    alphabet_size: usize,
    targets: Vec<Symbol>,
    /// `n x K` log-probs of the observed symbol.
    target_lp: Vec<f64>,
    /// `n x K` shared tuple and its multiplicity.
    base_lp: Vec<f64>,
    base_count: Vec<u32>,
    /// Explicit tuples of position `i` are `explicit_lp[K*start[i]..K*start[i+1]]`.
    start: Vec<usize>,
    explicit_lp: Vec<f64>,
    explicit_count: Vec<u32>,
    /// Scratch for merging tuples within one position, see [`MergeTable`].
    merge: MergeTable,
}

/// Direct-mapped table from a tuple hash to its explicit index. A slot belongs to the
/// current position only when its generation matches. Hits are verified against the
/// stored tuple, so a collision merely leaves two equal tuples unmerged.
struct MergeTable {
    slots: Vec<(u64, usize, u32)>,
    generation: u32,
    /// Per-symbol tuple hash and "differs from the base tuple" flag.
    hashes: Vec<u64>,
    off_base: Vec<bool>,
}

const MERGE_SLOT_BITS: u32 = 10;

impl MergeTable {
    fn new() -> Self {
        Self {
            slots: vec![(0, 0, 0); 1 << MERGE_SLOT_BITS],
            generation: 0,
            hashes: Vec::new(),
            off_base: Vec::new(),
        }
    }

    fn next_position(&mut self) {
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.slots.fill((0, 0, 0));
            self.generation = 1;
        }
    }

    fn slot(hash: u64) -> usize {
        (hash >> (64 - MERGE_SLOT_BITS)) as usize
    }
}

/// Cross-entropy and its gradient with respect to the weights.
pub(crate) struct Evaluation {
    pub ce: f64,
    pub grad: Vec<f64>,
}

impl CalibrationSample {
    pub fn new(k: usize, alphabet_size: usize) -> Self {
        Self {
            k,
            alphabet_size,
            targets: Vec::new(),
            target_lp: Vec::new(),
            base_lp: Vec::new(),
            base_count: Vec::new(),
            start: vec![0],
            explicit_lp: Vec::new(),
            explicit_count: Vec::new(),
            merge: MergeTable::new(),
        }
    }

    /// Replays `experts` over each chunk from a fresh state, caching every prediction.
    pub fn from_chunks(chunks: &[&[Symbol]], experts: &mut [Box<dyn Expert>]) -> Result<Self, FitError> {
        let k = experts.len();
        if k == 0 {
            return Err(FitError::NoExperts);
        }
        let d = experts[0].alphabet_size();
        if experts.iter().any(|e| e.alphabet_size() != d) {
            return Err(FitError::Shape("experts disagree on the alphabet size".into()));
        }
        let mut sample = Self::new(k, d);
        let mut rows = vec![vec![0.0; d]; k];
        for chunk in chunks {
            for e in experts.iter_mut() {
                e.begin_chunk()?;
            }
            for i in 0..chunk.len() {
                let ctx = &chunk[..i];
                for (e, row) in experts.iter_mut().zip(rows.iter_mut()) {
                    e.predict_into(ctx, row)?;
                }
                let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
                sample.push(chunk[i], &refs)?;
                for e in experts.iter_mut() {
                    e.observe(chunk[i], ctx)?;
                }
            }
        }
        Ok(sample)
    }

    /// Appends one position given each expert's full log-probability row.
    pub fn push(&mut self, target: Symbol, rows: &[&[f64]]) -> Result<(), FitError> {
        if rows.len() != self.k {
            return Err(FitError::Shape(format!("{} rows for {} experts", rows.len(), self.k)));
        }
        if rows.iter().any(|r| r.len() != self.alphabet_size) {
            return Err(FitError::Shape("row length differs from the alphabet size".into()));
        }
        let t = target as usize;
        if t >= self.alphabet_size {
            return Err(FitError::Shape(format!("target {target} outside the alphabet")));
        }
        let mut base = Vec::with_capacity(self.k);
        for r in rows {
            let mut finite = true;
            let mut min = f64::INFINITY;
            for &v in r.iter() {
                finite &= v.is_finite();
                if v < min {
                    min = v;
                }
            }
            if !finite {
                return Err(FitError::NonFinite);
            }
            base.push(min);
        }
        self.targets.push(target);
        let mut count = 0u32;
        let k = self.k;
        self.merge.next_position();
        let generation = self.merge.generation;
        let merge = &mut self.merge;
        merge.hashes.clear();
        merge.hashes.resize(self.alphabet_size, 0);
        merge.off_base.clear();
        merge.off_base.resize(self.alphabet_size, false);
        for (r, &b) in rows.iter().zip(&base) {
            for ((h, off), &v) in merge.hashes.iter_mut().zip(merge.off_base.iter_mut()).zip(r.iter()) {
                *off |= v != b;
                *h = (*h ^ v.to_bits()).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            }
        }
        for a in 0..self.alphabet_size {
            if !self.merge.off_base[a] {
                count += 1;
                continue;
            }
            let hash = self.merge.hashes[a];
            let slot = &mut self.merge.slots[MergeTable::slot(hash)];
            if slot.2 == generation && slot.0 == hash {
                let j = slot.1;
                let stored = &self.explicit_lp[k * j..k * (j + 1)];
                if stored.iter().zip(rows).all(|(&v, r)| v.to_bits() == r[a].to_bits()) {
                    self.explicit_count[j] += 1;
                    continue;
                }
            }
            *slot = (hash, self.explicit_count.len(), generation);
            self.explicit_lp.extend(rows.iter().map(|r| r[a]));
            self.explicit_count.push(1);
        }
        self.target_lp.extend(rows.iter().map(|r| r[t]));
        self.base_lp.extend_from_slice(&base);
        self.base_count.push(count);
        self.start.push(self.explicit_lp.len() / self.k);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn num_experts(&self) -> usize {
        self.k
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    pub fn targets(&self) -> &[Symbol] {
        &self.targets
    }

    /// Standalone cross-entropy of expert `k`, nats per symbol.
    pub fn expert_cross_entropy(&self, k: usize) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.target_lp.chunks_exact(self.k).map(|t| -t[k]).sum();
        sum / self.len() as f64
    }

    /// Mean `-ln pi_w(x_i | x_<i)` in nats per symbol. A vertex weight vector
    /// reproduces that expert's cross-entropy exactly.
    pub fn cross_entropy(&self, w: &WeightVector) -> Result<f64, FitError> {
        if w.len() != self.k {
            return Err(FitError::Shape(format!("{} weights for {} experts", w.len(), self.k)));
        }
        if let Some(k) = w.vertex() {
            return Ok(self.expert_cross_entropy(k));
        }
        let ce = self.evaluate(w.as_slice(), false).ce;
        if ce.is_finite() {
            Ok(ce)
        } else {
            Err(FitError::NonFinite)
        }
    }

    pub(crate) fn evaluate(&self, w: &[f64], with_grad: bool) -> Evaluation {
        let k = self.k;
        let n = self.len();
        let mut ce = 0.0;
        let mut grad = vec![0.0; if with_grad { k } else { 0 }];
        let mut scores: Vec<f64> = Vec::new();
        let dot = |x: &[f64]| x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..n {
            let t = &self.target_lp[i * k..(i + 1) * k];
            let b = &self.base_lp[i * k..(i + 1) * k];
            let ex = &self.explicit_lp[k * self.start[i]..k * self.start[i + 1]];
            let mult = &self.explicit_count[self.start[i]..self.start[i + 1]];
            let count = self.base_count[i];

            scores.clear();
            scores.extend(ex.chunks_exact(k).map(dot));
            let sb = dot(b);
            let mut max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if count > 0 {
                max = max.max(sb);
            }
            let base_mass = if count > 0 { count as f64 * (sb - max).exp() } else { 0.0 };
            let mut z = base_mass;
            for (s, &m) in scores.iter_mut().zip(mult) {
                *s = m as f64 * (*s - max).exp();
                z += *s;
            }
            let ln_z = max + z.ln();
            ce += ln_z - dot(t);

            if with_grad {
                // d/dw_k [ln Z - w.t] = E_pi[l_k] - t_k
                let inv = 1.0 / z;
                for j in 0..k {
                    let mut e = base_mass * b[j];
                    for (s, row) in scores.iter().zip(ex.chunks_exact(k)) {
                        e += s * row[j];
                    }
                    grad[j] += e * inv - t[j];
                }
            }
        }
        let scale = if n > 0 { 1.0 / n as f64 } else { 0.0 };
        for g in grad.iter_mut() {
            *g *= scale;
        }
        Evaluation { ce: ce * scale, grad }
    }
}
