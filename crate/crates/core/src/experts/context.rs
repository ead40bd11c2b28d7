//! Order-k count model with fixed dyadic backoff.
//!
//! Counts are kept for every suffix of the context up to `order` symbols. A
//! prediction finds the longest suffix `m` seen before in this chunk and mixes the
//! Lidstone estimates of suffix lengths `0..=m` with weights proportional to
//! `2^-(m - j)`, so each shorter suffix gets half the weight of the next longer one.
//! With nothing matched beyond the empty suffix the output is exactly the order-0
//! Lidstone estimate.

use rustc_hash::FxHashMap;

use super::spec::{MAX_CONTEXT_ORDER, MIN_ALPHA};
use super::{check_symbol, Expert, ExpertError, LidstoneTable};
use crate::memo::Memo;
use crate::Symbol;

type Key = [Symbol; MAX_CONTEXT_ORDER];

#[derive(Debug, Default, Clone)]
struct Counts {
    total: u32,
    entries: Vec<(Symbol, u32)>,
}

impl Counts {
    fn bump(&mut self, symbol: Symbol) {
        self.total += 1;
        match self.entries.iter_mut().find(|(s, _)| *s == symbol) {
            Some((_, c)) => *c += 1,
            None => self.entries.push((symbol, 1)),
        }
    }
}

/// Count tables of the longest run of seen suffixes, shortest first.
fn matched<'a>(levels: &'a [FxHashMap<Key, Counts>], order: usize, context: &[Symbol]) -> Vec<&'a Counts> {
    let mut found = Vec::new();
    for len in 1..=order.min(context.len()) {
        match levels[len - 1].get(&suffix_key(context, len)) {
            Some(c) if c.total > 0 => found.push(c),
            _ => break,
        }
    }
    found
}

fn suffix_key(context: &[Symbol], len: usize) -> Key {
    let mut key = [0; MAX_CONTEXT_ORDER];
    key[..len].copy_from_slice(&context[context.len() - len..]);
    key
}

pub struct ContextModel {
    alphabet_size: usize,
    order: usize,
    alpha: f64,
    order0: Vec<u32>,
    total0: u64,
    levels: Vec<FxHashMap<Key, Counts>>,
    table: LidstoneTable,
    extra: Vec<f64>,
    ln: Memo,
}

impl ContextModel {
    pub fn new(alphabet_size: usize, order: u32, alpha: f64) -> Result<Self, ExpertError> {
        if order as usize > MAX_CONTEXT_ORDER {
            return Err(ExpertError::Config(format!(
                "context order {order} exceeds the cap of {MAX_CONTEXT_ORDER}"
            )));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(ExpertError::Config(format!("lidstone alpha must be positive, got {alpha}")));
        }
        let alpha = alpha.max(MIN_ALPHA);
        Ok(Self {
            alphabet_size,
            order: order as usize,
            alpha,
            order0: vec![0; alphabet_size],
            total0: 0,
            levels: (0..order).map(|_| FxHashMap::default()).collect(),
            table: LidstoneTable::new(alpha, alphabet_size),
            extra: vec![0.0; alphabet_size],
            ln: Memo::ln(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Distinct contexts (including the empty one) holding at least one count.
    pub fn context_count(&self) -> usize {
        usize::from(self.total0 > 0) + self.levels.iter().map(|l| l.len()).sum::<usize>()
    }

    /// Non-zero (context, symbol) count entries.
    pub fn entry_count(&self) -> usize {
        self.order0.iter().filter(|&&c| c > 0).count()
            + self
                .levels
                .iter()
                .flat_map(|l| l.values())
                .map(|c| c.entries.len())
                .sum::<usize>()
    }

    /// Accumulates the backoff mixture: symbol `s` gets the returned base mass plus
    /// `extra[s]`, which is exactly zero for symbols no matched level has seen.
    /// `None` when no context of length one or more has been seen yet.
    fn blend(&mut self, context: &[Symbol]) -> Option<f64> {
        let matched = matched(&self.levels, self.order, context);
        if matched.is_empty() {
            return None;
        }
        let m = matched.len();
        let ad = self.alpha * self.alphabet_size as f64;
        let norm = ((1u64 << (m + 1)) - 1) as f64;
        let extra = &mut self.extra;

        let lambda0 = 1.0 / norm;
        let den0 = self.total0 as f64 + ad;
        let mut base = lambda0 * self.alpha / den0;
        let scale0 = lambda0 / den0;
        for (e, &c) in extra.iter_mut().zip(&self.order0) {
            *e = scale0 * c as f64;
        }
        for (j, counts) in matched.iter().enumerate() {
            let lambda = (1u64 << (j + 1)) as f64 / norm;
            let den = counts.total as f64 + ad;
            base += lambda * self.alpha / den;
            let scale = lambda / den;
            for &(s, c) in &counts.entries {
                extra[s as usize] += scale * c as f64;
            }
        }

        Some(base)
    }
}

impl Expert for ContextModel {
    fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    fn begin_chunk(&mut self) -> Result<(), ExpertError> {
        self.order0.fill(0);
        self.total0 = 0;
        for level in &mut self.levels {
            level.clear();
        }
        Ok(())
    }

    fn predict_into(&mut self, context: &[Symbol], out: &mut [f64]) -> Result<(), ExpertError> {
        let Some(base) = self.blend(context) else {
            self.table.fill(&self.order0, self.total0, out);
            return Ok(());
        };
        let ln_base = libm::log(base);
        for (o, &e) in out.iter_mut().zip(&self.extra) {
            *o = if e == 0.0 { ln_base } else { self.ln.get(base + e) };
        }
        Ok(())
    }

    fn predict_probs_into(&mut self, context: &[Symbol], out: &mut [f64]) -> Result<(), ExpertError> {
        let Some(base) = self.blend(context) else {
            self.table.fill_probs(&self.order0, self.total0, out);
            return Ok(());
        };
        for (o, &e) in out.iter_mut().zip(&self.extra) {
            *o = base + e;
        }
        Ok(())
    }

    fn observe(&mut self, symbol: Symbol, context: &[Symbol]) -> Result<(), ExpertError> {
        check_symbol(symbol, self.alphabet_size)?;
        self.order0[symbol as usize] += 1;
        self.total0 += 1;
        for len in 1..=self.order.min(context.len()) {
            self.levels[len - 1]
                .entry(suffix_key(context, len))
                .or_default()
                .bump(symbol);
        }
        Ok(())
    }
}
