//! Transducer loss over the `T × (U+1)` lattice, optionally restricted to
//! per-token emission bands.
//!
//! Lattice state `(t, u)` means `t` frames consumed and `u` labels emitted.
//! From `(t, u)` a blank moves to `(t+1, u)` and label `y[u]` moves to
//! `(t, u+1)`. Every path ends with the blank out of `(T-1, U)`. A band
//! forbids emitting label `u` (1-based) at any frame outside `[lo_u, hi_u]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vocabulary index of the blank symbol.
pub const BLANK: usize = 0;

/// Stand-in for −∞ inside the recursions; keeps log-sum-exp free of NaN.
pub const LOG_ZERO: f64 = -1e30;

/// Log-probabilities `values[(t * (U+1) + u) * V + v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeLogits {
    frames: usize,
    labels: usize,
    vocab: usize,
    values: Vec<f64>,
}

impl LatticeLogits {
    /// Wrap an already-normalised grid; every `(t, u)` row must sum to one.
    pub fn from_log_probs(frames: usize, labels: usize, vocab: usize, values: Vec<f64>) -> Result<Self> {
        let out = Self::unchecked(frames, labels, vocab, values)?;
        for (i, row) in out.values.chunks(vocab).enumerate() {
            let total: f64 = row.iter().map(|x| x.exp()).sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!(
                    "lattice row {i} sums to {total}, expected 1"
                )));
            }
        }
        Ok(out)
    }

    /// Normalise raw scores with a log-softmax over the vocabulary axis.
    pub fn from_logits(frames: usize, labels: usize, vocab: usize, mut values: Vec<f64>) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::InvalidInput("empty vocabulary".into()));
        }
        for row in values.chunks_mut(vocab) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Self::unchecked(frames, labels, vocab, values)
    }

    fn unchecked(frames: usize, labels: usize, vocab: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InvalidInput("empty lattice: T = 0".into()));
        }
        if vocab < 2 {
            return Err(Error::InvalidInput(format!("vocabulary of {vocab} has no labels")));
        }
        let expected = frames * (labels + 1) * vocab;
        if values.len() != expected {
            return Err(Error::InvalidInput(format!(
                "lattice {frames}x{}x{vocab} needs {expected} values, got {}",
                labels + 1,
                values.len()
            )));
        }
        Ok(Self {
            frames,
            labels,
            vocab,
            values,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn index(&self, t: usize, u: usize, v: usize) -> usize {
        (t * (self.labels + 1) + u) * self.vocab + v
    }

    #[inline]
    pub fn get(&self, t: usize, u: usize, v: usize) -> f64 {
        self.values[self.index(t, u, v)]
    }
}

/// Reference emission frame of every label (frame where its audio ends).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub frames: Vec<usize>,
    /// Last frame of speech.
    pub end_frame: usize,
}

impl Alignment {
    pub fn new(frames: Vec<usize>, end_frame: usize) -> Result<Self> {
        if let Some(w) = frames.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::InvalidInput(format!(
                "alignment decreases at label {}: {} -> {}",
                w + 1,
                frames[w],
                frames[w + 1]
            )));
        }
        Ok(Self { frames, end_frame })
    }
}

/// Buffer width in milliseconds; `f64::INFINITY` means unrestricted.
pub type BufferMs = f64;

/// Convert a millisecond span to frames, rounding half up.
pub fn ms_to_frames(ms: f64, frame_ms: f64) -> usize {
    if ms.is_infinite() {
        return usize::MAX;
    }
    (ms / frame_ms + 0.5).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestrictionBand {
    /// `intervals[u - 1] = (lo_u, hi_u)`, inclusive frame bounds for label `u`.
    pub intervals: Vec<(usize, usize)>,
    pub left_ms: BufferMs,
    pub right_ms: BufferMs,
    pub frame_ms: f64,
}

impl RestrictionBand {
    /// Band around each reference frame: `[a_u − round(b_l/frame), a_u + round(b_r/frame)]`,
    /// clamped to `[0, T−1]`.
    pub fn build(alignment: &Alignment, left_ms: BufferMs, right_ms: BufferMs, frame_ms: f64, frames: usize) -> Result<Self> {
        if !(frame_ms > 0.0) {
            return Err(Error::InvalidInput(format!("frame duration {frame_ms} ms")));
        }
        if frames == 0 {
            return Err(Error::InvalidInput("band over an empty lattice".into()));
        }
        if left_ms < 0.0 || right_ms < 0.0 {
            return Err(Error::InvalidInput("negative buffer".into()));
        }
        let alignment = Alignment::new(alignment.frames.clone(), alignment.end_frame)?;
        if let Some(&a) = alignment.frames.iter().find(|&&a| a >= frames) {
            return Err(Error::InvalidInput(format!("alignment frame {a} outside T = {frames}")));
        }
        let left = ms_to_frames(left_ms, frame_ms);
        let right = ms_to_frames(right_ms, frame_ms);
        let intervals = alignment
            .frames
            .iter()
            .map(|&a| (a.saturating_sub(left), a.saturating_add(right).min(frames - 1)))
            .collect();
        Ok(Self {
            intervals,
            left_ms,
            right_ms,
            frame_ms,
        })
    }

    /// Band from explicit intervals (buffers recorded as NaN).
    pub fn from_intervals(intervals: Vec<(usize, usize)>, frame_ms: f64) -> Self {
        Self {
            intervals,
            left_ms: f64::NAN,
            right_ms: f64::NAN,
            frame_ms,
        }
    }

    /// Every label may be emitted anywhere.
    pub fn unrestricted(labels: usize, frames: usize, frame_ms: f64) -> Self {
        Self {
            intervals: vec![(0, frames.saturating_sub(1)); labels],
            left_ms: f64::INFINITY,
            right_ms: f64::INFINITY,
            frame_ms,
        }
    }

    #[inline]
    fn allows(&self, label: usize, t: usize) -> bool {
        let (lo, hi) = self.intervals[label - 1];
        lo <= t && t <= hi
    }

    /// Check that some monotone path satisfies every interval.
    pub fn check_feasible(&self, labels: usize) -> Result<()> {
        let mut earliest = 0usize;
        for (i, &(lo, hi)) in self.intervals.iter().take(labels).enumerate() {
            earliest = earliest.max(lo);
            if earliest > hi {
                return Err(Error::EmptyLattice(format!(
                    "label {} must be emitted in frames [{lo}, {hi}] but cannot precede frame {earliest}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if hi <= LOG_ZERO {
        return LOG_ZERO;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn validate(logits: &LatticeLogits, labels: &[usize], band: Option<&RestrictionBand>) -> Result<()> {
    if labels.len() != logits.labels {
        return Err(Error::InvalidInput(format!(
            "{} labels for a lattice built with U = {}",
            labels.len(),
            logits.labels
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y == BLANK || y >= logits.vocab) {
        return Err(Error::InvalidInput(format!(
            "label symbol {bad} is blank or outside vocabulary of {}",
            logits.vocab
        )));
    }
    if let Some(b) = band {
        if b.intervals.len() < labels.len() {
            return Err(Error::InvalidInput(format!(
                "band covers {} labels, need {}",
                b.intervals.len(),
                labels.len()
            )));
        }
    }
    Ok(())
}

/// Label transition weight out of `(t, u)`, or [`LOG_ZERO`] when banned.
#[inline]
fn label_weight(logits: &LatticeLogits, labels: &[usize], band: Option<&RestrictionBand>, t: usize, u: usize) -> f64 {
    match band {
        Some(b) if !b.allows(u + 1, t) => LOG_ZERO,
        _ => logits.get(t, u, labels[u]),
    }
}

fn forward_variables(logits: &LatticeLogits, labels: &[usize], band: Option<&RestrictionBand>) -> Vec<f64> {
    let (tn, un) = (logits.frames, logits.labels + 1);
    let mut alpha = vec![LOG_ZERO; tn * un];
    alpha[0] = 0.0;
    for t in 0..tn {
        for u in 0..un {
            if t == 0 && u == 0 {
                continue;
            }
            let mut acc = LOG_ZERO;
            if t > 0 {
                acc = alpha[(t - 1) * un + u] + logits.get(t - 1, u, BLANK);
            }
            if u > 0 {
                let w = label_weight(logits, labels, band, t, u - 1);
                acc = log_add(acc, alpha[t * un + u - 1] + w);
            }
            alpha[t * un + u] = acc.max(LOG_ZERO);
        }
    }
    alpha
}

fn backward_variables(logits: &LatticeLogits, labels: &[usize], band: Option<&RestrictionBand>) -> Vec<f64> {
    let (tn, un) = (logits.frames, logits.labels + 1);
    let mut beta = vec![LOG_ZERO; tn * un];
    for t in (0..tn).rev() {
        for u in (0..un).rev() {
            let v = if t == tn - 1 && u == un - 1 {
                logits.get(t, u, BLANK)
            } else {
                let mut acc = LOG_ZERO;
                if t + 1 < tn {
                    acc = beta[(t + 1) * un + u] + logits.get(t, u, BLANK);
                }
                if u + 1 < un {
                    let w = label_weight(logits, labels, band, t, u);
                    acc = log_add(acc, beta[t * un + u + 1] + w);
                }
                acc
            };
            beta[t * un + u] = v.max(LOG_ZERO);
        }
    }
    beta
}

/// `−log P(labels | logits)` summed over all permitted alignment paths.
///
/// Returns `f64::INFINITY` when the band admits no path.
pub fn rnnt_loss(logits: &LatticeLogits, labels: &[usize], band: Option<&RestrictionBand>) -> Result<f64> {
    validate(logits, labels, band)?;
    if let Some(b) = band {
        if b.check_feasible(labels.len()).is_err() {
            return Ok(f64::INFINITY);
        }
    }
    let alpha = forward_variables(logits, labels, band);
    let (tn, un) = (logits.frames, logits.labels + 1);
    let log_p = alpha[(tn - 1) * un + un - 1] + logits.get(tn - 1, un - 1, BLANK);
    Ok(if log_p <= LOG_ZERO / 2.0 { f64::INFINITY } else { -log_p })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    /// `∂loss/∂values`, same layout as [`LatticeLogits::values`].
    pub grad: Vec<f64>,
}

/// Loss and its gradient with respect to every lattice log-probability.
///
/// Fails when the band admits no path, since the gradient is undefined.
pub fn rnnt_loss_grad(logits: &LatticeLogits, labels: &[usize], band: Option<&RestrictionBand>) -> Result<LossAndGrad> {
    validate(logits, labels, band)?;
    if let Some(b) = band {
        b.check_feasible(labels.len())?;
    }
    let alpha = forward_variables(logits, labels, band);
    let beta = backward_variables(logits, labels, band);
    let (tn, un) = (logits.frames, logits.labels + 1);
    let log_p = beta[0];
    if log_p <= LOG_ZERO / 2.0 {
        return Err(Error::EmptyLattice("total path probability underflows".into()));
    }

    let mut grad = vec![0.0; logits.values.len()];
    for t in 0..tn {
        for u in 0..un {
            let a = alpha[t * un + u];
            let blank_next = if t + 1 < tn {
                beta[(t + 1) * un + u]
            } else if u == un - 1 {
                0.0
            } else {
                LOG_ZERO
            };
            let occ = a + logits.get(t, u, BLANK) + blank_next - log_p;
            grad[logits.index(t, u, BLANK)] = -occupancy(occ);
            if u + 1 < un {
                let w = label_weight(logits, labels, band, t, u);
                if w > LOG_ZERO {
                    let occ = a + w + beta[t * un + u + 1] - log_p;
                    grad[logits.index(t, u, labels[u])] -= occupancy(occ);
                }
            }
        }
    }
    Ok(LossAndGrad { loss: -log_p, grad })
}

#[inline]
fn occupancy(log_occ: f64) -> f64 {
    if log_occ <= LOG_ZERO / 2.0 { 0.0 } else { log_occ.exp() }
}

/// Exact loss by enumerating every monotone path. Only for `T + U ≤ 12`.
pub fn brute_force_loss(logits: &LatticeLogits, labels: &[usize], band: Option<&RestrictionBand>) -> Result<f64> {
    validate(logits, labels, band)?;
    let size = logits.frames + logits.labels;
    if size > 12 {
        return Err(Error::TooLarge(size));
    }

    fn walk(l: &LatticeLogits, y: &[usize], band: Option<&RestrictionBand>, t: usize, u: usize, prob: f64) -> f64 {
        let last_t = l.frames - 1;
        let mut total = 0.0;
        if u < y.len() && band.is_none_or(|b| b.allows(u + 1, t)) {
            total += walk(l, y, band, t, u + 1, prob * l.get(t, u, y[u]).exp());
        }
        let p_blank = prob * l.get(t, u, BLANK).exp();
        if t < last_t {
            total += walk(l, y, band, t + 1, u, p_blank);
        } else if u == y.len() {
            total += p_blank;
        }
        total
    }

    let p = walk(logits, labels, band, 0, 0, 1.0);
    Ok(if p > 0.0 { -p.ln() } else { f64::INFINITY })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(frames: usize, labels: usize, vocab: usize) -> LatticeLogits {
        let n = frames * (labels + 1) * vocab;
        LatticeLogits::from_log_probs(frames, labels, vocab, vec![(1.0 / vocab as f64).ln(); n]).unwrap()
    }

    #[test]
    fn band_half_widths_from_buffers() {
        let al = Alignment::new(vec![10], 10).unwrap();
        let b = RestrictionBand::build(&al, 300.0, 420.0, 60.0, 40).unwrap();
        assert_eq!(b.intervals, vec![(5, 17)]);
    }

    #[test]
    fn infinite_buffers_cover_everything() {
        let al = Alignment::new(vec![1, 3, 3], 3).unwrap();
        let b = RestrictionBand::build(&al, f64::INFINITY, f64::INFINITY, 60.0, 6).unwrap();
        assert!(b.intervals.iter().all(|&iv| iv == (0, 5)));
    }

    #[test]
    fn band_intervals_forced_by_formula() {
        let al = Alignment::new(vec![2, 5], 5).unwrap();
        let b = RestrictionBand::build(&al, 60.0, 60.0, 60.0, 8).unwrap();
        assert_eq!(b.intervals, vec![(1, 3), (4, 6)]);
    }

    #[test]
    fn ms_rounding_is_half_up() {
        assert_eq!(ms_to_frames(90.0, 60.0), 2);
        assert_eq!(ms_to_frames(89.0, 60.0), 1);
        assert_eq!(ms_to_frames(30.0, 60.0), 1);
    }

    #[test]
    fn non_monotone_alignment_rejected() {
        assert!(Alignment::new(vec![3, 2], 3).is_err());
    }

    #[test]
    fn single_frame_no_labels() {
        let lp = LatticeLogits::from_logits(1, 0, 3, vec![0.3, -1.0, 2.0]).unwrap();
        let expected = -lp.get(0, 0, BLANK);
        assert!((rnnt_loss(&lp, &[], None).unwrap() - expected).abs() < 1e-12);
        assert!((brute_force_loss(&lp, &[], None).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn two_frame_uniform_lattice() {
        // Paths: label at t=0 then blank,blank; or blank, label at t=1, blank.
        // Each has probability (1/2)^3 → total 1/4.
        let lp = uniform(2, 1, 2);
        let loss = rnnt_loss(&lp, &[1], None).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386_294_361_119_890_6).abs() < 1e-12);
        let band = RestrictionBand::from_intervals(vec![(0, 0)], 60.0);
        let restricted = rnnt_loss(&lp, &[1], Some(&band)).unwrap();
        assert!((restricted - 8f64.ln()).abs() < 1e-12);
        assert!((brute_force_loss(&lp, &[1], Some(&band)).unwrap() - restricted).abs() < 1e-12);
    }

    #[test]
    fn infeasible_band_gives_infinite_loss_and_rejects_gradient() {
        let lp = uniform(3, 2, 3);
        let band = RestrictionBand::from_intervals(vec![(2, 2), (0, 1)], 60.0);
        assert_eq!(rnnt_loss(&lp, &[1, 2], Some(&band)).unwrap(), f64::INFINITY);
        assert_eq!(brute_force_loss(&lp, &[1, 2], Some(&band)).unwrap(), f64::INFINITY);
        assert!(matches!(
            rnnt_loss_grad(&lp, &[1, 2], Some(&band)),
            Err(Error::EmptyLattice(_))
        ));
        let empty = RestrictionBand::from_intervals(vec![(2, 1), (2, 2)], 60.0);
        assert!(empty.check_feasible(2).is_err());
    }

    #[test]
    fn input_validation() {
        let lp = uniform(2, 1, 3);
        assert!(rnnt_loss(&lp, &[0], None).is_err());
        assert!(rnnt_loss(&lp, &[3], None).is_err());
        assert!(rnnt_loss(&lp, &[1, 2], None).is_err());
        let short = RestrictionBand::from_intervals(vec![], 60.0);
        assert!(rnnt_loss(&lp, &[1], Some(&short)).is_err());
        assert!(LatticeLogits::from_logits(0, 1, 3, vec![]).is_err());
        assert!(LatticeLogits::from_log_probs(1, 0, 2, vec![0.0, 0.0]).is_err());
        let big = uniform(8, 5, 2);
        assert!(matches!(brute_force_loss(&big, &[1; 5], None), Err(Error::TooLarge(13))));
    }

    #[test]
    fn unrestricted_band_gradient_equals_band_free() {
        let vals: Vec<f64> = (0..3 * 3 * 3).map(|i| ((i * 7919) % 13) as f64 * 0.1).collect();
        let lp = LatticeLogits::from_logits(3, 2, 3, vals).unwrap();
        let band = RestrictionBand::unrestricted(2, 3, 60.0);
        let a = rnnt_loss_grad(&lp, &[1, 2], None).unwrap();
        let b = rnnt_loss_grad(&lp, &[1, 2], Some(&band)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_occupancy_sums() {
        // Every path takes exactly T blanks and U labels, so the gradient
        // entries sum to −(T + U).
        let vals: Vec<f64> = (0..4 * 3 * 4).map(|i| ((i * 31) % 11) as f64 * 0.2).collect();
        let lp = LatticeLogits::from_logits(4, 2, 4, vals).unwrap();
        let g = rnnt_loss_grad(&lp, &[3, 1], None).unwrap();
        let total: f64 = g.grad.iter().sum();
        assert!((total + 6.0).abs() < 1e-9);
        assert!(g.grad.iter().all(|x| x.is_finite()));
    }
}
