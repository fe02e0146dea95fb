//! CTC loss (forward algorithm), its gradient (forward-backward), greedy
//! decoding, and a brute-force alignment-enumeration oracle for tests.
//!
//! All lattice arithmetic is in log space; log(0) is the [`math::LOG_ZERO`]
//! sentinel so every operation stays total. The blank token is index 0.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::layers::log_softmax_fwd;
use crate::math::{self, log_add, LOG_ZERO, LOG_ZERO_EDGE};
use crate::tensor::Tensor;

/// Reserved blank index.
pub const BLANK: u32 = 0;

/// Per-frame log-probabilities over a vocabulary with index 0 = blank.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbLattice {
    log_probs: Tensor,
}

impl LogProbLattice {
    /// Wrap pre-normalized log-probabilities; rows must exp-sum to 1
    /// within 1e-9 and the vocabulary must hold at least blank + 1 token.
    pub fn new(log_probs: Tensor) -> Result<Self> {
        if log_probs.shape().len() != 2 || log_probs.cols() < 2 || log_probs.rows() == 0 {
            return Err(CoreError::ShapeMismatch {
                context: "LogProbLattice::new",
                expected: "[T x V] with T >= 1, V >= 2".into(),
                got: log_probs.describe_shape(),
            });
        }
        for t in 0..log_probs.rows() {
            let s: f64 = log_probs.row(t).iter().map(|&v| math::exp(v)).sum();
            if math::abs(s - 1.0) > 1e-9 {
                return Err(CoreError::InvalidData(format!(
                    "lattice row {t} exp-sums to {s}, not 1"
                )));
            }
        }
        Ok(LogProbLattice { log_probs })
    }

    /// Normalize raw logits row-wise; always yields a valid lattice.
    pub fn from_logits(logits: &Tensor) -> Self {
        LogProbLattice { log_probs: log_softmax_fwd(logits) }
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn vocab(&self) -> usize {
        self.log_probs.cols()
    }

    #[inline]
    pub fn lp(&self, t: usize, v: u32) -> f64 {
        self.log_probs.at2(t, v as usize)
    }

    pub fn log_probs(&self) -> &Tensor {
        &self.log_probs
    }
}

/// Token sequence without blanks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct LabelSeq {
    tokens: Vec<u32>,
}

impl LabelSeq {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.iter().any(|&t| t == BLANK) {
            return Err(CoreError::InvalidData("label contains the blank token".into()));
        }
        Ok(LabelSeq { tokens })
    }

    pub fn empty() -> Self {
        LabelSeq { tokens: Vec::new() }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Minimal number of lattice frames able to carry this label:
    /// one per token plus one separating blank per adjacent duplicate.
    pub fn min_frames(&self) -> usize {
        self.len() + self.adjacent_duplicates()
    }

    fn adjacent_duplicates(&self) -> usize {
        self.tokens.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

/// Blank-augmented label: blank, y1, blank, y2, ..., blank.
fn augmented(label: &LabelSeq) -> Vec<u32> {
    let mut out = Vec::with_capacity(2 * label.len() + 1);
    out.push(BLANK);
    for &t in label.tokens() {
        out.push(t);
        out.push(BLANK);
    }
    out
}

fn check_instance(lattice: &LogProbLattice, label: &LabelSeq) -> Result<()> {
    if let Some(&max) = label.tokens().iter().max() {
        if max as usize >= lattice.vocab() {
            return Err(CoreError::InvalidData(format!(
                "label token {max} outside vocabulary of size {}",
                lattice.vocab()
            )));
        }
    }
    if lattice.frames() < label.min_frames() {
        return Err(CoreError::InfeasibleLabel {
            frames: lattice.frames(),
            required: label.min_frames(),
        });
    }
    Ok(())
}

/// Forward (alpha) lattice over the augmented label, including the frame-t
/// emission in alpha[t][s].
fn forward_alphas(lattice: &LogProbLattice, aug: &[u32]) -> Vec<Vec<f64>> {
    let t_max = lattice.frames();
    let s_max = aug.len();
    let mut alpha = vec![vec![LOG_ZERO; s_max]; t_max];
    alpha[0][0] = lattice.lp(0, aug[0]);
    if s_max > 1 {
        alpha[0][1] = lattice.lp(0, aug[1]);
    }
    for t in 1..t_max {
        for s in 0..s_max {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if s >= 2 && aug[s] != BLANK && aug[s] != aug[s - 2] {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if acc <= LOG_ZERO_EDGE { LOG_ZERO } else { acc + lattice.lp(t, aug[s]) };
        }
    }
    alpha
}

/// Backward (beta) lattice, symmetric to [`forward_alphas`]: beta[t][s]
/// includes the frame-t emission.
fn backward_betas(lattice: &LogProbLattice, aug: &[u32]) -> Vec<Vec<f64>> {
    let t_max = lattice.frames();
    let s_max = aug.len();
    let mut beta = vec![vec![LOG_ZERO; s_max]; t_max];
    beta[t_max - 1][s_max - 1] = lattice.lp(t_max - 1, aug[s_max - 1]);
    if s_max > 1 {
        beta[t_max - 1][s_max - 2] = lattice.lp(t_max - 1, aug[s_max - 2]);
    }
    for t in (0..t_max - 1).rev() {
        for s in 0..s_max {
            let mut acc = beta[t + 1][s];
            if s + 1 < s_max {
                acc = log_add(acc, beta[t + 1][s + 1]);
            }
            if s + 2 < s_max && aug[s + 2] != BLANK && aug[s + 2] != aug[s] {
                acc = log_add(acc, beta[t + 1][s + 2]);
            }
            beta[t][s] = if acc <= LOG_ZERO_EDGE { LOG_ZERO } else { acc + lattice.lp(t, aug[s]) };
        }
    }
    beta
}

fn total_log_prob(alpha: &[Vec<f64>], s_max: usize) -> f64 {
    let last = &alpha[alpha.len() - 1];
    let mut z = last[s_max - 1];
    if s_max > 1 {
        z = log_add(z, last[s_max - 2]);
    }
    z
}

/// -log P(label | lattice), marginalized over all monotone alignments.
pub fn ctc_loss(lattice: &LogProbLattice, label: &LabelSeq) -> Result<f64> {
    check_instance(lattice, label)?;
    let aug = augmented(label);
    let alpha = forward_alphas(lattice, &aug);
    let z = total_log_prob(&alpha, aug.len());
    if z <= LOG_ZERO_EDGE {
        return Err(CoreError::InfeasibleLabel {
            frames: lattice.frames(),
            required: label.min_frames(),
        });
    }
    Ok(-z)
}

/// Gradient of [`ctc_loss`] with respect to the pre-softmax logits that
/// produced `lattice`: softmax minus alignment occupancy, frame by frame.
pub fn ctc_grad(lattice: &LogProbLattice, label: &LabelSeq) -> Result<Tensor> {
    check_instance(lattice, label)?;
    let aug = augmented(label);
    let alpha = forward_alphas(lattice, &aug);
    let beta = backward_betas(lattice, &aug);
    let z = total_log_prob(&alpha, aug.len());
    if z <= LOG_ZERO_EDGE {
        return Err(CoreError::InfeasibleLabel {
            frames: lattice.frames(),
            required: label.min_frames(),
        });
    }
    let (t_max, v_max) = (lattice.frames(), lattice.vocab());
    let mut grad = vec![0.0; t_max * v_max];
    for t in 0..t_max {
        let row = &mut grad[t * v_max..(t + 1) * v_max];
        for (v, g) in row.iter_mut().enumerate() {
            *g = math::exp(lattice.lp(t, v as u32));
        }
        for (s, &sym) in aug.iter().enumerate() {
            let a = alpha[t][s];
            let b = beta[t][s];
            if a <= LOG_ZERO_EDGE || b <= LOG_ZERO_EDGE {
                continue;
            }
            // alpha and beta both include the frame-t emission; divide one out.
            let occupancy = math::exp(a + b - lattice.lp(t, sym) - z);
            row[sym as usize] -= occupancy;
        }
    }
    Tensor::from_vec(&[t_max, v_max], grad)
}

/// Collapse a frame-level path: merge adjacent repeats, then drop blanks.
pub fn collapse_path(path: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &sym in path {
        if Some(sym) != prev {
            if sym != BLANK {
                out.push(sym);
            }
            prev = Some(sym);
        }
    }
    out
}

/// Per-frame argmax (ties broken toward the lowest index), collapsed.
pub fn greedy_decode(lattice: &LogProbLattice) -> LabelSeq {
    let mut path = Vec::with_capacity(lattice.frames());
    for t in 0..lattice.frames() {
        let mut best = 0u32;
        let mut best_lp = lattice.lp(t, 0);
        for v in 1..lattice.vocab() as u32 {
            let lp = lattice.lp(t, v);
            if lp > best_lp {
                best_lp = lp;
                best = v;
            }
        }
        path.push(best);
    }
    LabelSeq { tokens: collapse_path(&path) }
}

/// Enumeration guard for the brute-force oracle.
pub const BRUTE_FORCE_PATH_LIMIT: u64 = 1_000_000;

/// Exhaustive oracle: enumerate every frame-label path, keep those that
/// collapse to `label`, and sum their probabilities in linear space.
pub fn ctc_brute_force(lattice: &LogProbLattice, label: &LabelSeq) -> Result<f64> {
    let (t_max, v_max) = (lattice.frames(), lattice.vocab());
    let paths = (v_max as u64).checked_pow(t_max as u32).unwrap_or(u64::MAX);
    if paths > BRUTE_FORCE_PATH_LIMIT {
        return Err(CoreError::EnumerationGuard { paths, limit: BRUTE_FORCE_PATH_LIMIT });
    }
    let mut total = 0.0f64;
    let mut path = vec![0u32; t_max];
    for mut code in 0..paths {
        for slot in path.iter_mut() {
            *slot = (code % v_max as u64) as u32;
            code /= v_max as u64;
        }
        if collapse_path(&path) == label.tokens() {
            let logp: f64 = path.iter().enumerate().map(|(t, &v)| lattice.lp(t, v)).sum();
            total += math::exp(logp);
        }
    }
    if total <= 0.0 {
        return Err(CoreError::InfeasibleLabel {
            frames: t_max,
            required: label.min_frames(),
        });
    }
    Ok(-math::ln(total))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice_from_probs(rows: &[&[f64]]) -> LogProbLattice {
        let logged: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|&p| if p > 0.0 { math::ln(p) } else { LOG_ZERO }).collect())
            .collect();
        let refs: Vec<&[f64]> = logged.iter().map(|r| r.as_slice()).collect();
        LogProbLattice::new(Tensor::from_rows(&refs).unwrap()).unwrap()
    }

    fn label(tokens: &[u32]) -> LabelSeq {
        LabelSeq::new(tokens.to_vec()).unwrap()
    }

    #[test]
    fn single_frame_single_alignment() {
        let lat = lattice_from_probs(&[&[0.3, 0.7]]);
        let loss = ctc_loss(&lat, &label(&[1])).unwrap();
        assert!(math::abs(loss + math::ln(0.7)) < 1e-12);
    }

    #[test]
    fn two_frames_uniform_three_paths() {
        let lat = lattice_from_probs(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let loss = ctc_loss(&lat, &label(&[1])).unwrap();
        assert!(math::abs(loss + math::ln(0.75)) < 1e-12);
    }

    #[test]
    fn empty_label_is_all_blank_product() {
        let lat = lattice_from_probs(&[&[0.6, 0.4], &[0.8, 0.2]]);
        let loss = ctc_loss(&lat, &LabelSeq::empty()).unwrap();
        assert!(math::abs(loss + math::ln(0.6 * 0.8)) < 1e-12);
        let brute = ctc_brute_force(&lat, &LabelSeq::empty()).unwrap();
        assert!(math::abs(loss - brute) < 1e-12);
    }

    #[test]
    fn infeasible_label_errors_in_both_routes() {
        let lat = lattice_from_probs(&[&[0.5, 0.5]]);
        let lab = label(&[1, 1]);
        assert!(matches!(ctc_loss(&lat, &lab), Err(CoreError::InfeasibleLabel { .. })));
        assert!(matches!(ctc_brute_force(&lat, &lab), Err(CoreError::InfeasibleLabel { .. })));
    }

    #[test]
    fn brute_force_guard_refuses_large_instances() {
        let logits = Tensor::zeros(&[12, 6]);
        let lat = LogProbLattice::from_logits(&logits);
        assert!(matches!(
            ctc_brute_force(&lat, &label(&[1])),
            Err(CoreError::EnumerationGuard { .. })
        ));
    }

    #[test]
    fn single_frame_grad_is_softmax_minus_onehot() {
        let lat = lattice_from_probs(&[&[0.25, 0.35, 0.4]]);
        let g = ctc_grad(&lat, &label(&[1])).unwrap();
        let want = [0.25, 0.35 - 1.0, 0.4];
        for (a, b) in g.data().iter().zip(&want) {
            assert!(math::abs(a - b) < 1e-12);
        }
    }

    #[test]
    fn grad_rows_sum_to_zero() {
        let lat = lattice_from_probs(&[&[0.2, 0.5, 0.3], &[0.6, 0.1, 0.3], &[0.3, 0.3, 0.4]]);
        let g = ctc_grad(&lat, &label(&[1, 2])).unwrap();
        for t in 0..3 {
            let s: f64 = g.row(t).iter().sum();
            assert!(math::abs(s) < 1e-10, "row {t} sums to {s}");
        }
    }

    #[test]
    fn loss_is_sequence_sensitive_for_two_frames() {
        let lat = lattice_from_probs(&[&[0.1, 0.8, 0.1], &[0.1, 0.1, 0.8]]);
        let swapped = lattice_from_probs(&[&[0.1, 0.1, 0.8], &[0.1, 0.8, 0.1]]);
        let lab = label(&[1, 2]);
        let a = ctc_loss(&lat, &lab).unwrap();
        let b = ctc_loss(&swapped, &lab).unwrap();
        assert!(math::abs(a - b) > 1e-6);
    }

    #[test]
    fn greedy_decode_collapses_and_strips_blanks() {
        // argmax path [a, a, B, a] -> [a, a]
        let lat = lattice_from_probs(&[
            &[0.1, 0.9],
            &[0.2, 0.8],
            &[0.9, 0.1],
            &[0.3, 0.7],
        ]);
        assert_eq!(greedy_decode(&lat).tokens(), &[1, 1]);

        // argmax path [B, B, B] -> []
        let lat = lattice_from_probs(&[&[0.9, 0.1], &[0.9, 0.1], &[0.9, 0.1]]);
        assert!(greedy_decode(&lat).is_empty());

        // argmax path [a, B, b, b] -> [a, b]
        let lat = lattice_from_probs(&[
            &[0.1, 0.8, 0.1],
            &[0.8, 0.1, 0.1],
            &[0.1, 0.2, 0.7],
            &[0.1, 0.2, 0.7],
        ]);
        assert_eq!(greedy_decode(&lat).tokens(), &[1, 2]);
    }

    #[test]
    fn greedy_ties_break_to_lowest_index() {
        let lat = lattice_from_probs(&[&[0.4, 0.4, 0.2]]);
        assert!(greedy_decode(&lat).is_empty(), "blank (index 0) wins the tie");
    }

    #[test]
    fn labels_reject_blank_tokens() {
        assert!(LabelSeq::new(vec![1, 0, 2]).is_err());
    }
}
