//! Output heads over per-position emission scores: an independent softmax
//! classifier and a linear-chain CRF with exact log-partition loss,
//! forward-backward gradients, and Viterbi decoding.
//!
//! All CRF arithmetic is carried out in log space. Ties are broken toward
//! label 0 (no boundary) everywhere. The CRF uses a learned start-score
//! vector and no end scores: the final position contributes emission only.
#![allow(clippy::needless_range_loop)]

use thiserror::Error;

use crate::tensor::Tensor;
use crate::Real;

/// Two labels: 0 = no boundary after this phone, 1 = boundary follows.
pub const NUM_LABELS: usize = 2;

#[derive(Debug, Error)]
pub enum CrfError {
    #[error("brute-force enumeration refused for true_len {true_len} > {max}")]
    EnumerationTooLong { true_len: usize, max: usize },
}

/// Linear-chain CRF parameters: `transition[a][b]` scores label `a`
/// followed by label `b`; `start[y]` scores `y` as the first label.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParameters {
    pub transition: Tensor,
    pub start: Tensor,
}

impl CrfParameters {
    pub fn zeros() -> Self {
        CrfParameters {
            transition: Tensor::zeros(&[NUM_LABELS, NUM_LABELS]),
            start: Tensor::zeros(&[NUM_LABELS]),
        }
    }
}

/// A decoded label sequence with its unnormalized score and log-probability
/// under the model that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPath {
    pub labels: Vec<u8>,
    pub score: Real,
    pub log_probability: Real,
}

#[inline]
fn log_sum_exp2(a: Real, b: Real) -> Real {
    if a == Real::NEG_INFINITY && b == Real::NEG_INFINITY {
        return Real::NEG_INFINITY;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Numerically stable softmax over one position's two emission scores.
pub fn softmax_position(emission: [Real; 2]) -> [Real; 2] {
    let m = emission[0].max(emission[1]);
    let e0 = (emission[0] - m).exp();
    let e1 = (emission[1] - m).exp();
    let z = e0 + e1;
    [e0 / z, e1 / z]
}

#[inline]
fn emission_pair(emissions: &Tensor, i: usize) -> [Real; 2] {
    [emissions.at2(0, i), emissions.at2(1, i)]
}

/// Independent per-position decoding: argmax of each position's softmax,
/// ties toward label 0. `log_probability` is the sum of the log of the
/// winning probability at each position.
pub fn softmax_decode(emissions: &Tensor, true_len: usize) -> LabelPath {
    assert!(true_len >= 1 && true_len <= emissions.cols());
    let mut labels = Vec::with_capacity(true_len);
    let mut log_probability = 0.0;
    let mut score = 0.0;
    for i in 0..true_len {
        let e = emission_pair(emissions, i);
        let probs = softmax_position(e);
        let label = u8::from(probs[1] > probs[0]);
        labels.push(label);
        log_probability += probs[label as usize].ln();
        score += e[label as usize];
    }
    LabelPath {
        labels,
        score,
        log_probability,
    }
}

/// Log of the partition function: the forward recursion in log space over
/// start scores, emissions `0..true_len`, and transitions between
/// consecutive positions.
pub fn crf_log_partition(emissions: &Tensor, crf: &CrfParameters, true_len: usize) -> Real {
    assert!(true_len >= 1 && true_len <= emissions.cols());
    let mut alpha = [
        crf.start.data()[0] + emissions.at2(0, 0),
        crf.start.data()[1] + emissions.at2(1, 0),
    ];
    for i in 1..true_len {
        let mut next = [0.0; NUM_LABELS];
        for (y, slot) in next.iter_mut().enumerate() {
            let from0 = alpha[0] + crf.transition.at2(0, y);
            let from1 = alpha[1] + crf.transition.at2(1, y);
            *slot = emissions.at2(y, i) + log_sum_exp2(from0, from1);
        }
        alpha = next;
    }
    log_sum_exp2(alpha[0], alpha[1])
}

/// Unnormalized score of a specific label path: start score, emissions,
/// and transitions.
pub fn path_score(emissions: &Tensor, crf: &CrfParameters, labels: &[u8], true_len: usize) -> Real {
    assert!(true_len >= 1 && labels.len() >= true_len);
    let mut score = crf.start.data()[labels[0] as usize];
    for i in 0..true_len {
        score += emissions.at2(labels[i] as usize, i);
        if i > 0 {
            score += crf.transition.at2(labels[i - 1] as usize, labels[i] as usize);
        }
    }
    score
}

/// Negative log likelihood of the gold path: `log Z - path_score`.
pub fn crf_nll(emissions: &Tensor, crf: &CrfParameters, labels: &[u8], true_len: usize) -> Real {
    crf_log_partition(emissions, crf, true_len) - path_score(emissions, crf, labels, true_len)
}

/// NLL plus its gradients, computed by forward-backward marginals:
/// d loss / d emission = marginal - gold indicator, and likewise for the
/// transition and start parameters.
///
/// Returns `(loss, d_emissions, d_transition, d_start)`. `d_emissions` has
/// the same shape as `emissions` with zeros at positions `>= true_len`.
pub fn crf_nll_with_grad(
    emissions: &Tensor,
    crf: &CrfParameters,
    labels: &[u8],
    true_len: usize,
) -> (Real, Tensor, Tensor, Tensor) {
    assert!(true_len >= 1 && true_len <= emissions.cols() && labels.len() >= true_len);
    let l = true_len;

    // alpha[i][y]: log-sum over prefixes ending in y at i (emission at i included)
    let mut alpha = vec![[0.0; NUM_LABELS]; l];
    alpha[0] = [
        crf.start.data()[0] + emissions.at2(0, 0),
        crf.start.data()[1] + emissions.at2(1, 0),
    ];
    for i in 1..l {
        for y in 0..NUM_LABELS {
            let from0 = alpha[i - 1][0] + crf.transition.at2(0, y);
            let from1 = alpha[i - 1][1] + crf.transition.at2(1, y);
            alpha[i][y] = emissions.at2(y, i) + log_sum_exp2(from0, from1);
        }
    }
    let log_z = log_sum_exp2(alpha[l - 1][0], alpha[l - 1][1]);

    // beta[i][y]: log-sum over suffixes after i given label y at i
    // (emission at i excluded)
    let mut beta = vec![[0.0; NUM_LABELS]; l];
    for i in (0..l.saturating_sub(1)).rev() {
        for y in 0..NUM_LABELS {
            let via0 = crf.transition.at2(y, 0) + emissions.at2(0, i + 1) + beta[i + 1][0];
            let via1 = crf.transition.at2(y, 1) + emissions.at2(1, i + 1) + beta[i + 1][1];
            beta[i][y] = log_sum_exp2(via0, via1);
        }
    }

    let mut d_emissions = Tensor::zeros(emissions.shape());
    for i in 0..l {
        for y in 0..NUM_LABELS {
            let marginal = (alpha[i][y] + beta[i][y] - log_z).exp();
            let gold = Real::from(u8::from(labels[i] as usize == y));
            *d_emissions.at2_mut(y, i) = marginal - gold;
        }
    }

    let mut d_transition = Tensor::zeros(&[NUM_LABELS, NUM_LABELS]);
    for i in 0..l.saturating_sub(1) {
        for a in 0..NUM_LABELS {
            for b in 0..NUM_LABELS {
                let pair = (alpha[i][a]
                    + crf.transition.at2(a, b)
                    + emissions.at2(b, i + 1)
                    + beta[i + 1][b]
                    - log_z)
                    .exp();
                let gold =
                    Real::from(u8::from(labels[i] as usize == a && labels[i + 1] as usize == b));
                *d_transition.at2_mut(a, b) += pair - gold;
            }
        }
    }

    let mut d_start = Tensor::zeros(&[NUM_LABELS]);
    for y in 0..NUM_LABELS {
        let marginal = (alpha[0][y] + beta[0][y] - log_z).exp();
        let gold = Real::from(u8::from(labels[0] as usize == y));
        d_start.data_mut()[y] = marginal - gold;
    }

    let loss = log_z - path_score(emissions, crf, labels, true_len);
    (loss, d_emissions, d_transition, d_start)
}

/// Exact argmax path by dynamic programming, ties toward label 0 at the
/// final position and at every backtrack step.
pub fn viterbi_decode(emissions: &Tensor, crf: &CrfParameters, true_len: usize) -> LabelPath {
    assert!(true_len >= 1 && true_len <= emissions.cols());
    let l = true_len;
    let mut delta = vec![[0.0; NUM_LABELS]; l];
    let mut backptr = vec![[0u8; NUM_LABELS]; l];
    delta[0] = [
        crf.start.data()[0] + emissions.at2(0, 0),
        crf.start.data()[1] + emissions.at2(1, 0),
    ];
    for i in 1..l {
        for y in 0..NUM_LABELS {
            let from0 = delta[i - 1][0] + crf.transition.at2(0, y);
            let from1 = delta[i - 1][1] + crf.transition.at2(1, y);
            // >= keeps label 0 on exact ties
            let (best, from) = if from0 >= from1 { (from0, 0) } else { (from1, 1) };
            delta[i][y] = emissions.at2(y, i) + best;
            backptr[i][y] = from;
        }
    }
    let mut labels = vec![0u8; l];
    labels[l - 1] = u8::from(delta[l - 1][1] > delta[l - 1][0]);
    for i in (1..l).rev() {
        labels[i - 1] = backptr[i][labels[i] as usize];
    }
    let score = delta[l - 1][labels[l - 1] as usize];
    let log_z = crf_log_partition(emissions, crf, true_len);
    LabelPath {
        labels,
        score,
        // the argmax path can round to a hair above log Z
        log_probability: (score - log_z).min(0.0),
    }
}

/// Exhaustively enumerated label paths with their scores; the test oracle
/// for the partition function and Viterbi decoding.
#[derive(Debug, Clone)]
pub struct EnumeratedPaths {
    pub paths: Vec<LabelPath>,
    pub log_partition: Real,
    /// Index into `paths` of the maximum-score path under the tie rule
    /// (label 0 preferred at the highest differing position).
    pub argmax: usize,
}

/// Scores all `2^true_len` label paths by direct summation, independent of
/// the forward recursion. Refused for `true_len > 12`.
pub fn brute_force_paths(
    emissions: &Tensor,
    crf: &CrfParameters,
    true_len: usize,
) -> Result<EnumeratedPaths, CrfError> {
    const MAX_LEN: usize = 12;
    if true_len > MAX_LEN {
        return Err(CrfError::EnumerationTooLong {
            true_len,
            max: MAX_LEN,
        });
    }
    assert!(true_len >= 1 && true_len <= emissions.cols());
    let count = 1usize << true_len;
    let mut paths = Vec::with_capacity(count);
    let mut log_partition = Real::NEG_INFINITY;
    let mut argmax = 0;
    let mut best = Real::NEG_INFINITY;
    // Enumerating bit patterns in ascending order with label[i] = bit i
    // visits paths so that the first maximum found is the one preferring
    // label 0 at the highest differing position -- the same path the
    // Viterbi tie rule selects.
    for m in 0..count {
        let labels: Vec<u8> = (0..true_len).map(|i| ((m >> i) & 1) as u8).collect();
        // score independently of path_score: direct summation
        let mut score = crf.start.data()[labels[0] as usize];
        for (i, &y) in labels.iter().enumerate() {
            score += emissions.at2(y as usize, i);
        }
        for w in labels.windows(2) {
            score += crf.transition.at2(w[0] as usize, w[1] as usize);
        }
        log_partition = log_sum_exp2(log_partition, score);
        if score > best {
            best = score;
            argmax = m;
        }
        paths.push(LabelPath {
            labels,
            score,
            log_probability: 0.0,
        });
    }
    for p in &mut paths {
        p.log_probability = p.score - log_partition;
    }
    Ok(EnumeratedPaths {
        paths,
        log_partition,
        argmax,
    })
}

/// Per-position cross entropy of the softmax head, summed over `true_len`,
/// with the gradient w.r.t. the emissions.
pub fn softmax_nll_with_grad(emissions: &Tensor, labels: &[u8], true_len: usize) -> (Real, Tensor) {
    assert!(true_len >= 1 && true_len <= emissions.cols() && labels.len() >= true_len);
    let mut loss = 0.0;
    let mut d_emissions = Tensor::zeros(emissions.shape());
    for i in 0..true_len {
        let probs = softmax_position(emission_pair(emissions, i));
        let gold = labels[i] as usize;
        loss -= probs[gold].ln();
        for y in 0..NUM_LABELS {
            *d_emissions.at2_mut(y, i) = probs[y] - Real::from(u8::from(y == gold));
        }
    }
    (loss, d_emissions)
}
