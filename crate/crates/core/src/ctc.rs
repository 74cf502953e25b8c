//! Connectionist temporal classification: loss, oracle, decoding and WER.
//!
//! All dynamic programming runs in log space. Impossible states hold the
//! sentinel [`LOG_ZERO`] rather than `-inf`, so sums of a few sentinels stay
//! finite and comparisons stay total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::BLANK;

/// Log-space stand-in for `log(0)`.
pub const LOG_ZERO: f64 = -1e300;

/// `log(exp(a) + exp(b))` that treats anything at or below [`LOG_ZERO`] as zero.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a <= LOG_ZERO {
        return b;
    }
    if b <= LOG_ZERO {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Minimum number of time steps needed to emit `target`: one per label plus
/// one separating blank between equal neighbours.
pub fn required_steps(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_feasible(target: &[usize], steps: usize) -> bool {
    required_steps(target) <= steps
}

fn validate(t: usize, classes: usize, target: &[usize]) -> Result<()> {
    if t == 0 || classes < 2 {
        return Err(Error::invalid(
            "ctc",
            format!("need T >= 1 and at least 2 classes, got T={t}, classes={classes}"),
        ));
    }
    if let Some(&bad) = target.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(Error::invalid(
            "ctc",
            format!("target label {bad} outside 1..{classes}"),
        ));
    }
    let required = required_steps(target);
    if required > t {
        return Err(Error::InfeasibleTarget {
            target_len: target.len(),
            required,
            steps: t,
        });
    }
    Ok(())
}

/// Negative log-likelihood of `target` under per-step log-probabilities
/// `log_probs` (`t x classes`, row-major), and its gradient with respect to
/// every entry of `log_probs`.
///
/// The gradient treats each entry as an independent input, so it is exact
/// for unnormalized scores too.
pub fn ctc_forward_backward(
    log_probs: &[f64],
    t: usize,
    classes: usize,
    target: &[usize],
) -> Result<(f64, Vec<f64>)> {
    validate(t, classes, target)?;
    let lp = |step: usize, k: usize| log_probs[step * classes + k];
    // extended sequence: blank, l1, blank, l2, ..., blank
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(target.iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![LOG_ZERO; t * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for step in 1..t {
        let (prev, cur) = alpha.split_at_mut(step * s_len);
        let prev = &prev[(step - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc <= LOG_ZERO {
                LOG_ZERO
            } else {
                acc + lp(step, ext[s])
            };
        }
    }

    let mut beta = vec![LOG_ZERO; t * s_len];
    let last = (t - 1) * s_len;
    beta[last + s_len - 1] = lp(t - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t - 1, ext[s_len - 2]);
    }
    for step in (0..t - 1).rev() {
        let (cur, next) = beta.split_at_mut((step + 1) * s_len);
        let cur = &mut cur[step * s_len..];
        for s in 0..s_len {
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && ext[s] != BLANK && ext[s] != ext[s + 2] {
                acc = log_add(acc, next[s + 2]);
            }
            cur[s] = if acc <= LOG_ZERO {
                LOG_ZERO
            } else {
                acc + lp(step, ext[s])
            };
        }
    }

    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last + s_len - 2]);
    }
    if log_p <= LOG_ZERO {
        return Err(Error::NonFinite { op: "ctc_loss" });
    }

    let mut grad = vec![0.0; t * classes];
    let mut occupancy = vec![LOG_ZERO; classes];
    for step in 0..t {
        occupancy.iter_mut().for_each(|v| *v = LOG_ZERO);
        for s in 0..s_len {
            let a = alpha[step * s_len + s];
            let b = beta[step * s_len + s];
            if a <= LOG_ZERO || b <= LOG_ZERO {
                continue;
            }
            let k = ext[s];
            occupancy[k] = log_add(occupancy[k], a + b);
        }
        for k in 0..classes {
            if occupancy[k] > LOG_ZERO {
                grad[step * classes + k] = -(occupancy[k] - lp(step, k) - log_p).exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC negative log-likelihood of `target` under `log_probs` (`[T, V+1]`).
pub fn ctc_loss(log_probs: &Tensor, target: &[usize]) -> Result<f64> {
    let (t, c) = log_probs
        .dims2()
        .ok_or_else(|| Error::invalid("ctc", "log_probs must be [T, V+1]"))?;
    ctc_forward_backward(log_probs.data(), t, c, target).map(|(l, _)| l)
}

/// Result of exhaustive path enumeration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BruteForceCtc {
    pub probability: f64,
    /// `-ln(probability)`; `+inf` when no path collapses to the target.
    pub loss: f64,
}

/// Largest path space the brute-force oracle will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 1_000_000;

/// Merges consecutive repeats, then drops blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Sums the probability of every length-`T` label path that collapses to
/// `target`. `probs` is `[T, V+1]` in probability space.
pub fn ctc_loss_bruteforce(probs: &Tensor, target: &[usize]) -> Result<BruteForceCtc> {
    let (t, c) = probs
        .dims2()
        .ok_or_else(|| Error::invalid("ctc_bruteforce", "probs must be [T, V+1]"))?;
    let paths = (c as f64).powi(t as i32);
    if paths > BRUTE_FORCE_LIMIT as f64 {
        return Err(Error::invalid(
            "ctc_bruteforce",
            format!("{c}^{t} paths exceeds the enumeration limit {BRUTE_FORCE_LIMIT}"),
        ));
    }
    let mut path = vec![0usize; t];
    let mut total = 0.0;
    loop {
        if collapse(&path) == target {
            total += path
                .iter()
                .enumerate()
                .map(|(s, &k)| probs.at2(s, k))
                .product::<f64>();
        }
        // odometer increment
        let mut pos = t;
        loop {
            if pos == 0 {
                let loss = if total > 0.0 {
                    -total.ln()
                } else {
                    f64::INFINITY
                };
                return Ok(BruteForceCtc {
                    probability: total,
                    loss,
                });
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < c {
                break;
            }
            path[pos] = 0;
        }
    }
}

/// Per-step argmax (ties to the lowest id), then [`collapse`].
pub fn greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let c = *log_probs.shape().last().unwrap_or(&1);
    let best: Vec<usize> = log_probs
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect();
    collapse(&best)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub wer: f64,
    pub del: usize,
    pub ins: usize,
    pub sub: usize,
    pub ref_len: usize,
}

impl WerReport {
    pub fn errors(&self) -> usize {
        self.del + self.ins + self.sub
    }

    /// Pools counts over several utterances.
    pub fn merge(reports: &[WerReport]) -> WerReport {
        let mut out = WerReport::default();
        for r in reports {
            out.del += r.del;
            out.ins += r.ins;
            out.sub += r.sub;
            out.ref_len += r.ref_len;
        }
        out.wer = if out.ref_len == 0 {
            0.0
        } else {
            out.errors() as f64 / out.ref_len as f64
        };
        out
    }
}

/// Word error rate of `hyp` against `reference` with unit edit costs.
///
/// Among minimal edit scripts the one with the fewest insertions plus
/// deletions is chosen, which fixes the del/ins/sub split uniquely; the
/// backtrace then prefers a diagonal move (match or substitution), then a
/// deletion, then an insertion.
pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<WerReport> {
    if reference.is_empty() {
        return Err(Error::invalid("wer", "reference must be nonempty"));
    }
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    // (edit cost, indel count), compared lexicographically
    let mut d = vec![(0usize, 0usize); (n + 1) * w];
    for i in 0..=n {
        d[i * w] = (i, i);
    }
    for j in 0..=m {
        d[j] = (j, j);
    }
    let step = |(c, k): (usize, usize), dc: usize, dk: usize| (c + dc, k + dk);
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = step(d[(i - 1) * w + j - 1], cost, 0)
                .min(step(d[(i - 1) * w + j], 1, 1))
                .min(step(d[i * w + j - 1], 1, 1));
        }
    }
    let (mut i, mut j) = (n, m);
    let (mut del, mut ins, mut sub) = (0, 0, 0);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hyp[j - 1]);
            if here == step(d[(i - 1) * w + j - 1], cost, 0) {
                sub += cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == step(d[(i - 1) * w + j], 1, 1) {
            del += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    Ok(WerReport {
        wer: (del + ins + sub) as f64 / n as f64,
        del,
        ins,
        sub,
        ref_len: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(t: usize, c: usize) -> Tensor {
        Tensor::full(&[t, c], -(c as f64).ln())
    }

    #[test]
    fn single_step_single_label() {
        let loss = ctc_loss(&uniform(1, 4), &[1]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_steps_three_paths() {
        // paths (-,a), (a,-), (a,a): 3/9
        let loss = ctc_loss(&uniform(2, 3), &[1]).unwrap();
        assert!((loss + (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let loss = ctc_loss(&uniform(2, 3), &[]).unwrap();
        assert!((loss + (1.0f64 / 9.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_reports_lengths() {
        let err = ctc_loss(&uniform(2, 3), &[1, 1]).unwrap_err();
        match err {
            Error::InfeasibleTarget {
                target_len,
                required,
                steps,
            } => {
                assert_eq!((target_len, required, steps), (2, 3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(ctc_loss(&uniform(2, 3), &[1, 2, 1]).is_err());
    }

    #[test]
    fn blank_in_target_rejected() {
        assert!(ctc_loss(&uniform(3, 3), &[0]).is_err());
    }

    #[test]
    fn bruteforce_agrees_on_single_path() {
        let probs = Tensor::full(&[1, 4], 0.25);
        let bf = ctc_loss_bruteforce(&probs, &[1]).unwrap();
        let dp = ctc_loss(&uniform(1, 4), &[1]).unwrap();
        assert!((bf.loss - dp).abs() < 1e-9);
    }

    #[test]
    fn bruteforce_flags_impossible_target() {
        let probs = Tensor::full(&[2, 3], 1.0 / 3.0);
        let bf = ctc_loss_bruteforce(&probs, &[1, 2, 1]).unwrap();
        assert_eq!(bf.probability, 0.0);
        assert!(bf.loss.is_infinite());
    }

    #[test]
    fn bruteforce_rejects_large_instances() {
        let probs = Tensor::full(&[11, 4], 0.25);
        assert!(ctc_loss_bruteforce(&probs, &[1]).is_err());
    }

    fn path_log_probs(path: &[usize], c: usize) -> Tensor {
        let mut data = vec![-5.0; path.len() * c];
        for (t, &k) in path.iter().enumerate() {
            data[t * c + k] = 0.0;
        }
        Tensor::new(&[path.len(), c], data).unwrap()
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(
            greedy_decode(&path_log_probs(&[0, 1, 1, 0, 2], 3)),
            vec![1, 2]
        );
        assert_eq!(
            greedy_decode(&path_log_probs(&[0, 0, 0], 3)),
            Vec::<usize>::new()
        );
        assert_eq!(greedy_decode(&path_log_probs(&[1, 0, 1], 3)), vec![1, 1]);
        // ties go to the lowest id, i.e. blank
        assert_eq!(greedy_decode(&Tensor::zeros(&[3, 3])), Vec::<usize>::new());
    }

    #[test]
    fn wer_examples() {
        let r = wer(&["a", "b"], &["a", "b"]).unwrap();
        assert_eq!((r.wer, r.del, r.ins, r.sub), (0.0, 0, 0, 0));
        let r = wer(&["a", "x", "c", "d", "e"], &["a", "b", "c", "d", "e"]).unwrap();
        assert!((r.wer - 0.2).abs() < 1e-15);
        assert_eq!((r.sub, r.del, r.ins), (1, 0, 0));
        let r = wer::<&str>(&[], &["a"]).unwrap();
        assert_eq!((r.wer, r.del), (1.0, 1));
        assert!(wer(&["a"], &[]).is_err());
    }

    #[test]
    fn completeness_over_all_targets() {
        // T=3, V=2: every label path collapses to some target of length <= 3
        let probs =
            Tensor::new(&[3, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3, 0.25, 0.25, 0.5]).unwrap();
        let log_probs =
            Tensor::new(&[3, 3], probs.data().iter().map(|p| p.ln()).collect()).unwrap();
        let mut total = 0.0;
        let mut targets: Vec<Vec<usize>> = vec![vec![]];
        for len in 1..=3 {
            let mut next = Vec::new();
            for t in targets.iter().filter(|t| t.len() == len - 1) {
                for l in 1..3 {
                    let mut u = t.clone();
                    u.push(l);
                    next.push(u);
                }
            }
            targets.extend(next);
        }
        for target in &targets {
            if is_feasible(target, 3) {
                total += (-ctc_loss(&log_probs, target).unwrap()).exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }

    proptest! {
        #[test]
        fn dp_matches_bruteforce(
            t in 1usize..=5,
            v in 1usize..=3,
            raw in proptest::collection::vec(0.05f64..1.0, 20),
            tgt in proptest::collection::vec(1usize..=3, 0..=3),
        ) {
            let c = v + 1;
            let target: Vec<usize> = tgt.into_iter().map(|l| (l - 1) % v + 1).collect();
            prop_assume!(is_feasible(&target, t));
            let mut probs = Vec::new();
            for s in 0..t {
                let row = &raw[s * 4..s * 4 + c];
                let z: f64 = row.iter().sum();
                probs.extend(row.iter().map(|x| x / z));
            }
            let p = Tensor::new(&[t, c], probs.clone()).unwrap();
            let lp = Tensor::new(&[t, c], probs.iter().map(|x| x.ln()).collect()).unwrap();
            let bf = ctc_loss_bruteforce(&p, &target).unwrap();
            let dp = ctc_loss(&lp, &target).unwrap();
            prop_assert!((bf.loss - dp).abs() < 1e-9);
        }

        #[test]
        fn wer_distance_symmetric(
            a in proptest::collection::vec(0u8..3, 1..6),
            b in proptest::collection::vec(0u8..3, 1..6),
        ) {
            let ab = wer(&a, &b).unwrap();
            let ba = wer(&b, &a).unwrap();
            prop_assert_eq!(ab.errors(), ba.errors());
            prop_assert_eq!(ab.del, ba.ins);
            prop_assert_eq!(ab.ins, ba.del);
            prop_assert_eq!(ab.sub, ba.sub);
        }
    }
}
