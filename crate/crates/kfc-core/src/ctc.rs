//! CTC loss (forward-backward in log space), greedy decoding, and error
//! rate metrics. Blank id is 0 everywhere.

use crate::tensor::Tensor;

pub const BLANK_ID: usize = 0;

/// Log-softmax-normalized per-frame posteriors, T×V.
#[derive(Clone)]
pub struct CtcPosterior {
    pub log_probs: Tensor,
    pub blank_id: usize,
    pub t: usize,
    pub v: usize,
}

impl CtcPosterior {
    /// Wraps a T×V log-prob tensor. Each row must log-sum-exp to ~0.
    pub fn new(log_probs: Tensor) -> CtcPosterior {
        let shape = log_probs.shape();
        assert_eq!(shape.len(), 2, "posterior must be T×V, got {shape:?}");
        let (t, v) = (shape[0], shape[1]);
        {
            let data = log_probs.data();
            for r in 0..t {
                let row = &data[r * v..(r + 1) * v];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
                assert!(
                    lse.abs() <= 1e-6,
                    "posterior row {r} not normalized: log-sum-exp = {lse}"
                );
            }
        }
        CtcPosterior {
            log_probs,
            blank_id: BLANK_ID,
            t,
            v,
        }
    }
}

/// Non-blank token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSeq {
    pub ids: Vec<usize>,
}

impl LabelSeq {
    pub fn new(ids: Vec<usize>, vocab: usize) -> LabelSeq {
        for &id in &ids {
            assert!(
                id != BLANK_ID && id < vocab,
                "label id {id} out of range (blank {BLANK_ID}, vocab {vocab})"
            );
        }
        LabelSeq { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Result of a CTC loss evaluation. `feasible == false` carries a flagged
/// +infinity loss with no gradient; the trainer decides the fallback.
pub struct CtcLoss {
    pub loss: Tensor,
    pub feasible: bool,
}

fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        b
    } else if b == f64::NEG_INFINITY {
        a
    } else {
        let m = a.max(b);
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

fn logsumexp3(a: f64, b: f64, c: f64) -> f64 {
    logsumexp2(logsumexp2(a, b), c)
}

/// Negative log likelihood of `labels` under the posterior, via the
/// forward-backward recursion over the 2U+1 extended label sequence.
/// Gradients flow to the log-prob tensor through the state occupancies.
pub fn ctc_loss(post: &CtcPosterior, labels: &LabelSeq) -> CtcLoss {
    let (t, v) = (post.t, post.v);
    let u = labels.len();
    let s = 2 * u + 1;
    let blank = post.blank_id;

    // Extended sequence: blank, l1, blank, l2, ..., blank.
    let ext: Vec<usize> = (0..s)
        .map(|i| if i % 2 == 0 { blank } else { labels.ids[(i - 1) / 2] })
        .collect();
    for &id in &ext {
        assert!(id < v, "label id {id} out of vocab {v}");
    }

    let lp = post.log_probs.to_vec();
    let at = |t_: usize, k: usize| lp[t_ * v + k];

    const NEG: f64 = f64::NEG_INFINITY;
    let mut alpha = vec![NEG; t * s];
    alpha[0] = at(0, ext[0]);
    if s > 1 {
        alpha[1] = at(0, ext[1]);
    }
    for ti in 1..t {
        for si in 0..s {
            let stay = alpha[(ti - 1) * s + si];
            let prev = if si >= 1 { alpha[(ti - 1) * s + si - 1] } else { NEG };
            let skip = if si >= 2 && ext[si] != blank && ext[si] != ext[si - 2] {
                alpha[(ti - 1) * s + si - 2]
            } else {
                NEG
            };
            let acc = logsumexp3(stay, prev, skip);
            alpha[ti * s + si] = if acc == NEG { NEG } else { acc + at(ti, ext[si]) };
        }
    }
    let log_p = if s > 1 {
        logsumexp2(alpha[(t - 1) * s + s - 1], alpha[(t - 1) * s + s - 2])
    } else {
        alpha[(t - 1) * s + s - 1]
    };

    if log_p == NEG {
        return CtcLoss {
            loss: Tensor::infinity(),
            feasible: false,
        };
    }

    // Beta excludes the emission at time t, so alpha+beta is the full path
    // mass through state (t, s).
    let mut beta = vec![NEG; t * s];
    beta[(t - 1) * s + s - 1] = 0.0;
    if s > 1 {
        beta[(t - 1) * s + s - 2] = 0.0;
    }
    for ti in (0..t - 1).rev() {
        for si in 0..s {
            let stay = beta[(ti + 1) * s + si] + at(ti + 1, ext[si]);
            let next = if si + 1 < s {
                beta[(ti + 1) * s + si + 1] + at(ti + 1, ext[si + 1])
            } else {
                NEG
            };
            let skip = if si + 2 < s && ext[si + 2] != blank && ext[si + 2] != ext[si] {
                beta[(ti + 1) * s + si + 2] + at(ti + 1, ext[si + 2])
            } else {
                NEG
            };
            beta[ti * s + si] = logsumexp3(stay, next, skip);
        }
    }

    let parent = post.log_probs.clone();
    let p2 = parent.clone();
    let loss = Tensor::from_op(
        "ctc_loss",
        vec![1],
        vec![-log_p],
        vec![parent],
        Box::new(move |g| {
            // d(-logP)/d(log p[t,k]) = -Σ_{s: ext[s]=k} γ[t,s]
            let mut grad = vec![0.0; t * v];
            for ti in 0..t {
                for si in 0..s {
                    let la = alpha[ti * s + si];
                    let lb = beta[ti * s + si];
                    if la == NEG || lb == NEG {
                        continue;
                    }
                    grad[ti * v + ext[si]] -= (la + lb - log_p).exp();
                }
            }
            for gv in grad.iter_mut() {
                *gv *= g[0];
            }
            p2.accumulate_grad(&grad);
        }),
    );
    CtcLoss {
        loss,
        feasible: true,
    }
}

/// Per-frame argmax ids, ties broken toward the smallest index.
pub fn argmax_frame_labels(post: &CtcPosterior) -> Vec<usize> {
    let data = post.log_probs.data();
    let v = post.v;
    (0..post.t)
        .map(|r| {
            let row = &data[r * v..(r + 1) * v];
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Best-path decode: per-frame argmax, collapse consecutive duplicates,
/// remove blanks.
pub fn ctc_greedy_decode(post: &CtcPosterior) -> LabelSeq {
    let frames = argmax_frame_labels(post);
    let mut ids = Vec::new();
    let mut prev = post.blank_id;
    for id in frames {
        if id != post.blank_id && id != prev {
            ids.push(id);
        }
        prev = id;
    }
    LabelSeq { ids }
}

/// Levenshtein alignment counts plus the normalized error rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub rate: f64,
}

impl EditStats {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Unit-cost edit distance between hypothesis and reference.
/// rate = (S + I + D) / max(1, |ref|).
pub fn edit_distance(hyp: &LabelSeq, reference: &LabelSeq) -> EditStats {
    let h = &hyp.ids;
    let r = &reference.ids;
    let (n, m) = (h.len(), r.len());
    // dp[i][j] = (cost, subs, ins, dels) for hyp[..i] vs ref[..j]
    let mut dp = vec![(0usize, 0usize, 0usize, 0usize); (n + 1) * (m + 1)];
    for j in 1..=m {
        dp[j] = (j, 0, 0, j); // all deletions
    }
    for i in 1..=n {
        dp[i * (m + 1)] = (i, 0, i, 0); // all insertions
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = dp[(i - 1) * (m + 1) + j - 1];
            let up = dp[(i - 1) * (m + 1) + j];
            let left = dp[i * (m + 1) + j - 1];
            let best = if h[i - 1] == r[j - 1] {
                diag
            } else {
                let sub = (diag.0 + 1, diag.1 + 1, diag.2, diag.3);
                let ins = (up.0 + 1, up.1, up.2 + 1, up.3);
                let del = (left.0 + 1, left.1, left.2, left.3 + 1);
                // Deterministic tie-break: substitution, then insertion,
                // then deletion.
                let mut b = sub;
                if ins.0 < b.0 {
                    b = ins;
                }
                if del.0 < b.0 {
                    b = del;
                }
                b
            };
            dp[i * (m + 1) + j] = best;
        }
    }
    let (_, subs, ins, dels) = dp[n * (m + 1) + m];
    EditStats {
        substitutions: subs,
        insertions: ins,
        deletions: dels,
        rate: (subs + ins + dels) as f64 / m.max(1) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_posterior(t: usize, v: usize) -> CtcPosterior {
        let lp = (1.0 / v as f64).ln();
        CtcPosterior::new(Tensor::from_vec(&[t, v], vec![lp; t * v]))
    }

    fn posterior_from_probs(t: usize, v: usize, probs: &[f64]) -> CtcPosterior {
        let lp: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        CtcPosterior::new(Tensor::from_vec(&[t, v], lp))
    }

    #[test]
    fn single_frame_single_label() {
        let post = posterior_from_probs(1, 2, &[0.5, 0.5]);
        let res = ctc_loss(&post, &LabelSeq::new(vec![1], 2));
        assert!(res.feasible);
        assert!((res.loss.item() - 0.5f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn two_frame_three_paths() {
        // T=2, V=2, all probs 0.5, label "a": paths (a,a),(a,-),(-,a), P=0.75.
        let post = uniform_posterior(2, 2);
        let res = ctc_loss(&post, &LabelSeq::new(vec![1], 2));
        assert!(res.feasible);
        assert!((res.loss.item() - (-0.75f64.ln())).abs() < 1e-12);
        assert!((res.loss.item() - 0.2876820724).abs() < 1e-9);
    }

    #[test]
    fn infeasible_is_flagged_infinity() {
        let post = uniform_posterior(1, 3);
        let res = ctc_loss(&post, &LabelSeq::new(vec![1, 2], 3));
        assert!(!res.feasible);
        assert!(res.loss.item().is_infinite());
    }

    #[test]
    fn repeated_label_needs_separator_frame() {
        // "aa" needs at least 3 frames: a, blank, a.
        let post = uniform_posterior(2, 2);
        let res = ctc_loss(&post, &LabelSeq::new(vec![1, 1], 2));
        assert!(!res.feasible);
        let post = uniform_posterior(3, 2);
        let res = ctc_loss(&post, &LabelSeq::new(vec![1, 1], 2));
        assert!(res.feasible);
        // Only one path: (a, -, a) with prob 0.5^3.
        assert!((res.loss.item() - (-0.125f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use crate::gradcheck::check_gradients;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let t = rng.gen_range(2..=6);
            let v = rng.gen_range(2..=4);
            let u = rng.gen_range(1..=((t - 1) / 2).max(1).min(3));
            let raw: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let leaf = Tensor::from_vec(&[t, v], raw).requires_grad();
            let labels = LabelSeq::new((0..u).map(|_| rng.gen_range(1..v)).collect(), v);
            let leaf2 = leaf.clone();
            let labels2 = labels.clone();
            // log_softmax keeps the leaf unconstrained for FD perturbation.
            check_gradients(
                &[leaf.clone()],
                move || {
                    let post = CtcPosterior::new(leaf2.log_softmax());
                    let res = ctc_loss(&post, &labels2);
                    assert!(res.feasible);
                    res.loss
                },
                1e-6,
                1e-4,
            );
        }
    }

    #[test]
    fn greedy_decode_collapses() {
        // frames [-, a, a, -, c] -> "ac"
        let mk = |frames: &[usize], v: usize| {
            let mut data = vec![0.0f64; frames.len() * v];
            for (t, &id) in frames.iter().enumerate() {
                for j in 0..v {
                    data[t * v + j] = if j == id { 0.9 } else { 0.1 / (v - 1) as f64 };
                }
                let row: Vec<f64> = data[t * v..(t + 1) * v].iter().map(|p| p.ln()).collect();
                data[t * v..(t + 1) * v].copy_from_slice(&row);
            }
            CtcPosterior::new(Tensor::from_vec(&[frames.len(), v], data).log_softmax())
        };
        assert_eq!(ctc_greedy_decode(&mk(&[0, 1, 1, 0, 3], 4)).ids, vec![1, 3]);
        assert_eq!(ctc_greedy_decode(&mk(&[0, 0, 0], 4)).ids, Vec::<usize>::new());
        // [a, a, -, a] -> "aa": blank separates the duplicate.
        assert_eq!(ctc_greedy_decode(&mk(&[1, 1, 0, 1], 4)).ids, vec![1, 1]);
    }

    #[test]
    fn argmax_tie_breaks_to_smallest_index() {
        let probs = vec![0.9, 0.05, 0.05, 0.2, 0.4, 0.4];
        let post = posterior_from_probs(2, 3, &probs);
        let ids = argmax_frame_labels(&post);
        assert_eq!(ids, vec![0, 1]);
        assert_eq!(ids.len(), post.t);
    }

    #[test]
    fn edit_distance_examples() {
        let l = |ids: &[usize]| LabelSeq::new(ids.to_vec(), 10);
        let e = edit_distance(&l(&[1, 2, 3]), &l(&[1, 2, 3]));
        assert_eq!((e.errors(), e.rate), (0, 0.0));
        let e = edit_distance(&l(&[1, 2, 4]), &l(&[1, 2, 3]));
        assert_eq!((e.substitutions, e.insertions, e.deletions), (1, 0, 0));
        let e = edit_distance(&l(&[]), &l(&[1, 2]));
        assert_eq!((e.deletions, e.rate), (2, 1.0));
        // Empty reference: rate denominator floors at 1.
        let e = edit_distance(&l(&[7]), &l(&[]));
        assert_eq!((e.insertions, e.rate), (1, 1.0));
    }

    #[test]
    fn edit_distance_symmetric_and_triangle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let n = rng.gen_range(0..6);
                LabelSeq::new((0..n).map(|_| rng.gen_range(1..4)).collect(), 4)
            };
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let ab = edit_distance(&a, &b).errors();
            let ba = edit_distance(&b, &a).errors();
            assert_eq!(ab, ba);
            let ac = edit_distance(&a, &c).errors();
            let cb = edit_distance(&c, &b).errors();
            assert!(ab <= ac + cb);
        }
    }

    #[test]
    fn greedy_output_has_no_blank_and_no_uncut_repeats() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let t = rng.gen_range(1..12);
            let v = rng.gen_range(2..5);
            let raw: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let post = CtcPosterior::new(Tensor::from_vec(&[t, v], raw).log_softmax());
            let frames = argmax_frame_labels(&post);
            let dec = ctc_greedy_decode(&post);
            assert!(dec.ids.iter().all(|&id| id != BLANK_ID));
            // Adjacent equal ids in the decode must come from runs separated
            // by a blank in the frame labels.
            let mut runs: Vec<usize> = Vec::new();
            let mut prev = BLANK_ID;
            for &f in &frames {
                if f != BLANK_ID && f != prev {
                    runs.push(f);
                }
                prev = f;
            }
            assert_eq!(dec.ids, runs);
        }
    }
}
