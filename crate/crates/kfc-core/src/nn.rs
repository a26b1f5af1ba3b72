//! Attention, convolution, and Conformer-block composition.
//!
//! `scaled_dot_attention` is a fused op with a hand-written backward: it
//! iterates each query row over its allowed key columns only, so masked-out
//! work is actually skipped and the multiply counter reflects what ran.

use std::cell::Cell;

use rand::Rng;

use crate::keyframe::AttentionMask;
use crate::tensor::{concat_cols, randn, Tensor};

thread_local! {
    static ATTN_MULTS: Cell<u64> = const { Cell::new(0) };
}

/// Multiplies performed by attention score/context products on this thread
/// since the last reset. Projections are not counted.
pub fn attention_mult_count() -> u64 {
    ATTN_MULTS.with(|c| c.get())
}

pub fn reset_attention_mult_count() {
    ATTN_MULTS.with(|c| c.set(0));
}

fn count_attention_mults(n: u64) {
    ATTN_MULTS.with(|c| c.set(c.get() + n));
}

/// softmax(QKᵀ/√d)·V with an optional boolean mask. Rows whose mask row is
/// all-zero produce zero output and contribute no multiplies.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AttentionMask>,
) -> Tensor {
    let sq = q.shape();
    assert_eq!(sq.len(), 2, "attention expects 2-D Q, got {sq:?}");
    assert_eq!(k.shape(), sq, "attention K shape {:?} vs Q {sq:?}", k.shape());
    assert_eq!(v.shape(), sq, "attention V shape {:?} vs Q {sq:?}", v.shape());
    let (t, d) = (sq[0], sq[1]);
    if let Some(m) = mask {
        assert_eq!(m.t, t, "mask length {} vs sequence length {t}", m.t);
    }
    let scale = 1.0 / (d as f64).sqrt();

    let qd = q.to_vec();
    let kd = k.to_vec();
    let vd = v.to_vec();

    // Per-row allowed column lists; identical ascending order for the dense
    // and all-ones-mask paths keeps their arithmetic bit-identical.
    let allowed: Vec<Vec<usize>> = (0..t)
        .map(|t1| match mask {
            Some(m) => (0..t).filter(|&t2| m.allowed(t1, t2)).collect(),
            None => (0..t).collect(),
        })
        .collect();

    let mut out = vec![0.0; t * d];
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(t);
    let mut mults: u64 = 0;
    for t1 in 0..t {
        let cols = &allowed[t1];
        if cols.is_empty() {
            weights.push(Vec::new());
            continue;
        }
        mults += 2 * cols.len() as u64 * d as u64;
        let qrow = &qd[t1 * d..(t1 + 1) * d];
        let mut logits: Vec<f64> = Vec::with_capacity(cols.len());
        for &t2 in cols {
            let krow = &kd[t2 * d..(t2 + 1) * d];
            let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
            logits.push(dot * scale);
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - mx).exp();
            z += *l;
        }
        for l in logits.iter_mut() {
            *l /= z;
        }
        let orow = &mut out[t1 * d..(t1 + 1) * d];
        for (&t2, &a) in cols.iter().zip(&logits) {
            let vrow = &vd[t2 * d..(t2 + 1) * d];
            for (o, &vv) in orow.iter_mut().zip(vrow) {
                *o += a * vv;
            }
        }
        weights.push(logits);
    }
    count_attention_mults(mults);

    let (pq, pk, pv) = (q.clone(), k.clone(), v.clone());
    Tensor::from_op(
        "scaled_dot_attention",
        vec![t, d],
        out,
        vec![q.clone(), k.clone(), v.clone()],
        Box::new(move |g| {
            let qd = pq.data().to_vec();
            let kd = pk.data().to_vec();
            let vd = pv.data().to_vec();
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            for t1 in 0..t {
                let cols = &allowed[t1];
                if cols.is_empty() {
                    continue;
                }
                let a = &weights[t1];
                let grow = &g[t1 * d..(t1 + 1) * d];
                let qrow = &qd[t1 * d..(t1 + 1) * d];
                // da_j = v_j · g ; ds = a ⊙ (da − Σ a·da)
                let mut da: Vec<f64> = Vec::with_capacity(cols.len());
                for &t2 in cols {
                    let vrow = &vd[t2 * d..(t2 + 1) * d];
                    da.push(vrow.iter().zip(grow).map(|(v, g)| v * g).sum());
                }
                let dot: f64 = a.iter().zip(&da).map(|(a, d)| a * d).sum();
                for (j, &t2) in cols.iter().enumerate() {
                    let ds = a[j] * (da[j] - dot);
                    let krow = &kd[t2 * d..(t2 + 1) * d];
                    for c in 0..d {
                        dq[t1 * d + c] += ds * krow[c] * scale;
                        dk[t2 * d + c] += ds * qrow[c] * scale;
                        dv[t2 * d + c] += a[j] * grow[c];
                    }
                }
            }
            pq.accumulate_grad(&dq);
            pk.accumulate_grad(&dk);
            pv.accumulate_grad(&dv);
        }),
    )
}

/// Projection matrices for multi-head self-attention.
#[derive(Clone)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub num_heads: usize,
}

impl AttentionParams {
    pub fn init(d_model: usize, num_heads: usize, rng: &mut impl Rng) -> AttentionParams {
        assert!(
            d_model % num_heads == 0,
            "d_model {d_model} not divisible by heads {num_heads}"
        );
        let std = 1.0 / (d_model as f64).sqrt();
        AttentionParams {
            w_q: randn(&[d_model, d_model], std, rng).requires_grad(),
            w_k: randn(&[d_model, d_model], std, rng).requires_grad(),
            w_v: randn(&[d_model, d_model], std, rng).requires_grad(),
            w_o: randn(&[d_model, d_model], std, rng).requires_grad(),
            num_heads,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.shape()[0] / self.num_heads
    }
}

/// Concat-of-heads attention followed by the output projection.
pub fn multi_head_attention(
    x: &Tensor,
    mask: Option<&AttentionMask>,
    params: &AttentionParams,
) -> Tensor {
    let d_model = params.w_q.shape()[0];
    assert_eq!(x.shape()[1], d_model, "input dim {} vs d_model {d_model}", x.shape()[1]);
    let q = x.matmul(&params.w_q);
    let k = x.matmul(&params.w_k);
    let v = x.matmul(&params.w_v);
    let dh = params.head_dim();
    let heads: Vec<Tensor> = (0..params.num_heads)
        .map(|h| {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            scaled_dot_attention(
                &q.slice_cols(lo, hi),
                &k.slice_cols(lo, hi),
                &v.slice_cols(lo, hi),
                mask,
            )
        })
        .collect();
    concat_cols(&heads).matmul(&params.w_o)
}

#[derive(Clone)]
pub struct FeedForwardParams {
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

impl FeedForwardParams {
    pub fn init(d_model: usize, ffn_dim: usize, rng: &mut impl Rng) -> FeedForwardParams {
        FeedForwardParams {
            ln_gamma: Tensor::from_vec(&[1, d_model], vec![1.0; d_model]).requires_grad(),
            ln_beta: Tensor::zeros(&[1, d_model]).requires_grad(),
            w1: randn(&[d_model, ffn_dim], 1.0 / (d_model as f64).sqrt(), rng).requires_grad(),
            w2: randn(&[ffn_dim, d_model], 1.0 / (ffn_dim as f64).sqrt(), rng).requires_grad(),
        }
    }
}

const LN_EPS: f64 = 1e-5;

/// Pre-norm feed-forward sublayer: x + s·W2(swish(W1·LN(x))) with s = 0.5
/// when `half_step` (macaron) and 1.0 otherwise.
pub fn feed_forward(x: &Tensor, params: &FeedForwardParams, half_step: bool) -> Tensor {
    let h = x.layer_norm(&params.ln_gamma, &params.ln_beta, LN_EPS);
    let h = h.matmul(&params.w1).swish().matmul(&params.w2);
    let s = if half_step { 0.5 } else { 1.0 };
    x.add(&h.scale(s))
}

#[derive(Clone)]
pub struct ConvModuleParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub pw_in: Tensor,
    pub dw_kernel: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub pw_out: Tensor,
}

impl ConvModuleParams {
    pub fn init(d_model: usize, kernel_size: usize, rng: &mut impl Rng) -> ConvModuleParams {
        assert_eq!(kernel_size % 2, 1, "conv kernel must be odd, got {kernel_size}");
        let std = 1.0 / (d_model as f64).sqrt();
        ConvModuleParams {
            ln1_gamma: Tensor::from_vec(&[1, d_model], vec![1.0; d_model]).requires_grad(),
            ln1_beta: Tensor::zeros(&[1, d_model]).requires_grad(),
            pw_in: randn(&[d_model, 2 * d_model], std, rng).requires_grad(),
            dw_kernel: randn(&[kernel_size, d_model], 1.0 / (kernel_size as f64).sqrt(), rng)
                .requires_grad(),
            ln2_gamma: Tensor::from_vec(&[1, d_model], vec![1.0; d_model]).requires_grad(),
            ln2_beta: Tensor::zeros(&[1, d_model]).requires_grad(),
            pw_out: randn(&[d_model, d_model], std, rng).requires_grad(),
        }
    }
}

/// Conformer convolution module:
/// LN → pointwise (2d) → GLU → depthwise (same length) → LN → swish →
/// pointwise → residual.
pub fn conv_module(x: &Tensor, params: &ConvModuleParams) -> Tensor {
    let d_model = x.shape()[1];
    let h = x.layer_norm(&params.ln1_gamma, &params.ln1_beta, LN_EPS);
    let h = h.matmul(&params.pw_in);
    let glu = h.slice_cols(0, d_model).mul(&h.slice_cols(d_model, 2 * d_model).sigmoid());
    let h = glu.depthwise_conv(&params.dw_kernel);
    let h = h.layer_norm(&params.ln2_gamma, &params.ln2_beta, LN_EPS);
    let h = h.swish().matmul(&params.pw_out);
    x.add(&h)
}

#[derive(Clone)]
pub struct ConformerBlockParams {
    pub ffn1: FeedForwardParams,
    pub ln_att_gamma: Tensor,
    pub ln_att_beta: Tensor,
    pub attn: AttentionParams,
    pub conv: ConvModuleParams,
    pub ffn2: FeedForwardParams,
    pub ln_final_gamma: Tensor,
    pub ln_final_beta: Tensor,
}

impl ConformerBlockParams {
    pub fn init(
        d_model: usize,
        num_heads: usize,
        ffn_dim: usize,
        kernel_size: usize,
        rng: &mut impl Rng,
    ) -> ConformerBlockParams {
        ConformerBlockParams {
            ffn1: FeedForwardParams::init(d_model, ffn_dim, rng),
            ln_att_gamma: Tensor::from_vec(&[1, d_model], vec![1.0; d_model]).requires_grad(),
            ln_att_beta: Tensor::zeros(&[1, d_model]).requires_grad(),
            attn: AttentionParams::init(d_model, num_heads, rng),
            conv: ConvModuleParams::init(d_model, kernel_size, rng),
            ffn2: FeedForwardParams::init(d_model, ffn_dim, rng),
            ln_final_gamma: Tensor::from_vec(&[1, d_model], vec![1.0; d_model]).requires_grad(),
            ln_final_beta: Tensor::zeros(&[1, d_model]).requires_grad(),
        }
    }

    /// Every trainable tensor in the block, in forward order.
    pub fn all_params(&self) -> Vec<Tensor> {
        vec![
            self.ffn1.ln_gamma.clone(),
            self.ffn1.ln_beta.clone(),
            self.ffn1.w1.clone(),
            self.ffn1.w2.clone(),
            self.ln_att_gamma.clone(),
            self.ln_att_beta.clone(),
            self.attn.w_q.clone(),
            self.attn.w_k.clone(),
            self.attn.w_v.clone(),
            self.attn.w_o.clone(),
            self.conv.ln1_gamma.clone(),
            self.conv.ln1_beta.clone(),
            self.conv.pw_in.clone(),
            self.conv.dw_kernel.clone(),
            self.conv.ln2_gamma.clone(),
            self.conv.ln2_beta.clone(),
            self.conv.pw_out.clone(),
            self.ffn2.ln_gamma.clone(),
            self.ffn2.ln_beta.clone(),
            self.ffn2.w1.clone(),
            self.ffn2.w2.clone(),
            self.ln_final_gamma.clone(),
            self.ln_final_beta.clone(),
        ]
    }
}

/// FFN½ → MHSA → Conv → FFN½ → LN, all sublayers residual and pre-norm.
pub fn conformer_block(
    x: &Tensor,
    mask: Option<&AttentionMask>,
    params: &ConformerBlockParams,
) -> Tensor {
    let x = feed_forward(x, &params.ffn1, true);
    let att_in = x.layer_norm(&params.ln_att_gamma, &params.ln_att_beta, LN_EPS);
    let x = x.add(&multi_head_attention(&att_in, mask, &params.attn));
    let x = conv_module(&x, &params.conv);
    let x = feed_forward(&x, &params.ffn2, true);
    x.layer_norm(&params.ln_final_gamma, &params.ln_final_beta, LN_EPS)
}

/// Convolutional subsampling frontend. Factor 1 is a pointwise projection;
/// factors 2 and 4 use one or two stride-2 kernel-3 convolutions with swish.
/// Output length is ceil(T₀ / factor).
#[derive(Clone)]
pub struct FrontendParams {
    pub factor: usize,
    pub w1: Tensor,
    pub w2: Option<Tensor>,
}

impl FrontendParams {
    pub fn init(feat_dim: usize, d_model: usize, factor: usize, rng: &mut impl Rng) -> FrontendParams {
        let std1 = 1.0 / (feat_dim as f64).sqrt();
        match factor {
            1 => FrontendParams {
                factor,
                w1: randn(&[feat_dim, d_model], std1, rng).requires_grad(),
                w2: None,
            },
            2 => FrontendParams {
                factor,
                w1: randn(&[3 * feat_dim, d_model], std1, rng).requires_grad(),
                w2: None,
            },
            4 => FrontendParams {
                factor,
                w1: randn(&[3 * feat_dim, d_model], std1, rng).requires_grad(),
                w2: Some(
                    randn(&[3 * d_model, d_model], 1.0 / (d_model as f64).sqrt(), rng)
                        .requires_grad(),
                ),
            },
            other => panic!("subsample factor must be 1, 2, or 4, got {other}"),
        }
    }
}

pub fn subsample_frontend(features: &Tensor, params: &FrontendParams) -> Tensor {
    let t0 = features.shape()[0];
    assert!(t0 > 0, "empty feature sequence");
    match params.factor {
        1 => features.matmul(&params.w1),
        2 => features.unfold_time(3, 2, 1).matmul(&params.w1).swish(),
        4 => {
            let h = features.unfold_time(3, 2, 1).matmul(&params.w1).swish();
            h.unfold_time(3, 2, 1)
                .matmul(params.w2.as_ref().expect("factor-4 frontend needs w2"))
                .swish()
        }
        other => panic!("subsample factor must be 1, 2, or 4, got {other}"),
    }
}

/// Standard sinusoidal positional table, deterministic in (T, d_model).
pub fn positional_encoding(t: usize, d_model: usize) -> Tensor {
    assert!(t >= 1, "positional encoding needs T >= 1");
    let mut data = vec![0.0; t * d_model];
    for pos in 0..t {
        for i in 0..d_model / 2 {
            let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = (pos as f64 * omega).sin();
            data[pos * d_model + 2 * i + 1] = (pos as f64 * omega).cos();
        }
        if d_model % 2 == 1 {
            let i = d_model / 2;
            let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = (pos as f64 * omega).sin();
        }
    }
    Tensor::from_vec(&[t, d_model], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::keyframe::{build_kfsa_mask, KeyFrameSet, KfsaMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eye(n: usize) -> Tensor {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Tensor::from_vec(&[n, n], d)
    }

    #[test]
    fn attention_t1_returns_v() {
        let q = Tensor::from_vec(&[1, 2], vec![3.0, -1.0]);
        let k = Tensor::from_vec(&[1, 2], vec![0.5, 0.5]);
        let v = Tensor::from_vec(&[1, 2], vec![7.0, -2.0]);
        assert_eq!(scaled_dot_attention(&q, &k, &v, None).to_vec(), vec![7.0, -2.0]);
    }

    #[test]
    fn attention_equal_keys_gives_column_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = randn(&[3, 2], 1.0, &mut rng);
        let k = Tensor::from_vec(&[3, 2], vec![0.4, -0.2, 0.4, -0.2, 0.4, -0.2]);
        let v = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = scaled_dot_attention(&q, &k, &v, None).to_vec();
        for r in 0..3 {
            assert!((out[r * 2] - 3.0).abs() < 1e-12);
            assert!((out[r * 2 + 1] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_out_rows_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = randn(&[5, 4], 1.0, &mut rng);
        let k = randn(&[5, 4], 1.0, &mut rng);
        let v = randn(&[5, 4], 1.0, &mut rng);
        let p = KeyFrameSet { positions: vec![2], t: 5, blank_id: 0 };
        let mask = build_kfsa_mask(&p, 5, 1, KfsaMode::WindowPlusK);
        let out = scaled_dot_attention(&q, &k, &v, Some(&mask)).to_vec();
        assert_eq!(&out[0..4], &[0.0; 4]);
        assert_eq!(&out[16..20], &[0.0; 4]);
        assert!(out[4..8].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn all_ones_mask_is_bit_identical_to_no_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&[6, 8], 1.0, &mut rng);
        let params = AttentionParams::init(8, 2, &mut rng);
        let dense = multi_head_attention(&x, None, &params);
        let mask = AttentionMask::dense(6);
        let masked = multi_head_attention(&x, Some(&mask), &params);
        assert_eq!(dense.to_vec(), masked.to_vec());
    }

    #[test]
    fn mask_monotonicity_leaves_unchanged_rows_alone() {
        // Adding allowed entries to other rows must not change a row whose
        // allowed set stayed the same.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = randn(&[5, 4], 1.0, &mut rng);
        let k = randn(&[5, 4], 1.0, &mut rng);
        let v = randn(&[5, 4], 1.0, &mut rng);
        let p = KeyFrameSet { positions: vec![2], t: 5, blank_id: 0 };
        let small = build_kfsa_mask(&p, 5, 1, KfsaMode::WindowPlusK);
        let mut grown = small.clone();
        // Open up row 0 fully; rows 1..=3 keep their allowed sets.
        for t2 in 0..5 {
            grown.bits[t2] = true;
        }
        let a = scaled_dot_attention(&q, &k, &v, Some(&small)).to_vec();
        let b = scaled_dot_attention(&q, &k, &v, Some(&grown)).to_vec();
        for row in 1..=3 {
            assert_eq!(&a[row * 4..(row + 1) * 4], &b[row * 4..(row + 1) * 4]);
        }
    }

    #[test]
    fn dense_mult_count_is_2_t2_d_per_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, d_model, h) = (7, 8, 2);
        let x = randn(&[t, d_model], 1.0, &mut rng);
        let params = AttentionParams::init(d_model, h, &mut rng);
        reset_attention_mult_count();
        let _ = multi_head_attention(&x, None, &params);
        let d_head = d_model / h;
        assert_eq!(attention_mult_count(), (2 * t * t * d_head * h) as u64);
    }

    #[test]
    fn sparse_mult_count_counts_allowed_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = randn(&[5, 4], 1.0, &mut rng);
        let k = randn(&[5, 4], 1.0, &mut rng);
        let v = randn(&[5, 4], 1.0, &mut rng);
        let p = KeyFrameSet { positions: vec![2], t: 5, blank_id: 0 };
        let mask = build_kfsa_mask(&p, 5, 1, KfsaMode::WindowPlusK);
        let pairs: u64 = (0..5)
            .map(|r| (0..5).filter(|&c| mask.allowed(r, c)).count() as u64)
            .sum();
        reset_attention_mult_count();
        let _ = scaled_dot_attention(&q, &k, &v, Some(&mask));
        assert_eq!(attention_mult_count(), 2 * 4 * pairs);
    }

    #[test]
    fn mha_identity_projections_equal_single_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&[4, 3], 1.0, &mut rng);
        let params = AttentionParams {
            w_q: eye(3),
            w_k: eye(3),
            w_v: eye(3),
            w_o: eye(3),
            num_heads: 1,
        };
        let a = multi_head_attention(&x, None, &params).to_vec();
        let b = scaled_dot_attention(&x, &x, &x, None).to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mha_zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = AttentionParams::init(4, 2, &mut rng);
        let x = Tensor::zeros(&[3, 4]);
        let out = multi_head_attention(&x, None, &params).to_vec();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_permutation_with_repermuted_w_o_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (d_model, h) = (6, 2);
        let x = randn(&[4, d_model], 1.0, &mut rng);
        let params = AttentionParams::init(d_model, h, &mut rng);
        let out = multi_head_attention(&x, None, &params).to_vec();

        // Swap the two heads in every projection, and swap the corresponding
        // row blocks of W_o.
        let dh = d_model / h;
        let swap_cols = |t: &Tensor| {
            let d = t.to_vec();
            let mut s = vec![0.0; d.len()];
            for r in 0..d_model {
                for c in 0..d_model {
                    let src = if c < dh { c + dh } else { c - dh };
                    s[r * d_model + c] = d[r * d_model + src];
                }
            }
            Tensor::from_vec(&[d_model, d_model], s)
        };
        let swap_rows = |t: &Tensor| {
            let d = t.to_vec();
            let mut s = vec![0.0; d.len()];
            for r in 0..d_model {
                let src = if r < dh { r + dh } else { r - dh };
                s[r * d_model..(r + 1) * d_model]
                    .copy_from_slice(&d[src * d_model..(src + 1) * d_model]);
            }
            Tensor::from_vec(&[d_model, d_model], s)
        };
        let permuted = AttentionParams {
            w_q: swap_cols(&params.w_q),
            w_k: swap_cols(&params.w_k),
            w_v: swap_cols(&params.w_v),
            w_o: swap_rows(&params.w_o),
            num_heads: h,
        };
        let out2 = multi_head_attention(&x, None, &permuted).to_vec();
        for (a, b) in out.iter().zip(&out2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn zeroed_ffn(d: usize, f: usize) -> FeedForwardParams {
        FeedForwardParams {
            ln_gamma: Tensor::from_vec(&[1, d], vec![1.0; d]),
            ln_beta: Tensor::zeros(&[1, d]),
            w1: Tensor::zeros(&[d, f]),
            w2: Tensor::zeros(&[f, d]),
        }
    }

    #[test]
    fn ffn_zero_weights_is_pure_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&[3, 4], 1.0, &mut rng);
        let out = feed_forward(&x, &zeroed_ffn(4, 8), true);
        assert_eq!(out.to_vec(), x.to_vec());
    }

    #[test]
    fn ffn_half_step_halves_contribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&[3, 4], 1.0, &mut rng);
        let params = FeedForwardParams::init(4, 8, &mut rng);
        let full = feed_forward(&x, &params, false);
        let half = feed_forward(&x, &params, true);
        let (xv, fv, hv) = (x.to_vec(), full.to_vec(), half.to_vec());
        for i in 0..xv.len() {
            let full_delta = fv[i] - xv[i];
            let half_delta = hv[i] - xv[i];
            assert!((half_delta - 0.5 * full_delta).abs() < 1e-12);
        }
    }

    #[test]
    fn ffn_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = randn(&[3, 4], 1.0, &mut rng).requires_grad();
        let params = FeedForwardParams::init(4, 6, &mut rng);
        let leaves = vec![
            x.clone(),
            params.ln_gamma.clone(),
            params.ln_beta.clone(),
            params.w1.clone(),
            params.w2.clone(),
        ];
        let probe = randn(&[3, 4], 1.0, &mut rng);
        check_gradients(
            &leaves,
            || feed_forward(&x, &params, true).mul(&probe).sum(),
            1e-5,
            1e-4,
        );
    }

    #[test]
    fn conv_module_zero_weights_is_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 4;
        let x = randn(&[3, d], 1.0, &mut rng);
        let params = ConvModuleParams {
            ln1_gamma: Tensor::from_vec(&[1, d], vec![1.0; d]),
            ln1_beta: Tensor::zeros(&[1, d]),
            pw_in: Tensor::zeros(&[d, 2 * d]),
            dw_kernel: Tensor::zeros(&[3, d]),
            ln2_gamma: Tensor::from_vec(&[1, d], vec![1.0; d]),
            ln2_beta: Tensor::zeros(&[1, d]),
            pw_out: Tensor::zeros(&[d, d]),
        };
        assert_eq!(conv_module(&x, &params).to_vec(), x.to_vec());
    }

    #[test]
    fn depthwise_t1_sees_only_center_tap() {
        // With T=1 and kernel=3, the zero-padded neighbors contribute
        // nothing: the response is the center tap alone.
        let x = Tensor::from_vec(&[1, 2], vec![2.0, -3.0]);
        let k = Tensor::from_vec(&[3, 2], vec![0.5, 0.5, 1.5, -1.0, 0.25, 0.25]);
        let out = x.depthwise_conv(&k).to_vec();
        assert_eq!(out, vec![2.0 * 1.5, -3.0 * -1.0]);
    }

    #[test]
    fn conv_module_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = randn(&[4, 4], 1.0, &mut rng).requires_grad();
        let params = ConvModuleParams::init(4, 3, &mut rng);
        let leaves = vec![
            x.clone(),
            params.ln1_gamma.clone(),
            params.ln1_beta.clone(),
            params.pw_in.clone(),
            params.dw_kernel.clone(),
            params.ln2_gamma.clone(),
            params.ln2_beta.clone(),
            params.pw_out.clone(),
        ];
        let probe = randn(&[4, 4], 1.0, &mut rng);
        check_gradients(
            &leaves,
            || conv_module(&x, &params).mul(&probe).sum(),
            1e-5,
            1e-4,
        );
    }

    #[test]
    fn conformer_block_zero_sublayers_is_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let d = 4;
        let x = randn(&[3, d], 1.0, &mut rng);
        let mut params = ConformerBlockParams::init(d, 2, 8, 3, &mut rng);
        for w in [
            &params.ffn1.w1,
            &params.ffn1.w2,
            &params.attn.w_o,
            &params.conv.pw_out,
            &params.ffn2.w1,
            &params.ffn2.w2,
        ] {
            w.set_data(vec![0.0; w.to_vec().len()]);
        }
        params.ln_final_gamma = Tensor::from_vec(&[1, d], vec![1.0; d]);
        params.ln_final_beta = Tensor::zeros(&[1, d]);
        let out = conformer_block(&x, None, &params).to_vec();
        let expect = x
            .layer_norm(&params.ln_final_gamma, &params.ln_final_beta, LN_EPS)
            .to_vec();
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conformer_block_dense_mask_equals_no_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = randn(&[5, 4], 1.0, &mut rng);
        let params = ConformerBlockParams::init(4, 2, 8, 3, &mut rng);
        let a = conformer_block(&x, None, &params).to_vec();
        let mask = AttentionMask::dense(5);
        let b = conformer_block(&x, Some(&mask), &params).to_vec();
        assert_eq!(a, b);
    }

    #[test]
    fn conformer_block_full_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = randn(&[4, 4], 0.5, &mut rng).requires_grad();
        let params = ConformerBlockParams::init(4, 2, 6, 3, &mut rng);
        let leaves = vec![
            x.clone(),
            params.ffn1.ln_gamma.clone(),
            params.ffn1.ln_beta.clone(),
            params.ffn1.w1.clone(),
            params.ffn1.w2.clone(),
            params.ln_att_gamma.clone(),
            params.ln_att_beta.clone(),
            params.attn.w_q.clone(),
            params.attn.w_k.clone(),
            params.attn.w_v.clone(),
            params.attn.w_o.clone(),
            params.conv.ln1_gamma.clone(),
            params.conv.ln1_beta.clone(),
            params.conv.pw_in.clone(),
            params.conv.dw_kernel.clone(),
            params.conv.ln2_gamma.clone(),
            params.conv.ln2_beta.clone(),
            params.conv.pw_out.clone(),
            params.ffn2.ln_gamma.clone(),
            params.ffn2.ln_beta.clone(),
            params.ffn2.w1.clone(),
            params.ffn2.w2.clone(),
            params.ln_final_gamma.clone(),
            params.ln_final_beta.clone(),
        ];
        let probe = randn(&[4, 4], 1.0, &mut rng);
        check_gradients(
            &leaves,
            || conformer_block(&x, None, &params).mul(&probe).sum(),
            1e-5,
            1e-4,
        );
    }

    #[test]
    fn frontend_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let feats = randn(&[10, 3], 1.0, &mut rng);
        let p1 = FrontendParams::init(3, 5, 1, &mut rng);
        assert_eq!(subsample_frontend(&feats, &p1).shape(), vec![10, 5]);
        let p2 = FrontendParams::init(3, 5, 2, &mut rng);
        assert_eq!(subsample_frontend(&feats, &p2).shape(), vec![5, 5]);
        let p4 = FrontendParams::init(3, 5, 4, &mut rng);
        assert_eq!(subsample_frontend(&feats, &p4).shape(), vec![3, 5]);
    }

    #[test]
    fn positional_encoding_basics() {
        let pe = positional_encoding(4, 6);
        let v = pe.to_vec();
        // Position 0 alternates sin 0 / cos 0.
        assert_eq!(&v[0..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(v.iter().all(|&x| (-1.0..=1.0).contains(&x)));
        assert_eq!(positional_encoding(4, 6).to_vec(), v);
    }
}
