//! Batched forward pass with a full activation trace for backprop.
//!
//! Dropout sits in exactly three places: on the embedding sums, on the
//! attention weights and on the feed-forward activations. Masks are drawn
//! from the caller's rng in a fixed order (encoder embedding, encoder
//! attention, encoder FF, decoder embedding, decoder self-attention,
//! decoder cross-attention, decoder FF), so forward and backward agree on
//! the masks whenever they share the rng state.

use super::{LnParams, ModelConfig, ModelError, TransformerParams, LN_EPS};
use crate::rng::uniform01;
use crate::tensor::{dot, softmax_inplace, Mat, Scalar};
use crate::vocab::{Token, VOCAB_SIZE};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Padded id matrices for one batch. Sources carry a trailing EOS; decoder
/// input is the BOS-shifted target and the gold row is the target plus EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub b: usize,
    pub s_max: usize,
    pub t_max: usize,
    pub src: Vec<u32>,
    pub tgt_in: Vec<u32>,
    pub tgt_gold: Vec<u32>,
    pub src_len: Vec<usize>,
    pub tgt_len: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[(&[Token], &[Token])]) -> Batch {
        let s_max = pairs.iter().map(|(s, _)| s.len() + 1).max().unwrap_or(1);
        let t_max = pairs.iter().map(|(_, t)| t.len() + 1).max().unwrap_or(1);
        Batch::from_pairs_padded_to(pairs, s_max, t_max)
    }

    /// Same as [`Batch::from_pairs`] but padded to explicit dimensions
    /// (tests use this to show pad columns contribute nothing).
    pub fn from_pairs_padded_to(pairs: &[(&[Token], &[Token])], s_max: usize, t_max: usize) -> Batch {
        let b = pairs.len();
        let pad = Token::Pad.id() as u32;
        let mut src = vec![pad; b * s_max];
        let mut tgt_in = vec![pad; b * t_max];
        let mut tgt_gold = vec![pad; b * t_max];
        let mut src_len = Vec::with_capacity(b);
        let mut tgt_len = Vec::with_capacity(b);
        for (i, (s, t)) in pairs.iter().enumerate() {
            assert!(s.len() + 1 <= s_max && t.len() + 1 <= t_max, "pair exceeds batch dims");
            for (j, tok) in s.iter().enumerate() {
                src[i * s_max + j] = tok.id() as u32;
            }
            src[i * s_max + s.len()] = Token::Eos.id() as u32;
            src_len.push(s.len() + 1);

            tgt_in[i * t_max] = Token::Bos.id() as u32;
            for (j, tok) in t.iter().enumerate() {
                tgt_in[i * t_max + j + 1] = tok.id() as u32;
                tgt_gold[i * t_max + j] = tok.id() as u32;
            }
            tgt_gold[i * t_max + t.len()] = Token::Eos.id() as u32;
            tgt_len.push(t.len() + 1);
        }
        Batch {
            b,
            s_max,
            t_max,
            src,
            tgt_in,
            tgt_gold,
            src_len,
            tgt_len,
        }
    }

    /// Padded token-matrix cells, the quantity the batch planner limits:
    /// `max(rows * s_max, rows * t_max)`.
    pub fn token_cells(&self) -> usize {
        (self.b * self.s_max).max(self.b * self.t_max)
    }

    pub fn gold_positions(&self) -> usize {
        self.tgt_len.iter().sum()
    }
}

pub(super) struct DropoutCtx<'r> {
    rng: Option<&'r mut ChaCha8Rng>,
    rate: f64,
}

impl<'r> DropoutCtx<'r> {
    pub(super) fn new(rng: &'r mut ChaCha8Rng, rate: f64, train_mode: bool) -> DropoutCtx<'r> {
        DropoutCtx {
            rng: (train_mode && rate > 0.0).then_some(rng),
            rate,
        }
    }

    /// Inverted-dropout multipliers: 0 with probability `rate`, otherwise
    /// `1/(1-rate)`. Returns `None` when dropout is inactive.
    fn mask<F: Scalar>(&mut self, len: usize) -> Option<Vec<F>> {
        let rng = self.rng.as_deref_mut()?;
        let keep = F::cast(1.0 / (1.0 - self.rate));
        Some(
            (0..len)
                .map(|_| if uniform01(rng) < self.rate { F::zero() } else { keep })
                .collect(),
        )
    }
}

fn apply_mask<F: Scalar>(xs: &mut [F], mask: &Option<Vec<F>>) {
    if let Some(m) = mask {
        for (x, &mul) in xs.iter_mut().zip(m) {
            *x = *x * mul;
        }
    }
}

/// Sinusoidal position table for positions `0..max_len`.
pub(super) fn sinusoidal_table<F: Scalar>(max_len: usize, d: usize) -> Mat<F> {
    Mat::from_fn(max_len, d, |p, j| {
        let i = (j / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * i / d as f64);
        F::cast(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

pub(super) struct LnTrace<F> {
    pub x: Mat<F>,
    pub xhat: Mat<F>,
    pub inv_std: Vec<F>,
    pub y: Mat<F>,
}

pub(super) fn layernorm_forward<F: Scalar>(x: Mat<F>, ln: &LnParams<F>) -> LnTrace<F> {
    let d = x.cols;
    let nf = F::cast(d as f64);
    let eps = F::cast(LN_EPS);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut y = Mat::zeros(x.rows, d);
    let mut inv_std = vec![F::zero(); x.rows];
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<F>() / nf;
        let mut var = F::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var / nf;
        let istd = F::one() / (var + eps).sqrt();
        inv_std[r] = istd;
        let xh = xhat.row_mut(r);
        let yr = y.row_mut(r);
        for j in 0..d {
            xh[j] = (row[j] - mean) * istd;
            yr[j] = xh[j] * ln.gain[j] + ln.bias[j];
        }
    }
    LnTrace { x, xhat, inv_std, y }
}

pub(super) struct AttnTrace<F> {
    pub q: Mat<F>,
    pub k: Mat<F>,
    pub v: Mat<F>,
    /// Post-softmax attention per sequence, before dropout.
    pub probs: Vec<Mat<F>>,
    pub drop_masks: Option<Vec<Vec<F>>>,
    pub ctx: Mat<F>,
    pub out: Mat<F>,
}

/// Mask mode for attention logits.
#[derive(Clone, Copy)]
pub(super) enum AttnMask {
    /// Keys at or past the per-sequence valid length are hidden.
    KeyLen,
    /// Strictly causal: key index must not exceed the query index.
    Causal,
}

pub(super) fn attention_forward<F: Scalar>(
    x_q: &Mat<F>,
    x_kv: &Mat<F>,
    p: &super::AttnParams<F>,
    b: usize,
    tq: usize,
    tk: usize,
    k_len: &[usize],
    mask: AttnMask,
    drop: &mut DropoutCtx,
) -> AttnTrace<F> {
    let d = p.wq.rows;
    let scale = F::cast(1.0 / (d as f64).sqrt());
    let mut q = x_q.matmul_nn(&p.wq);
    q.add_bias(&p.bq);
    let mut k = x_kv.matmul_nn(&p.wk);
    k.add_bias(&p.bk);
    let mut v = x_kv.matmul_nn(&p.wv);
    v.add_bias(&p.bv);

    // Draw all dropout masks first (sequential, deterministic order),
    // then fill attention rows in parallel per sequence.
    let drop_masks: Option<Vec<Vec<F>>> = {
        let mut out = None;
        for seq in 0..b {
            let _ = seq;
            if let Some(m) = drop.mask::<F>(tq * tk) {
                out.get_or_insert_with(Vec::new).push(m);
            }
        }
        out
    };

    let mut ctx = Mat::zeros(b * tq, d);
    let probs: Vec<Mat<F>> = ctx
        .data
        .par_chunks_mut(tq * d)
        .enumerate()
        .map(|(seq, ctx_chunk)| {
            let q_base = seq * tq;
            let k_base = seq * tk;
            let mut a = Mat::zeros(tq, tk);
            for qi in 0..tq {
                let q_row = q.row(q_base + qi);
                let score_row = a.row_mut(qi);
                for ki in 0..tk {
                    let visible = match mask {
                        AttnMask::KeyLen => ki < k_len[seq],
                        AttnMask::Causal => ki <= qi,
                    };
                    score_row[ki] = if visible {
                        dot(q_row, k.row(k_base + ki)) * scale
                    } else {
                        F::neg_infinity()
                    };
                }
                softmax_inplace(score_row);
            }
            // dropout on the attention weights, then the value mix
            let mut a_drop = a.clone();
            if let Some(masks) = &drop_masks {
                apply_mask(&mut a_drop.data, &Some(masks[seq].clone()));
            }
            for qi in 0..tq {
                let ctx_row = &mut ctx_chunk[qi * d..(qi + 1) * d];
                for ki in 0..tk {
                    let w = a_drop.row(qi)[ki];
                    if w != F::zero() {
                        for (c, &vv) in ctx_row.iter_mut().zip(v.row(k_base + ki)) {
                            *c = *c + w * vv;
                        }
                    }
                }
            }
            a
        })
        .collect();

    let mut out = ctx.matmul_nn(&p.wo);
    out.add_bias(&p.bo);
    AttnTrace {
        q,
        k,
        v,
        probs,
        drop_masks,
        ctx,
        out,
    }
}

pub(super) struct FfTrace<F> {
    pub h_pre: Mat<F>,
    pub h_act: Mat<F>,
    pub drop_mask: Option<Vec<F>>,
    pub out: Mat<F>,
}

pub(super) fn ff_forward<F: Scalar>(x: &Mat<F>, p: &super::FfParams<F>, drop: &mut DropoutCtx) -> FfTrace<F> {
    let mut h_pre = x.matmul_nn(&p.w1);
    h_pre.add_bias(&p.b1);
    let mut h_act = h_pre.clone();
    for v in h_act.data.iter_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
    let drop_mask = drop.mask::<F>(h_act.data.len());
    apply_mask(&mut h_act.data, &drop_mask);
    let mut out = h_act.matmul_nn(&p.w2);
    out.add_bias(&p.b2);
    FfTrace {
        h_pre,
        h_act,
        drop_mask,
        out,
    }
}

fn add<F: Scalar>(a: &Mat<F>, b: &Mat<F>) -> Mat<F> {
    debug_assert_eq!(a.data.len(), b.data.len());
    let mut out = a.clone();
    for (o, &x) in out.data.iter_mut().zip(&b.data) {
        *o = *o + x;
    }
    out
}

pub(super) struct EmbedTrace<F> {
    pub x: Mat<F>,
    pub drop_mask: Option<Vec<F>>,
}

pub(super) fn embed_forward<F: Scalar>(
    emb: &Mat<F>,
    ids: &[u32],
    seq_len: usize,
    pos: &Mat<F>,
    drop: &mut DropoutCtx,
) -> EmbedTrace<F> {
    let d = emb.cols;
    let scale = F::cast((d as f64).sqrt());
    let mut x = Mat::zeros(ids.len(), d);
    for (r, &id) in ids.iter().enumerate() {
        let t = r % seq_len;
        let e_row = emb.row(id as usize);
        let p_row = pos.row(t);
        let x_row = x.row_mut(r);
        for j in 0..d {
            x_row[j] = e_row[j] * scale + p_row[j];
        }
    }
    let drop_mask = drop.mask::<F>(x.data.len());
    apply_mask(&mut x.data, &drop_mask);
    EmbedTrace { x, drop_mask }
}

pub(super) struct EncTrace<F> {
    pub emb: EmbedTrace<F>,
    pub sa: AttnTrace<F>,
    pub ln1: LnTrace<F>,
    pub ff: FfTrace<F>,
    pub ln2: LnTrace<F>,
}

pub(super) struct DecTrace<F> {
    pub emb: EmbedTrace<F>,
    pub sa: AttnTrace<F>,
    pub ln1: LnTrace<F>,
    pub ca: AttnTrace<F>,
    pub ln2: LnTrace<F>,
    pub ff: FfTrace<F>,
    pub ln3: LnTrace<F>,
}

pub(super) struct Trace<F> {
    pub enc: EncTrace<F>,
    pub dec: DecTrace<F>,
    pub logits: Mat<F>,
    pub loss: f64,
    pub n_positions: usize,
}

fn check_finite<F: Scalar>(m: &Mat<F>, layer: &'static str) -> Result<(), ModelError> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite { layer })
    }
}

/// Label-smoothed cross-entropy over the gold positions, accumulated in
/// f64. Returns (mean loss, gold position count).
pub(super) fn smoothed_loss<F: Scalar>(logits: &Mat<F>, batch: &Batch, eps: f64) -> (f64, usize) {
    let v = VOCAB_SIZE as f64;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for seq in 0..batch.b {
        for t in 0..batch.tgt_len[seq] {
            let row = logits.row(seq * batch.t_max + t);
            let gold = batch.tgt_gold[seq * batch.t_max + t] as usize;
            let mut max = f64::NEG_INFINITY;
            for &z in row {
                max = max.max(z.as_f64());
            }
            let mut sum_exp = 0.0;
            let mut sum_z = 0.0;
            for &z in row {
                let zf = z.as_f64();
                sum_exp += (zf - max).exp();
                sum_z += zf;
            }
            let lse = max + sum_exp.ln();
            total += lse - (1.0 - eps) * row[gold].as_f64() - (eps / v) * sum_z;
            count += 1;
        }
    }
    (total / count.max(1) as f64, count)
}

/// Gradient of the mean smoothed loss with respect to the logits; zero at
/// padded positions.
pub(super) fn loss_dlogits<F: Scalar>(logits: &Mat<F>, batch: &Batch, eps: f64, n_positions: usize) -> Mat<F> {
    let v = F::cast(VOCAB_SIZE as f64);
    let inv_n = F::cast(1.0 / n_positions as f64);
    let one_minus = F::cast(1.0 - eps);
    let eps_over_v = F::cast(eps) / v;
    let mut d = Mat::zeros(logits.rows, logits.cols);
    for seq in 0..batch.b {
        for t in 0..batch.tgt_len[seq] {
            let r = seq * batch.t_max + t;
            let gold = batch.tgt_gold[r] as usize;
            let mut probs: Vec<F> = logits.row(r).to_vec();
            softmax_inplace(&mut probs);
            let drow = d.row_mut(r);
            for (j, p) in probs.iter().enumerate() {
                drow[j] = (*p - eps_over_v) * inv_n;
            }
            drow[gold] = drow[gold] - one_minus * inv_n;
        }
    }
    d
}

pub(super) fn forward_trace<F: Scalar>(
    params: &TransformerParams<F>,
    cfg: &ModelConfig,
    batch: &Batch,
    train_mode: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Trace<F>, ModelError> {
    let d = cfg.d_model;
    let pos = sinusoidal_table::<F>(batch.s_max.max(batch.t_max), d);
    let mut drop = DropoutCtx::new(rng, cfg.dropout, train_mode);

    // encoder
    let emb_s = embed_forward(&params.emb, &batch.src, batch.s_max, &pos, &mut drop);
    check_finite(&emb_s.x, "encoder embedding")?;
    let sa = attention_forward(
        &emb_s.x,
        &emb_s.x,
        &params.enc.attn,
        batch.b,
        batch.s_max,
        batch.s_max,
        &batch.src_len,
        AttnMask::KeyLen,
        &mut drop,
    );
    check_finite(&sa.out, "encoder self-attention")?;
    let ln1 = layernorm_forward(add(&emb_s.x, &sa.out), &params.enc.ln1);
    let ff = ff_forward(&ln1.y, &params.enc.ff, &mut drop);
    check_finite(&ff.out, "encoder feed-forward")?;
    let ln2 = layernorm_forward(add(&ln1.y, &ff.out), &params.enc.ln2);
    let enc = EncTrace {
        emb: emb_s,
        sa,
        ln1,
        ff,
        ln2,
    };

    // decoder
    let emb_t = embed_forward(&params.emb, &batch.tgt_in, batch.t_max, &pos, &mut drop);
    check_finite(&emb_t.x, "decoder embedding")?;
    let sa = attention_forward(
        &emb_t.x,
        &emb_t.x,
        &params.dec.self_attn,
        batch.b,
        batch.t_max,
        batch.t_max,
        &batch.tgt_len,
        AttnMask::Causal,
        &mut drop,
    );
    check_finite(&sa.out, "decoder self-attention")?;
    let ln1 = layernorm_forward(add(&emb_t.x, &sa.out), &params.dec.ln1);
    let ca = attention_forward(
        &ln1.y,
        &enc.ln2.y,
        &params.dec.cross_attn,
        batch.b,
        batch.t_max,
        batch.s_max,
        &batch.src_len,
        AttnMask::KeyLen,
        &mut drop,
    );
    check_finite(&ca.out, "decoder cross-attention")?;
    let ln2 = layernorm_forward(add(&ln1.y, &ca.out), &params.dec.ln2);
    let ff = ff_forward(&ln2.y, &params.dec.ff, &mut drop);
    check_finite(&ff.out, "decoder feed-forward")?;
    let ln3 = layernorm_forward(add(&ln2.y, &ff.out), &params.dec.ln3);

    let logits = ln3.y.matmul_nn(&params.out_w);
    check_finite(&logits, "output projection")?;
    let (loss, n_positions) = smoothed_loss(&logits, batch, cfg.label_smoothing);

    Ok(Trace {
        enc,
        dec: DecTrace {
            emb: emb_t,
            sa,
            ln1,
            ca,
            ln2,
            ff,
            ln3,
        },
        logits,
        loss,
        n_positions,
    })
}

/// Teacher-forced loss and logits for one batch.
pub fn forward_loss<F: Scalar>(
    params: &TransformerParams<F>,
    cfg: &ModelConfig,
    batch: &Batch,
    train_mode: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Mat<F>), ModelError> {
    let trace = forward_trace(params, cfg, batch, train_mode, rng)?;
    Ok((trace.loss, trace.logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::taskgen::{apply_function, TaskKind};
    use crate::vocab::compact_to_seq;

    fn demo_batch() -> Batch {
        let s1 = compact_to_seq("ab").unwrap();
        let t1 = apply_function(TaskKind::Copy, &s1).unwrap();
        let s2 = compact_to_seq("babb").unwrap();
        let t2 = apply_function(TaskKind::Flip, &s2).unwrap();
        Batch::from_pairs(&[(&s1, &t1), (&s2, &t2)])
    }

    #[test]
    fn batch_layout() {
        let b = demo_batch();
        assert_eq!(b.b, 2);
        assert_eq!(b.s_max, 5);
        assert_eq!(b.t_max, 5);
        assert_eq!(b.src_len, vec![3, 5]);
        assert_eq!(b.tgt_len, vec![3, 5]);
        // BOS shift
        assert_eq!(b.tgt_in[0], Token::Bos.id() as u32);
        assert_eq!(b.tgt_gold[2], Token::Eos.id() as u32);
        // padding
        assert_eq!(b.src[4], Token::Pad.id() as u32);
        assert_eq!(b.token_cells(), 10);
        assert_eq!(b.gold_positions(), 8);
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        let b = demo_batch();
        let logits: Mat<f64> = Mat::zeros(b.b * b.t_max, VOCAB_SIZE);
        for eps in [0.0, 0.1, 0.5] {
            let (loss, n) = smoothed_loss(&logits, &b, eps);
            assert_eq!(n, 8);
            assert!((loss - (VOCAB_SIZE as f64).ln()).abs() < 1e-12, "eps={eps}: {loss}");
        }
        assert!(((VOCAB_SIZE as f64).ln() - 2.4849).abs() < 1e-4);
    }

    #[test]
    fn one_hot_confident_prediction_drives_loss_to_zero() {
        let b = demo_batch();
        let mut logits: Mat<f64> = Mat::zeros(b.b * b.t_max, VOCAB_SIZE);
        for seq in 0..b.b {
            for t in 0..b.tgt_len[seq] {
                let r = seq * b.t_max + t;
                logits.row_mut(r)[b.tgt_gold[r] as usize] = 1e4;
            }
        }
        let (loss, _) = smoothed_loss(&logits, &b, 0.0);
        assert!(loss.abs() < 1e-9, "{loss}");
    }

    #[test]
    fn forward_runs_and_attention_rows_normalize() {
        let cfg = ModelConfig::tiny(3);
        let params: TransformerParams<f64> = TransformerParams::init(&cfg);
        let b = demo_batch();
        let mut rng = substream(0, "fwd");
        let trace = forward_trace(&params, &cfg, &b, false, &mut rng).unwrap();
        for a in trace.enc.sa.probs.iter().chain(&trace.dec.sa.probs).chain(&trace.dec.ca.probs) {
            for q in 0..a.rows {
                let s: f64 = a.row(q).iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            }
        }
        // causal: attention to future positions is exactly zero
        for a in &trace.dec.sa.probs {
            for q in 0..a.rows {
                for k in (q + 1)..a.cols {
                    assert_eq!(a.row(q)[k], 0.0);
                }
            }
        }
        // masked source keys get exactly zero
        let a0 = &trace.enc.sa.probs[0];
        for q in 0..a0.rows {
            for k in 3..a0.cols {
                assert_eq!(a0.row(q)[k], 0.0);
            }
        }
        assert!(trace.loss > 0.0);
    }

    #[test]
    fn initial_loss_is_near_log_vocab() {
        let cfg = ModelConfig::tiny(11);
        let params: TransformerParams<f64> = TransformerParams::init(&cfg);
        let s = compact_to_seq("a").unwrap();
        let t = s.clone();
        let b = Batch::from_pairs(&[(&s, &t)]);
        let mut rng = substream(0, "fwd");
        let (loss, _) = forward_loss(&params, &cfg, &b, false, &mut rng).unwrap();
        assert!((loss - (VOCAB_SIZE as f64).ln()).abs() < 0.7, "loss {loss}");
    }

    #[test]
    fn dropout_draw_order_is_deterministic() {
        let cfg = ModelConfig {
            dropout: 0.2,
            ..ModelConfig::tiny(3)
        };
        let params: TransformerParams<f64> = TransformerParams::init(&cfg);
        let b = demo_batch();
        let l1 = forward_loss(&params, &cfg, &b, true, &mut substream(9, "drop")).unwrap().0;
        let l2 = forward_loss(&params, &cfg, &b, true, &mut substream(9, "drop")).unwrap().0;
        let l3 = forward_loss(&params, &cfg, &b, true, &mut substream(10, "drop")).unwrap().0;
        assert_eq!(l1, l2);
        assert_ne!(l1, l3);
        // eval mode ignores the rng
        let e1 = forward_loss(&params, &cfg, &b, false, &mut substream(9, "drop")).unwrap().0;
        let e2 = forward_loss(&params, &cfg, &b, false, &mut substream(10, "drop")).unwrap().0;
        assert_eq!(e1, e2);
    }
}
