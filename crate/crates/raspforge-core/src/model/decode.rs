//! Greedy autoregressive decoding with optional forbidden-token masking.
//!
//! The encoder runs once per source; each step re-runs the (short) decoder
//! prefix and takes the last position's logits. BOS and PAD are always
//! masked out, so hypotheses contain neither.

use super::forward::{
    attention_forward, embed_forward, ff_forward, layernorm_forward, sinusoidal_table, AttnMask, DropoutCtx,
};
use super::{ModelConfig, ModelError, TransformerParams};
use crate::rng::substream;
use crate::tensor::{Mat, Scalar};
use crate::vocab::{Token, VOCAB_SIZE};

#[derive(Clone, Debug, Default)]
pub struct DecodeOptions {
    pub forbidden: Vec<Token>,
    /// Maximum generated tokens; defaults to `2 * |source| + 10`.
    pub cap: Option<usize>,
}

/// A decoded hypothesis: EOS-terminated (EOS stripped) plus the chosen
/// tokens' log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<Token>,
    pub logprobs: Vec<f64>,
}

fn encode_source<F: Scalar>(
    params: &TransformerParams<F>,
    cfg: &ModelConfig,
    src_ids: &[u32],
    pos: &Mat<F>,
) -> Mat<F> {
    let mut rng = substream(0, "decode-no-dropout");
    let mut drop = DropoutCtx::new(&mut rng, cfg.dropout, false);
    let s = src_ids.len();
    let emb = embed_forward(&params.emb, src_ids, s, pos, &mut drop);
    let sa = attention_forward(
        &emb.x,
        &emb.x,
        &params.enc.attn,
        1,
        s,
        s,
        &[s],
        AttnMask::KeyLen,
        &mut drop,
    );
    let mut sum = emb.x;
    for (o, &x) in sum.data.iter_mut().zip(&sa.out.data) {
        *o = *o + x;
    }
    let ln1 = layernorm_forward(sum, &params.enc.ln1);
    let ff = ff_forward(&ln1.y, &params.enc.ff, &mut drop);
    let mut sum = ln1.y;
    for (o, &x) in sum.data.iter_mut().zip(&ff.out.data) {
        *o = *o + x;
    }
    layernorm_forward(sum, &params.enc.ln2).y
}

/// Logits for the last position of a decoder prefix.
fn last_logits<F: Scalar>(
    params: &TransformerParams<F>,
    cfg: &ModelConfig,
    enc_out: &Mat<F>,
    tgt_in_ids: &[u32],
    pos: &Mat<F>,
) -> Vec<F> {
    let mut rng = substream(0, "decode-no-dropout");
    let mut drop = DropoutCtx::new(&mut rng, cfg.dropout, false);
    let t = tgt_in_ids.len();
    let s = enc_out.rows;
    let emb = embed_forward(&params.emb, tgt_in_ids, t, pos, &mut drop);
    let sa = attention_forward(
        &emb.x,
        &emb.x,
        &params.dec.self_attn,
        1,
        t,
        t,
        &[t],
        AttnMask::Causal,
        &mut drop,
    );
    let mut sum = emb.x;
    for (o, &x) in sum.data.iter_mut().zip(&sa.out.data) {
        *o = *o + x;
    }
    let ln1 = layernorm_forward(sum, &params.dec.ln1);
    let ca = attention_forward(
        &ln1.y,
        enc_out,
        &params.dec.cross_attn,
        1,
        t,
        s,
        &[s],
        AttnMask::KeyLen,
        &mut drop,
    );
    let mut sum = ln1.y;
    for (o, &x) in sum.data.iter_mut().zip(&ca.out.data) {
        *o = *o + x;
    }
    let ln2 = layernorm_forward(sum, &params.dec.ln2);
    let ff = ff_forward(&ln2.y, &params.dec.ff, &mut drop);
    let mut sum = ln2.y;
    for (o, &x) in sum.data.iter_mut().zip(&ff.out.data) {
        *o = *o + x;
    }
    let ln3 = layernorm_forward(sum, &params.dec.ln3);
    let last = Mat {
        rows: 1,
        cols: ln3.y.cols,
        data: ln3.y.row(t - 1).to_vec(),
    };
    last.matmul_nn(&params.out_w).data
}

/// Greedy argmax decoding. Stops at EOS or at the cap; masked tokens get
/// probability zero (logit -inf).
pub fn greedy_decode<F: Scalar>(
    params: &TransformerParams<F>,
    cfg: &ModelConfig,
    source: &[Token],
    opts: &DecodeOptions,
) -> Result<Hypothesis, ModelError> {
    let cap = opts.cap.unwrap_or(2 * source.len() + 10).max(1);
    let mut masked = [false; VOCAB_SIZE];
    masked[Token::Bos.id()] = true;
    masked[Token::Pad.id()] = true;
    for t in &opts.forbidden {
        masked[t.id()] = true;
    }

    let mut src_ids: Vec<u32> = source.iter().map(|t| t.id() as u32).collect();
    src_ids.push(Token::Eos.id() as u32);
    let max_pos = src_ids.len().max(cap + 1);
    let pos = sinusoidal_table::<F>(max_pos, cfg.d_model);
    let enc_out = encode_source(params, cfg, &src_ids, &pos);
    if !enc_out.is_finite() {
        return Err(ModelError::NonFinite { layer: "decode encoder" });
    }

    let mut tgt_in: Vec<u32> = vec![Token::Bos.id() as u32];
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    loop {
        let logits = last_logits(params, cfg, &enc_out, &tgt_in, &pos);
        // log-softmax over the unmasked tokens, in f64
        let mut best: Option<(usize, f64)> = None;
        let mut max = f64::NEG_INFINITY;
        for (id, &z) in logits.iter().enumerate() {
            if !masked[id] {
                max = max.max(z.as_f64());
            }
        }
        let mut sum_exp = 0.0f64;
        for (id, &z) in logits.iter().enumerate() {
            if !masked[id] {
                sum_exp += (z.as_f64() - max).exp();
            }
        }
        for (id, &z) in logits.iter().enumerate() {
            if masked[id] {
                continue;
            }
            let zf = z.as_f64();
            if best.map_or(true, |(_, b)| zf > b) {
                best = Some((id, zf));
            }
        }
        let (id, z) = best.expect("EOS is never masked");
        let logprob = z - max - sum_exp.ln();
        if id == Token::Eos.id() {
            logprobs.push(logprob);
            break;
        }
        tokens.push(Token::from_id(id).expect("valid id"));
        logprobs.push(logprob);
        if tokens.len() >= cap {
            break;
        }
        tgt_in.push(id as u32);
    }
    Ok(Hypothesis { tokens, logprobs })
}
