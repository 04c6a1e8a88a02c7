//! Analytic reverse-mode gradients for the fixed architecture. Runs the
//! trace forward internally (sharing the caller's rng so dropout masks
//! match) and walks the blocks in reverse.

use super::forward::{forward_trace, loss_dlogits, AttnTrace, Batch, FfTrace, LnTrace};
use super::{AttnParams, FfParams, LnParams, ModelConfig, ModelError, TransformerParams};
use crate::tensor::{dot, Mat, Scalar};
use crate::vocab::Token;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn add_assign<F: Scalar>(dst: &mut [F], src: &[F]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn add_mats<F: Scalar>(a: &Mat<F>, b: &Mat<F>) -> Mat<F> {
    let mut out = a.clone();
    add_assign(&mut out.data, &b.data);
    out
}

fn layernorm_backward<F: Scalar>(tr: &LnTrace<F>, ln: &LnParams<F>, dy: &Mat<F>, g: &mut LnParams<F>) -> Mat<F> {
    let d = tr.x.cols;
    let nf = F::cast(d as f64);
    let mut dx = Mat::zeros(tr.x.rows, d);
    for r in 0..tr.x.rows {
        let xh = tr.xhat.row(r);
        let dyr = dy.row(r);
        let istd = tr.inv_std[r];
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for j in 0..d {
            g.gain[j] = g.gain[j] + dyr[j] * xh[j];
            g.bias[j] = g.bias[j] + dyr[j];
            let dxh = dyr[j] * ln.gain[j];
            m1 = m1 + dxh;
            m2 = m2 + dxh * xh[j];
        }
        m1 = m1 / nf;
        m2 = m2 / nf;
        let dxr = dx.row_mut(r);
        for j in 0..d {
            let dxh = dyr[j] * ln.gain[j];
            dxr[j] = istd * (dxh - m1 - xh[j] * m2);
        }
    }
    dx
}

fn ff_backward<F: Scalar>(
    tr: &FfTrace<F>,
    p: &FfParams<F>,
    g: &mut FfParams<F>,
    x: &Mat<F>,
    dout: &Mat<F>,
) -> Mat<F> {
    add_assign(&mut g.w2.data, &tr.h_act.matmul_tn(dout).data);
    add_assign(&mut g.b2, &dout.col_sums());
    let mut dh = dout.matmul_nt(&p.w2);
    if let Some(mask) = &tr.drop_mask {
        for (v, &m) in dh.data.iter_mut().zip(mask) {
            *v = *v * m;
        }
    }
    for (v, &pre) in dh.data.iter_mut().zip(&tr.h_pre.data) {
        if pre <= F::zero() {
            *v = F::zero();
        }
    }
    add_assign(&mut g.w1.data, &x.matmul_tn(&dh).data);
    add_assign(&mut g.b1, &dh.col_sums());
    dh.matmul_nt(&p.w1)
}

/// Returns `(dx_q, dx_kv)`; self-attention callers add the two.
#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Scalar>(
    tr: &AttnTrace<F>,
    p: &AttnParams<F>,
    g: &mut AttnParams<F>,
    x_q: &Mat<F>,
    x_kv: &Mat<F>,
    b: usize,
    tq: usize,
    tk: usize,
    dout: &Mat<F>,
) -> (Mat<F>, Mat<F>) {
    let d = p.wq.rows;
    let scale = F::cast(1.0 / (d as f64).sqrt());

    // out = ctx @ wo + bo
    add_assign(&mut g.wo.data, &tr.ctx.matmul_tn(dout).data);
    add_assign(&mut g.bo, &dout.col_sums());
    let dctx = dout.matmul_nt(&p.wo);

    // per-sequence softmax/value paths
    let locals: Vec<(Mat<F>, Mat<F>, Mat<F>)> = (0..b)
        .into_par_iter()
        .map(|seq| {
            let a = &tr.probs[seq];
            let q_base = seq * tq;
            let k_base = seq * tk;
            let mut dq_seq = Mat::zeros(tq, d);
            let mut dk_seq = Mat::zeros(tk, d);
            let mut dv_seq = Mat::zeros(tk, d);
            let mut da = Mat::zeros(tq, tk);
            for qi in 0..tq {
                let dctx_row = dctx.row(q_base + qi);
                let da_row = da.row_mut(qi);
                for ki in 0..tk {
                    da_row[ki] = dot(dctx_row, tr.v.row(k_base + ki));
                }
            }
            // dV += A_drop^T @ dctx ; A_drop = A ⊙ mask
            for qi in 0..tq {
                let dctx_row = dctx.row(q_base + qi);
                for ki in 0..tk {
                    let mut w = a.row(qi)[ki];
                    if let Some(masks) = &tr.drop_masks {
                        w = w * masks[seq][qi * tk + ki];
                    }
                    if w != F::zero() {
                        for (dv, &x) in dv_seq.row_mut(ki).iter_mut().zip(dctx_row) {
                            *dv = *dv + w * x;
                        }
                    }
                }
            }
            // dropout then softmax jacobian
            if let Some(masks) = &tr.drop_masks {
                for (v, &m) in da.data.iter_mut().zip(&masks[seq]) {
                    *v = *v * m;
                }
            }
            let mut ds = Mat::zeros(tq, tk);
            for qi in 0..tq {
                let a_row = a.row(qi);
                let da_row = da.row(qi);
                let inner = dot(da_row, a_row);
                let ds_row = ds.row_mut(qi);
                for ki in 0..tk {
                    ds_row[ki] = a_row[ki] * (da_row[ki] - inner);
                }
            }
            // dQ = dS @ K * scale ; dK = dS^T @ Q * scale
            for qi in 0..tq {
                let ds_row = ds.row(qi);
                let dq_row = dq_seq.row_mut(qi);
                for ki in 0..tk {
                    let w = ds_row[ki] * scale;
                    if w != F::zero() {
                        for (o, &kv) in dq_row.iter_mut().zip(tr.k.row(k_base + ki)) {
                            *o = *o + w * kv;
                        }
                    }
                }
            }
            for ki in 0..tk {
                let dk_row = dk_seq.row_mut(ki);
                for qi in 0..tq {
                    let w = ds.row(qi)[ki] * scale;
                    if w != F::zero() {
                        for (o, &qv) in dk_row.iter_mut().zip(tr.q.row(q_base + qi)) {
                            *o = *o + w * qv;
                        }
                    }
                }
            }
            (dq_seq, dk_seq, dv_seq)
        })
        .collect();

    let mut dq = Mat::zeros(b * tq, d);
    let mut dk = Mat::zeros(b * tk, d);
    let mut dv = Mat::zeros(b * tk, d);
    for (seq, (dq_seq, dk_seq, dv_seq)) in locals.into_iter().enumerate() {
        dq.data[seq * tq * d..(seq + 1) * tq * d].copy_from_slice(&dq_seq.data);
        dk.data[seq * tk * d..(seq + 1) * tk * d].copy_from_slice(&dk_seq.data);
        dv.data[seq * tk * d..(seq + 1) * tk * d].copy_from_slice(&dv_seq.data);
    }

    // projection gradients and input gradients
    add_assign(&mut g.wq.data, &x_q.matmul_tn(&dq).data);
    add_assign(&mut g.bq, &dq.col_sums());
    add_assign(&mut g.wk.data, &x_kv.matmul_tn(&dk).data);
    add_assign(&mut g.bk, &dk.col_sums());
    add_assign(&mut g.wv.data, &x_kv.matmul_tn(&dv).data);
    add_assign(&mut g.bv, &dv.col_sums());

    let dx_q = dq.matmul_nt(&p.wq);
    let dx_kv = add_mats(&dk.matmul_nt(&p.wk), &dv.matmul_nt(&p.wv));
    (dx_q, dx_kv)
}

fn embed_backward<F: Scalar>(
    demb: &mut Mat<F>,
    ids: &[u32],
    drop_mask: &Option<Vec<F>>,
    dx0: Mat<F>,
) {
    let d = demb.cols;
    let scale = F::cast((d as f64).sqrt());
    let mut dx0 = dx0;
    if let Some(mask) = drop_mask {
        for (v, &m) in dx0.data.iter_mut().zip(mask) {
            *v = *v * m;
        }
    }
    for (r, &id) in ids.iter().enumerate() {
        let row = dx0.row(r);
        let erow = demb.row_mut(id as usize);
        for (e, &x) in erow.iter_mut().zip(row) {
            *e = *e + x * scale;
        }
    }
}

/// Loss plus exact gradients of `forward_loss` for every parameter.
/// Must see the same rng state as the matching forward call so dropout
/// masks line up.
pub fn backward<F: Scalar>(
    params: &TransformerParams<F>,
    cfg: &ModelConfig,
    batch: &Batch,
    train_mode: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, TransformerParams<F>), ModelError> {
    let trace = forward_trace(params, cfg, batch, train_mode, rng)?;
    let mut g = TransformerParams::zeros(cfg);

    let dlogits = loss_dlogits(&trace.logits, batch, cfg.label_smoothing, trace.n_positions);

    // output projection
    add_assign(&mut g.out_w.data, &trace.dec.ln3.y.matmul_tn(&dlogits).data);
    let d_y3 = dlogits.matmul_nt(&params.out_w);

    // decoder FF block: x3 = LN3(x2 + ff(x2))
    let d_u3 = layernorm_backward(&trace.dec.ln3, &params.dec.ln3, &d_y3, &mut g.dec.ln3);
    let d_ff_in = ff_backward(&trace.dec.ff, &params.dec.ff, &mut g.dec.ff, &trace.dec.ln2.y, &d_u3);
    let d_x2 = add_mats(&d_u3, &d_ff_in);

    // decoder cross-attention block: x2 = LN2(x1 + ca(x1, enc))
    let d_u2 = layernorm_backward(&trace.dec.ln2, &params.dec.ln2, &d_x2, &mut g.dec.ln2);
    let (d_ca_q, d_enc_from_ca) = attention_backward(
        &trace.dec.ca,
        &params.dec.cross_attn,
        &mut g.dec.cross_attn,
        &trace.dec.ln1.y,
        &trace.enc.ln2.y,
        batch.b,
        batch.t_max,
        batch.s_max,
        &d_u2,
    );
    let d_x1 = add_mats(&d_u2, &d_ca_q);

    // decoder self-attention block: x1 = LN1(x0 + sa(x0))
    let d_u1 = layernorm_backward(&trace.dec.ln1, &params.dec.ln1, &d_x1, &mut g.dec.ln1);
    let (d_sa_q, d_sa_kv) = attention_backward(
        &trace.dec.sa,
        &params.dec.self_attn,
        &mut g.dec.self_attn,
        &trace.dec.emb.x,
        &trace.dec.emb.x,
        batch.b,
        batch.t_max,
        batch.t_max,
        &d_u1,
    );
    let d_x0_dec = add_mats(&add_mats(&d_u1, &d_sa_q), &d_sa_kv);
    embed_backward(&mut g.emb, &batch.tgt_in, &trace.dec.emb.drop_mask, d_x0_dec);

    // encoder, driven by the cross-attention keys/values
    let d_u2e = layernorm_backward(&trace.enc.ln2, &params.enc.ln2, &d_enc_from_ca, &mut g.enc.ln2);
    let d_ff_in_e = ff_backward(&trace.enc.ff, &params.enc.ff, &mut g.enc.ff, &trace.enc.ln1.y, &d_u2e);
    let d_x1e = add_mats(&d_u2e, &d_ff_in_e);
    let d_u1e = layernorm_backward(&trace.enc.ln1, &params.enc.ln1, &d_x1e, &mut g.enc.ln1);
    let (d_sa_qe, d_sa_kve) = attention_backward(
        &trace.enc.sa,
        &params.enc.attn,
        &mut g.enc.attn,
        &trace.enc.emb.x,
        &trace.enc.emb.x,
        batch.b,
        batch.s_max,
        batch.s_max,
        &d_u1e,
    );
    let d_x0_enc = add_mats(&add_mats(&d_u1e, &d_sa_qe), &d_sa_kve);
    embed_backward(&mut g.emb, &batch.src, &trace.enc.emb.drop_mask, d_x0_enc);

    // the PAD embedding row is frozen
    g.emb.row_mut(Token::Pad.id()).fill(F::zero());

    Ok((trace.loss, g))
}
