//! Finite-difference oracle for the analytic gradients: central differences
//! with h = 1e-4 on the f64 instantiation of the model, dropout off.
//!
//! Central differences are only valid where the loss is differentiable, so
//! after init the feed-forward biases are nudged until no ReLU
//! preactivation sits within [`KINK_MARGIN`] of zero; a perturbation of
//! size h then cannot flip any gate between the two evaluation points.

use super::forward::{forward_loss, forward_trace, Batch};
use super::{backward, ModelConfig, ModelError, TransformerParams};
use crate::rng::substream;
use crate::taskgen::{apply_function, gen_argument, LengthRange, TaskKind};
use crate::vocab::Token;

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
/// Parameters with both gradients below this magnitude are skipped.
pub const GRAD_FLOOR: f64 = 1e-8;
/// Minimum distance of any ReLU preactivation from zero at the check point.
const KINK_MARGIN: f64 = 3e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub seed: u64,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub n_checked: usize,
    pub n_skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= REL_TOL
    }
}

/// A small mixed-task batch with ragged lengths (exercises the masks).
fn check_batch(seed: u64) -> Batch {
    let mut rng = substream(seed, "gradcheck-data");
    let range = LengthRange::new(0, 4).unwrap();
    let mut pairs: Vec<(Vec<Token>, Vec<Token>)> = Vec::new();
    for kind in [TaskKind::Copy, TaskKind::Flip, TaskKind::Reverse] {
        let arg = gen_argument(&mut rng, range);
        let out = apply_function(kind, &arg).expect("letters only");
        let mut src = vec![kind.token(), Token::Dash, Token::Dash, Token::Pipe];
        src.extend(arg);
        pairs.push((src, out));
    }
    let views: Vec<(&[Token], &[Token])> = pairs.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
    Batch::from_pairs(&views)
}

/// Shifts one feed-forward bias column so every preactivation in that
/// column clears the kink margin. Returns the applied shift.
fn clearing_shift(column: &[f64]) -> f64 {
    let min = column.iter().copied().fold(f64::INFINITY, f64::min);
    let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if column.iter().all(|v| v.abs() >= KINK_MARGIN) {
        return 0.0;
    }
    // push the whole column positive or negative, whichever is closer
    let up = KINK_MARGIN - min;
    let down = -KINK_MARGIN - max;
    if up.abs() <= down.abs() {
        up
    } else {
        down
    }
}

fn nudge_away_from_kinks(
    params: &mut TransformerParams<f64>,
    cfg: &ModelConfig,
    batch: &Batch,
    seed: u64,
) -> Result<(), ModelError> {
    // encoder first: its FF biases shift its own preactivations directly
    for stage in 0..2 {
        let mut rng = substream(seed, "gradcheck-run");
        let trace = forward_trace(params, cfg, batch, false, &mut rng)?;
        let (h_pre, bias) = if stage == 0 {
            (&trace.enc.ff.h_pre, &mut params.enc.ff.b1)
        } else {
            (&trace.dec.ff.h_pre, &mut params.dec.ff.b1)
        };
        let cols = h_pre.cols;
        for j in 0..cols {
            let column: Vec<f64> = (0..h_pre.rows).map(|r| h_pre.row(r)[j]).collect();
            bias[j] += clearing_shift(&column);
        }
    }
    // confirm the margins hold after both passes
    let mut rng = substream(seed, "gradcheck-run");
    let trace = forward_trace(params, cfg, batch, false, &mut rng)?;
    for h_pre in [&trace.enc.ff.h_pre, &trace.dec.ff.h_pre] {
        for v in &h_pre.data {
            if v.abs() < KINK_MARGIN * 0.5 {
                return Err(ModelError::BadConfig(format!(
                    "gradcheck point still has a preactivation at {v:.2e}"
                )));
            }
        }
    }
    Ok(())
}

/// Compares analytic gradients against central finite differences at the
/// tiny config. Every parameter is perturbed individually.
pub fn finite_difference_check(seed: u64) -> Result<GradCheckReport, ModelError> {
    let cfg = ModelConfig::tiny(seed);
    debug_assert_eq!(cfg.dropout, 0.0);
    let batch = check_batch(seed);
    let mut params: TransformerParams<f64> = TransformerParams::init(&cfg);
    nudge_away_from_kinks(&mut params, &cfg, &batch, seed)?;
    let params = params;

    let mut rng = substream(seed, "gradcheck-run");
    let (_, mut grads) = backward(&params, &cfg, &batch, false, &mut rng)?;

    let mut work = params.clone();
    let mut max_rel_err = 0.0f64;
    let mut worst_param = String::new();
    let mut n_checked = 0usize;
    let mut n_skipped = 0usize;

    let names: Vec<&'static str> = grads.flat_views_mut().iter().map(|(n, _)| *n).collect();
    let grad_tensors: Vec<Vec<f64>> = grads.flat_views_mut().iter().map(|(_, g)| g.to_vec()).collect();

    for (tensor_idx, name) in names.iter().enumerate() {
        let len = grad_tensors[tensor_idx].len();
        for i in 0..len {
            let analytic = grad_tensors[tensor_idx][i];
            let original = {
                let views = work.flat_views_mut();
                views[tensor_idx].1[i]
            };
            let mut eval_at = |value: f64| -> Result<f64, ModelError> {
                {
                    let mut views = work.flat_views_mut();
                    views[tensor_idx].1[i] = value;
                }
                let mut r = substream(seed, "gradcheck-run");
                let (loss, _) = forward_loss(&work, &cfg, &batch, false, &mut r)?;
                Ok(loss)
            };
            let plus = eval_at(original + FD_STEP)?;
            let minus = eval_at(original - FD_STEP)?;
            {
                let mut views = work.flat_views_mut();
                views[tensor_idx].1[i] = original;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let denom = analytic.abs().max(numeric.abs());
            if denom <= GRAD_FLOOR {
                n_skipped += 1;
                continue;
            }
            let rel = (analytic - numeric).abs() / denom;
            n_checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_param = format!("{name}[{i}]");
            }
        }
    }

    Ok(GradCheckReport {
        seed,
        max_rel_err,
        worst_param,
        n_checked,
        n_skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let report = finite_difference_check(1).unwrap();
        assert!(report.n_checked > 500, "only {} params checked", report.n_checked);
        assert!(
            report.passed(),
            "max rel err {} at {} ({} checked)",
            report.max_rel_err,
            report.worst_param,
            report.n_checked
        );
    }

    #[test]
    fn pad_embedding_gradient_is_zero() {
        let cfg = ModelConfig::tiny(2);
        let batch = check_batch(2);
        let params: TransformerParams<f64> = TransformerParams::init(&cfg);
        let mut rng = substream(2, "gc");
        let (_, g) = backward(&params, &cfg, &batch, false, &mut rng).unwrap();
        assert!(g.emb.row(Token::Pad.id()).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn padded_columns_contribute_nothing() {
        // same pair, batch dims inflated with pure padding: loss and every
        // gradient (including layer-norm biases) must be identical
        let cfg = ModelConfig::tiny(3);
        let src = vec![Token::Copy, Token::Dash, Token::Dash, Token::Pipe, Token::A, Token::B];
        let tgt = vec![Token::A, Token::B];
        let tight = Batch::from_pairs(&[(&src, &tgt)]);
        let padded = Batch::from_pairs_padded_to(&[(&src, &tgt)], tight.s_max + 3, tight.t_max + 4);
        let params: TransformerParams<f64> = TransformerParams::init(&cfg);
        let (l1, mut g1) = backward(&params, &cfg, &tight, false, &mut substream(0, "a")).unwrap();
        let (l2, mut g2) = backward(&params, &cfg, &padded, false, &mut substream(0, "a")).unwrap();
        assert!((l1 - l2).abs() < 1e-12, "{l1} vs {l2}");
        for ((n1, a), (_, b)) in g1.flat_views_mut().into_iter().zip(g2.flat_views_mut()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-9, "{n1}: {x} vs {y}");
            }
        }
    }
}
