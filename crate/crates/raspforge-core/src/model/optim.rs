//! Learning-rate schedule and the Adam step.

use super::{ModelConfig, ModelError, TransformerParams, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::tensor::Scalar;

/// Linear warmup followed by inverse-square-root decay:
/// `base_lr * min(step/warmup, sqrt(warmup/step))`, step >= 1.
pub fn lr_at(step: u64, cfg: &ModelConfig) -> f64 {
    assert!(step >= 1, "steps are 1-based");
    let s = step as f64;
    let w = cfg.warmup as f64;
    cfg.base_lr * (s / w).min((w / s).sqrt())
}

/// First and second Adam moments, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments<F> {
    pub m: TransformerParams<F>,
    pub v: TransformerParams<F>,
}

impl<F: Scalar> AdamMoments<F> {
    pub fn zeros(cfg: &ModelConfig) -> AdamMoments<F> {
        AdamMoments {
            m: TransformerParams::zeros(cfg),
            v: TransformerParams::zeros(cfg),
        }
    }
}

/// One Adam update with bias correction; `step` is 1-based and shared with
/// [`lr_at`]. Fails if any updated parameter stops being finite.
pub fn adam_step<F: Scalar>(
    params: &mut TransformerParams<F>,
    grads: &mut TransformerParams<F>,
    moments: &mut AdamMoments<F>,
    step: u64,
    cfg: &ModelConfig,
) -> Result<(), ModelError> {
    let lr = lr_at(step, cfg);
    let b1 = F::cast(ADAM_BETA1);
    let b2 = F::cast(ADAM_BETA2);
    let one = F::one();
    let eps = F::cast(ADAM_EPS);
    let corr1 = F::cast(1.0 - ADAM_BETA1.powi(step as i32));
    let corr2 = F::cast(1.0 - ADAM_BETA2.powi(step as i32));
    let lr_f = F::cast(lr);

    let p_views = params.flat_views_mut();
    let g_views = grads.flat_views_mut();
    let m_views = moments.m.flat_views_mut();
    let v_views = moments.v.flat_views_mut();
    for (((pv, gv), mv), vv) in p_views.into_iter().zip(g_views).zip(m_views).zip(v_views) {
        debug_assert_eq!(pv.0, gv.0);
        let (name, p) = pv;
        let g = gv.1;
        let m = mv.1;
        let v = vv.1;
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            p[i] = p[i] - lr_f * m_hat / (v_hat.sqrt() + eps);
            if !p[i].is_finite() {
                return Err(ModelError::NonFinite { layer: name });
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_hits_declared_points() {
        let cfg = ModelConfig::paper_default(0);
        assert!((lr_at(4000, &cfg) - 1e-4).abs() < 1e-18);
        assert!((lr_at(1000, &cfg) - 2.5e-5).abs() < 1e-18);
        assert!((lr_at(16000, &cfg) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let cfg = ModelConfig::tiny(4);
        let mut p: TransformerParams<f32> = TransformerParams::init(&cfg);
        let before = p.clone();
        let mut g: TransformerParams<f32> = TransformerParams::zeros(&cfg);
        let mut moments = AdamMoments::zeros(&cfg);
        adam_step(&mut p, &mut g, &mut moments, 1, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn unit_gradient_first_step_moves_by_lr() {
        // bias-corrected m_hat / sqrt(v_hat) equals 1 at step 1 for g = 1
        let cfg = ModelConfig::tiny(4);
        let mut p: TransformerParams<f64> = TransformerParams::zeros(&cfg);
        let mut g: TransformerParams<f64> = TransformerParams::zeros(&cfg);
        for (_, gv) in g.flat_views_mut() {
            gv.fill(1.0);
        }
        let mut moments = AdamMoments::zeros(&cfg);
        adam_step(&mut p, &mut g, &mut moments, 1, &cfg).unwrap();
        let lr = lr_at(1, &cfg);
        for (name, pv) in p.flat_views_mut() {
            for &x in pv.iter() {
                assert!((x + lr / (1.0 + ADAM_EPS)).abs() < 1e-15, "{name}: {x} vs {lr}");
            }
        }
    }
}
