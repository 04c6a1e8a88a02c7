//! The trainable minimal encoder-decoder transformer: one post-layer-norm
//! block on each side, one attention head, sinusoidal positions, ReLU
//! feed-forward, untied input/output embeddings, BOS-shifted teacher
//! forcing and label-smoothed cross-entropy.
//!
//! All math is generic over the scalar: training runs in f32, the
//! finite-difference gradient oracle runs the same code in f64.

mod backward;
mod decode;
mod forward;
mod gradcheck;
mod optim;
mod train;

pub use backward::backward;
pub use decode::{greedy_decode, DecodeOptions, Hypothesis};
pub use forward::{forward_loss, Batch};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use optim::{adam_step, lr_at, AdamMoments};
pub use train::{plan_batches, train, Checkpoint, TrainOptions, TrainOutcome};

use crate::rng::{substream, uniform01};
use crate::tensor::{Mat, Scalar};
use crate::tensorfile::TensorFileError;
use crate::vocab::{Token, VOCAB_SIZE};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Adam hyperparameters and numeric constants fixed for this model family.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite values in {layer}")]
    NonFinite { layer: &'static str },
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("tensor file: {0}")]
    TensorFile(#[from] TensorFileError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Hyperparameters of the model and its training run.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub base_lr: f64,
    pub warmup: u64,
    pub max_tokens_per_batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-scale configuration (the published hyperparameter table).
    pub fn paper_default(seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: 128,
            d_ff: 512,
            heads: 1,
            dropout: 0.2,
            label_smoothing: 0.1,
            base_lr: 1e-4,
            warmup: 4000,
            max_tokens_per_batch: 4096,
            epochs: 400,
            seed,
        }
    }

    /// Desk-scale preset: small enough to train on a commodity CPU while
    /// still exhibiting the length cliff.
    pub fn desk(seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: 64,
            d_ff: 256,
            heads: 1,
            dropout: 0.2,
            label_smoothing: 0.1,
            base_lr: 1e-3,
            warmup: 800,
            max_tokens_per_batch: 4096,
            epochs: 80,
            seed,
        }
    }

    /// Tiny configuration for gradient checking (dropout off).
    pub fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_ff: 16,
            heads: 1,
            dropout: 0.0,
            label_smoothing: 0.1,
            base_lr: 1e-3,
            warmup: 10,
            max_tokens_per_batch: 4096,
            epochs: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads != 1 {
            return Err(ModelError::BadConfig(format!(
                "this model is single-head; got heads = {}",
                self.heads
            )));
        }
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        for (name, rate) in [("dropout", self.dropout), ("label_smoothing", self.label_smoothing)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(ModelError::BadConfig(format!("{name} {rate} outside [0, 1)")));
            }
        }
        if self.max_tokens_per_batch == 0 || self.warmup == 0 {
            return Err(ModelError::BadConfig(
                "max_tokens_per_batch and warmup must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Stable hash of every config field, recorded in checkpoints.
    pub fn fingerprint(&self) -> String {
        let canon = format!(
            "d_model={};d_ff={};heads={};dropout={:?};label_smoothing={:?};base_lr={:?};warmup={};max_tokens_per_batch={};epochs={};seed={}",
            self.d_model,
            self.d_ff,
            self.heads,
            self.dropout,
            self.label_smoothing,
            self.base_lr,
            self.warmup,
            self.max_tokens_per_batch,
            self.epochs,
            self.seed
        );
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams<F> {
    pub wq: Mat<F>,
    pub wk: Mat<F>,
    pub wv: Mat<F>,
    pub wo: Mat<F>,
    pub bq: Vec<F>,
    pub bk: Vec<F>,
    pub bv: Vec<F>,
    pub bo: Vec<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LnParams<F> {
    pub gain: Vec<F>,
    pub bias: Vec<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfParams<F> {
    pub w1: Mat<F>,
    pub b1: Vec<F>,
    pub w2: Mat<F>,
    pub b2: Vec<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<F> {
    pub attn: AttnParams<F>,
    pub ln1: LnParams<F>,
    pub ff: FfParams<F>,
    pub ln2: LnParams<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<F> {
    pub self_attn: AttnParams<F>,
    pub ln1: LnParams<F>,
    pub cross_attn: AttnParams<F>,
    pub ln2: LnParams<F>,
    pub ff: FfParams<F>,
    pub ln3: LnParams<F>,
}

/// Every learnable weight. The same struct doubles as the container for
/// gradients and Adam moments (identical shapes).
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams<F> {
    pub emb: Mat<F>,
    pub enc: EncoderLayer<F>,
    pub dec: DecoderLayer<F>,
    pub out_w: Mat<F>,
}

// One canonical tensor list; parameters, gradients, Adam moments and
// checkpoint files all share this order.
macro_rules! tensor_entries {
    ($p:expr, $wrap:expr) => {
        vec![
            ("emb", $wrap(&mut $p.emb.data)),
            ("enc.sa.wq", $wrap(&mut $p.enc.attn.wq.data)),
            ("enc.sa.wk", $wrap(&mut $p.enc.attn.wk.data)),
            ("enc.sa.wv", $wrap(&mut $p.enc.attn.wv.data)),
            ("enc.sa.wo", $wrap(&mut $p.enc.attn.wo.data)),
            ("enc.sa.bq", $wrap(&mut $p.enc.attn.bq)),
            ("enc.sa.bk", $wrap(&mut $p.enc.attn.bk)),
            ("enc.sa.bv", $wrap(&mut $p.enc.attn.bv)),
            ("enc.sa.bo", $wrap(&mut $p.enc.attn.bo)),
            ("enc.ln1.g", $wrap(&mut $p.enc.ln1.gain)),
            ("enc.ln1.b", $wrap(&mut $p.enc.ln1.bias)),
            ("enc.ff.w1", $wrap(&mut $p.enc.ff.w1.data)),
            ("enc.ff.b1", $wrap(&mut $p.enc.ff.b1)),
            ("enc.ff.w2", $wrap(&mut $p.enc.ff.w2.data)),
            ("enc.ff.b2", $wrap(&mut $p.enc.ff.b2)),
            ("enc.ln2.g", $wrap(&mut $p.enc.ln2.gain)),
            ("enc.ln2.b", $wrap(&mut $p.enc.ln2.bias)),
            ("dec.sa.wq", $wrap(&mut $p.dec.self_attn.wq.data)),
            ("dec.sa.wk", $wrap(&mut $p.dec.self_attn.wk.data)),
            ("dec.sa.wv", $wrap(&mut $p.dec.self_attn.wv.data)),
            ("dec.sa.wo", $wrap(&mut $p.dec.self_attn.wo.data)),
            ("dec.sa.bq", $wrap(&mut $p.dec.self_attn.bq)),
            ("dec.sa.bk", $wrap(&mut $p.dec.self_attn.bk)),
            ("dec.sa.bv", $wrap(&mut $p.dec.self_attn.bv)),
            ("dec.sa.bo", $wrap(&mut $p.dec.self_attn.bo)),
            ("dec.ln1.g", $wrap(&mut $p.dec.ln1.gain)),
            ("dec.ln1.b", $wrap(&mut $p.dec.ln1.bias)),
            ("dec.ca.wq", $wrap(&mut $p.dec.cross_attn.wq.data)),
            ("dec.ca.wk", $wrap(&mut $p.dec.cross_attn.wk.data)),
            ("dec.ca.wv", $wrap(&mut $p.dec.cross_attn.wv.data)),
            ("dec.ca.wo", $wrap(&mut $p.dec.cross_attn.wo.data)),
            ("dec.ca.bq", $wrap(&mut $p.dec.cross_attn.bq)),
            ("dec.ca.bk", $wrap(&mut $p.dec.cross_attn.bk)),
            ("dec.ca.bv", $wrap(&mut $p.dec.cross_attn.bv)),
            ("dec.ca.bo", $wrap(&mut $p.dec.cross_attn.bo)),
            ("dec.ln2.g", $wrap(&mut $p.dec.ln2.gain)),
            ("dec.ln2.b", $wrap(&mut $p.dec.ln2.bias)),
            ("dec.ff.w1", $wrap(&mut $p.dec.ff.w1.data)),
            ("dec.ff.b1", $wrap(&mut $p.dec.ff.b1)),
            ("dec.ff.w2", $wrap(&mut $p.dec.ff.w2.data)),
            ("dec.ff.b2", $wrap(&mut $p.dec.ff.b2)),
            ("dec.ln3.g", $wrap(&mut $p.dec.ln3.gain)),
            ("dec.ln3.b", $wrap(&mut $p.dec.ln3.bias)),
            ("out_w", $wrap(&mut $p.out_w.data)),
        ]
    };
}

fn attn_zeros<F: Scalar>(d: usize) -> AttnParams<F> {
    AttnParams {
        wq: Mat::zeros(d, d),
        wk: Mat::zeros(d, d),
        wv: Mat::zeros(d, d),
        wo: Mat::zeros(d, d),
        bq: vec![F::zero(); d],
        bk: vec![F::zero(); d],
        bv: vec![F::zero(); d],
        bo: vec![F::zero(); d],
    }
}

fn ln_zeros<F: Scalar>(d: usize) -> LnParams<F> {
    LnParams {
        gain: vec![F::zero(); d],
        bias: vec![F::zero(); d],
    }
}

fn ff_zeros<F: Scalar>(d: usize, f: usize) -> FfParams<F> {
    FfParams {
        w1: Mat::zeros(d, f),
        b1: vec![F::zero(); f],
        w2: Mat::zeros(f, d),
        b2: vec![F::zero(); d],
    }
}

impl<F: Scalar> TransformerParams<F> {
    /// All-zero parameter container (gradients, moments).
    pub fn zeros(cfg: &ModelConfig) -> TransformerParams<F> {
        let d = cfg.d_model;
        let f = cfg.d_ff;
        TransformerParams {
            emb: Mat::zeros(VOCAB_SIZE, d),
            enc: EncoderLayer {
                attn: attn_zeros(d),
                ln1: ln_zeros(d),
                ff: ff_zeros(d, f),
                ln2: ln_zeros(d),
            },
            dec: DecoderLayer {
                self_attn: attn_zeros(d),
                ln1: ln_zeros(d),
                cross_attn: attn_zeros(d),
                ln2: ln_zeros(d),
                ff: ff_zeros(d, f),
                ln3: ln_zeros(d),
            },
            out_w: Mat::zeros(d, VOCAB_SIZE),
        }
    }

    /// Xavier-uniform init: weights uniform over
    /// `(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))`, biases 0,
    /// layer-norm gain 1 / bias 0, PAD embedding row zeroed. Deterministic
    /// per `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> TransformerParams<F> {
        let mut rng = substream(cfg.seed, "init");
        let mut params = TransformerParams::zeros(cfg);
        let mut fill = |m: &mut Mat<F>| {
            let a = (6.0 / (m.rows + m.cols) as f64).sqrt();
            for x in m.data.iter_mut() {
                *x = F::cast(a * (2.0 * uniform01(&mut rng) - 1.0));
            }
        };
        fill(&mut params.emb);
        for attn in [&mut params.enc.attn, &mut params.dec.self_attn, &mut params.dec.cross_attn] {
            fill(&mut attn.wq);
            fill(&mut attn.wk);
            fill(&mut attn.wv);
            fill(&mut attn.wo);
        }
        for ff in [&mut params.enc.ff, &mut params.dec.ff] {
            fill(&mut ff.w1);
            fill(&mut ff.w2);
        }
        fill(&mut params.out_w);
        for ln in [
            &mut params.enc.ln1,
            &mut params.enc.ln2,
            &mut params.dec.ln1,
            &mut params.dec.ln2,
            &mut params.dec.ln3,
        ] {
            ln.gain.fill(F::one());
            ln.bias.fill(F::zero());
        }
        // PAD embedding row is all zeros and stays frozen.
        params.emb.row_mut(Token::Pad.id()).fill(F::zero());
        params
    }

    /// Flat named mutable views over every tensor, in the canonical order.
    pub fn flat_views_mut(&mut self) -> Vec<(&'static str, &mut [F])> {
        fn as_mut<F>(xs: &mut Vec<F>) -> &mut [F] {
            xs.as_mut_slice()
        }
        tensor_entries!(self, as_mut)
    }

    /// Shapes keyed by tensor name, canonical order.
    pub fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let d = self.emb.cols;
        let f = self.enc.ff.b1.len();
        let v = self.emb.rows;
        let shape_of = |name: &str| -> Vec<usize> {
            let leaf = name.rsplit('.').next().unwrap();
            match (name, leaf) {
                ("emb", _) => vec![v, d],
                ("out_w", _) => vec![d, VOCAB_SIZE],
                (_, "wq") | (_, "wk") | (_, "wv") | (_, "wo") => vec![d, d],
                (_, "w1") => vec![d, f],
                (_, "w2") => vec![f, d],
                (_, "b1") => vec![f],
                _ => vec![d],
            }
        };
        let mut clone = self.clone();
        clone
            .flat_views_mut()
            .iter()
            .map(|(name, _)| (*name, shape_of(name)))
            .collect()
    }

    pub fn is_finite(&mut self) -> bool {
        self.flat_views_mut()
            .iter()
            .all(|(_, xs)| xs.iter().all(|x| x.is_finite()))
    }

    pub fn param_count(&mut self) -> usize {
        self.flat_views_mut().iter().map(|(_, xs)| xs.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = ModelConfig::tiny(9);
        let a: TransformerParams<f32> = TransformerParams::init(&cfg);
        let b: TransformerParams<f32> = TransformerParams::init(&cfg);
        assert_eq!(a, b);
        let c: TransformerParams<f32> = TransformerParams::init(&ModelConfig::tiny(10));
        assert_ne!(a, c);
        assert_eq!(a.emb.rows, VOCAB_SIZE);
        assert_eq!(a.emb.cols, 8);
    }

    #[test]
    fn layernorm_gains_start_at_one_and_pad_row_is_zero() {
        let cfg = ModelConfig::tiny(1);
        let p: TransformerParams<f64> = TransformerParams::init(&cfg);
        assert!(p.enc.ln1.gain.iter().all(|&g| g == 1.0));
        assert!(p.dec.ln3.gain.iter().all(|&g| g == 1.0));
        assert!(p.enc.ln1.bias.iter().all(|&b| b == 0.0));
        assert!(p.emb.row(Token::Pad.id()).iter().all(|&x| x == 0.0));
        // non-PAD rows are not all zero
        assert!(p.emb.row(Token::A.id()).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn flat_views_are_unique_and_complete() {
        let cfg = ModelConfig::tiny(2);
        let mut p: TransformerParams<f32> = TransformerParams::init(&cfg);
        let names: Vec<&str> = p.flat_views_mut().iter().map(|(n, _)| *n).collect();
        let mut unique = names.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), names.len());
        assert_eq!(names.len(), 44);
        let shapes = p.shapes();
        assert_eq!(shapes.len(), names.len());
        for ((n1, xs), (n2, shape)) in p.flat_views_mut().iter().zip(&shapes) {
            assert_eq!(n1, n2);
            assert_eq!(xs.len(), shape.iter().product::<usize>(), "shape of {n1}");
        }
    }

    #[test]
    fn fingerprint_changes_with_config() {
        let a = ModelConfig::desk(1).fingerprint();
        let b = ModelConfig::desk(2).fingerprint();
        let mut cfg = ModelConfig::desk(1);
        cfg.base_lr *= 2.0;
        let c = cfg.fingerprint();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, ModelConfig::desk(1).fingerprint());
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut cfg = ModelConfig::desk(1);
        cfg.heads = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(1);
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::desk(1).validate().is_ok());
    }
}
