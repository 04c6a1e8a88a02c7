//! Error predicates over reference/hypothesis pairs, bucketed aggregation
//! and padding-length distributions.
//!
//! A target splits into the result segment `R` (before the first token in
//! {c, d}) and the padding segment `P` (the rest). The seven indicators
//! compare the reference split `(R, P)` against the hypothesis split
//! `(R~, P~)`; the simple variant uses only the four result indicators with
//! the whole sequence as `R`.

use crate::taskgen::{LengthRange, TaskKind, Variant, VariantKind};
use crate::vocab::Token;
use std::collections::BTreeMap;
use thiserror::Error;

/// Result/padding split of a target-side sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentedTarget {
    pub result: Vec<Token>,
    pub padding: Vec<Token>,
}

/// Splits at the first token in {c, d}; everything from that token on is
/// padding. A sequence without padding tokens has an empty `padding`.
pub fn split_segments(seq: &[Token]) -> SegmentedTarget {
    let cut = seq.iter().position(|t| t.is_padding()).unwrap_or(seq.len());
    SegmentedTarget {
        result: seq[..cut].to_vec(),
        padding: seq[cut..].to_vec(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IndicatorId {
    ResultAny,
    ResultShort,
    ResultLong,
    ResultPrefix,
    PaddingPattern,
    PaddingShort,
    PaddingLong,
}

impl IndicatorId {
    pub const ALL: [IndicatorId; 7] = [
        IndicatorId::ResultAny,
        IndicatorId::ResultShort,
        IndicatorId::ResultLong,
        IndicatorId::ResultPrefix,
        IndicatorId::PaddingPattern,
        IndicatorId::PaddingShort,
        IndicatorId::PaddingLong,
    ];

    pub const RESULT_ONLY: [IndicatorId; 4] = [
        IndicatorId::ResultAny,
        IndicatorId::ResultShort,
        IndicatorId::ResultLong,
        IndicatorId::ResultPrefix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IndicatorId::ResultAny => "result_any",
            IndicatorId::ResultShort => "result_short",
            IndicatorId::ResultLong => "result_long",
            IndicatorId::ResultPrefix => "result_prefix",
            IndicatorId::PaddingPattern => "padding_pattern",
            IndicatorId::PaddingShort => "padding_short",
            IndicatorId::PaddingLong => "padding_long",
        }
    }

    pub fn parse(text: &str) -> Option<IndicatorId> {
        IndicatorId::ALL.iter().copied().find(|i| i.name() == text)
    }

    /// The indicators evaluated for a variant.
    pub fn for_variant(variant: VariantKind) -> &'static [IndicatorId] {
        match variant {
            VariantKind::Simple => &IndicatorId::RESULT_ONLY,
            VariantKind::Padded => &IndicatorId::ALL,
        }
    }
}

/// Padding-side indicators; present only for the padded variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PaddingIndicators {
    pub pattern: bool,
    pub short: bool,
    pub long: bool,
}

/// The per-pair error bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndicatorVector {
    pub result_any: bool,
    pub result_short: bool,
    pub result_long: bool,
    pub result_prefix: bool,
    pub padding: Option<PaddingIndicators>,
}

impl IndicatorVector {
    pub fn get(&self, id: IndicatorId) -> Option<bool> {
        match id {
            IndicatorId::ResultAny => Some(self.result_any),
            IndicatorId::ResultShort => Some(self.result_short),
            IndicatorId::ResultLong => Some(self.result_long),
            IndicatorId::ResultPrefix => Some(self.result_prefix),
            IndicatorId::PaddingPattern => self.padding.map(|p| p.pattern),
            IndicatorId::PaddingShort => self.padding.map(|p| p.short),
            IndicatorId::PaddingLong => self.padding.map(|p| p.long),
        }
    }

    pub fn all_zero(&self) -> bool {
        IndicatorId::ALL.iter().all(|id| self.get(*id) != Some(true))
    }
}

fn is_prefix(shorter: &[Token], longer: &[Token]) -> bool {
    shorter.len() <= longer.len() && shorter == &longer[..shorter.len()]
}

/// P matches the padding language `c d^*`; the empty string does not.
fn padding_pattern_ok(p: &[Token]) -> bool {
    match p.split_first() {
        Some((first, rest)) => *first == Token::C && rest.iter().all(|t| *t == Token::D),
        None => false,
    }
}

/// Evaluates the error predicates for one reference/hypothesis pair. The
/// hypothesis is expected EOS-stripped (decoding already strips it).
pub fn eval_predicates(reference: &[Token], hypothesis: &[Token], variant: VariantKind) -> IndicatorVector {
    let (r_ref, r_hyp, padding) = match variant {
        VariantKind::Simple => (reference.to_vec(), hypothesis.to_vec(), None),
        VariantKind::Padded => {
            let sref = split_segments(reference);
            let shyp = split_segments(hypothesis);
            let pad = PaddingIndicators {
                pattern: !padding_pattern_ok(&shyp.padding),
                short: hypothesis.len() < reference.len(),
                long: hypothesis.len() > reference.len(),
            };
            (sref.result, shyp.result, Some(pad))
        }
    };
    IndicatorVector {
        result_any: r_hyp != r_ref,
        result_short: r_hyp.len() < r_ref.len(),
        result_long: r_hyp.len() > r_ref.len(),
        result_prefix: !(is_prefix(&r_hyp, &r_ref) || is_prefix(&r_ref, &r_hyp)),
        padding,
    }
}

/// Identifies one aggregation group; bucket means are computed within it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AggregateKey {
    pub task: TaskKind,
    pub variant: VariantKind,
    pub epoch: usize,
}

/// Per-bucket means of the indicators for one (task, variant, epoch).
#[derive(Clone, Debug, PartialEq)]
pub struct BucketAggregate {
    pub task: TaskKind,
    pub variant: VariantKind,
    pub epoch: usize,
    pub bucket: LengthRange,
    pub n_examples: usize,
    /// One entry per indicator of the variant; `None` when the bucket is
    /// empty.
    pub means: Vec<(IndicatorId, Option<f64>)>,
}

#[derive(Debug, Error, PartialEq)]
pub enum IndicatorError {
    #[error("buckets ({0},{1}] and ({2},{3}] overlap")]
    OverlappingBuckets(usize, usize, usize, usize),
    #[error("argument length {0} falls in no bucket")]
    UnbucketedLength(usize),
    #[error("padding histogram requires the padded variant")]
    UnsupportedVariant,
}

/// Buckets records by argument length and averages each indicator.
pub fn aggregate(
    key: &AggregateKey,
    records: &[(usize, IndicatorVector)],
    buckets: &[LengthRange],
) -> Result<Vec<BucketAggregate>, IndicatorError> {
    for (i, a) in buckets.iter().enumerate() {
        for b in &buckets[i + 1..] {
            if a.lo < b.hi && b.lo < a.hi {
                return Err(IndicatorError::OverlappingBuckets(a.lo, a.hi, b.lo, b.hi));
            }
        }
    }
    let ids = IndicatorId::for_variant(key.variant);
    let mut sums: Vec<Vec<u64>> = vec![vec![0; ids.len()]; buckets.len()];
    let mut counts: Vec<usize> = vec![0; buckets.len()];
    for (arg_len, vector) in records {
        let slot = buckets
            .iter()
            .position(|b| b.contains(*arg_len))
            .ok_or(IndicatorError::UnbucketedLength(*arg_len))?;
        counts[slot] += 1;
        for (j, id) in ids.iter().enumerate() {
            if vector.get(*id) == Some(true) {
                sums[slot][j] += 1;
            }
        }
    }
    Ok(buckets
        .iter()
        .enumerate()
        .map(|(slot, bucket)| BucketAggregate {
            task: key.task,
            variant: key.variant,
            epoch: key.epoch,
            bucket: *bucket,
            n_examples: counts[slot],
            means: ids
                .iter()
                .enumerate()
                .map(|(j, id)| {
                    let mean = if counts[slot] == 0 {
                        None
                    } else {
                        Some(sums[slot][j] as f64 / counts[slot] as f64)
                    };
                    (*id, mean)
                })
                .collect(),
        })
        .collect())
}

/// Padding-length distributions: hypothesis and reference counts plus the
/// analytic training prior (expected counts at the same total).
#[derive(Clone, Debug, PartialEq)]
pub struct PaddingHistogram {
    pub hypothesis: BTreeMap<usize, usize>,
    pub reference: BTreeMap<usize, usize>,
    pub prior: BTreeMap<usize, f64>,
}

/// Builds the three padding-length series for a padded run. `pairs` holds
/// (reference, hypothesis) target sequences; the prior is derived from the
/// training range: argument length uniform on `(lo, hi]` makes the padding
/// length uniform on `[total - hi, total - lo)`.
pub fn padding_histogram(
    pairs: &[(&[Token], &[Token])],
    variant: Variant,
    train_range: LengthRange,
) -> Result<PaddingHistogram, IndicatorError> {
    let total_len = match variant {
        Variant::Padded { total_len } => total_len,
        Variant::Simple => return Err(IndicatorError::UnsupportedVariant),
    };
    let mut hypothesis = BTreeMap::new();
    let mut reference = BTreeMap::new();
    for (r, h) in pairs {
        *hypothesis.entry(split_segments(h).padding.len()).or_insert(0) += 1;
        *reference.entry(split_segments(r).padding.len()).or_insert(0) += 1;
    }
    let span = train_range.hi - train_range.lo;
    let expected = pairs.len() as f64 / span as f64;
    let prior = (total_len - train_range.hi..total_len - train_range.lo)
        .map(|len| (len, expected))
        .collect();
    Ok(PaddingHistogram {
        hypothesis,
        reference,
        prior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::compact_to_seq;

    fn toks(text: &str) -> Vec<Token> {
        compact_to_seq(text).unwrap()
    }

    #[test]
    fn split_at_first_padding_token() {
        let s = split_segments(&toks("aabbacdd"));
        assert_eq!(s.result, toks("aabba"));
        assert_eq!(s.padding, toks("cdd"));

        let s = split_segments(&toks("abab"));
        assert_eq!(s.result, toks("abab"));
        assert!(s.padding.is_empty());

        let s = split_segments(&toks("abdca"));
        assert_eq!(s.result, toks("ab"));
        assert_eq!(s.padding, toks("dca"));
    }

    #[test]
    fn padded_example_from_segment_rules() {
        let mut reference = toks("aabba");
        reference.push(Token::C);
        reference.extend(std::iter::repeat(Token::D).take(64));
        let mut hypothesis = toks("aaba");
        hypothesis.push(Token::C);
        hypothesis.extend(std::iter::repeat(Token::D).take(63));

        let v = eval_predicates(&reference, &hypothesis, VariantKind::Padded);
        assert!(v.result_any);
        assert!(v.result_short);
        assert!(!v.result_long);
        assert!(v.result_prefix);
        let p = v.padding.unwrap();
        assert!(!p.pattern);
        assert!(p.short);
        assert!(!p.long);
    }

    #[test]
    fn exact_match_is_all_zero() {
        let mut reference = toks("abba");
        reference.push(Token::C);
        reference.extend(std::iter::repeat(Token::D).take(5));
        let v = eval_predicates(&reference, &reference, VariantKind::Padded);
        assert!(v.all_zero());

        let v = eval_predicates(&toks("abba"), &toks("abba"), VariantKind::Simple);
        assert!(v.all_zero());
        assert!(v.padding.is_none());
    }

    #[test]
    fn long_hypothesis_with_reference_prefix() {
        let v = eval_predicates(&toks("ab"), &toks("abab"), VariantKind::Simple);
        assert!(v.result_any);
        assert!(v.result_long);
        assert!(!v.result_prefix);
    }

    #[test]
    fn empty_hypothesis_padding_fails_pattern() {
        let mut reference = toks("ab");
        reference.push(Token::C);
        reference.push(Token::D);
        let v = eval_predicates(&reference, &toks("ab"), VariantKind::Padded);
        assert!(v.padding.unwrap().pattern);
    }

    #[test]
    fn aggregate_means_and_bucketing() {
        let key = AggregateKey {
            task: TaskKind::Copy,
            variant: VariantKind::Simple,
            epoch: 40,
        };
        let one = eval_predicates(&toks("ab"), &toks("aa"), VariantKind::Simple);
        let zero = eval_predicates(&toks("ab"), &toks("ab"), VariantKind::Simple);
        let buckets = [LengthRange::new(20, 30).unwrap(), LengthRange::new(30, 40).unwrap()];
        let records = vec![(25, one), (25, zero), (25, one), (31, zero)];
        let aggs = aggregate(&key, &records, &buckets).unwrap();
        assert_eq!(aggs.len(), 2);
        assert_eq!(aggs[0].n_examples, 3);
        let any = aggs[0].means.iter().find(|(id, _)| *id == IndicatorId::ResultAny).unwrap();
        assert!((any.1.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        // 31 goes to (30,40] under the half-open-left convention
        assert_eq!(aggs[1].n_examples, 1);
        // simple variant carries only the four result indicators
        assert_eq!(aggs[0].means.len(), 4);
    }

    #[test]
    fn aggregate_rejects_overlap_and_stray_lengths() {
        let key = AggregateKey {
            task: TaskKind::Copy,
            variant: VariantKind::Simple,
            epoch: 0,
        };
        let buckets = [LengthRange::new(0, 10).unwrap(), LengthRange::new(5, 15).unwrap()];
        assert!(matches!(
            aggregate(&key, &[], &buckets),
            Err(IndicatorError::OverlappingBuckets(..))
        ));
        let buckets = [LengthRange::new(0, 10).unwrap()];
        let v = eval_predicates(&toks("a"), &toks("a"), VariantKind::Simple);
        assert_eq!(
            aggregate(&key, &[(11, v)], &buckets),
            Err(IndicatorError::UnbucketedLength(11))
        );
    }

    #[test]
    fn empty_bucket_has_absent_means() {
        let key = AggregateKey {
            task: TaskKind::Flip,
            variant: VariantKind::Padded,
            epoch: 20,
        };
        let buckets = [LengthRange::new(0, 10).unwrap()];
        let aggs = aggregate(&key, &[], &buckets).unwrap();
        assert_eq!(aggs[0].n_examples, 0);
        assert!(aggs[0].means.iter().all(|(_, m)| m.is_none()));
        assert_eq!(aggs[0].means.len(), 7);
    }

    #[test]
    fn histogram_prior_and_counts() {
        let variant = Variant::Padded { total_len: 70 };
        let train = LengthRange::new(30, 40).unwrap();
        let reference: Vec<Token> = {
            let mut r = toks("ab");
            r.push(Token::C);
            r.extend(std::iter::repeat(Token::D).take(3));
            r
        };
        let pairs: Vec<(&[Token], &[Token])> = vec![(&reference, &reference)];
        let h = padding_histogram(&pairs, variant, train).unwrap();
        assert_eq!(h.hypothesis, h.reference);
        assert_eq!(h.hypothesis.get(&4), Some(&1));
        let lens: Vec<usize> = h.prior.keys().copied().collect();
        assert_eq!(lens, (30..40).collect::<Vec<_>>());
        assert!((h.prior[&30] - 0.1).abs() < 1e-12);

        let empty_pad = toks("ab");
        let pairs: Vec<(&[Token], &[Token])> = vec![(&reference, &empty_pad)];
        let h = padding_histogram(&pairs, variant, train).unwrap();
        assert_eq!(h.hypothesis.get(&0), Some(&1));

        assert_eq!(
            padding_histogram(&pairs, Variant::Simple, train),
            Err(IndicatorError::UnsupportedVariant)
        );
    }
}
