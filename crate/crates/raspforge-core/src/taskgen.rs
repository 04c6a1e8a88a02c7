//! Deterministic dataset generation for the copy / flip / reverse tasks in
//! their simple and padded variants.
//!
//! Sources follow the fixed shape `<task> - - | <argument> [<padding>]` and
//! targets are the transformed argument with identical padding. Every
//! generated pair is cross-checked against the RASP oracle before it is
//! emitted.

use crate::rasp::{self, RaspProgram};
use crate::rng::{shuffle, substream, uniform_range};
use crate::vocab::{line_to_seq, seq_to_line, Token, VocabError};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

/// Default fixed total length for the padded variant.
pub const DEFAULT_TOTAL_LEN: usize = 70;

/// Number of tokens in the instruction segment `<task> - - |`.
pub const INSTRUCTION_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Flip,
    Reverse,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Copy, TaskKind::Flip, TaskKind::Reverse];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Flip => "flip",
            TaskKind::Reverse => "reverse",
        }
    }

    pub fn token(self) -> Token {
        match self {
            TaskKind::Copy => Token::Copy,
            TaskKind::Flip => Token::Flip,
            TaskKind::Reverse => Token::Reverse,
        }
    }

    pub fn parse(text: &str) -> Option<TaskKind> {
        TaskKind::ALL.iter().copied().find(|k| k.name() == text)
    }

    pub fn from_token(tok: Token) -> Option<TaskKind> {
        TaskKind::ALL.iter().copied().find(|k| k.token() == tok)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Simple (bare) or padded to a fixed total length with `c d^*`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Simple,
    Padded { total_len: usize },
}

/// Variant discriminant without parameters, used by the indicator layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Simple,
    Padded,
}

impl Variant {
    pub fn kind(self) -> VariantKind {
        match self {
            Variant::Simple => VariantKind::Simple,
            Variant::Padded { .. } => VariantKind::Padded,
        }
    }

    pub fn total_len(self) -> Option<usize> {
        match self {
            Variant::Simple => None,
            Variant::Padded { total_len } => Some(total_len),
        }
    }
}

impl VariantKind {
    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Simple => "simple",
            VariantKind::Padded => "padded",
        }
    }
}

/// Half-open-left length interval `(lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LengthRange {
    pub lo: usize,
    pub hi: usize,
}

impl LengthRange {
    pub fn new(lo: usize, hi: usize) -> Result<LengthRange, TaskGenError> {
        if lo >= hi {
            return Err(TaskGenError::BadRange { lo, hi });
        }
        Ok(LengthRange { lo, hi })
    }

    pub fn contains(&self, len: usize) -> bool {
        self.lo < len && len <= self.hi
    }

    pub fn label(&self) -> String {
        format!("({},{}]", self.lo, self.hi)
    }
}

/// One source/target pair plus the argument length it was built from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExamplePair {
    pub source: Vec<Token>,
    pub target: Vec<Token>,
    pub arg_len: usize,
}

impl ExamplePair {
    /// Task kind read back from the instruction token.
    pub fn task(&self) -> Option<TaskKind> {
        self.source.first().and_then(|t| TaskKind::from_token(*t))
    }

    /// Recovers the argument length from a raw source line: the run of
    /// letters after the `|` separator.
    pub fn arg_len_of_source(source: &[Token]) -> usize {
        let start = source
            .iter()
            .position(|t| *t == Token::Pipe)
            .map(|i| i + 1)
            .unwrap_or(0);
        source[start..].iter().take_while(|t| t.is_letter()).count()
    }
}

/// Full description of one dataset: which tasks, which variant, length
/// ranges, sizes and the master seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSpec {
    pub tasks: Vec<TaskKind>,
    pub variant: Variant,
    pub train_range: LengthRange,
    pub train_size: usize,
    pub eval_buckets: Vec<LengthRange>,
    /// Pairs generated per task per bucket.
    pub eval_size_per_bucket: usize,
    pub seed: u64,
}

/// The generated data, eval pairs grouped per bucket (tasks interleaved in
/// task order inside each bucket).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<ExamplePair>,
    pub eval: Vec<(LengthRange, Vec<ExamplePair>)>,
}

#[derive(Debug, Error)]
pub enum TaskGenError {
    #[error("invalid length range ({lo}, {hi}]: lo must be < hi")]
    BadRange { lo: usize, hi: usize },
    #[error("argument token {0:?} outside the alphabet {{a, b}}")]
    InvalidArgument(String),
    #[error("sequence of length {len} does not fit below total length {total}")]
    LengthOverflow { len: usize, total: usize },
    #[error("dataset spec invalid: {0}")]
    BadSpec(String),
    #[error("oracle mismatch for task {task} on argument {arg:?} (internal consistency failure)")]
    OracleMismatch { task: TaskKind, arg: String },
    #[error("rasp oracle failed: {0}")]
    Oracle(#[from] rasp::RaspError),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset file: {0}")]
    Vocab(#[from] VocabError),
    #[error("manifest: {0}")]
    Manifest(String),
}

/// Samples an argument: length uniform over `(lo, hi]`, letters i.i.d.
/// uniform over {a, b}.
pub fn gen_argument(rng: &mut ChaCha8Rng, range: LengthRange) -> Vec<Token> {
    let len = uniform_range(rng, range.lo as u64 + 1, range.hi as u64) as usize;
    (0..len)
        .map(|_| {
            if uniform_range(rng, 0, 1) == 0 {
                Token::A
            } else {
                Token::B
            }
        })
        .collect()
}

/// The pure string function for a task.
pub fn apply_function(kind: TaskKind, arg: &[Token]) -> Result<Vec<Token>, TaskGenError> {
    for t in arg {
        if !t.is_letter() {
            return Err(TaskGenError::InvalidArgument(t.as_str().to_string()));
        }
    }
    Ok(match kind {
        TaskKind::Copy => arg.to_vec(),
        TaskKind::Flip => arg
            .iter()
            .map(|t| if *t == Token::A { Token::B } else { Token::A })
            .collect(),
        TaskKind::Reverse => arg.iter().rev().copied().collect(),
    })
}

/// Appends `c d^*` padding up to `total_len` tokens.
pub fn pad_to(seq: &[Token], total_len: usize) -> Result<Vec<Token>, TaskGenError> {
    if seq.len() >= total_len {
        return Err(TaskGenError::LengthOverflow {
            len: seq.len(),
            total: total_len,
        });
    }
    let mut out = seq.to_vec();
    out.push(Token::C);
    out.resize(total_len, Token::D);
    Ok(out)
}

/// Builds the source/target pair for one argument.
pub fn build_example(kind: TaskKind, variant: Variant, arg: &[Token]) -> Result<ExamplePair, TaskGenError> {
    let result = apply_function(kind, arg)?;
    let mut source = vec![kind.token(), Token::Dash, Token::Dash, Token::Pipe];
    let target;
    match variant {
        Variant::Simple => {
            source.extend_from_slice(arg);
            target = result;
        }
        Variant::Padded { total_len } => {
            source.extend(pad_to(arg, total_len)?);
            target = pad_to(&result, total_len)?;
        }
    }
    Ok(ExamplePair {
        source,
        target,
        arg_len: arg.len(),
    })
}

fn oracle_check(kind: TaskKind, variant: Variant, arg: &[Token], pair: &ExamplePair, prog: &RaspProgram) -> Result<(), TaskGenError> {
    let oracle_out = rasp::run_program(prog, arg)?;
    let expected = match variant {
        Variant::Simple => oracle_out,
        Variant::Padded { total_len } => pad_to(&oracle_out, total_len)?,
    };
    if expected != pair.target {
        return Err(TaskGenError::OracleMismatch {
            task: kind,
            arg: seq_to_line(arg),
        });
    }
    Ok(())
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), TaskGenError> {
        if self.tasks.is_empty() {
            return Err(TaskGenError::BadSpec("no tasks".into()));
        }
        let mut seen = Vec::new();
        for t in &self.tasks {
            if seen.contains(t) {
                return Err(TaskGenError::BadSpec(format!("duplicate task {t}")));
            }
            seen.push(*t);
        }
        LengthRange::new(self.train_range.lo, self.train_range.hi)?;
        for b in &self.eval_buckets {
            LengthRange::new(b.lo, b.hi)?;
        }
        if let Variant::Padded { total_len } = self.variant {
            let max_hi = self
                .eval_buckets
                .iter()
                .map(|b| b.hi)
                .chain([self.train_range.hi])
                .max()
                .unwrap();
            if max_hi >= total_len {
                return Err(TaskGenError::BadSpec(format!(
                    "argument length {max_hi} cannot be padded to total length {total_len}"
                )));
            }
        }
        Ok(())
    }

    /// Train pairs per task: `train_size` split as evenly as possible in
    /// task order.
    pub fn train_shares(&self) -> Vec<usize> {
        let n = self.tasks.len();
        let base = self.train_size / n;
        let extra = self.train_size % n;
        (0..n).map(|i| base + usize::from(i < extra)).collect()
    }
}

/// Generates the full dataset described by `spec`. Train pairs from all
/// tasks are concatenated and shuffled under the dataset seed; eval pairs
/// are kept in bucket/task generation order.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, TaskGenError> {
    spec.validate()?;
    let programs: Vec<&RaspProgram> = spec.tasks.iter().map(|k| rasp::builtin_program(*k)).collect();

    let mut train = Vec::with_capacity(spec.train_size);
    for ((task, share), prog) in spec.tasks.iter().zip(spec.train_shares()).zip(&programs) {
        let mut rng = substream(spec.seed, &format!("train/{}", task.name()));
        for _ in 0..share {
            let arg = gen_argument(&mut rng, spec.train_range);
            let pair = build_example(*task, spec.variant, &arg)?;
            oracle_check(*task, spec.variant, &arg, &pair, prog)?;
            train.push(pair);
        }
    }
    shuffle(&mut substream(spec.seed, "shuffle/train"), &mut train);

    let mut eval = Vec::with_capacity(spec.eval_buckets.len());
    for bucket in &spec.eval_buckets {
        let mut pairs = Vec::with_capacity(spec.eval_size_per_bucket * spec.tasks.len());
        for (task, prog) in spec.tasks.iter().zip(&programs) {
            let tag = format!("eval/{}/{}_{}", task.name(), bucket.lo, bucket.hi);
            let mut rng = substream(spec.seed, &tag);
            for _ in 0..spec.eval_size_per_bucket {
                let arg = gen_argument(&mut rng, *bucket);
                let pair = build_example(*task, spec.variant, &arg)?;
                oracle_check(*task, spec.variant, &arg, &pair, prog)?;
                pairs.push(pair);
            }
        }
        eval.push((*bucket, pairs));
    }

    Ok(Dataset { train, eval })
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

/// Sidecar manifest mirroring the spec fields plus per-split counts.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub variant: VariantKind,
    pub total_len: Option<usize>,
    pub tasks: Vec<TaskKind>,
    pub train_range: [usize; 2],
    pub train_size: usize,
    pub eval_buckets: Vec<[usize; 2]>,
    pub eval_size_per_bucket: usize,
    pub counts: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn for_dataset(spec: &DatasetSpec, ds: &Dataset) -> DatasetManifest {
        let mut counts = BTreeMap::new();
        counts.insert("train".to_string(), ds.train.len());
        for (bucket, pairs) in &ds.eval {
            counts.insert(split_name(bucket), pairs.len());
        }
        DatasetManifest {
            seed: spec.seed,
            variant: spec.variant.kind(),
            total_len: spec.variant.total_len(),
            tasks: spec.tasks.clone(),
            train_range: [spec.train_range.lo, spec.train_range.hi],
            train_size: spec.train_size,
            eval_buckets: spec.eval_buckets.iter().map(|b| [b.lo, b.hi]).collect(),
            eval_size_per_bucket: spec.eval_size_per_bucket,
            counts,
        }
    }
}

/// File stem for an eval bucket, e.g. `eval_20_30`.
pub fn split_name(bucket: &LengthRange) -> String {
    format!("eval_{}_{}", bucket.lo, bucket.hi)
}

fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> std::io::Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    for line in lines {
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
    }
    file.flush()
}

/// Writes one split as `<name>.src` / `<name>.tgt`.
pub fn write_split(dir: &Path, name: &str, pairs: &[ExamplePair]) -> Result<(), TaskGenError> {
    write_lines(&dir.join(format!("{name}.src")), pairs.iter().map(|p| seq_to_line(&p.source)))?;
    write_lines(&dir.join(format!("{name}.tgt")), pairs.iter().map(|p| seq_to_line(&p.target)))?;
    Ok(())
}

/// Writes every split plus `manifest.toml` into `dir`.
pub fn write_dataset(dir: &Path, spec: &DatasetSpec, ds: &Dataset) -> Result<(), TaskGenError> {
    fs::create_dir_all(dir)?;
    write_split(dir, "train", &ds.train)?;
    for (bucket, pairs) in &ds.eval {
        write_split(dir, &split_name(bucket), pairs)?;
    }
    let manifest = DatasetManifest::for_dataset(spec, ds);
    let text = toml::to_string_pretty(&manifest).map_err(|e| TaskGenError::Manifest(e.to_string()))?;
    fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

/// Reads one split back; `arg_len` is recovered from the source shape.
pub fn read_split(dir: &Path, name: &str) -> Result<Vec<ExamplePair>, TaskGenError> {
    let src = fs::read_to_string(dir.join(format!("{name}.src")))?;
    let tgt = fs::read_to_string(dir.join(format!("{name}.tgt")))?;
    let src_lines: Vec<&str> = src.lines().collect();
    let tgt_lines: Vec<&str> = tgt.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(TaskGenError::BadSpec(format!(
            "split {name}: {} source lines vs {} target lines",
            src_lines.len(),
            tgt_lines.len()
        )));
    }
    src_lines
        .iter()
        .zip(&tgt_lines)
        .map(|(s, t)| {
            let source = line_to_seq(s)?;
            let target = line_to_seq(t)?;
            let arg_len = ExamplePair::arg_len_of_source(&source);
            Ok(ExamplePair { source, target, arg_len })
        })
        .collect()
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, TaskGenError> {
    let text = fs::read_to_string(dir.join("manifest.toml"))?;
    toml::from_str(&text).map_err(|e| TaskGenError::Manifest(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::compact_to_seq;

    fn arg(text: &str) -> Vec<Token> {
        compact_to_seq(text).unwrap()
    }

    #[test]
    fn gen_argument_respects_range() {
        let mut rng = substream(11, "t");
        let r = LengthRange::new(0, 1).unwrap();
        for _ in 0..50 {
            let a = gen_argument(&mut rng, r);
            assert_eq!(a.len(), 1);
            assert!(a[0].is_letter());
        }
        let r = LengthRange::new(2, 4).unwrap();
        for _ in 0..200 {
            let a = gen_argument(&mut rng, r);
            assert!(a.len() == 3 || a.len() == 4);
            assert!(a.iter().all(|t| t.is_letter()));
        }
    }

    #[test]
    fn gen_argument_is_deterministic() {
        let r = LengthRange::new(5, 9).unwrap();
        let xs: Vec<_> = {
            let mut rng = substream(3, "s");
            (0..20).map(|_| gen_argument(&mut rng, r)).collect()
        };
        let ys: Vec<_> = {
            let mut rng = substream(3, "s");
            (0..20).map(|_| gen_argument(&mut rng, r)).collect()
        };
        assert_eq!(xs, ys);
    }

    #[test]
    fn apply_function_matches_definitions() {
        assert_eq!(apply_function(TaskKind::Flip, &arg("bbaab")).unwrap(), arg("aabba"));
        assert_eq!(apply_function(TaskKind::Copy, &arg("ab")).unwrap(), arg("ab"));
        assert_eq!(apply_function(TaskKind::Reverse, &arg("aab")).unwrap(), arg("baa"));
        assert!(matches!(
            apply_function(TaskKind::Copy, &[Token::C]),
            Err(TaskGenError::InvalidArgument(_))
        ));
    }

    #[test]
    fn pad_to_layout() {
        let padded = pad_to(&arg("aabba"), 70).unwrap();
        assert_eq!(padded.len(), 70);
        assert_eq!(&padded[..5], arg("aabba").as_slice());
        assert_eq!(padded[5], Token::C);
        assert!(padded[6..].iter().all(|t| *t == Token::D));
        assert_eq!(padded[6..].len(), 64);

        assert_eq!(pad_to(&[], 3).unwrap(), arg("cdd"));
        assert!(matches!(
            pad_to(&arg("ab"), 2),
            Err(TaskGenError::LengthOverflow { .. })
        ));
    }

    #[test]
    fn build_example_padded_flip_matches_format() {
        let pair = build_example(TaskKind::Flip, Variant::Padded { total_len: 70 }, &arg("bbaab")).unwrap();
        let mut want_src = vec![Token::Flip, Token::Dash, Token::Dash, Token::Pipe];
        want_src.extend(pad_to(&arg("bbaab"), 70).unwrap());
        assert_eq!(pair.source, want_src);
        assert_eq!(pair.target, pad_to(&arg("aabba"), 70).unwrap());
        assert_eq!(pair.source.len(), INSTRUCTION_LEN + 70);
        assert_eq!(pair.target.len(), 70);
        assert_eq!(pair.arg_len, 5);
    }

    #[test]
    fn build_example_simple() {
        let pair = build_example(TaskKind::Copy, Variant::Simple, &arg("ab")).unwrap();
        assert_eq!(seq_to_line(&pair.source), "copy - - | a b");
        assert_eq!(seq_to_line(&pair.target), "a b");

        let rev = build_example(TaskKind::Reverse, Variant::Simple, &arg("aab")).unwrap();
        assert_eq!(seq_to_line(&rev.target), "b a a");
    }

    #[test]
    fn generate_single_task_copy() {
        let spec = DatasetSpec {
            tasks: vec![TaskKind::Copy],
            variant: Variant::Simple,
            train_range: LengthRange::new(2, 6).unwrap(),
            train_size: 4,
            eval_buckets: vec![],
            eval_size_per_bucket: 0,
            seed: 5,
        };
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.train.len(), 4);
        for pair in &ds.train {
            let arg_part = &pair.source[INSTRUCTION_LEN..];
            assert_eq!(arg_part, pair.target.as_slice());
        }
    }

    #[test]
    fn generate_multi_task_shares_and_shuffles() {
        let spec = DatasetSpec {
            tasks: vec![TaskKind::Copy, TaskKind::Flip, TaskKind::Reverse],
            variant: Variant::Simple,
            train_range: LengthRange::new(1, 5).unwrap(),
            train_size: 3000,
            eval_buckets: vec![],
            eval_size_per_bucket: 0,
            seed: 6,
        };
        assert_eq!(spec.train_shares(), vec![1000, 1000, 1000]);
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.train.len(), 3000);
        let copies = ds.train.iter().filter(|p| p.task() == Some(TaskKind::Copy)).count();
        assert_eq!(copies, 1000);
        // shuffled: the first 1000 entries are not all the same task
        let first_task = ds.train[0].task();
        assert!(ds.train[..1000].iter().any(|p| p.task() != first_task));
    }

    #[test]
    fn arg_len_recovery() {
        let pair = build_example(TaskKind::Flip, Variant::Padded { total_len: 12 }, &arg("babb")).unwrap();
        assert_eq!(ExamplePair::arg_len_of_source(&pair.source), 4);
    }
}
