//! The fixed token inventory shared by datasets, oracles and models.
//!
//! Token ids are stable across runs and releases; dataset files, checkpoints
//! and compiled models all rely on this numbering.

use thiserror::Error;

/// Number of distinct tokens, including the specials.
pub const VOCAB_SIZE: usize = 12;

/// A single vocabulary item. `Pad` never appears in generated text; `Bos`
/// and `Eos` are attached by the model layer, not stored in dataset files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Token {
    Pad = 0,
    Bos = 1,
    Eos = 2,
    A = 3,
    B = 4,
    C = 5,
    D = 6,
    Copy = 7,
    Flip = 8,
    Reverse = 9,
    Dash = 10,
    Pipe = 11,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("unknown token text {0:?}")]
    UnknownText(String),
    #[error("token id {0} out of range")]
    BadId(usize),
}

impl Token {
    /// All tokens in id order.
    pub const ALL: [Token; VOCAB_SIZE] = [
        Token::Pad,
        Token::Bos,
        Token::Eos,
        Token::A,
        Token::B,
        Token::C,
        Token::D,
        Token::Copy,
        Token::Flip,
        Token::Reverse,
        Token::Dash,
        Token::Pipe,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Token, VocabError> {
        Token::ALL.get(id).copied().ok_or(VocabError::BadId(id))
    }

    /// Text form used in dataset files and program listings.
    pub fn as_str(self) -> &'static str {
        match self {
            Token::Pad => "<pad>",
            Token::Bos => "<bos>",
            Token::Eos => "<eos>",
            Token::A => "a",
            Token::B => "b",
            Token::C => "c",
            Token::D => "d",
            Token::Copy => "copy",
            Token::Flip => "flip",
            Token::Reverse => "reverse",
            Token::Dash => "-",
            Token::Pipe => "|",
        }
    }

    pub fn parse(text: &str) -> Result<Token, VocabError> {
        Token::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == text)
            .ok_or_else(|| VocabError::UnknownText(text.to_string()))
    }

    /// True for the argument alphabet {a, b}.
    pub fn is_letter(self) -> bool {
        matches!(self, Token::A | Token::B)
    }

    /// True for the padding alphabet {c, d}.
    pub fn is_padding(self) -> bool {
        matches!(self, Token::C | Token::D)
    }
}

/// Renders a token sequence as a space-separated line (dataset file form).
pub fn seq_to_line(tokens: &[Token]) -> String {
    let mut out = String::with_capacity(tokens.len() * 2);
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_str());
    }
    out
}

/// Parses a space-separated line of token texts.
pub fn line_to_seq(line: &str) -> Result<Vec<Token>, VocabError> {
    line.split_whitespace().map(Token::parse).collect()
}

/// Parses a compact letter string like `bbaab` (one token per character),
/// the form accepted by the CLI for program inputs.
pub fn compact_to_seq(text: &str) -> Result<Vec<Token>, VocabError> {
    text.chars()
        .map(|c| match c {
            'a' => Ok(Token::A),
            'b' => Ok(Token::B),
            'c' => Ok(Token::C),
            'd' => Ok(Token::D),
            other => Err(VocabError::UnknownText(other.to_string())),
        })
        .collect()
}

/// Renders a token sequence compactly when every token is a single letter;
/// falls back to the spaced form otherwise.
pub fn seq_to_compact(tokens: &[Token]) -> String {
    if tokens
        .iter()
        .all(|t| t.is_letter() || t.is_padding())
    {
        tokens.iter().map(|t| t.as_str()).collect()
    } else {
        seq_to_line(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_stable() {
        assert_eq!(Token::Pad.id(), 0);
        assert_eq!(Token::A.id(), 3);
        assert_eq!(Token::Pipe.id(), 11);
        for (i, t) in Token::ALL.iter().enumerate() {
            assert_eq!(t.id(), i);
            assert_eq!(Token::from_id(i).unwrap(), *t);
        }
        assert_eq!(Token::from_id(12), Err(VocabError::BadId(12)));
    }

    #[test]
    fn text_round_trip() {
        for t in Token::ALL {
            assert_eq!(Token::parse(t.as_str()).unwrap(), t);
        }
        assert!(Token::parse("q").is_err());
    }

    #[test]
    fn line_round_trip() {
        let toks = vec![Token::Flip, Token::Dash, Token::Dash, Token::Pipe, Token::B, Token::A];
        let line = seq_to_line(&toks);
        assert_eq!(line, "flip - - | b a");
        assert_eq!(line_to_seq(&line).unwrap(), toks);
    }

    #[test]
    fn compact_parsing() {
        assert_eq!(
            compact_to_seq("bbaab").unwrap(),
            vec![Token::B, Token::B, Token::A, Token::A, Token::B]
        );
        assert!(compact_to_seq("bxa").is_err());
        assert_eq!(seq_to_compact(&compact_to_seq("abcd").unwrap()), "abcd");
    }
}
