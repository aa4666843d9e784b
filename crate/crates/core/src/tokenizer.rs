//! Vocabulary handling, WordPiece and per-character tokenization.
//!
//! Both tokenizers share [`Vocabulary`]: a bijection between token strings and
//! ids `0..V`, with five reserved specials that are always present.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const SEP: &str = "[SEP]";

const SPECIALS: [&str; 5] = [PAD, UNK, BOS, EOS, SEP];

pub const CONTINUATION_PREFIX: &str = "##";

/// Words longer than this many characters become a single UNK.
pub const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: duplicate token {token:?}")]
    DuplicateToken { line: usize, token: String },
    #[error("line {line}: empty token")]
    EmptyToken { line: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: usize, size: usize },
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: usize,
    pub unk: usize,
    pub bos: usize,
    pub eos: usize,
    pub sep: usize,
}

impl SpecialIds {
    pub fn contains(&self, id: usize) -> bool {
        [self.pad, self.unk, self.bos, self.eos, self.sep].contains(&id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    prefix: String,
    specials: SpecialIds,
}

impl Vocabulary {
    /// Builds a vocabulary from tokens in id order. Specials missing from
    /// `tokens` are appended in the order PAD, UNK, BOS, EOS, SEP.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list = Vec::new();
        let mut index = HashMap::new();
        for (i, tok) in tokens.into_iter().enumerate() {
            let tok = tok.into();
            let line = i + 1;
            if tok.is_empty() {
                return Err(TokenizerError::EmptyToken { line });
            }
            if index.contains_key(&tok) {
                return Err(TokenizerError::DuplicateToken { line, token: tok });
            }
            index.insert(tok.clone(), list.len());
            list.push(tok);
        }
        for special in SPECIALS {
            if !index.contains_key(special) {
                index.insert(special.to_string(), list.len());
                list.push(special.to_string());
            }
        }
        let specials = SpecialIds {
            pad: index[PAD],
            unk: index[UNK],
            bos: index[BOS],
            eos: index[EOS],
            sep: index[SEP],
        };
        Ok(Self {
            tokens: list,
            index,
            prefix: CONTINUATION_PREFIX.to_string(),
            specials,
        })
    }

    /// One token per line, LF endings, line index is the id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let body = text.strip_suffix('\n').unwrap_or(&text);
        if body.is_empty() {
            return Self::from_tokens(Vec::<String>::new());
        }
        Self::from_tokens(body.split('\n'))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|source| TokenizerError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(TokenizerError::IdOutOfRange {
                id,
                size: self.tokens.len(),
            })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn continuation_prefix(&self) -> &str {
        &self.prefix
    }
}

/// Specials first, then each distinct character in order of first occurrence
/// across `paths`. Line breaks are not tokens.
pub fn build_char_vocab<P: AsRef<Path>>(paths: &[P]) -> Result<Vocabulary> {
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut seen = std::collections::HashSet::new();
    for path in paths {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        for c in text.chars().filter(|c| *c != '\n' && *c != '\r') {
            if seen.insert(c) {
                tokens.push(c.to_string());
            }
        }
    }
    Vocabulary::from_tokens(tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerKind {
    WordPiece,
    Char,
}

impl std::str::FromStr for TokenizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "wordpiece" => Ok(Self::WordPiece),
            "char" => Ok(Self::Char),
            other => Err(format!("unknown tokenizer {other:?} (expected wordpiece|char)")),
        }
    }
}

impl std::fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::WordPiece => "wordpiece",
            Self::Char => "char",
        })
    }
}

/// A vocabulary paired with the encoding scheme it was built for.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub vocab: Vocabulary,
    pub kind: TokenizerKind,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary, kind: TokenizerKind) -> Self {
        Self { vocab, kind }
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        match self.kind {
            TokenizerKind::WordPiece => wordpiece_encode(&self.vocab, text),
            TokenizerKind::Char => char_encode(&self.vocab, text),
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        match self.kind {
            TokenizerKind::WordPiece => decode(&self.vocab, ids),
            TokenizerKind::Char => decode_chars(&self.vocab, ids),
        }
    }

    pub fn specials(&self) -> SpecialIds {
        self.vocab.specials()
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF
        | 0x3400..=0x4DBF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2B73F
        | 0x2B740..=0x2B81F
        | 0x2B820..=0x2CEAF
        | 0xF900..=0xFAFF
        | 0x2F800..=0x2FA1F)
}

/// Lowercases, splits on whitespace, and isolates punctuation and CJK
/// ideographs as single-character words. Control characters are dropped.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if c.is_control() {
            continue;
        } else if is_punctuation(c) || is_cjk(c) {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// The text form WordPiece round-trips to: pre-tokenized words joined by
/// single spaces.
pub fn normalize(text: &str) -> String {
    pre_tokenize(text).join(" ")
}

/// Greedy longest-match-first WordPiece.
pub fn wordpiece_encode(vocab: &Vocabulary, text: &str) -> Vec<usize> {
    let mut ids = Vec::new();
    for word in pre_tokenize(text) {
        match wordpiece_word(vocab, &word) {
            Some(pieces) => ids.extend(pieces),
            None => ids.push(vocab.specials.unk),
        }
    }
    ids
}

fn wordpiece_word(vocab: &Vocabulary, word: &str) -> Option<Vec<usize>> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return None;
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut candidate = String::new();
    while start < chars.len() {
        let mut found = None;
        for end in (start + 1..=chars.len()).rev() {
            candidate.clear();
            if start > 0 {
                candidate.push_str(&vocab.prefix);
            }
            candidate.extend(&chars[start..end]);
            if let Some(id) = vocab.id(&candidate) {
                found = Some((id, end));
                break;
            }
        }
        let (id, end) = found?;
        pieces.push(id);
        start = end;
    }
    Some(pieces)
}

/// One id per character, UNK for anything not in the vocabulary.
pub fn char_encode(vocab: &Vocabulary, text: &str) -> Vec<usize> {
    let mut buf = [0u8; 4];
    text.chars()
        .map(|c| vocab.id(c.encode_utf8(&mut buf)).unwrap_or(vocab.specials.unk))
        .collect()
}

/// WordPiece decode: continuation pieces attach to the previous piece, other
/// pieces are space-separated, specials are dropped.
pub fn decode(vocab: &Vocabulary, ids: &[usize]) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id)?;
        if vocab.specials.contains(id) {
            continue;
        }
        match tok.strip_prefix(vocab.prefix.as_str()) {
            Some(rest) if !rest.is_empty() => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
    }
    Ok(out)
}

/// Character decode: tokens concatenated, specials dropped.
pub fn decode_chars(vocab: &Vocabulary, ids: &[usize]) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id)?;
        if !vocab.specials.contains(id) {
            out.push_str(tok);
        }
    }
    Ok(out)
}
