use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use log::info;
use regex::Regex;

use super::TrainingError;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Free-text language modelling.
    Lm,
    /// `[BOS] first [SEP] second [EOS]`, loss on the second half only.
    Couplet,
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lm" => Ok(Self::Lm),
            "couplet" => Ok(Self::Couplet),
            other => Err(format!("unknown task {other:?} (expected lm|couplet)")),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Lm => "lm",
            Self::Couplet => "couplet",
        })
    }
}

/// What ingestion kept and dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub lines: usize,
    pub kept: usize,
    pub dropped_short: usize,
    pub dropped_empty: usize,
    pub dropped_too_long: usize,
    pub truncated: usize,
    /// Couplet pairs whose halves encode to different lengths (kept).
    pub length_mismatched: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub task: Task,
    pub examples: Vec<Vec<usize>>,
    pub stats: CorpusStats,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

fn read(path: &Path) -> Result<String, TrainingError> {
    fs::read_to_string(path).map_err(|source| TrainingError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn html_tag() -> &'static Regex {
    static TAG: OnceLock<Regex> = OnceLock::new();
    TAG.get_or_init(|| Regex::new(r"<[^>]*>").expect("valid regex"))
}

pub fn strip_html(line: &str) -> String {
    html_tag().replace_all(line, "").into_owned()
}

/// One document per line. HTML tags are removed, lines with fewer than
/// `min_words` whitespace-separated words are dropped, and each survivor
/// becomes `[BOS] tokens [EOS]` truncated to `max_seq_len`.
pub fn load_text_corpus(
    path: impl AsRef<Path>,
    tokenizer: &Tokenizer,
    max_seq_len: usize,
    min_words: usize,
) -> Result<Corpus, TrainingError> {
    let path = path.as_ref();
    let text = read(path)?;
    let sp = tokenizer.specials();
    let mut stats = CorpusStats::default();
    let mut examples = Vec::new();
    for line in text.lines() {
        stats.lines += 1;
        let clean = strip_html(line).to_lowercase();
        if clean.split_whitespace().count() < min_words.max(1) {
            stats.dropped_short += 1;
            continue;
        }
        let mut ids = Vec::with_capacity(max_seq_len);
        ids.push(sp.bos);
        ids.extend(tokenizer.encode(&clean));
        ids.push(sp.eos);
        if ids.len() > max_seq_len {
            ids.truncate(max_seq_len);
            stats.truncated += 1;
        }
        examples.push(ids);
    }
    stats.kept = examples.len();
    if examples.is_empty() {
        return Err(TrainingError::EmptyCorpus(path.to_path_buf()));
    }
    info!("loaded {} ({:?})", path.display(), stats);
    Ok(Corpus {
        task: Task::Lm,
        examples,
        stats,
    })
}

/// Removes all whitespace; couplet files often space-separate characters.
fn compact(line: &str) -> String {
    line.chars().filter(|c| !c.is_whitespace()).collect()
}

/// Encodes a couplet as `[BOS] first [SEP] second [EOS]`.
pub fn couplet_example(tokenizer: &Tokenizer, first: &str, second: &str) -> (Vec<usize>, bool) {
    let sp = tokenizer.specials();
    let a = tokenizer.encode(&compact(first));
    let b = tokenizer.encode(&compact(second));
    let matched = a.len() == b.len();
    let mut ids = Vec::with_capacity(a.len() + b.len() + 3);
    ids.push(sp.bos);
    ids.extend(a);
    ids.push(sp.sep);
    ids.extend(b);
    ids.push(sp.eos);
    (ids, matched)
}

/// Two line-aligned files: line `i` of `first_path` and `second_path` form
/// one couplet. Pairs longer than `max_seq_len` are dropped and counted.
pub fn load_couplet_corpus(
    first_path: impl AsRef<Path>,
    second_path: impl AsRef<Path>,
    tokenizer: &Tokenizer,
    max_seq_len: usize,
) -> Result<Corpus, TrainingError> {
    let (first_path, second_path) = (first_path.as_ref(), second_path.as_ref());
    let firsts = read(first_path)?;
    let seconds = read(second_path)?;
    let firsts: Vec<&str> = firsts.lines().collect();
    let seconds: Vec<&str> = seconds.lines().collect();
    if firsts.len() != seconds.len() {
        return Err(TrainingError::Alignment {
            first: firsts.len(),
            second: seconds.len(),
        });
    }
    let mut stats = CorpusStats::default();
    let mut examples = Vec::new();
    for (a, b) in firsts.iter().zip(&seconds) {
        stats.lines += 1;
        if compact(a).is_empty() || compact(b).is_empty() {
            stats.dropped_empty += 1;
            continue;
        }
        let (ids, matched) = couplet_example(tokenizer, a, b);
        if ids.len() > max_seq_len {
            stats.dropped_too_long += 1;
            continue;
        }
        if !matched {
            stats.length_mismatched += 1;
        }
        examples.push(ids);
    }
    stats.kept = examples.len();
    if examples.is_empty() {
        return Err(TrainingError::EmptyCorpus(first_path.to_path_buf()));
    }
    info!(
        "loaded couplets from {} / {} ({:?})",
        first_path.display(),
        second_path.display(),
        stats
    );
    Ok(Corpus {
        task: Task::Couplet,
        examples,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{TokenizerKind, Vocabulary};

    fn char_tok(chars: &str) -> Tokenizer {
        let v = Vocabulary::from_tokens(chars.chars().map(String::from)).unwrap();
        Tokenizer::new(v, TokenizerKind::Char)
    }

    fn wp_tok(words: &[&str]) -> Tokenizer {
        Tokenizer::new(Vocabulary::from_tokens(words.iter().copied()).unwrap(), TokenizerKind::WordPiece)
    }

    #[test]
    fn short_lines_dropped_and_tags_stripped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        let long = "<b>hello</b> world one two three four five six seven eight";
        fs::write(&p, format!("a b c\n{long}\n")).unwrap();
        let tok = wp_tok(&["hello", "world", "one", "two", "three"]);
        let c = load_text_corpus(&p, &tok, 64, 10).unwrap();
        assert_eq!(c.stats.dropped_short, 1);
        assert_eq!(c.len(), 1);
        let sp = tok.specials();
        let ex = &c.examples[0];
        assert_eq!(ex[0], sp.bos);
        assert_eq!(*ex.last().unwrap(), sp.eos);
        assert_eq!(tok.decode(ex).unwrap().split(' ').next(), Some("hello"));
        assert_eq!(ex.len(), 12);
    }

    #[test]
    fn strip_html_removes_tags_only() {
        assert_eq!(strip_html("<p class=\"x\">a</p> b<br/>"), "a b");
        assert_eq!(strip_html("1 < 2"), "1 < 2");
    }

    #[test]
    fn text_corpus_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "a a a a a a\n").unwrap();
        let c = load_text_corpus(&p, &wp_tok(&["a"]), 4, 1).unwrap();
        assert_eq!(c.examples[0].len(), 4);
        assert_eq!(c.stats.truncated, 1);
    }

    #[test]
    fn empty_text_corpus_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "").unwrap();
        assert!(matches!(
            load_text_corpus(&p, &wp_tok(&["a"]), 8, 10),
            Err(TrainingError::EmptyCorpus(_))
        ));
        assert!(matches!(
            load_text_corpus(dir.path().join("nope"), &wp_tok(&["a"]), 8, 10),
            Err(TrainingError::Io { .. })
        ));
    }

    #[test]
    fn couplet_construction() {
        let dir = tempfile::tempdir().unwrap();
        let (f, s) = (dir.path().join("in"), dir.path().join("out"));
        fs::write(&f, "ab\n").unwrap();
        fs::write(&s, "c d\n").unwrap();
        let tok = char_tok("abcd");
        let c = load_couplet_corpus(&f, &s, &tok, 16).unwrap();
        let sp = tok.specials();
        assert_eq!(c.examples, vec![vec![sp.bos, 0, 1, sp.sep, 2, 3, sp.eos]]);
        assert_eq!(c.task, Task::Couplet);
    }

    #[test]
    fn couplet_alignment_error() {
        let dir = tempfile::tempdir().unwrap();
        let (f, s) = (dir.path().join("in"), dir.path().join("out"));
        fs::write(&f, "a\nb\nc\n").unwrap();
        fs::write(&s, "a\nb\nc\nd\n").unwrap();
        assert!(matches!(
            load_couplet_corpus(&f, &s, &char_tok("abcd"), 16),
            Err(TrainingError::Alignment { first: 3, second: 4 })
        ));
    }

    #[test]
    fn couplet_overlong_dropped_and_mismatch_counted() {
        let dir = tempfile::tempdir().unwrap();
        let (f, s) = (dir.path().join("in"), dir.path().join("out"));
        // lengths: 2+2+3 = 7 kept; 3+3+3 = 9 dropped; 2+1+3 = 6 kept, mismatched
        fs::write(&f, "ab\nabc\nab\n").unwrap();
        fs::write(&s, "cd\ncda\nc\n").unwrap();
        let c = load_couplet_corpus(&f, &s, &char_tok("abcd"), 8).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.stats.dropped_too_long, 1);
        assert_eq!(c.stats.length_mismatched, 1);
    }
}
