//! Corpus files.
//!
//! A plain corpus is UTF-8 text with one sentence per line. A labelled
//! corpus has one `depth<TAB>sentence` record per line. Blank lines are
//! skipped in both.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use apovae_core::corpus::{Sentence, TreeSentence, Vocab};

use crate::error::{Error, Result};

/// One corpus line with its optional depth label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Line {
    pub text: String,
    pub depth: Option<u32>,
}

/// Parses corpus text. The file counts as labelled when its first
/// non-blank line contains a tab; every line must then carry a label.
pub fn parse_corpus(text: &str, origin: &str) -> Result<Vec<Line>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
    let labelled = lines.peek().is_some_and(|(_, l)| l.contains('\t'));
    let mut out = Vec::new();
    for (no, raw) in lines {
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if !labelled {
            out.push(Line { text: raw.trim().to_string(), depth: None });
            continue;
        }
        let parsed = raw.split_once('\t').and_then(|(d, s)| Some((d.trim().parse::<u32>().ok()?, s.trim())));
        match parsed {
            Some((d, s)) if !s.is_empty() => out.push(Line { text: s.to_string(), depth: Some(d) }),
            _ => return Err(Error::Data(format!("{origin}:{}: expected depth<TAB>sentence", no + 1))),
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{origin}: corpus is empty")));
    }
    Ok(out)
}

pub fn read_corpus(path: &Path) -> Result<Vec<Line>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, &path.display().to_string())
}

/// Encodes lines with `vocab`, keeping depth labels.
pub fn encode(vocab: &Vocab, lines: &[Line]) -> Result<Vec<Sentence>> {
    lines
        .iter()
        .map(|l| {
            let s = vocab.encode(&l.text)?;
            Ok(Sentence::new(s.ids().to_vec(), l.depth)?)
        })
        .collect()
}

pub fn texts(lines: &[Line]) -> Vec<&str> {
    lines.iter().map(|l| l.text.as_str()).collect()
}

pub fn corpus_text(sentences: &[TreeSentence]) -> String {
    sentences.iter().fold(String::new(), |mut s, t| {
        let _ = writeln!(s, "{}", t.text);
        s
    })
}

pub fn depth_tsv(sentences: &[TreeSentence]) -> String {
    sentences.iter().fold(String::new(), |mut s, t| {
        let _ = writeln!(s, "{}\t{}", t.depth, t.text);
        s
    })
}
