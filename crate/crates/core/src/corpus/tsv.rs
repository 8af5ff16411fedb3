//! Tab-separated corpus files.
//!
//! Plain files hold `source<TAB>target` per line. Scored files extend this
//! to `source<TAB>target<TAB>domain<TAB>q<TAB>d`, with an empty field for a
//! missing score.

use std::fs;
use std::path::Path;

use super::SentencePair;
use crate::model::Vocabulary;
use crate::{Error, Result};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, body: String) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn save_tsv(pairs: &[SentencePair], vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut body = String::new();
    for p in pairs {
        body.push_str(&vocab.detokenize(&p.source));
        body.push('\t');
        body.push_str(&vocab.detokenize(&p.target));
        body.push('\n');
    }
    write(path, body)
}

/// Reads `source<TAB>target` lines; every pair gets `domain`.
pub fn load_tsv(path: &Path, vocab: &Vocabulary, domain: usize) -> Result<Vec<SentencePair>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (src, tgt) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "expected source<TAB>target".into(),
        })?;
        out.push(SentencePair::new(
            vocab.tokenize(src),
            vocab.tokenize(tgt),
            domain,
        ));
    }
    Ok(out)
}

fn fmt_score(s: Option<f64>) -> String {
    s.map(|v| format!("{v:?}")).unwrap_or_default()
}

pub fn save_scored_tsv(pairs: &[SentencePair], vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut body = String::new();
    for p in pairs {
        body.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            vocab.detokenize(&p.source),
            vocab.detokenize(&p.target),
            p.domain,
            fmt_score(p.q_score),
            fmt_score(p.d_score)
        ));
    }
    write(path, body)
}

pub fn load_scored_tsv(path: &Path, vocab: &Vocabulary) -> Result<Vec<SentencePair>> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [src, tgt, dom, q, d] = fields[..] else {
            return Err(bad("expected 5 tab-separated fields"));
        };
        let score = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad("bad score"))
            }
        };
        let mut p = SentencePair::new(
            vocab.tokenize(src),
            vocab.tokenize(tgt),
            dom.parse().map_err(|_| bad("bad domain id"))?,
        );
        p.q_score = score(q)?;
        p.d_score = score(d)?;
        out.push(p);
    }
    Ok(out)
}
