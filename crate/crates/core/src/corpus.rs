//! Token-id corpora: one sequence per line, space-separated ids, `#`
//! comments.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensorfile;

pub type Sequence = Vec<usize>;

/// Parses corpus text. Lines starting with `#` and blank lines are skipped.
pub fn parse(text: &str) -> Result<Vec<Sequence>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let seq = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>().map_err(|_| {
                    Error::invalid(format!("line {}: {tok:?} is not a token id", lineno + 1))
                })
            })
            .collect::<Result<Sequence>>()?;
        out.push(seq);
    }
    Ok(out)
}

/// Canonical text form: one line per sequence, single spaces, trailing
/// newline.
pub fn format(corpus: &[Sequence]) -> String {
    let mut s = String::new();
    for seq in corpus {
        let line: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn read(path: &Path) -> Result<Vec<Sequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

pub fn write(corpus: &[Sequence], path: &Path) -> Result<()> {
    fs::write(path, format(corpus)).map_err(|e| Error::io(path, e))
}

/// SHA-256 of the canonical form, so comments and spacing do not matter.
pub fn digest(corpus: &[Sequence]) -> String {
    tensorfile::digest(format(corpus).as_bytes())
}

pub fn validate(corpus: &[Sequence], config: &ModelConfig) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::invalid("corpus is empty"));
    }
    for (i, seq) in corpus.iter().enumerate() {
        if seq.is_empty() {
            return Err(Error::invalid(format!("sequence {i} is empty")));
        }
        if seq.len() > config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence {i} has length {} > max_seq_len {}",
                seq.len(),
                config.max_seq_len
            )));
        }
        if let Some(t) = seq.iter().find(|&&t| t >= config.vocab_size) {
            return Err(Error::invalid(format!("sequence {i} has out-of-vocab token {t}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_skips_comments_and_blanks() {
        let c = parse("# header\n1 2 3\n\n  4   5\n#x 9\n").unwrap();
        assert_eq!(c, vec![vec![1, 2, 3], vec![4, 5]]);
        assert!(parse("1 -2").is_err());
        assert!(parse("1 a").is_err());
    }

    #[test]
    fn digest_ignores_formatting() {
        let a = parse("1 2\n3\n").unwrap();
        let b = parse("# c\n1   2\n\n3").unwrap();
        assert_eq!(digest(&a), digest(&b));
        assert_eq!(parse(&format(&a)).unwrap(), a);
    }
}
