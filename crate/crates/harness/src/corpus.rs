//! Corpus ingestion, tokenization and chunking into training sequences.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sparsetune_core::kernels::loss::IGNORE_INDEX;

use crate::error::{io, HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    /// One token per byte (V = 256).
    #[default]
    Bytes,
    /// The file holds one decimal token id per line.
    Ids,
}

pub fn tokenize_bytes(data: &[u8]) -> Vec<usize> {
    data.iter().map(|&b| b as usize).collect()
}

/// Parses an id-per-line file; blank lines are skipped.
pub fn parse_ids(text: &str, vocab: usize, path: &Path) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let data = |msg: String| HarnessError::Data { path: path.to_path_buf(), line: i + 1, msg };
        let id: usize = line.parse().map_err(|_| data(format!("`{line}` is not a token id")))?;
        if id >= vocab {
            return Err(data(format!("token id {id} is outside the vocabulary of {vocab}")));
        }
        out.push(id);
    }
    Ok(out)
}

/// Reads and tokenizes `path`. An empty token stream is a contract error.
pub fn load_corpus(path: &Path, tokenizer: TokenizerKind, vocab: usize) -> Result<Vec<usize>> {
    let tokens = match tokenizer {
        TokenizerKind::Bytes => {
            if vocab < 256 {
                return Err(HarnessError::Config(format!("the byte tokenizer needs a vocabulary of 256, model has {vocab}")));
            }
            tokenize_bytes(&io(path, std::fs::read(path))?)
        }
        TokenizerKind::Ids => parse_ids(&io(path, std::fs::read_to_string(path))?, vocab, path)?,
    };
    if tokens.is_empty() {
        return Err(HarnessError::Contract(format!("corpus {} is empty", path.display())));
    }
    Ok(tokens)
}

/// A training sequence; `mask[i]` is false on padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Sequence {
    /// Next-token targets; the last position and positions whose successor
    /// is padding are ignored.
    pub fn targets(&self) -> Vec<usize> {
        let n = self.tokens.len();
        (0..n).map(|i| if i + 1 < n && self.mask[i + 1] { self.tokens[i + 1] } else { IGNORE_INDEX }).collect()
    }

    pub fn pair(&self) -> (Vec<usize>, Vec<usize>) {
        (self.tokens.clone(), self.targets())
    }
}

/// Consecutive non-overlapping windows of `seq_len` tokens; a trailing
/// remainder shorter than `seq_len` is dropped. A stream shorter than
/// `seq_len` becomes one sequence padded with token 0.
pub fn chunk(stream: &[usize], seq_len: usize) -> Result<Vec<Sequence>> {
    if seq_len == 0 {
        return Err(HarnessError::Contract("sequence length must be positive".into()));
    }
    if stream.is_empty() {
        return Err(HarnessError::Contract("cannot chunk an empty token stream".into()));
    }
    if stream.len() < seq_len {
        let mut tokens = stream.to_vec();
        let mut mask = vec![true; stream.len()];
        tokens.resize(seq_len, 0);
        mask.resize(seq_len, false);
        return Ok(vec![Sequence { tokens, mask }]);
    }
    Ok(stream.chunks_exact(seq_len).map(|c| Sequence { tokens: c.to_vec(), mask: vec![true; seq_len] }).collect())
}

/// Training and held-out sequences: the last `eval` chunks are held out.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Sequence>,
    pub eval: Vec<Sequence>,
}

pub fn split(mut seqs: Vec<Sequence>, eval: usize) -> Result<Splits> {
    if seqs.len() <= eval {
        return Err(HarnessError::Contract(format!(
            "corpus gives {} sequences, need more than the {eval} held out for evaluation",
            seqs.len()
        )));
    }
    let held = seqs.split_off(seqs.len() - eval);
    Ok(Splits { train: seqs, eval: held })
}

/// Deterministic English-like text of `n_bytes` bytes: a fixed lexicon of
/// invented words strung together by a sparse random word-transition table.
pub fn generate_text(n_bytes: usize, seed: u64) -> String {
    const ONSETS: [&str; 16] = ["b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "th", "st"];
    const VOWELS: [&str; 7] = ["a", "e", "i", "o", "u", "ai", "ou"];
    const CODAS: [&str; 6] = ["", "", "n", "r", "s", "l"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lexicon: Vec<String> = (0..400)
        .map(|_| {
            let syllables = 1 + rng.random_range(0..3);
            (0..syllables)
                .map(|_| {
                    let mut s = String::from(ONSETS[rng.random_range(0..ONSETS.len())]);
                    s.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
                    s.push_str(CODAS[rng.random_range(0..CODAS.len())]);
                    s
                })
                .collect()
        })
        .collect();
    let successors: Vec<Vec<usize>> = (0..lexicon.len()).map(|_| (0..8).map(|_| rng.random_range(0..lexicon.len())).collect()).collect();
    let mut out = String::with_capacity(n_bytes + 64);
    let mut word = rng.random_range(0..lexicon.len());
    let mut sentence = 0usize;
    let mut in_sentence = 0usize;
    let mut sentence_len = 5 + rng.random_range(0..10);
    while out.len() < n_bytes {
        let w = &lexicon[word];
        if in_sentence == 0 {
            let mut c = w.chars();
            let first = c.next().expect("words are non-empty");
            out.extend(first.to_uppercase());
            out.push_str(c.as_str());
        } else {
            out.push_str(w);
        }
        in_sentence += 1;
        if in_sentence == sentence_len {
            out.push('.');
            sentence += 1;
            in_sentence = 0;
            sentence_len = 5 + rng.random_range(0..10);
            out.push(if sentence.is_multiple_of(6) { '\n' } else { ' ' });
        } else {
            out.push(' ');
        }
        // Zipf-like choice among the successors: the first is most likely.
        let r: f64 = rng.random();
        let pick = ((r * r * r) * 8.0) as usize;
        word = successors[word][pick.min(7)];
    }
    out.truncate(n_bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_are_their_own_ids() {
        assert_eq!(tokenize_bytes(b"ab"), vec![97, 98]);
    }

    #[test]
    fn short_stream_is_padded_once() {
        let seqs = chunk(&[5, 6, 7], 5).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].tokens, vec![5, 6, 7, 0, 0]);
        assert_eq!(seqs[0].mask, vec![true, true, true, false, false]);
        assert_eq!(seqs[0].targets(), vec![6, 7, IGNORE_INDEX, IGNORE_INDEX, IGNORE_INDEX]);
    }

    #[test]
    fn ids_report_the_offending_line() {
        let p = Path::new("ids.txt");
        assert_eq!(parse_ids("1\n\n2\n", 4, p).unwrap(), vec![1, 2]);
        match parse_ids("1\n2\n9\n", 4, p) {
            Err(HarnessError::Data { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected a data error, got {other:?}"),
        }
        assert!(matches!(parse_ids("x\n", 4, p), Err(HarnessError::Data { line: 1, .. })));
    }

    #[test]
    fn generated_text_is_deterministic_and_sized() {
        let a = generate_text(5000, 3);
        assert_eq!(a.len(), 5000);
        assert_eq!(a, generate_text(5000, 3));
        assert_ne!(a, generate_text(5000, 4));
        assert!(a.is_ascii());
    }
}
