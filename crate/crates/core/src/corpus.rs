//! Token-id datasets on disk and bigram counting.
//!
//! A dataset file holds one sequence per line as space-separated decimal ids.
//! Terminated sequences end with the EOS id; truncated ones do not. A sidecar
//! `<file>.meta.json` records vocabulary size, EOS id, count, maximum length
//! and seed.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::TokenSequence;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenRange { token: usize, vocab: usize },
    #[error("metadata disagrees with file: {0}")]
    Meta(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub vocab_size: usize,
    pub eos_id: usize,
    pub count: usize,
    pub max_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<TokenSequence>,
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn eos_id(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            vocab_size: self.vocab_size,
            eos_id: self.eos_id(),
            count: self.sequences.len(),
            max_len: self.max_len,
            seed: self.seed,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sequences {
            for (i, t) in s.tokens.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                write!(out, "{t}").expect("writing to a string");
            }
            out.push('\n');
        }
        out
    }

    /// Writes the dataset and its sidecar metadata.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let io = |source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        };
        std::fs::write(path, self.to_text()).map_err(io)?;
        let meta_path = meta_path(path);
        let mut text = serde_json::to_string_pretty(&self.meta()).expect("metadata serializes");
        text.push('\n');
        std::fs::write(&meta_path, text).map_err(|source| CorpusError::Io {
            path: meta_path,
            source,
        })
    }

    /// Reads a dataset using its sidecar metadata for the vocabulary.
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let meta_path = meta_path(path);
        let text = std::fs::read_to_string(&meta_path).map_err(|source| CorpusError::Io {
            path: meta_path.clone(),
            source,
        })?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|source| CorpusError::Json {
            path: meta_path,
            source,
        })?;
        if meta.eos_id + 1 != meta.vocab_size {
            return Err(CorpusError::Meta(format!(
                "eos_id {} must be vocab_size - 1",
                meta.eos_id
            )));
        }
        let sequences = load_sequences(path, meta.vocab_size)?;
        if sequences.len() != meta.count {
            return Err(CorpusError::Meta(format!(
                "{} sequences, metadata says {}",
                sequences.len(),
                meta.count
            )));
        }
        Ok(Self {
            sequences,
            vocab_size: meta.vocab_size,
            max_len: meta.max_len,
            seed: meta.seed,
        })
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Parses one dataset line. The last id of the vocabulary is EOS and may only
/// appear last.
pub fn parse_line(line: &str, vocab_size: usize) -> Result<TokenSequence, String> {
    let eos = vocab_size - 1;
    let mut tokens = Vec::new();
    for field in line.split_ascii_whitespace() {
        let t: usize = field
            .parse()
            .map_err(|_| format!("{field:?} is not a token id"))?;
        if t >= vocab_size {
            return Err(format!("token {t} out of range for vocabulary of {vocab_size}"));
        }
        if tokens.last() == Some(&eos) {
            return Err("EOS before the end of the sequence".into());
        }
        tokens.push(t);
    }
    if tokens.is_empty() {
        return Err("empty sequence".into());
    }
    Ok(TokenSequence::new(tokens, eos))
}

pub fn load_sequences(path: &Path, vocab_size: usize) -> Result<Vec<TokenSequence>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let seq = parse_line(&line, vocab_size).map_err(|reason| CorpusError::Malformed {
            line: i + 1,
            reason,
        })?;
        out.push(seq);
    }
    Ok(out)
}

/// `counts[i][j]` is the number of adjacent pairs `(i, j)`, pairs into EOS
/// included. The EOS row stays zero.
pub fn count_bigrams(sequences: &[TokenSequence], vocab_size: usize) -> Result<Vec<Vec<i64>>, CorpusError> {
    let mut counts = vec![vec![0i64; vocab_size]; vocab_size];
    for s in sequences {
        if let Some(&token) = s.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(CorpusError::TokenRange {
                token,
                vocab: vocab_size,
            });
        }
        for p in s.tokens.windows(2) {
            counts[p[0]][p[1]] += 1;
        }
    }
    Ok(counts)
}

/// Reads a bigram count matrix: either a JSON array of rows, or a dataset
/// file with sidecar metadata whose bigrams are counted.
pub fn load_counts(path: &Path) -> Result<Vec<Vec<i64>>, CorpusError> {
    if meta_path(path).exists() {
        let data = Dataset::load(path)?;
        return count_bigrams(&data.sequences, data.vocab_size);
    }
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CorpusError::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_hand_example() {
        // a=0, b=1, EOS=3
        let s = TokenSequence::new(vec![0, 1, 0, 3], 3);
        let c = count_bigrams(&[s], 4).unwrap();
        assert_eq!(c[0][1], 1);
        assert_eq!(c[1][0], 1);
        assert_eq!(c[0][3], 1);
        assert_eq!(c.iter().flatten().sum::<i64>(), 3);
        assert!(c[3].iter().all(|&x| x == 0));
        assert_eq!(count_bigrams(&[], 4).unwrap(), vec![vec![0; 4]; 4]);
        let bad = TokenSequence::new(vec![7], 3);
        assert!(matches!(count_bigrams(&[bad], 4), Err(CorpusError::TokenRange { token: 7, .. })));
    }

    #[test]
    fn parse_lines() {
        let s = parse_line("3 1 19", 20).unwrap();
        assert_eq!(s.tokens, vec![3, 1, 19]);
        assert!(s.terminated);
        assert!(!parse_line("3 1", 20).unwrap().terminated);
        assert!(parse_line("3 19 1", 20).unwrap_err().contains("EOS"));
        assert!(parse_line("3 x", 20).is_err());
        assert!(parse_line("20", 20).is_err());
        assert!(parse_line("", 20).is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.txt");
        std::fs::write(&path, "0 1 19\n3 19 1\n").unwrap();
        match load_sequences(&path, 20) {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        let seq = (prop::collection::vec(0usize..5, 1..12), any::<bool>()).prop_map(|(mut t, term)| {
            if term {
                t.push(5);
            }
            TokenSequence::new(t, 5)
        });
        prop::collection::vec(seq, 0..20).prop_map(|sequences| Dataset {
            sequences,
            vocab_size: 6,
            max_len: 13,
            seed: 4,
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn save_load_round_trip(data in arb_dataset()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("train.txt");
            data.save(&path).unwrap();
            let back = Dataset::load(&path).unwrap();
            prop_assert_eq!(back, data);
        }

        #[test]
        fn bigram_bookkeeping(data in arb_dataset()) {
            let c = count_bigrams(&data.sequences, 6).unwrap();
            let expected: usize = data.sequences.iter().map(|s| s.len() - 1).sum();
            prop_assert_eq!(c.iter().flatten().sum::<i64>() as usize, expected);
            let into_eos: i64 = c.iter().map(|r| r[5]).sum();
            let terminated_long = data.sequences.iter().filter(|s| s.terminated && s.len() > 1).count();
            prop_assert_eq!(into_eos as usize, terminated_long);
        }
    }
}
