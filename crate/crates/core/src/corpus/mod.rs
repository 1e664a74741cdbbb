//! Thread records: JSON-lines ingestion, cleaning and fold assignment.

mod clean;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use clean::{clean_text, is_laughter, normalize_whitespace};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawComment {
    pub text: String,
    pub likes: u64,
    pub author_hash: Option<String>,
}

/// A news item (`title`) and its comment thread, as ingested.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawThread {
    pub id: String,
    pub title: String,
    pub comments: Vec<RawComment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fold {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Fold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fold::Train => "train",
            Fold::Validation => "validation",
            Fold::Test => "test",
        })
    }
}

impl FromStr for Fold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Fold::Train),
            "validation" => Ok(Fold::Validation),
            "test" => Ok(Fold::Test),
            other => Err(Error::invalid(format!("unknown fold {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanComment {
    pub text: String,
    pub likes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanThread {
    pub id: String,
    pub title: String,
    pub comments: Vec<CleanComment>,
    pub fold: Fold,
}

impl CleanThread {
    pub fn likes(&self) -> Vec<u64> {
        self.comments.iter().map(|c| c.likes).collect()
    }

    /// Title followed by comment texts, in thread order.
    pub fn texts(&self) -> Vec<&str> {
        std::iter::once(self.title.as_str())
            .chain(self.comments.iter().map(|c| c.text.as_str()))
            .collect()
    }
}

#[derive(Deserialize)]
struct CommentRecord {
    text: String,
    likes: i64,
    #[serde(default)]
    author_hash: Option<String>,
}

#[derive(Deserialize)]
struct ThreadRecord {
    id: String,
    title: String,
    comments: Vec<CommentRecord>,
    #[serde(default)]
    fold: Option<Fold>,
}

fn parse_records(text: &str) -> Result<Vec<(usize, ThreadRecord)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: ThreadRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.id.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "id must be non-empty".into(),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("duplicate thread id {:?}", record.id),
            });
        }
        if record.comments.iter().any(|c| c.likes < 0) {
            return Err(Error::Parse {
                line: line_no,
                message: "likes must be non-negative".into(),
            });
        }
        out.push((line_no, record));
    }
    Ok(out)
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses raw threads from JSON-lines text; blank lines are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<RawThread>> {
    Ok(parse_records(text)?
        .into_iter()
        .map(|(_, r)| RawThread {
            id: r.id,
            title: r.title,
            comments: r
                .comments
                .into_iter()
                .map(|c| RawComment {
                    text: c.text,
                    likes: c.likes as u64,
                    author_hash: c.author_hash,
                })
                .collect(),
        })
        .collect())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<RawThread>> {
    parse_corpus(&read_to_string(path.as_ref())?)
}

/// Loads a cleaned corpus; every record must carry a `fold`.
pub fn load_clean_corpus(path: impl AsRef<Path>) -> Result<Vec<CleanThread>> {
    let text = read_to_string(path.as_ref())?;
    parse_records(&text)?
        .into_iter()
        .map(|(line, r)| {
            let fold = r.fold.ok_or_else(|| Error::Parse {
                line,
                message: "missing field `fold`".into(),
            })?;
            Ok(CleanThread {
                id: r.id,
                title: r.title,
                comments: r
                    .comments
                    .into_iter()
                    .map(|c| CleanComment {
                        text: c.text,
                        likes: c.likes as u64,
                        author_hash: c.author_hash,
                    })
                    .collect(),
                fold,
            })
        })
        .collect()
}

pub fn write_clean_corpus(path: impl AsRef<Path>, threads: &[CleanThread]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in threads {
        let line = serde_json::to_string(t).expect("clean thread serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Cleans every text and drops comments shorter than `min_words` words
/// (counted after cleaning). Threads left without comments are dropped.
/// Surviving threads are provisionally assigned to the train fold.
pub fn preprocess(threads: &[RawThread], min_words: usize) -> Result<Vec<CleanThread>> {
    if min_words == 0 {
        return Err(Error::invalid("min_words must be >= 1"));
    }
    Ok(threads
        .iter()
        .filter_map(|t| {
            let comments: Vec<CleanComment> = t
                .comments
                .iter()
                .filter_map(|c| {
                    let text = clean_text(&c.text);
                    (word_count(&text) >= min_words).then(|| CleanComment {
                        text,
                        likes: c.likes,
                        author_hash: c.author_hash.clone(),
                    })
                })
                .collect();
            (!comments.is_empty()).then(|| CleanThread {
                id: t.id.clone(),
                title: clean_text(&t.title),
                comments,
                fold: Fold::Train,
            })
        })
        .collect())
}

/// Fold proportions for [`partition`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl FoldRatios {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let r = FoldRatios {
            train,
            validation,
            test,
        };
        let parts = [train, validation, test];
        if parts.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::invalid("fold ratios must be positive"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("fold ratios must sum to 1"));
        }
        Ok(r)
    }

    /// Fold sizes by largest remainder; each is within one of `ratio * n`.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let exact = [self.train, self.validation, self.test].map(|r| r * n as f64);
        let mut sizes = exact.map(|x| x.floor() as usize);
        let mut rest = n - sizes.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            sizes[i] += 1;
            rest -= 1;
        }
        sizes
    }
}

impl FromStr for FoldRatios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("bad ratios {s:?}: {e}")))?;
        match parts.as_slice() {
            [a, b, c] => FoldRatios::new(*a, *b, *c),
            _ => Err(Error::invalid(format!("expected three ratios, got {s:?}"))),
        }
    }
}

/// Randomly assigns folds. Output keeps input order; only `fold` changes.
pub fn partition(threads: &[CleanThread], ratios: FoldRatios, seed: u64) -> Vec<CleanThread> {
    let [n_train, n_val, _] = ratios.sizes(threads.len());
    let mut order: Vec<usize> = (0..threads.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = threads.to_vec();
    for (rank, &idx) in order.iter().enumerate() {
        out[idx].fold = if rank < n_train {
            Fold::Train
        } else if rank < n_train + n_val {
            Fold::Validation
        } else {
            Fold::Test
        };
    }
    out
}

pub fn select_fold(threads: &[CleanThread], fold: Fold) -> Vec<CleanThread> {
    threads.iter().filter(|t| t.fold == fold).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(id: &str, comments: &[(&str, u64)]) -> RawThread {
        RawThread {
            id: id.into(),
            title: format!("title {id}"),
            comments: comments
                .iter()
                .map(|(t, l)| RawComment {
                    text: t.to_string(),
                    likes: *l,
                    author_hash: None,
                })
                .collect(),
        }
    }

    #[test]
    fn parse_single_line() {
        let text = r#"{"id":"t1","title":"A","comments":[{"text":"hello world foo bar baz","likes":3}]}"#;
        let threads = parse_corpus(text).unwrap();
        assert_eq!(threads.len(), 1);
        assert_eq!(threads[0].comments.len(), 1);
        assert_eq!(threads[0].comments[0].likes, 3);
        assert_eq!(threads[0].title, "A");
    }

    #[test]
    fn parse_empty_and_errors() {
        assert!(parse_corpus("").unwrap().is_empty());

        let neg = "{\"id\":\"a\",\"title\":\"A\",\"comments\":[]}\n{\"id\":\"b\",\"title\":\"B\",\"comments\":[{\"text\":\"x\",\"likes\":-1}]}";
        match parse_corpus(neg).unwrap_err() {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert_eq!(message, "likes must be non-negative");
            }
            e => panic!("unexpected {e:?}"),
        }

        let missing = r#"{"id":"a","comments":[]}"#;
        let err = parse_corpus(missing).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("title"), "{err}");

        let malformed = "{\"id\":\"a\",\"title\":\"A\",\"comments\":[]}\n{nope";
        assert!(matches!(parse_corpus(malformed), Err(Error::Parse { line: 2, .. })));

        let dup = "{\"id\":\"a\",\"title\":\"A\",\"comments\":[]}\n{\"id\":\"a\",\"title\":\"B\",\"comments\":[]}";
        assert!(matches!(parse_corpus(dup), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn preprocess_threshold_and_drop() {
        let t = raw("a", &[("a b", 7), ("one two three four five", 2)]);
        let out = preprocess(&[t], 5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].comments.len(), 1);
        assert_eq!(out[0].comments[0].text, "one two three four five");
        assert_eq!(out[0].comments[0].likes, 2);

        let short = raw("b", &[("too short", 1), ("also short here", 4)]);
        assert!(preprocess(std::slice::from_ref(&short), 5).unwrap().is_empty());

        let corpus = vec![
            raw("x", &[("uno dos tres cuatro cinco", 1)]),
            short,
            raw("y", &[("uno dos tres cuatro cinco seis", 0), ("no", 3)]),
        ];
        assert_eq!(preprocess(&corpus, 5).unwrap().len(), 2);
        assert!(preprocess(&corpus, 0).is_err());
    }

    #[test]
    fn words_are_counted_after_cleaning() {
        let t = raw("a", &[("<b>uno</b> dos tres cuatro jajaja", 1)]);
        assert!(preprocess(&[t], 5).unwrap().is_empty());
    }

    fn clean_threads(n: usize) -> Vec<CleanThread> {
        (0..n)
            .map(|i| CleanThread {
                id: format!("t{i}"),
                title: "x".into(),
                comments: vec![],
                fold: Fold::Train,
            })
            .collect()
    }

    #[test]
    fn partition_sizes_and_determinism() {
        let threads = clean_threads(10);
        let ratios = FoldRatios::new(0.8, 0.1, 0.1).unwrap();
        let a = partition(&threads, ratios, 42);
        let count = |f| a.iter().filter(|t| t.fold == f).count();
        assert_eq!(
            (count(Fold::Train), count(Fold::Validation), count(Fold::Test)),
            (8, 1, 1)
        );
        assert_eq!(a, partition(&threads, ratios, 42));
        assert!(a.iter().zip(&threads).all(|(x, y)| x.id == y.id));
    }

    #[test]
    fn ratio_validation() {
        assert!(FoldRatios::new(0.5, 0.5, 0.5).is_err());
        assert!(FoldRatios::new(1.0, 0.0, 0.0).is_err());
        assert!("0.8,0.1,0.1".parse::<FoldRatios>().is_ok());
        assert!("0.8,0.2".parse::<FoldRatios>().is_err());
    }

    #[test]
    fn fold_sizes_within_one() {
        let ratios = FoldRatios::new(0.7, 0.2, 0.1).unwrap();
        for n in 0..60 {
            let s = ratios.sizes(n);
            assert_eq!(s.iter().sum::<usize>(), n);
            for (size, r) in s.iter().zip([0.7, 0.2, 0.1]) {
                assert!((*size as f64 - r * n as f64).abs() <= 1.0);
            }
        }
    }
}
