//! Subword vocabulary: byte-pair-merge training, longest-match encoding.
//!
//! Text is split on whitespace into pieces; every piece after the first
//! carries a leading space, so the space character is an ordinary symbol
//! and decoding is plain concatenation. Merges never cross piece
//! boundaries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::corpus::{normalize_whitespace, CleanThread};
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const UNK: TokenId = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[BOS]", "[EOS]", "[SEP]", "[UNK]"];
pub const N_SPECIALS: usize = SPECIAL_TOKENS.len();

/// How [`Vocab::decode`] renders a separator.
pub const SEP_DISPLAY: &str = " | ";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
    merges: usize,
    lowercase: bool,
    max_token_chars: usize,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, merges: usize, lowercase: bool) -> Result<Self> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::invalid(format!("vocab id {i} must be {s}")));
            }
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::invalid(format!("vocab id {i} is empty")));
            }
            if token_to_id.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate vocab token {t:?}")));
            }
        }
        let max_token_chars = tokens[N_SPECIALS..]
            .iter()
            .map(|t| t.chars().count())
            .max()
            .unwrap_or(1);
        Ok(Vocab {
            id_to_token: tokens,
            token_to_id,
            merges,
            lowercase,
            max_token_chars,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn merges(&self) -> usize {
        self.merges
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Id of a non-special token.
    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id
            .get(token)
            .copied()
            .filter(|&id| id as usize >= N_SPECIALS)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    fn pieces(&self, text: &str) -> Vec<String> {
        let text = if self.lowercase {
            text.to_lowercase()
        } else {
            text.to_string()
        };
        split_pieces(&text)
    }

    /// Tokenizes one text with longest-match-first lookup. Characters never
    /// seen in training become `UNK`.
    pub fn encode_text(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::new();
        for piece in self.pieces(text) {
            let chars: Vec<(usize, char)> = piece.char_indices().collect();
            let mut i = 0;
            while i < chars.len() {
                let longest = self.max_token_chars.min(chars.len() - i);
                let found = (1..=longest).rev().find_map(|len| {
                    let start = chars[i].0;
                    let end = chars.get(i + len).map_or(piece.len(), |c| c.0);
                    self.id(&piece[start..end]).map(|id| (id, len))
                });
                match found {
                    Some((id, len)) => {
                        ids.push(id);
                        i += len;
                    }
                    None => {
                        ids.push(UNK);
                        i += 1;
                    }
                }
            }
        }
        ids
    }

    /// Encodes several texts into one sequence with `SEP` between
    /// consecutive texts. When the result exceeds `max_len`, trailing tokens
    /// are removed from comments round-robin starting at the last one; a
    /// comment that loses all its tokens disappears with its separator. The
    /// first text is only cut when it alone exceeds `max_len`.
    pub fn encode(&self, texts: &[&str], max_len: usize) -> Result<TokenSeq> {
        let pieces: Vec<Vec<TokenId>> = texts.iter().map(|t| self.encode_text(t)).collect();
        TokenSeq::assemble(pieces, max_len)
    }

    /// Renders ids as text. Specials other than `SEP` are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut parts = vec![String::new()];
        for &id in ids {
            let token = self
                .token(id)
                .ok_or_else(|| Error::invalid(format!("token id {id} out of range")))?;
            match id {
                SEP => parts.push(String::new()),
                _ if (id as usize) < N_SPECIALS => {}
                _ => parts.last_mut().unwrap().push_str(token),
            }
        }
        let parts: Vec<String> = parts.iter().map(|p| normalize_whitespace(p)).collect();
        Ok(parts.join(SEP_DISPLAY).trim().to_string())
    }

    /// Splits decoded ids at `SEP` into separately rendered segments.
    pub fn decode_segments(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.split(|&id| id == SEP).map(|segment| self.decode(segment)).collect()
    }

    fn file_contents(&self) -> String {
        let mut s = String::new();
        for t in &self.id_to_token {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// SHA-256 of the vocab file contents, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.file_contents().as_bytes()))
    }

    pub fn meta_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".meta");
        PathBuf::from(p)
    }

    /// Writes one token per line (line number = id) plus a `<path>.meta`
    /// key-value sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.file_contents()).map_err(|e| Error::io(path, e))?;
        let meta = format!(
            "vocab_size={}\nmerges={}\nlowercase={}\n",
            self.len(),
            self.merges,
            self.lowercase
        );
        let meta_path = Self::meta_path(path);
        fs::write(&meta_path, meta).map_err(|e| Error::io(meta_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.split('\n').map(str::to_string).collect();
        let tokens = match tokens.split_last() {
            Some((last, rest)) if last.is_empty() => rest.to_vec(),
            _ => tokens,
        };
        let meta_path = Self::meta_path(path);
        let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let mut merges = 0;
        let mut lowercase = true;
        for line in meta.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad vocab meta line {line:?}")))?;
            let bad = || Error::invalid(format!("bad vocab meta value {line:?}"));
            match key.trim() {
                "vocab_size" => {
                    let n: usize = value.trim().parse().map_err(|_| bad())?;
                    if n != tokens.len() {
                        return Err(Error::invalid(format!(
                            "vocab meta says {n} tokens, file has {}",
                            tokens.len()
                        )));
                    }
                }
                "merges" => merges = value.trim().parse().map_err(|_| bad())?,
                "lowercase" => lowercase = value.trim().parse().map_err(|_| bad())?,
                _ => {}
            }
        }
        Self::from_tokens(tokens, merges, lowercase)
    }
}

fn split_pieces(text: &str) -> Vec<String> {
    text.split_whitespace()
        .enumerate()
        .map(|(i, w)| if i == 0 { w.to_string() } else { format!(" {w}") })
        .collect()
}

/// Options for [`train_vocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabOptions {
    pub vocab_size: usize,
    pub min_freq: u64,
    pub lowercase: bool,
}

impl Default for VocabOptions {
    fn default() -> Self {
        VocabOptions {
            vocab_size: 2000,
            min_freq: 2,
            lowercase: true,
        }
    }
}

/// Trains a vocabulary on all titles and comments of `corpus`.
pub fn train_vocab(corpus: &[CleanThread], opts: VocabOptions) -> Result<Vocab> {
    let texts: Vec<&str> = corpus.iter().flat_map(|t| t.texts()).collect();
    train_vocab_from_texts(&texts, opts)
}

/// Greedy pair merging: repeatedly merge the most frequent adjacent symbol
/// pair (ties broken by the lexicographically smallest pair) until the
/// vocabulary is full or the best pair is rarer than `min_freq`.
pub fn train_vocab_from_texts(texts: &[&str], opts: VocabOptions) -> Result<Vocab> {
    if opts.min_freq == 0 {
        return Err(Error::invalid("min_freq must be >= 1"));
    }
    let mut piece_counts: BTreeMap<String, u64> = BTreeMap::new();
    for text in texts {
        let text = if opts.lowercase {
            text.to_lowercase()
        } else {
            text.to_string()
        };
        for piece in split_pieces(&text) {
            *piece_counts.entry(piece).or_default() += 1;
        }
    }
    if piece_counts.is_empty() {
        return Err(Error::invalid("cannot train a vocabulary on an empty corpus"));
    }
    let alphabet: BTreeSet<char> = piece_counts.keys().flat_map(|p| p.chars()).collect();
    if opts.vocab_size < N_SPECIALS + alphabet.len() {
        return Err(Error::invalid(format!(
            "vocab_size {} is smaller than {} specials + {} characters",
            opts.vocab_size,
            N_SPECIALS,
            alphabet.len()
        )));
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut index: HashMap<String, u32> = HashMap::new();
    for c in &alphabet {
        index.insert(c.to_string(), tokens.len() as u32);
        tokens.push(c.to_string());
    }
    let mut words: Vec<(Vec<u32>, u64)> = piece_counts
        .iter()
        .map(|(p, &n)| (p.chars().map(|c| index[&c.to_string()]).collect(), n))
        .collect();

    let mut merges = 0;
    while tokens.len() < opts.vocab_size {
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (symbols, n) in &words {
            for w in symbols.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += n;
            }
        }
        let forms_special = |&(a, b): &(u32, u32)| {
            let merged = format!("{}{}", tokens[a as usize], tokens[b as usize]);
            SPECIAL_TOKENS.contains(&merged.as_str())
        };
        let best = pair_counts
            .into_iter()
            .filter(|(pair, _)| !forms_special(pair))
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&tokens[pa.0 as usize], &tokens[pa.1 as usize]);
                    let kb = (&tokens[pb.0 as usize], &tokens[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            });
        let Some(((a, b), count)) = best else { break };
        if count < opts.min_freq {
            break;
        }
        let merged = format!("{}{}", tokens[a as usize], tokens[b as usize]);
        let merged_id = match index.get(&merged) {
            Some(&id) => id,
            None => {
                let id = tokens.len() as u32;
                tokens.push(merged.clone());
                index.insert(merged, id);
                id
            }
        };
        for (symbols, _) in words.iter_mut() {
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
                    out.push(merged_id);
                    i += 2;
                } else {
                    out.push(symbols[i]);
                    i += 1;
                }
            }
            *symbols = out;
        }
        merges += 1;
    }
    Vocab::from_tokens(tokens, merges, opts.lowercase)
}

/// A flattened id sequence with the region each input text occupies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    /// `(start, end, source)`: text `source` (0 = title, i = comment i)
    /// occupies `ids[start..end]`. Separators sit between spans.
    pub spans: Vec<(usize, usize, usize)>,
    /// Number of input texts, including any truncated away entirely.
    pub n_texts: usize,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn assemble(mut pieces: Vec<Vec<TokenId>>, max_len: usize) -> Result<TokenSeq> {
        if pieces.is_empty() {
            return Err(Error::invalid("encode needs at least one text"));
        }
        if max_len < 2 {
            return Err(Error::invalid("max_len must be >= 2"));
        }
        let n_texts = pieces.len();
        let mut alive = vec![true; n_texts];
        let total = |pieces: &[Vec<TokenId>], alive: &[bool]| {
            let live: Vec<usize> = (0..pieces.len()).filter(|&i| alive[i]).collect();
            live.iter().map(|&i| pieces[i].len()).sum::<usize>() + live.len().saturating_sub(1)
        };
        let mut excess = total(&pieces, &alive).saturating_sub(max_len);
        let mut cursor = n_texts - 1;
        while excess > 0 && (1..n_texts).any(|i| alive[i]) {
            if cursor == 0 {
                cursor = n_texts - 1;
            }
            if alive[cursor] {
                if pieces[cursor].pop().is_some() {
                    excess -= 1;
                }
                if pieces[cursor].is_empty() {
                    alive[cursor] = false;
                    // the separator goes too
                    excess = excess.saturating_sub(1);
                }
            }
            cursor -= 1;
        }
        pieces[0].truncate(max_len);

        let mut ids = Vec::new();
        let mut spans = Vec::new();
        for (source, piece) in pieces.iter().enumerate() {
            if !alive[source] {
                continue;
            }
            if source > 0 {
                ids.push(SEP);
            }
            let start = ids.len();
            ids.extend_from_slice(piece);
            spans.push((start, ids.len(), source));
        }
        ids.truncate(max_len);
        Ok(TokenSeq { ids, spans, n_texts })
    }

    /// Source text of every position. A separator belongs to the text it
    /// terminates.
    pub fn sources(&self) -> Vec<usize> {
        let mut out = vec![0; self.ids.len()];
        let mut current = 0;
        let mut spans = self.spans.iter().peekable();
        for (pos, slot) in out.iter_mut().enumerate() {
            while let Some(&&(start, _, source)) = spans.peek() {
                if start <= pos {
                    current = source;
                    spans.next();
                } else {
                    break;
                }
            }
            *slot = current;
        }
        out
    }
}
