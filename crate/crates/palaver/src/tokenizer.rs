//! Byte-pair-encoding subword vocabulary: training, encode, decode, and a
//! plain-text file format.
//!
//! Pre-tokenization splits on single spaces (U+0020) and appends a word-end
//! marker symbol to every word, so `decode(encode(s)) == s` holds exactly for
//! any string over the training alphabet, runs of spaces included. Merge
//! selection is greedy by pair frequency with lexicographic tie-breaking,
//! which makes training deterministic.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Marker appended to every word during pre-tokenization; renders as a space
/// when decoding.
const WORD_END: &str = "</w>";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("target size {target} too small: need more than {minimum} (base symbols + specials)")]
    TargetTooSmall { target: usize, minimum: usize },
    #[error("invalid id {0}")]
    InvalidId(u32),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("vocabulary file line {line}: {message}")]
    BadFile { line: usize, message: String },
}

/// An ordered token list plus the merge rules that produced it. Token ids are
/// dense, with the four specials fixed at ids 0..3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    merged: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let merged = merges.iter().map(|(l, r)| format!("{l}{r}")).collect();
        Self {
            tokens,
            merges,
            merged,
            ids,
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }
}

/// Train a vocabulary by greedy pair merging until `target_size` tokens exist
/// or no pair occurs at least twice.
pub fn train_bpe<I, S>(corpus: I, target_size: usize) -> Result<Vocabulary, TokenizerError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    // Aggregate identical words; merge work is per distinct word.
    let mut word_counts: HashMap<String, u64> = HashMap::new();
    let mut has_content = false;
    for line in corpus {
        for word in line.as_ref().split(' ') {
            if !word.is_empty() {
                has_content = true;
            }
            *word_counts.entry(word.to_string()).or_insert(0) += 1;
        }
    }
    if !has_content {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut base: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    base.insert(WORD_END.to_string());
    for word in word_counts.keys() {
        for ch in word.chars() {
            base.insert(ch.to_string());
        }
    }
    let minimum = base.len() + SPECIAL_TOKENS.len();
    if target_size <= minimum {
        return Err(TokenizerError::TargetTooSmall {
            target: target_size,
            minimum,
        });
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(base.iter().cloned());
    let special = |s: &str| SPECIAL_TOKENS.contains(&s);

    let mut words: Vec<(Vec<String>, u64)> = word_counts
        .into_iter()
        .map(|(word, count)| (word_symbols(&word), count))
        .collect();
    // Fixed order so nothing downstream depends on hash iteration.
    words.sort_by(|a, b| a.0.cmp(&b.0));

    let mut merges: Vec<(String, String)> = Vec::new();
    while tokens.len() < target_size {
        let mut pair_counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, count) in &words {
            for pair in symbols.windows(2) {
                *pair_counts
                    .entry((pair[0].as_str(), pair[1].as_str()))
                    .or_insert(0) += count;
            }
        }
        let best = pair_counts
            .into_iter()
            .filter(|((l, r), _)| !special(&format!("{l}{r}")))
            .filter(|(_, count)| *count >= 2)
            .min_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let Some(((left, right), _)) = best else {
            break;
        };
        let (left, right) = (left.to_string(), right.to_string());
        let merged = format!("{left}{right}");
        for (symbols, _) in &mut words {
            merge_in_place(symbols, &left, &right, &merged);
        }
        tokens.push(merged);
        merges.push((left, right));
    }

    Ok(Vocabulary::from_parts(tokens, merges))
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    symbols.push(WORD_END.to_string());
    symbols
}

/// Replace adjacent (left, right) with the merged symbol, scanning left to
/// right without overlap.
fn merge_in_place(symbols: &mut Vec<String>, left: &str, right: &str, merged: &str) {
    let mut i = 0;
    let mut out: Vec<String> = Vec::with_capacity(symbols.len());
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(merged.to_string());
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Tokenize text to ids. Symbols never seen in training map to the unknown
/// id. No specials are emitted here.
pub fn encode(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    if text.is_empty() {
        return Vec::new();
    }
    let mut ids = Vec::new();
    let mut cache: HashMap<&str, Vec<u32>> = HashMap::new();
    for word in text.split(' ') {
        if let Some(cached) = cache.get(word) {
            ids.extend_from_slice(cached);
            continue;
        }
        let mut symbols = word_symbols(word);
        for ((left, right), merged) in vocab.merges.iter().zip(&vocab.merged) {
            if symbols.len() < 2 {
                break;
            }
            merge_in_place(&mut symbols, left, right, merged);
        }
        let word_ids: Vec<u32> = symbols
            .iter()
            .map(|s| vocab.id_of(s).unwrap_or(UNK_ID))
            .collect();
        ids.extend_from_slice(&word_ids);
        cache.insert(word, word_ids);
    }
    ids
}

/// Inverse of [`encode`] on in-domain text. Specials render as empty strings.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> Result<String, TokenizerError> {
    let mut joined = String::new();
    for &id in ids {
        let token = vocab.token(id).ok_or(TokenizerError::InvalidId(id))?;
        if (id as usize) < SPECIAL_TOKENS.len() {
            continue;
        }
        joined.push_str(token);
    }
    let trailing_marker = joined.ends_with(WORD_END);
    let mut text = joined.replace(WORD_END, " ");
    if trailing_marker {
        text.pop();
    }
    Ok(text)
}

// ---------------------------------------------------------------------------
// File format: a version line, the token list, then the merge list. Tokens
// may contain control characters from the training text, so both sections
// are escaped.

const FILE_HEADER: &str = "palaver-bpe v1";

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            ' ' => out.push_str("\\s"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(s: &str, line: usize) -> Result<String, TokenizerError> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            Some('s') => out.push(' '),
            other => {
                return Err(TokenizerError::BadFile {
                    line,
                    message: format!("bad escape sequence: \\{}", other.unwrap_or(' ')),
                })
            }
        }
    }
    Ok(out)
}

pub fn save_vocab(vocab: &Vocabulary, path: &Path) -> Result<(), TokenizerError> {
    let mut out = String::new();
    let _ = writeln!(out, "{FILE_HEADER}");
    let _ = writeln!(out, "#tokens {}", vocab.tokens.len());
    for token in &vocab.tokens {
        let _ = writeln!(out, "{}", escape(token));
    }
    let _ = writeln!(out, "#merges {}", vocab.merges.len());
    for (left, right) in &vocab.merges {
        let _ = writeln!(out, "{} {}", escape(left), escape(right));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary, TokenizerError> {
    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines().enumerate();
    let bad = |line: usize, message: &str| TokenizerError::BadFile {
        line,
        message: message.to_string(),
    };

    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
    if header != FILE_HEADER {
        return Err(bad(1, "unrecognized header"));
    }

    let (n, count_line) = lines.next().ok_or_else(|| bad(2, "missing #tokens"))?;
    let token_count: usize = count_line
        .strip_prefix("#tokens ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad(n + 1, "expected '#tokens N'"))?;
    let mut tokens = Vec::with_capacity(token_count);
    for _ in 0..token_count {
        let (n, line) = lines
            .next()
            .ok_or_else(|| bad(0, "token list shorter than declared"))?;
        tokens.push(unescape(line, n + 1)?);
    }

    let (n, count_line) = lines.next().ok_or_else(|| bad(0, "missing #merges"))?;
    let merge_count: usize = count_line
        .strip_prefix("#merges ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad(n + 1, "expected '#merges N'"))?;
    let mut merges = Vec::with_capacity(merge_count);
    for _ in 0..merge_count {
        let (n, line) = lines
            .next()
            .ok_or_else(|| bad(0, "merge list shorter than declared"))?;
        let (left, right) = line
            .split_once(' ')
            .ok_or_else(|| bad(n + 1, "expected 'left right'"))?;
        merges.push((unescape(left, n + 1)?, unescape(right, n + 1)?));
    }

    for (i, expected) in SPECIAL_TOKENS.iter().enumerate() {
        if tokens.get(i).map(String::as_str) != Some(*expected) {
            return Err(bad(i + 3, "special tokens out of place"));
        }
    }
    let vocab = Vocabulary::from_parts(tokens, merges);
    if vocab.ids.len() != vocab.tokens.len() {
        return Err(bad(0, "duplicate token strings"));
    }
    for (left, right) in &vocab.merges {
        if vocab.id_of(&format!("{left}{right}")).is_none() {
            return Err(bad(0, "merge result missing from token list"));
        }
    }
    Ok(vocab)
}
