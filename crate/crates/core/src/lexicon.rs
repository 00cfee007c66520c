//! Syllabified pronunciation lexicons: parsing, duplicate cleaning, phone
//! vocabulary construction, label encoding/decoding, and seeded
//! train/dev/test splits.
//!
//! The on-disk format is UTF-8, one entry per line:
//! `word<TAB>syllabified-pronunciation`. Syllables are separated by a
//! delimiter character (default `-`). Phones within a syllable are either
//! single characters (`char` tokenization, as in one-ASCII-character-per-phone
//! alphabets) or whitespace-separated tokens.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Rng;

pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("line {line}: missing TAB between word and pronunciation")]
    MissingTab { line: usize },
    #[error("line {line}: empty pronunciation")]
    EmptyPronunciation { line: usize },
    #[error("line {line}: empty syllable (delimiter at start/end or doubled)")]
    EmptySyllable { line: usize },
    #[error("entry has {len} phones, longer than max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("need at least 10 entries to split, got {n}")]
    TooFewEntries { n: usize },
    #[error("invalid entry: {reason}")]
    InvalidEntry { reason: String },
    #[error("split directory is missing {file}")]
    MissingSplitFile { file: String },
    #[error("split.meta: {reason}")]
    BadSplitMeta { reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How pronunciation fields map to phone tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhoneTokenization {
    /// One character = one phone (e.g. DISC).
    Char,
    /// Whitespace-separated phone tokens within each syllable.
    Whitespace,
}

impl fmt::Display for PhoneTokenization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhoneTokenization::Char => write!(f, "char"),
            PhoneTokenization::Whitespace => write!(f, "whitespace"),
        }
    }
}

impl std::str::FromStr for PhoneTokenization {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "char" => Ok(PhoneTokenization::Char),
            "whitespace" => Ok(PhoneTokenization::Whitespace),
            other => Err(format!("unknown tokenization {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconFormat {
    pub tokenization: PhoneTokenization,
    pub syllable_delimiter: char,
}

impl Default for LexiconFormat {
    fn default() -> Self {
        LexiconFormat {
            tokenization: PhoneTokenization::Char,
            syllable_delimiter: '-',
        }
    }
}

/// One lexicon row: orthographic word, phone sequence, and binary boundary
/// labels. `boundaries[i] == 1` means a syllable boundary follows phone `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyllabifiedEntry {
    pub word: String,
    pub phones: Vec<String>,
    pub boundaries: Vec<u8>,
}

impl SyllabifiedEntry {
    pub fn new(word: String, phones: Vec<String>, boundaries: Vec<u8>) -> Result<Self, LexiconError> {
        if phones.is_empty() {
            return Err(LexiconError::InvalidEntry {
                reason: "phones is empty".into(),
            });
        }
        if phones.len() != boundaries.len() {
            return Err(LexiconError::InvalidEntry {
                reason: format!(
                    "{} phones but {} boundary labels",
                    phones.len(),
                    boundaries.len()
                ),
            });
        }
        if boundaries.last() == Some(&1) {
            return Err(LexiconError::InvalidEntry {
                reason: "boundary label after the final phone".into(),
            });
        }
        Ok(SyllabifiedEntry {
            word,
            phones,
            boundaries,
        })
    }

    pub fn syllable_count(&self) -> usize {
        1 + self.boundaries.iter().filter(|&&b| b == 1).count()
    }
}

/// Bidirectional phone/index map with reserved PAD (0) and UNK (1) indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneVocabulary {
    phone_to_index: HashMap<String, usize>,
    index_to_phone: Vec<String>,
}

impl PhoneVocabulary {
    fn with_reserved() -> Self {
        let index_to_phone = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut phone_to_index = HashMap::new();
        phone_to_index.insert(PAD_TOKEN.to_string(), PAD_INDEX);
        phone_to_index.insert(UNK_TOKEN.to_string(), UNK_INDEX);
        PhoneVocabulary {
            phone_to_index,
            index_to_phone,
        }
    }

    /// Total vocabulary size including PAD and UNK.
    pub fn size(&self) -> usize {
        self.index_to_phone.len()
    }

    pub fn pad_index(&self) -> usize {
        PAD_INDEX
    }

    pub fn unk_index(&self) -> usize {
        UNK_INDEX
    }

    pub fn index_of(&self, phone: &str) -> Option<usize> {
        self.phone_to_index.get(phone).copied()
    }

    /// Index of `phone`, falling back to UNK for unseen phones.
    pub fn lookup(&self, phone: &str) -> usize {
        self.index_of(phone).unwrap_or(UNK_INDEX)
    }

    pub fn phone(&self, index: usize) -> Option<&str> {
        self.index_to_phone.get(index).map(|s| s.as_str())
    }

    /// Full token list in index order (reserved tokens included).
    pub fn tokens(&self) -> &[String] {
        &self.index_to_phone
    }

    /// Rebuilds a vocabulary from a stored token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, LexiconError> {
        if tokens.len() < 2 || tokens[PAD_INDEX] != PAD_TOKEN || tokens[UNK_INDEX] != UNK_TOKEN {
            return Err(LexiconError::InvalidEntry {
                reason: "vocabulary token list must start with the reserved PAD/UNK tokens".into(),
            });
        }
        let mut phone_to_index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if phone_to_index.insert(tok.clone(), i).is_some() {
                return Err(LexiconError::InvalidEntry {
                    reason: format!("duplicate token {tok:?} in vocabulary"),
                });
            }
        }
        Ok(PhoneVocabulary {
            phone_to_index,
            index_to_phone: tokens,
        })
    }
}

/// Builds the vocabulary: PAD, UNK, then all distinct phones in
/// first-occurrence order. Deterministic given input order.
pub fn build_vocabulary<'a>(
    entries: impl IntoIterator<Item = &'a SyllabifiedEntry>,
) -> PhoneVocabulary {
    let mut vocab = PhoneVocabulary::with_reserved();
    for entry in entries {
        for phone in &entry.phones {
            if !vocab.phone_to_index.contains_key(phone) {
                let idx = vocab.index_to_phone.len();
                vocab.phone_to_index.insert(phone.clone(), idx);
                vocab.index_to_phone.push(phone.clone());
            }
        }
    }
    vocab
}

fn tokenize_syllable(
    syllable: &str,
    tokenization: PhoneTokenization,
    line: usize,
) -> Result<Vec<String>, LexiconError> {
    let phones: Vec<String> = match tokenization {
        PhoneTokenization::Char => syllable.chars().map(|c| c.to_string()).collect(),
        PhoneTokenization::Whitespace => syllable.split_whitespace().map(str::to_string).collect(),
    };
    if phones.is_empty() {
        return Err(LexiconError::EmptySyllable { line });
    }
    Ok(phones)
}

fn parse_pronunciation(
    pron: &str,
    format: &LexiconFormat,
    line: usize,
) -> Result<(Vec<String>, Vec<u8>), LexiconError> {
    if pron.is_empty() {
        return Err(LexiconError::EmptyPronunciation { line });
    }
    let mut phones = Vec::new();
    let mut boundaries = Vec::new();
    let syllables: Vec<&str> = pron.split(format.syllable_delimiter).collect();
    if syllables.iter().any(|s| s.is_empty()) {
        return Err(LexiconError::EmptySyllable { line });
    }
    let last = syllables.len() - 1;
    for (si, syllable) in syllables.iter().enumerate() {
        let toks = tokenize_syllable(syllable, format.tokenization, line)?;
        let n = toks.len();
        phones.extend(toks);
        for k in 0..n {
            let boundary_here = si != last && k == n - 1;
            boundaries.push(u8::from(boundary_here));
        }
    }
    Ok((phones, boundaries))
}

/// Parses a lexicon stream: one `word<TAB>pronunciation` entry per
/// non-empty line. Syllable delimiters are consumed into boundary labels
/// (label 1 on the phone preceding each delimiter).
pub fn parse_lexicon<R: BufRead>(
    reader: R,
    format: &LexiconFormat,
) -> Result<Vec<SyllabifiedEntry>, LexiconError> {
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let (word, pron) = line
            .split_once('\t')
            .ok_or(LexiconError::MissingTab { line: line_no })?;
        let (phones, boundaries) = parse_pronunciation(pron, format, line_no)?;
        entries.push(SyllabifiedEntry {
            word: word.to_string(),
            phones,
            boundaries,
        });
    }
    Ok(entries)
}

/// Removes every entry whose word appears two or more times in the input
/// (all copies go). Entries with distinct words but identical
/// pronunciations are kept.
pub fn clean_duplicates(entries: Vec<SyllabifiedEntry>) -> Vec<SyllabifiedEntry> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for e in &entries {
        *counts.entry(e.word.as_str()).or_insert(0) += 1;
    }
    let keep: Vec<bool> = entries.iter().map(|e| counts[e.word.as_str()] == 1).collect();
    entries
        .into_iter()
        .zip(keep)
        .filter_map(|(e, k)| k.then_some(e))
        .collect()
}

/// A padded, index-encoded entry ready for the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedEntry {
    pub indices: Vec<usize>,
    pub labels: Vec<u8>,
    pub true_len: usize,
}

/// Encodes an entry as index/label sequences right-padded to `max_len`.
/// Unseen phones map to UNK.
pub fn encode_entry(
    entry: &SyllabifiedEntry,
    vocab: &PhoneVocabulary,
    max_len: usize,
) -> Result<EncodedEntry, LexiconError> {
    let true_len = entry.phones.len();
    if true_len > max_len {
        return Err(LexiconError::TooLong {
            len: true_len,
            max_len,
        });
    }
    let mut indices: Vec<usize> = entry.phones.iter().map(|p| vocab.lookup(p)).collect();
    indices.resize(max_len, PAD_INDEX);
    let mut labels = entry.boundaries.clone();
    labels.resize(max_len, 0);
    Ok(EncodedEntry {
        indices,
        labels,
        true_len,
    })
}

/// Pronunciation text rebuilt from phones and predicted labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedPronunciation {
    pub text: String,
    /// Model output carried a boundary label on the final phone; rendered
    /// as no delimiter.
    pub trailing_boundary: bool,
}

/// Inserts the syllable delimiter after each phone labeled 1. A label 1 on
/// the final phone produces no delimiter and sets `trailing_boundary`.
pub fn decode_boundaries(
    phones: &[String],
    labels: &[u8],
    format: &LexiconFormat,
) -> DecodedPronunciation {
    assert_eq!(phones.len(), labels.len());
    let joiner = match format.tokenization {
        PhoneTokenization::Char => "",
        PhoneTokenization::Whitespace => " ",
    };
    let mut text = String::new();
    let last = phones.len().saturating_sub(1);
    for (i, phone) in phones.iter().enumerate() {
        if i > 0 && labels[i - 1] != 1 {
            text.push_str(joiner);
        }
        text.push_str(phone);
        if labels[i] == 1 && i != last {
            text.push(format.syllable_delimiter);
        }
    }
    DecodedPronunciation {
        text,
        trailing_boundary: phones.last().is_some() && labels[last] == 1,
    }
}

/// Serializes an entry back to its `word<TAB>pronunciation` line form.
pub fn entry_to_line(entry: &SyllabifiedEntry, format: &LexiconFormat) -> String {
    let decoded = decode_boundaries(&entry.phones, &entry.boundaries, format);
    format!("{}\t{}", entry.word, decoded.text)
}

/// Length of the longest phone sequence in `entries`.
pub fn max_phone_length(entries: &[SyllabifiedEntry]) -> usize {
    entries.iter().map(|e| e.phones.len()).max().unwrap_or(0)
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<SyllabifiedEntry>,
    pub dev: Vec<SyllabifiedEntry>,
    pub test: Vec<SyllabifiedEntry>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn total(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }
}

/// Shuffles entries with a seeded generator and splits 80/10/10: dev and
/// test each take floor(N/10) entries and train takes the remainder, so
/// N = 89,402 yields 71,522 / 8,940 / 8,940.
pub fn split_dataset(entries: Vec<SyllabifiedEntry>, seed: u64) -> Result<DatasetSplit, LexiconError> {
    let n = entries.len();
    if n < 10 {
        return Err(LexiconError::TooFewEntries { n });
    }
    let mut shuffled = entries;
    let mut rng = Rng::from_seed(seed);
    rng.shuffle(&mut shuffled);
    let dev_size = n / 10;
    let test_size = n / 10;
    let train_size = n - dev_size - test_size;
    let mut iter = shuffled.into_iter();
    let train: Vec<_> = iter.by_ref().take(train_size).collect();
    let dev: Vec<_> = iter.by_ref().take(dev_size).collect();
    let test: Vec<_> = iter.collect();
    debug_assert_eq!(test.len(), test_size);
    Ok(DatasetSplit {
        train,
        dev,
        test,
        seed,
    })
}

/// Statistics recorded in `split.meta` alongside the three split files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMeta {
    pub seed: u64,
    pub removed: usize,
    pub format: LexiconFormat,
}

fn write_entries(path: &Path, entries: &[SyllabifiedEntry], format: &LexiconFormat) -> std::io::Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&entry_to_line(e, format));
        out.push('\n');
    }
    std::fs::write(path, out)
}

/// Persists a split as `train.tsv`, `dev.tsv`, `test.tsv` plus a
/// `split.meta` file recording the seed, counts, cleaning statistics, the
/// longest phone sequence, and the lexicon format.
pub fn write_split(dir: &Path, split: &DatasetSplit, meta: &SplitMeta) -> Result<(), LexiconError> {
    std::fs::create_dir_all(dir)?;
    write_entries(&dir.join("train.tsv"), &split.train, &meta.format)?;
    write_entries(&dir.join("dev.tsv"), &split.dev, &meta.format)?;
    write_entries(&dir.join("test.tsv"), &split.test, &meta.format)?;
    // max_len spans the whole cleaned dataset, not just the training part
    let max_len = max_phone_length(&split.train)
        .max(max_phone_length(&split.dev))
        .max(max_phone_length(&split.test));
    let meta_text = format!(
        "seed = {}\ntotal = {}\nremoved = {}\ntrain = {}\ndev = {}\ntest = {}\nmax_len = {}\ntokenization = {}\ndelimiter = {}\n",
        meta.seed,
        split.total(),
        meta.removed,
        split.train.len(),
        split.dev.len(),
        split.test.len(),
        max_len,
        meta.format.tokenization,
        meta.format.syllable_delimiter,
    );
    std::fs::write(dir.join("split.meta"), meta_text)?;
    Ok(())
}

/// Loads a split directory written by [`write_split`].
pub fn read_split(dir: &Path) -> Result<(DatasetSplit, SplitMeta), LexiconError> {
    let meta_path = dir.join("split.meta");
    if !meta_path.exists() {
        return Err(LexiconError::MissingSplitFile {
            file: "split.meta".into(),
        });
    }
    let mut seed = None;
    let mut removed = None;
    let mut tokenization = None;
    let mut delimiter = None;
    for line in std::fs::read_to_string(&meta_path)?.lines() {
        let Some((key, value)) = line.split_once(" = ") else {
            continue;
        };
        match key {
            "seed" => {
                seed = Some(value.parse::<u64>().map_err(|e| LexiconError::BadSplitMeta {
                    reason: format!("seed: {e}"),
                })?)
            }
            "removed" => {
                removed = Some(value.parse::<usize>().map_err(|e| LexiconError::BadSplitMeta {
                    reason: format!("removed: {e}"),
                })?)
            }
            "tokenization" => {
                tokenization =
                    Some(value
                        .parse::<PhoneTokenization>()
                        .map_err(|e| LexiconError::BadSplitMeta { reason: e })?)
            }
            "delimiter" => {
                let mut chars = value.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => delimiter = Some(c),
                    _ => {
                        return Err(LexiconError::BadSplitMeta {
                            reason: format!("delimiter must be one character, got {value:?}"),
                        })
                    }
                }
            }
            _ => {}
        }
    }
    let format = LexiconFormat {
        tokenization: tokenization.ok_or_else(|| LexiconError::BadSplitMeta {
            reason: "missing tokenization".into(),
        })?,
        syllable_delimiter: delimiter.ok_or_else(|| LexiconError::BadSplitMeta {
            reason: "missing delimiter".into(),
        })?,
    };
    let read_part = |name: &str| -> Result<Vec<SyllabifiedEntry>, LexiconError> {
        let path = dir.join(name);
        if !path.exists() {
            return Err(LexiconError::MissingSplitFile { file: name.into() });
        }
        let file = std::fs::File::open(path)?;
        parse_lexicon(std::io::BufReader::new(file), &format)
    };
    let split = DatasetSplit {
        train: read_part("train.tsv")?,
        dev: read_part("dev.tsv")?,
        test: read_part("test.tsv")?,
        seed: seed.ok_or_else(|| LexiconError::BadSplitMeta {
            reason: "missing seed".into(),
        })?,
    };
    let meta = SplitMeta {
        seed: split.seed,
        removed: removed.ok_or_else(|| LexiconError::BadSplitMeta {
            reason: "missing removed".into(),
        })?,
        format,
    };
    Ok((split, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn char_format() -> LexiconFormat {
        LexiconFormat::default()
    }

    fn parse_one(line: &str) -> SyllabifiedEntry {
        parse_lexicon(Cursor::new(line), &char_format())
            .unwrap()
            .remove(0)
    }

    fn entry(word: &str, pron: &str) -> SyllabifiedEntry {
        parse_one(&format!("{word}\t{pron}"))
    }

    #[test]
    fn parses_two_syllable_word() {
        let e = parse_one("achieved\t@-Jivd");
        assert_eq!(e.word, "achieved");
        assert_eq!(e.phones, vec!["@", "J", "i", "v", "d"]);
        assert_eq!(e.boundaries, vec![1, 0, 0, 0, 0]);
    }

    #[test]
    fn parses_three_syllable_word() {
        let e = parse_one("worrisome\twV-rI-sF");
        assert_eq!(e.phones, vec!["w", "V", "r", "I", "s", "F"]);
        assert_eq!(e.boundaries, vec![0, 1, 0, 1, 0, 0]);
    }

    #[test]
    fn parses_single_syllable_word() {
        let e = parse_one("a\tV");
        assert_eq!(e.phones, vec!["V"]);
        assert_eq!(e.boundaries, vec![0]);
    }

    #[test]
    fn parses_whitespace_tokenization() {
        let format = LexiconFormat {
            tokenization: PhoneTokenization::Whitespace,
            syllable_delimiter: '-',
        };
        let entries = parse_lexicon(Cursor::new("hello\thh ax-l ow"), &format).unwrap();
        assert_eq!(entries[0].phones, vec!["hh", "ax", "l", "ow"]);
        assert_eq!(entries[0].boundaries, vec![0, 1, 0, 0]);
    }

    #[test]
    fn reports_missing_tab_with_line_number() {
        let err = parse_lexicon(Cursor::new("ok\ta\nbroken line\n"), &char_format()).unwrap_err();
        match err {
            LexiconError::MissingTab { line } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_empty_pronunciation() {
        assert!(matches!(
            parse_lexicon(Cursor::new("w\t"), &char_format()).unwrap_err(),
            LexiconError::EmptyPronunciation { line: 1 }
        ));
    }

    #[test]
    fn rejects_delimiter_at_edges() {
        for bad in ["w\t-ab", "w\tab-", "w\ta--b"] {
            assert!(matches!(
                parse_lexicon(Cursor::new(bad), &char_format()).unwrap_err(),
                LexiconError::EmptySyllable { line: 1 }
            ));
        }
    }

    #[test]
    fn skips_empty_lines() {
        let entries = parse_lexicon(Cursor::new("a\tV\n\nb\tb-a\n"), &char_format()).unwrap();
        assert_eq!(entries.len(), 2);
    }

    #[test]
    fn tolerates_crlf_line_endings() {
        let entries = parse_lexicon(Cursor::new("a\tV\r\nb\tb-a\r\n"), &char_format()).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].phones, vec!["V"]);
        assert_eq!(entries[1].phones, vec!["b", "a"]);
    }

    #[test]
    fn clean_removes_all_copies_of_duplicated_words() {
        let entries = vec![entry("lead", "lid"), entry("lead", "lEd"), entry("bass", "b{s")];
        let cleaned = clean_duplicates(entries);
        assert_eq!(cleaned.len(), 1);
        assert_eq!(cleaned[0].word, "bass");
    }

    #[test]
    fn clean_keeps_same_pronunciation_different_words() {
        let entries = vec![entry("sun", "sVn"), entry("son", "sVn")];
        assert_eq!(clean_duplicates(entries).len(), 2);
    }

    #[test]
    fn clean_of_empty_input_is_empty() {
        assert!(clean_duplicates(Vec::new()).is_empty());
    }

    #[test]
    fn clean_is_idempotent_and_leaves_unique_words() {
        let entries = vec![
            entry("a", "a"),
            entry("b", "ba"),
            entry("a", "a-a"),
            entry("c", "ka"),
        ];
        let once = clean_duplicates(entries);
        let twice = clean_duplicates(once.clone());
        assert_eq!(once, twice);
        let mut words: Vec<_> = once.iter().map(|e| e.word.clone()).collect();
        words.sort();
        words.dedup();
        assert_eq!(words.len(), once.len());
    }

    #[test]
    fn vocabulary_first_occurrence_order() {
        let entries = vec![entry("w1", "ab"), entry("w2", "ba")];
        let vocab = build_vocabulary(&entries);
        assert_eq!(vocab.size(), 4);
        assert_eq!(vocab.index_of("a"), Some(2));
        assert_eq!(vocab.index_of("b"), Some(3));
        assert_eq!(vocab.phone(0), Some(PAD_TOKEN));
        assert_eq!(vocab.phone(1), Some(UNK_TOKEN));
        // re-parsing the same input gives the identical mapping
        let vocab2 = build_vocabulary(&vec![entry("w1", "ab"), entry("w2", "ba")]);
        assert_eq!(vocab, vocab2);
    }

    #[test]
    fn vocabulary_size_counts_reserved_tokens() {
        // 47 distinct phones -> size 49
        let phones: Vec<String> = (0..47).map(|i| format!("p{i}")).collect();
        let entries = vec![SyllabifiedEntry::new(
            "w".into(),
            phones,
            {
                let mut b = vec![0u8; 47];
                b[46] = 0;
                b
            },
        )
        .unwrap()];
        assert_eq!(build_vocabulary(&entries).size(), 49);
    }

    #[test]
    fn encode_pads_to_max_len() {
        let e = entry("achieved", "@-Jivd");
        let vocab = build_vocabulary(std::slice::from_ref(&e));
        let enc = encode_entry(&e, &vocab, 7).unwrap();
        assert_eq!(enc.true_len, 5);
        assert_eq!(enc.labels, vec![1, 0, 0, 0, 0, 0, 0]);
        assert_eq!(enc.indices[5], PAD_INDEX);
        assert_eq!(enc.indices[6], PAD_INDEX);
        assert_eq!(enc.indices[0], vocab.index_of("@").unwrap());
    }

    #[test]
    fn encode_exact_length_needs_no_padding() {
        let e = entry("a", "V");
        let vocab = build_vocabulary(std::slice::from_ref(&e));
        let enc = encode_entry(&e, &vocab, 1).unwrap();
        assert_eq!(enc.true_len, 1);
        assert_eq!(enc.indices.len(), 1);
    }

    #[test]
    fn encode_maps_unseen_phone_to_unk() {
        let known = entry("a", "V");
        let vocab = build_vocabulary(&[known]);
        let unseen = SyllabifiedEntry::new("x".into(), vec!["ʘ".into()], vec![0]).unwrap();
        let enc = encode_entry(&unseen, &vocab, 3).unwrap();
        assert_eq!(enc.indices[0], UNK_INDEX);
    }

    #[test]
    fn encode_rejects_overlong_entries() {
        let e = entry("achieved", "@-Jivd");
        let vocab = build_vocabulary(std::slice::from_ref(&e));
        assert!(matches!(
            encode_entry(&e, &vocab, 4).unwrap_err(),
            LexiconError::TooLong { len: 5, max_len: 4 }
        ));
    }

    #[test]
    fn decode_inserts_delimiters() {
        let phones: Vec<String> = "wVrIsF".chars().map(|c| c.to_string()).collect();
        let decoded = decode_boundaries(&phones, &[0, 1, 0, 1, 0, 0], &char_format());
        assert_eq!(decoded.text, "wV-rI-sF");
        assert!(!decoded.trailing_boundary);
    }

    #[test]
    fn decode_single_phone() {
        let decoded = decode_boundaries(&["V".to_string()], &[0], &char_format());
        assert_eq!(decoded.text, "V");
    }

    #[test]
    fn decode_long_word() {
        let phones: Vec<String> = "mIsInt3prIt1SH".chars().map(|c| c.to_string()).collect();
        let labels = [0, 0, 1, 0, 1, 0, 1, 0, 0, 1, 0, 1, 0, 0];
        let decoded = decode_boundaries(&phones, &labels, &char_format());
        assert_eq!(decoded.text, "mIs-In-t3-prI-t1-SH");
    }

    #[test]
    fn decode_flags_trailing_boundary() {
        let phones: Vec<String> = vec!["a".into(), "b".into()];
        let decoded = decode_boundaries(&phones, &[0, 1], &char_format());
        assert_eq!(decoded.text, "ab");
        assert!(decoded.trailing_boundary);
    }

    #[test]
    fn split_matches_reference_counts() {
        let entries: Vec<_> = (0..89_402)
            .map(|i| SyllabifiedEntry::new(format!("w{i}"), vec!["a".into()], vec![0]).unwrap())
            .collect();
        let split = split_dataset(entries, 1).unwrap();
        assert_eq!(split.train.len(), 71_522);
        assert_eq!(split.dev.len(), 8_940);
        assert_eq!(split.test.len(), 8_940);
    }

    #[test]
    fn split_of_ten_entries() {
        let entries: Vec<_> = (0..10)
            .map(|i| SyllabifiedEntry::new(format!("w{i}"), vec!["a".into()], vec![0]).unwrap())
            .collect();
        let split = split_dataset(entries, 9).unwrap();
        assert_eq!(
            (split.train.len(), split.dev.len(), split.test.len()),
            (8, 1, 1)
        );
    }

    #[test]
    fn split_rejects_tiny_datasets() {
        let entries: Vec<_> = (0..9)
            .map(|i| SyllabifiedEntry::new(format!("w{i}"), vec!["a".into()], vec![0]).unwrap())
            .collect();
        assert!(matches!(
            split_dataset(entries, 0).unwrap_err(),
            LexiconError::TooFewEntries { n: 9 }
        ));
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let make = || -> Vec<_> {
            (0..50)
                .map(|i| SyllabifiedEntry::new(format!("w{i}"), vec!["a".into()], vec![0]).unwrap())
                .collect()
        };
        let a = split_dataset(make(), 123).unwrap();
        let b = split_dataset(make(), 123).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.dev, b.dev);
        assert_eq!(a.test, b.test);
        let c = split_dataset(make(), 124).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn split_roundtrips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let entries: Vec<_> = (0..20)
            .map(|i| {
                SyllabifiedEntry::new(format!("w{i}"), vec!["b".into(), "a".into()], vec![1, 0])
                    .unwrap()
            })
            .collect();
        let split = split_dataset(entries, 5).unwrap();
        let meta = SplitMeta {
            seed: 5,
            removed: 3,
            format: char_format(),
        };
        write_split(dir.path(), &split, &meta).unwrap();
        let (loaded, loaded_meta) = read_split(dir.path()).unwrap();
        assert_eq!(loaded.train, split.train);
        assert_eq!(loaded.dev, split.dev);
        assert_eq!(loaded.test, split.test);
        assert_eq!(loaded_meta, meta);
        let meta_text = std::fs::read_to_string(dir.path().join("split.meta")).unwrap();
        assert!(meta_text.contains("max_len = 2"), "meta:\n{meta_text}");
    }

    #[test]
    fn max_phone_length_scans_all_entries() {
        let entries = vec![entry("a", "ab"), entry("b", "a-bc-de"), entry("c", "a")];
        assert_eq!(max_phone_length(&entries), 5);
        assert_eq!(max_phone_length(&[]), 0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_entry_line() -> impl Strategy<Value = String> {
            // words of 1..5 syllables, each of 1..4 phones from a small alphabet
            let syllable = proptest::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 1..4)
                .prop_map(|ph| ph.concat());
            proptest::collection::vec(syllable, 1..5)
                .prop_map(|sylls| format!("word\t{}", sylls.join("-")))
        }

        proptest! {
            #[test]
            fn parse_then_decode_roundtrips(line in arb_entry_line()) {
                let format = LexiconFormat::default();
                let entries = parse_lexicon(Cursor::new(line.clone()), &format).unwrap();
                let rebuilt = entry_to_line(&entries[0], &format);
                prop_assert_eq!(line, rebuilt);
            }

            #[test]
            fn boundary_count_is_syllables_minus_one(line in arb_entry_line()) {
                let format = LexiconFormat::default();
                let entries = parse_lexicon(Cursor::new(line.clone()), &format).unwrap();
                let syllables = line.split('\t').nth(1).unwrap().split('-').count();
                let boundaries = entries[0].boundaries.iter().filter(|&&b| b == 1).count();
                prop_assert_eq!(boundaries, syllables - 1);
            }

            #[test]
            fn split_partitions_input(n in 10usize..200, seed in 0u64..1000) {
                let entries: Vec<_> = (0..n)
                    .map(|i| SyllabifiedEntry::new(format!("w{i}"), vec!["a".into()], vec![0]).unwrap())
                    .collect();
                let split = split_dataset(entries.clone(), seed).unwrap();
                prop_assert_eq!(split.dev.len(), n / 10);
                prop_assert_eq!(split.test.len(), n / 10);
                prop_assert_eq!(split.total(), n);
                let mut words: Vec<_> = split
                    .train
                    .iter()
                    .chain(&split.dev)
                    .chain(&split.test)
                    .map(|e| e.word.clone())
                    .collect();
                words.sort();
                words.dedup();
                prop_assert_eq!(words.len(), n);
            }
        }
    }
}
