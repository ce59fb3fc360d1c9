//! Text pipeline: tokenization, vocabularies, fixed-length encoding, review
//! file ingestion, and the dataset cache artifact.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{fnv1a_strings, hex64, seeded_rng, shuffle};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Cache format version; bumped on any layout change.
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One raw review with its helpfulness votes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub text: String,
    /// `a` in the a-of-b vote pair.
    pub helpful_yes: u64,
    /// `b` in the a-of-b vote pair; `helpful_yes <= helpful_total`.
    pub helpful_total: u64,
    pub domain: String,
}

/// Lowercase and split on maximal runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token vocabulary with reserved `<pad>`=0 and `<unk>`=1.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Keep tokens with corpus frequency >= `min_count`, ordered by
    /// (frequency desc, token asc) so ids are stable across runs.
    pub fn build<'a, I>(corpus: I, min_count: u64) -> Vocab
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for doc in corpus {
            for tok in doc {
                *counts.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, u64)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn hash(&self) -> u64 {
        fnv1a_strings(self.tokens.iter().map(|s| s.as_str()))
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

/// Character vocabulary with the same reserved ids. All observed characters
/// are kept; out-of-vocabulary pressure is the word channel's problem, not
/// this one's.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CharVocab {
    chars: Vec<char>,
    #[serde(skip)]
    index: HashMap<char, usize>,
}

impl CharVocab {
    pub fn build<'a, I>(corpus: I) -> CharVocab
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<char, u64> = HashMap::new();
        for doc in corpus {
            for tok in doc {
                for c in tok.chars() {
                    *counts.entry(c).or_insert(0) += 1;
                }
            }
        }
        let mut kept: Vec<(char, u64)> = counts.into_iter().collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        CharVocab::from_chars(kept.into_iter().map(|(c, _)| c).collect())
    }

    pub fn from_chars(chars: Vec<char>) -> CharVocab {
        // Positions 0 and 1 are implicit PAD/UNK; stored chars start at id 2.
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i + 2)).collect();
        CharVocab { chars, index }
    }

    pub fn id(&self, c: char) -> usize {
        *self.index.get(&c).unwrap_or(&UNK_ID)
    }

    /// Total id space including PAD and UNK.
    pub fn len(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn hash(&self) -> u64 {
        let joined: String = self.chars.iter().collect();
        fnv1a_strings([joined.as_str()])
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + 2))
            .collect();
    }
}

/// A review after fixed-length encoding.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncodedReview {
    /// Exactly `m` ids, PAD-filled.
    pub word_ids: Vec<usize>,
    /// `m` sequences of exactly `l_c` char ids each.
    pub char_ids: Vec<Vec<usize>>,
    pub domain_id: usize,
    /// Helpfulness score in `[0, 1]`.
    pub target: f64,
}

/// Encode a token sequence: first `m` tokens kept, PAD-filled to `m`; each
/// word's characters truncated/padded to `l_c`. Out-of-vocabulary words map
/// to UNK while their char ids still reflect the real characters.
pub fn encode_tokens(
    tokens: &[String],
    vocab: &Vocab,
    chars: &CharVocab,
    m: usize,
    l_c: usize,
) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut word_ids = Vec::with_capacity(m);
    let mut char_ids = Vec::with_capacity(m);
    for tok in tokens.iter().take(m) {
        word_ids.push(vocab.id(tok));
        let mut cs: Vec<usize> = tok.chars().take(l_c).map(|c| chars.id(c)).collect();
        cs.resize(l_c, PAD_ID);
        char_ids.push(cs);
    }
    while word_ids.len() < m {
        word_ids.push(PAD_ID);
        char_ids.push(vec![PAD_ID; l_c]);
    }
    (word_ids, char_ids)
}

pub fn encode_review(
    record: &ReviewRecord,
    vocab: &Vocab,
    chars: &CharVocab,
    m: usize,
    l_c: usize,
    domain_id: usize,
) -> Result<EncodedReview> {
    if record.helpful_total == 0 {
        return Err(Error::Label(format!(
            "review in domain {} has zero total votes; target undefined",
            record.domain
        )));
    }
    let tokens = tokenize(&record.text);
    let (word_ids, char_ids) = encode_tokens(&tokens, vocab, chars, m, l_c);
    Ok(EncodedReview {
        word_ids,
        char_ids,
        domain_id,
        target: record.helpful_yes as f64 / record.helpful_total as f64,
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IngestStats {
    pub kept: usize,
    pub total: usize,
    pub skipped_malformed: usize,
    pub skipped_votes: usize,
    pub skipped_label: usize,
}

#[derive(Deserialize)]
struct RawReview {
    #[serde(rename = "reviewText")]
    review_text: Option<String>,
    helpful: Option<Vec<i64>>,
}

/// Read newline-delimited review records, keeping those with
/// `helpful_total > min_votes`. Malformed lines, missing fields, and
/// impossible vote pairs (`a > b`) are skipped and counted.
pub fn ingest_reviews(
    path: impl AsRef<Path>,
    domain: &str,
    min_votes: u64,
) -> Result<(Vec<ReviewRecord>, IngestStats)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut stats = IngestStats::default();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        stats.total += 1;
        let raw: RawReview = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(_) => {
                stats.skipped_malformed += 1;
                continue;
            }
        };
        let (text, helpful) = match (raw.review_text, raw.helpful) {
            (Some(t), Some(h)) => (t, h),
            _ => {
                stats.skipped_malformed += 1;
                continue;
            }
        };
        if helpful.len() != 2 || helpful[0] < 0 || helpful[1] < 0 {
            stats.skipped_malformed += 1;
            continue;
        }
        let (a, b) = (helpful[0] as u64, helpful[1] as u64);
        if a > b {
            stats.skipped_label += 1;
            continue;
        }
        if b <= min_votes {
            stats.skipped_votes += 1;
            continue;
        }
        records.push(ReviewRecord {
            text,
            helpful_yes: a,
            helpful_total: b,
            domain: domain.to_string(),
        });
        stats.kept += 1;
    }
    Ok((records, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Encoded reviews partitioned into disjoint train/dev/test splits, together
/// with everything needed to interpret the ids.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub format_version: u32,
    pub m: usize,
    pub l_c: usize,
    pub vocab: Vocab,
    pub char_vocab: CharVocab,
    pub vocab_hash: String,
    pub char_vocab_hash: String,
    pub domains: Vec<String>,
    pub train: Vec<EncodedReview>,
    pub dev: Vec<EncodedReview>,
    pub test: Vec<EncodedReview>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[EncodedReview] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn domain_count(&self) -> usize {
        self.domains.len()
    }

    pub fn per_domain<'a>(
        &'a self,
        split: Split,
        domain_id: usize,
    ) -> impl Iterator<Item = &'a EncodedReview> {
        self.split(split)
            .iter()
            .filter(move |r| r.domain_id == domain_id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).expect("dataset serializes");
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(json.as_bytes()).map_err(|e| Error::io(path, e))?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut ds: Dataset = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        if ds.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::ArtifactMismatch(format!(
                "dataset cache {} has format version {}, expected {}",
                path.display(),
                ds.format_version,
                DATASET_FORMAT_VERSION
            )));
        }
        ds.vocab.rebuild_index();
        ds.char_vocab.rebuild_index();
        let vh = hex64(ds.vocab.hash());
        let ch = hex64(ds.char_vocab.hash());
        if vh != ds.vocab_hash || ch != ds.char_vocab_hash {
            return Err(Error::ArtifactMismatch(format!(
                "dataset cache {} header hashes do not match its vocabularies",
                path.display()
            )));
        }
        Ok(ds)
    }
}

/// Per-domain seeded shuffle followed by contiguous slicing.
///
/// `ratios` must be positive and sum to 1. A domain with fewer records than
/// split parts sends everything to train (a warning is returned in the
/// second tuple slot as a count of such domains).
pub fn split_dataset(
    encoded: Vec<EncodedReview>,
    domains: &[String],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<EncodedReview>, Vec<EncodedReview>, Vec<EncodedReview>, usize)> {
    let (r_train, r_dev, r_test) = ratios;
    if r_train <= 0.0 || r_dev <= 0.0 || r_test <= 0.0 {
        return Err(Error::Contract(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    if (r_train + r_dev + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "split ratios must sum to 1, got {ratios:?}"
        )));
    }
    let mut by_domain: Vec<Vec<EncodedReview>> = vec![Vec::new(); domains.len()];
    for r in encoded {
        if r.domain_id >= domains.len() {
            return Err(Error::Contract(format!(
                "record carries domain id {} but only {} domains exist",
                r.domain_id,
                domains.len()
            )));
        }
        by_domain[r.domain_id].push(r);
    }
    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    let mut underfilled_domains = 0;
    for (k, mut records) in by_domain.into_iter().enumerate() {
        let mut rng = seeded_rng(seed, 0x5117 + k as u64);
        shuffle(&mut rng, &mut records);
        let n = records.len();
        if n < 3 {
            if n > 0 {
                underfilled_domains += 1;
            }
            train.extend(records);
            continue;
        }
        let n_train = (n as f64 * r_train).floor() as usize;
        let n_dev = (n as f64 * r_dev).floor() as usize;
        for (i, r) in records.into_iter().enumerate() {
            if i < n_train {
                train.push(r);
            } else if i < n_train + n_dev {
                dev.push(r);
            } else {
                test.push(r);
            }
        }
    }
    Ok((train, dev, test, underfilled_domains))
}

/// Encode a full record set into a dataset artifact.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    records: &[ReviewRecord],
    domains: Vec<String>,
    min_count: u64,
    m: usize,
    l_c: usize,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Dataset> {
    if m == 0 || l_c == 0 {
        return Err(Error::Contract(
            "sentence and word length limits must be at least 1".into(),
        ));
    }
    let domain_index: HashMap<&str, usize> = domains
        .iter()
        .enumerate()
        .map(|(i, d)| (d.as_str(), i))
        .collect();
    let token_docs: Vec<Vec<String>> = records.iter().map(|r| tokenize(&r.text)).collect();
    let vocab = Vocab::build(token_docs.iter().map(|d| d.as_slice()), min_count);
    let char_vocab = CharVocab::build(token_docs.iter().map(|d| d.as_slice()));

    let mut encoded = Vec::with_capacity(records.len());
    for r in records {
        let &domain_id = domain_index.get(r.domain.as_str()).ok_or_else(|| {
            Error::Contract(format!("record carries unknown domain {:?}", r.domain))
        })?;
        encoded.push(encode_review(r, &vocab, &char_vocab, m, l_c, domain_id)?);
    }
    let (train, dev, test, _) = split_dataset(encoded, &domains, ratios, seed)?;
    Ok(Dataset {
        format_version: DATASET_FORMAT_VERSION,
        m,
        l_c,
        vocab_hash: hex64(vocab.hash()),
        char_vocab_hash: hex64(char_vocab.hash()),
        vocab,
        char_vocab,
        domains,
        train,
        dev,
        test,
    })
}
