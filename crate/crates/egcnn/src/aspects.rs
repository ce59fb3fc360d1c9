//! Aspect-word distributions learned by collapsed Gibbs sampling, and the
//! per-word aspect representation derived from them.
//!
//! The learner produces a matrix `phi` with one distribution over the
//! vocabulary per aspect. Row-normalizing its transpose gives each word a
//! distribution over aspects, which the encoder consumes as a frozen lookup
//! channel.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{PAD_ID, UNK_ID};
use crate::util::{hex64, sample_weighted, seeded_rng, uniform_index};

pub const ASPECTS_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LdaConfig {
    /// Number of aspects.
    pub aspects: usize,
    /// Document-aspect prior.
    pub alpha: f64,
    /// Aspect-word prior.
    pub beta: f64,
    /// Gibbs sweeps.
    pub iterations: usize,
    pub seed: u64,
}

impl LdaConfig {
    pub fn with_defaults(aspects: usize, seed: u64) -> LdaConfig {
        LdaConfig {
            aspects,
            alpha: 50.0 / aspects as f64,
            beta: 0.01,
            iterations: 200,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.aspects == 0 || self.iterations == 0 {
            return Err(Error::Contract(
                "aspect count and iteration count must be at least 1".into(),
            ));
        }
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::Contract("LDA priors must be positive".into()));
        }
        Ok(())
    }
}

/// `aspects x vocab` matrix; every row is a distribution over the vocabulary.
#[derive(Clone, Debug)]
pub struct AspectWordDistribution {
    pub aspects: usize,
    pub vocab_size: usize,
    /// Row-major `[aspects, vocab_size]`.
    pub phi: Tensor,
}

/// `vocab x aspects` matrix; row `v` is word v's distribution over aspects.
#[derive(Clone, Debug, PartialEq)]
pub struct WordAspectRepresentation {
    pub aspects: usize,
    pub vocab_size: usize,
    pub rows: Tensor,
}

/// Collapsed Gibbs sampling over the corpus. PAD and UNK ids never enter the
/// count tables. Deterministic for a given seed.
pub fn fit_aspects(
    corpus: &[Vec<usize>],
    vocab_size: usize,
    config: &LdaConfig,
) -> Result<AspectWordDistribution> {
    config.validate()?;
    let docs: Vec<Vec<usize>> = corpus
        .iter()
        .map(|doc| {
            doc.iter()
                .copied()
                .filter(|&w| w != PAD_ID && w != UNK_ID)
                .collect::<Vec<usize>>()
        })
        .filter(|doc: &Vec<usize>| !doc.is_empty())
        .collect();
    if docs.is_empty() {
        return Err(Error::Contract(
            "cannot fit aspects on an empty corpus".into(),
        ));
    }
    for doc in &docs {
        if let Some(&w) = doc.iter().find(|&&w| w >= vocab_size) {
            return Err(Error::Index(format!(
                "word id {w} exceeds vocabulary of {vocab_size}"
            )));
        }
    }

    let a = config.aspects;
    let v = vocab_size;
    let mut rng = seeded_rng(config.seed, 0xa59ec7);

    let mut doc_aspect = vec![0u32; docs.len() * a];
    let mut aspect_word = vec![0u32; a * v];
    let mut aspect_total = vec![0u32; a];
    let mut assignments: Vec<Vec<usize>> = Vec::with_capacity(docs.len());

    for (d, doc) in docs.iter().enumerate() {
        let mut z_d = Vec::with_capacity(doc.len());
        for &w in doc {
            let z = uniform_index(&mut rng, a);
            z_d.push(z);
            doc_aspect[d * a + z] += 1;
            aspect_word[z * v + w] += 1;
            aspect_total[z] += 1;
        }
        assignments.push(z_d);
    }

    let alpha = config.alpha;
    let beta = config.beta;
    let beta_total = beta * v as f64;
    let mut weights = vec![0.0f64; a];
    for _sweep in 0..config.iterations {
        for (d, doc) in docs.iter().enumerate() {
            for (i, &w) in doc.iter().enumerate() {
                let old = assignments[d][i];
                doc_aspect[d * a + old] -= 1;
                aspect_word[old * v + w] -= 1;
                aspect_total[old] -= 1;

                for (z, wt) in weights.iter_mut().enumerate() {
                    let doc_part = doc_aspect[d * a + z] as f64 + alpha;
                    let word_part = (aspect_word[z * v + w] as f64 + beta)
                        / (aspect_total[z] as f64 + beta_total);
                    *wt = doc_part * word_part;
                }
                let new = sample_weighted(&mut rng, &weights);
                assignments[d][i] = new;
                doc_aspect[d * a + new] += 1;
                aspect_word[new * v + w] += 1;
                aspect_total[new] += 1;
            }
        }
    }

    let mut phi = Tensor::zeros(&[a, v]);
    for z in 0..a {
        let denom = aspect_total[z] as f64 + beta_total;
        let row = phi.row_mut(z);
        for (w, out) in row.iter_mut().enumerate() {
            *out = (aspect_word[z * v + w] as f64 + beta) / denom;
        }
    }
    Ok(AspectWordDistribution {
        aspects: a,
        vocab_size: v,
        phi,
    })
}

/// Row-normalize the transpose of `phi`. An all-zero word column becomes the
/// uniform row `1/A`; PAD and UNK rows are forced uniform since no topical
/// evidence exists for them.
pub fn word_aspect_rep(dist: &AspectWordDistribution) -> WordAspectRepresentation {
    let a = dist.aspects;
    let v = dist.vocab_size;
    let mut rows = Tensor::zeros(&[v, a]);
    for w in 0..v {
        let out = rows.row_mut(w);
        if w == PAD_ID || w == UNK_ID {
            out.fill(1.0 / a as f64);
            continue;
        }
        let mut total = 0.0;
        for z in 0..a {
            let val = dist.phi.row(z)[w];
            out[z] = val;
            total += val;
        }
        if total > 0.0 {
            for o in out.iter_mut() {
                *o /= total;
            }
        } else {
            out.fill(1.0 / a as f64);
        }
    }
    WordAspectRepresentation {
        aspects: a,
        vocab_size: v,
        rows,
    }
}

impl WordAspectRepresentation {
    /// Uniform representation for models trained without a fitted aspect
    /// file: every word gets `1/A` mass on every aspect.
    pub fn uniform(vocab_size: usize, aspects: usize) -> WordAspectRepresentation {
        WordAspectRepresentation {
            aspects,
            vocab_size,
            rows: Tensor::filled(&[vocab_size, aspects], 1.0 / aspects as f64),
        }
    }

    /// Row `word_id`; PAD and UNK are uniform by construction.
    pub fn lookup(&self, word_id: usize) -> Result<&[f64]> {
        if word_id >= self.vocab_size {
            return Err(Error::Index(format!(
                "aspect lookup id {word_id} out of range for vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(self.rows.row(word_id))
    }

    pub fn hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.rows.len() * 8 + 16);
        bytes.extend_from_slice(&(self.aspects as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.vocab_size as u64).to_le_bytes());
        for v in self.rows.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        crate::util::fnv1a(&bytes)
    }
}

#[derive(Serialize, Deserialize)]
struct AspectsFile {
    format_version: u32,
    kind: String,
    aspects: usize,
    vocab_size: usize,
    vocab_hash: String,
    rows: Vec<Vec<f64>>,
}

pub fn save_word_aspects(
    rep: &WordAspectRepresentation,
    vocab_hash: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = AspectsFile {
        format_version: ASPECTS_FORMAT_VERSION,
        kind: "aspects".into(),
        aspects: rep.aspects,
        vocab_size: rep.vocab_size,
        vocab_hash: hex64(vocab_hash),
        rows: (0..rep.vocab_size)
            .map(|w| rep.rows.row(w).to_vec())
            .collect(),
    };
    let json = serde_json::to_string(&file).expect("aspects serialize");
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(json.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load a word-aspect file, refusing it when the vocabulary hash does not
/// match the dataset it will be paired with.
pub fn load_word_aspects(
    path: impl AsRef<Path>,
    expected_vocab_hash: u64,
) -> Result<WordAspectRepresentation> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: AspectsFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if file.format_version != ASPECTS_FORMAT_VERSION {
        return Err(Error::ArtifactMismatch(format!(
            "aspects file {} has format version {}, expected {}",
            path.display(),
            file.format_version,
            ASPECTS_FORMAT_VERSION
        )));
    }
    if file.vocab_hash != hex64(expected_vocab_hash) {
        return Err(Error::ArtifactMismatch(format!(
            "aspects file {} was fitted against a different vocabulary",
            path.display()
        )));
    }
    let mut data = Vec::with_capacity(file.vocab_size * file.aspects);
    for row in &file.rows {
        if row.len() != file.aspects {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: "aspect row width mismatch".into(),
            });
        }
        data.extend_from_slice(row);
    }
    Ok(WordAspectRepresentation {
        aspects: file.aspects,
        vocab_size: file.vocab_size,
        rows: Tensor::from_vec(&[file.vocab_size, file.aspects], data)?,
    })
}
