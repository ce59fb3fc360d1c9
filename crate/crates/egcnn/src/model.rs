//! The gated convolutional encoder and its parameter bundle.
//!
//! A review is encoded as an `m x D_total` matrix stacking, per word, the
//! word embedding, a convolutional character feature vector, and the word's
//! aspect distribution. A learned scalar gate in `(0,1)` multiplies each
//! word's stacked vector, after which a bank of full-width convolutions with
//! max-over-time pooling produces the hidden representation whose inner
//! product with the (shared + domain) head is the predicted score.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aspects::WordAspectRepresentation;
use crate::autodiff::{sigmoid_scalar, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::{EncodedReview, Vocab, PAD_ID};
use crate::util::{fnv1a, hex64, seeded_rng, uniform};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Sentence length limit `m`; shorter reviews are padded, longer ones
    /// truncated.
    pub max_words: usize,
    /// Word embedding dimension.
    pub word_dim: usize,
    /// Character embedding dimension.
    pub char_dim: usize,
    /// Character feature channels (output width of the char encoder).
    pub char_channels: usize,
    /// Character convolution window.
    pub char_width: usize,
    /// Aspect count.
    pub aspects: usize,
    /// Convolution window sizes over words.
    pub filter_widths: Vec<usize>,
    /// Channels per filter width.
    pub channels: usize,
    /// Character length limit per word.
    pub max_word_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            max_words: 100,
            word_dim: 100,
            char_dim: 16,
            char_channels: 50,
            char_width: 3,
            aspects: 100,
            filter_widths: vec![2, 3, 4, 5],
            channels: 128,
            max_word_len: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            self.max_words,
            self.word_dim,
            self.char_dim,
            self.char_channels,
            self.char_width,
            self.aspects,
            self.channels,
            self.max_word_len,
        ];
        if extents.iter().any(|&e| e == 0) {
            return Err(Error::Contract(
                "every model dimension must be at least 1".into(),
            ));
        }
        if self.filter_widths.is_empty() {
            return Err(Error::Contract("at least one filter width required".into()));
        }
        let mut widths = self.filter_widths.clone();
        widths.sort_unstable();
        widths.dedup();
        if widths.len() != self.filter_widths.len() || widths != self.filter_widths {
            return Err(Error::Contract(
                "filter widths must be strictly ascending and distinct".into(),
            ));
        }
        if self.filter_widths.iter().any(|&f| f < 1 || f > self.max_words) {
            return Err(Error::Contract(format!(
                "filter widths {:?} must lie in [1, {}]",
                self.filter_widths, self.max_words
            )));
        }
        if self.char_width > self.max_word_len {
            return Err(Error::Contract(format!(
                "char window {} exceeds word length limit {}",
                self.char_width, self.max_word_len
            )));
        }
        Ok(())
    }

    /// Width of one stacked word vector: word + char + aspect parts.
    pub fn stacked_dim(&self) -> usize {
        self.word_dim + self.char_channels + self.aspects
    }

    /// Length of the hidden representation.
    pub fn hidden_dim(&self) -> usize {
        self.filter_widths.len() * self.channels
    }
}

/// Training/head layout variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Shared head plus per-domain heads with the learned correlation matrix.
    Full,
    /// One shared head over pooled domains; no domain heads, no trace term.
    FullyShared,
    /// Per-domain heads only with the correlation fixed at `I/K`; the
    /// degenerate alternative reading of the fully-shared baseline.
    DegenerateShared,
    /// The full single-domain model trained on one domain's data.
    TargetOnly { domain: usize },
}

impl TrainMode {
    pub fn uses_shared_head(&self) -> bool {
        !matches!(self, TrainMode::DegenerateShared)
    }

    pub fn uses_domain_heads(&self) -> bool {
        matches!(self, TrainMode::Full | TrainMode::DegenerateShared)
    }

    pub fn label(&self) -> String {
        match self {
            TrainMode::Full => "full".into(),
            TrainMode::FullyShared => "fully-shared".into(),
            TrainMode::DegenerateShared => "fully-shared(per-domain)".into(),
            TrainMode::TargetOnly { domain } => format!("target-only({domain})"),
        }
    }
}

/// Whether gates multiply the stacked vectors or are clamped to one
/// (the ungated ablation encoder).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Learned,
    ClampedOne,
}

struct ParamIds {
    word_emb: ParamId,
    char_emb: ParamId,
    char_filters: ParamId,
    char_bias: ParamId,
    gate_w: ParamId,
    gate_b: ParamId,
    /// One (filters, bias) pair per filter width, ascending.
    conv: Vec<(ParamId, ParamId)>,
    shared_u: Option<ParamId>,
    domain_w: Option<ParamId>,
}

pub struct Egcnn {
    pub config: ModelConfig,
    pub mode: TrainMode,
    pub store: ParamStore,
    ids: ParamIds,
    /// Frozen word-aspect rows; not a parameter.
    pub phi_prime: WordAspectRepresentation,
    pub domains: Vec<String>,
    pub vocab_hash: u64,
    pub char_vocab_hash: u64,
    pub aspect_hash: u64,
    /// Current domain correlation (row-major K x K); `None` for modes
    /// without domain heads.
    pub omega: Option<Vec<f64>>,
}

pub struct EncodeOutput {
    /// Hidden representation of length `hidden_dim`.
    pub hidden: Var,
    /// Per-word gate values, length `m` (including PAD positions).
    pub gates: Var,
}

impl Egcnn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: ModelConfig,
        mode: TrainMode,
        vocab_size: usize,
        char_vocab_size: usize,
        domains: Vec<String>,
        phi_prime: WordAspectRepresentation,
        vocab_hash: u64,
        char_vocab_hash: u64,
        seed: u64,
    ) -> Result<Egcnn> {
        config.validate()?;
        if domains.is_empty() {
            return Err(Error::Contract("at least one domain required".into()));
        }
        if phi_prime.vocab_size != vocab_size || phi_prime.aspects != config.aspects {
            return Err(Error::Contract(format!(
                "aspect representation is {}x{} but the model needs {}x{}",
                phi_prime.vocab_size, phi_prime.aspects, vocab_size, config.aspects
            )));
        }
        if let TrainMode::TargetOnly { domain } = mode {
            if domain >= domains.len() {
                return Err(Error::Contract(format!(
                    "target domain {domain} out of range for {} domains",
                    domains.len()
                )));
            }
        }
        let k = domains.len();
        let h = config.hidden_dim();
        let d_total = config.stacked_dim();
        let mut rng = seeded_rng(seed, 0x1417);
        let mut store = ParamStore::new();

        let mut init = |shape: &[usize], frozen_first_row: bool| -> Tensor {
            let mut t = Tensor::zeros(shape);
            let width = t.row_width();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                if frozen_first_row && i < width {
                    continue;
                }
                *v = uniform(&mut rng, -0.05, 0.05);
            }
            t
        };

        let word_emb = store.add_with_frozen_rows(
            "word_emb",
            init(&[vocab_size, config.word_dim], true),
            vec![PAD_ID],
        );
        let char_emb = store.add_with_frozen_rows(
            "char_emb",
            init(&[char_vocab_size, config.char_dim], true),
            vec![PAD_ID],
        );
        let char_filters = store.add(
            "char_filters",
            init(&[config.char_width, config.char_dim, config.char_channels], false),
        );
        let char_bias = store.add("char_bias", Tensor::zeros(&[config.char_channels]));
        let gate_w = store.add("gate_w", init(&[d_total], false));
        let gate_b = store.add("gate_b", Tensor::zeros(&[1]));
        let mut conv = Vec::new();
        for &f in &config.filter_widths {
            let filters = store.add(
                &format!("conv_f{f}_filters"),
                init(&[f, d_total, config.channels], false),
            );
            let bias = store.add(&format!("conv_f{f}_bias"), Tensor::zeros(&[config.channels]));
            conv.push((filters, bias));
        }
        let shared_u = mode
            .uses_shared_head()
            .then(|| store.add("shared_u", init(&[h], false)));
        let domain_w = mode
            .uses_domain_heads()
            .then(|| store.add("domain_w", Tensor::zeros(&[k, h])));

        let omega = mode
            .uses_domain_heads()
            .then(|| identity_scaled(k));

        Ok(Egcnn {
            config,
            mode,
            store,
            ids: ParamIds {
                word_emb,
                char_emb,
                char_filters,
                char_bias,
                gate_w,
                gate_b,
                conv,
                shared_u,
                domain_w,
            },
            phi_prime,
            domains,
            vocab_hash,
            char_vocab_hash,
            aspect_hash: 0,
            omega,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.store.value(self.ids.word_emb).rows()
    }

    pub fn char_vocab_size(&self) -> usize {
        self.store.value(self.ids.char_emb).rows()
    }

    pub fn domain_count(&self) -> usize {
        self.domains.len()
    }

    pub fn domain_heads(&self) -> Option<ParamId> {
        self.ids.domain_w
    }

    pub fn shared_head(&self) -> Option<ParamId> {
        self.ids.shared_u
    }

    fn check_review(&self, review: &EncodedReview) -> Result<()> {
        let cfg = &self.config;
        if review.word_ids.len() != cfg.max_words
            || review.char_ids.len() != cfg.max_words
            || review.char_ids.iter().any(|c| c.len() != cfg.max_word_len)
        {
            return Err(Error::Contract(format!(
                "review encoded for m={} l_c={} but model expects m={} l_c={}",
                review.word_ids.len(),
                review.char_ids.first().map_or(0, |c| c.len()),
                cfg.max_words,
                cfg.max_word_len
            )));
        }
        Ok(())
    }

    /// Character feature vector for one word: embed, convolve, relu,
    /// max-pool over character positions.
    fn char_emb_on_tape(&self, tape: &mut Tape, char_ids: &[usize]) -> Result<Var> {
        let table = tape.param(&self.store, self.ids.char_emb)?;
        let emb = tape.embedding_lookup(table, char_ids)?;
        let filters = tape.param(&self.store, self.ids.char_filters)?;
        let bias = tape.param(&self.store, self.ids.char_bias)?;
        let conv = tape.text_conv(emb, filters, bias)?;
        let act = tape.relu(conv)?;
        tape.max_pool_over_time(act)
    }

    /// Stacked `m x D_total` representation: word, char, aspect parts
    /// concatenated row-wise in that fixed order.
    fn stacked_on_tape(&self, tape: &mut Tape, review: &EncodedReview) -> Result<Var> {
        let cfg = &self.config;
        let table = tape.param(&self.store, self.ids.word_emb)?;
        let word_part = tape.embedding_lookup(table, &review.word_ids)?;

        // Identical char sequences (PAD tails especially) share one subgraph.
        let mut memo: HashMap<&[usize], Var> = HashMap::new();
        let mut char_rows = Vec::with_capacity(cfg.max_words);
        for cs in &review.char_ids {
            let var = match memo.get(cs.as_slice()) {
                Some(&v) => v,
                None => {
                    let v = self.char_emb_on_tape(tape, cs)?;
                    memo.insert(cs.as_slice(), v);
                    v
                }
            };
            char_rows.push(var);
        }
        let char_part = tape.concat(&char_rows, &[cfg.max_words, cfg.char_channels])?;

        let mut aspect = Tensor::zeros(&[cfg.max_words, cfg.aspects]);
        for (i, &w) in review.word_ids.iter().enumerate() {
            aspect.row_mut(i).copy_from_slice(self.phi_prime.lookup(w)?);
        }
        let aspect_part = tape.constant(aspect)?;

        tape.hconcat(&[word_part, char_part, aspect_part])
    }

    /// Full encoder: gated stacked representation through the convolution
    /// bank, widths ascending, pooled and concatenated.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        review: &EncodedReview,
        gate_mode: GateMode,
    ) -> Result<EncodeOutput> {
        self.check_review(review)?;
        let stacked = self.stacked_on_tape(tape, review)?;

        let gate_w = tape.param(&self.store, self.ids.gate_w)?;
        let gate_b = tape.param(&self.store, self.ids.gate_b)?;
        let pre = tape.matvec_bias(stacked, gate_w, gate_b)?;
        let gates = tape.sigmoid(pre)?;

        let gated = match gate_mode {
            GateMode::Learned => tape.scale_rows(stacked, gates)?,
            GateMode::ClampedOne => stacked,
        };

        let mut pooled = Vec::with_capacity(self.ids.conv.len());
        for &(filters, bias) in &self.ids.conv {
            let fv = tape.param(&self.store, filters)?;
            let bv = tape.param(&self.store, bias)?;
            let conv = tape.text_conv(gated, fv, bv)?;
            let act = tape.relu(conv)?;
            pooled.push(tape.max_pool_over_time(act)?);
        }
        let hidden = tape.concat(&pooled, &[self.config.hidden_dim()])?;
        Ok(EncodeOutput { hidden, gates })
    }

    /// Prediction head: `(U + W_k) . h` in full mode, `U . h` for shared and
    /// target-only heads, `W_k . h` for the per-domain degenerate variant.
    pub fn predict_on_tape(&self, tape: &mut Tape, hidden: Var, domain_id: usize) -> Result<Var> {
        let domain_row = |tape: &mut Tape, id: ParamId| -> Result<Var> {
            if domain_id >= self.domain_count() {
                return Err(Error::Index(format!(
                    "domain id {domain_id} out of range for {} domains",
                    self.domain_count()
                )));
            }
            let w = tape.param(&self.store, id)?;
            tape.row_slice(w, domain_id)
        };
        let head = match (self.ids.shared_u, self.ids.domain_w) {
            (Some(u), Some(w)) => {
                let uv = tape.param(&self.store, u)?;
                let wk = domain_row(tape, w)?;
                tape.add(uv, wk)?
            }
            (Some(u), None) => tape.param(&self.store, u)?,
            (None, Some(w)) => domain_row(tape, w)?,
            (None, None) => unreachable!("model always has at least one head"),
        };
        tape.dot(head, hidden)
    }

    /// Forward-only encoding; returns the hidden vector and per-word gates.
    pub fn encode(&self, review: &EncodedReview) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let out = self.encode_on_tape(&mut tape, review, GateMode::Learned)?;
        Ok((
            tape.value(out.hidden).clone(),
            tape.value(out.gates).data().to_vec(),
        ))
    }

    /// Forward-only prediction of the helpfulness score.
    pub fn predict(&self, review: &EncodedReview) -> Result<f64> {
        let mut tape = Tape::new();
        let enc = self.encode_on_tape(&mut tape, review, GateMode::Learned)?;
        let pred = self.predict_on_tape(&mut tape, enc.hidden, review.domain_id)?;
        Ok(tape.value(pred).item())
    }

    /// Character feature vector for one word outside any tape.
    pub fn char_features(&self, char_ids: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = self.char_emb_on_tape(&mut tape, char_ids)?;
        Ok(tape.value(v).data().to_vec())
    }

    /// One word's stacked representation (word ⊕ char ⊕ aspect).
    pub fn word_representation(&self, word_id: usize, char_ids: &[usize]) -> Result<Vec<f64>> {
        if word_id >= self.vocab_size() {
            return Err(Error::Index(format!(
                "word id {word_id} out of range for vocabulary of {}",
                self.vocab_size()
            )));
        }
        let mut out = self.store.value(self.ids.word_emb).row(word_id).to_vec();
        out.extend(self.char_features(char_ids)?);
        out.extend_from_slice(self.phi_prime.lookup(word_id)?);
        Ok(out)
    }

    /// Scalar gate for a stacked word vector.
    pub fn gate_value(&self, stacked: &[f64]) -> Result<f64> {
        let w = self.store.value(self.ids.gate_w);
        if stacked.len() != w.len() {
            return Err(Error::Shape(format!(
                "gate input of {} elements does not match gate layer of {}",
                stacked.len(),
                w.len()
            )));
        }
        let z: f64 = w.data().iter().zip(stacked).map(|(a, b)| a * b).sum();
        Ok(sigmoid_scalar(z + self.store.value(self.ids.gate_b).item()))
    }

    /// Per-word gate values aligned with tokens; PAD positions omitted.
    pub fn inspect_gates(
        &self,
        review: &EncodedReview,
        vocab: &Vocab,
    ) -> Result<Vec<(String, f64)>> {
        let (_, gates) = self.encode(review)?;
        Ok(review
            .word_ids
            .iter()
            .zip(gates)
            .filter(|(&id, _)| id != PAD_ID)
            .map(|(&id, g)| (vocab.token(id).to_string(), g))
            .collect())
    }

    /// Stable digest over configuration and parameter values.
    pub fn digest(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.config).expect("config serializes");
        for (_, p) in self.store.iter() {
            bytes.extend_from_slice(p.name.as_bytes());
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        hex64(fnv1a(&bytes))
    }
}

fn identity_scaled(k: usize) -> Vec<f64> {
    let mut m = vec![0.0; k * k];
    for i in 0..k {
        m[i * k + i] = 1.0 / k as f64;
    }
    m
}

/// Parse a word-vector file: one `token v1 .. vD` line per token. Every
/// line must carry exactly `dim` values.
pub fn load_word_vectors(
    path: impl AsRef<Path>,
    dim: usize,
) -> Result<HashMap<String, Vec<f64>>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap().to_string();
        let values: std::result::Result<Vec<f64>, _> =
            parts.map(|p| p.parse::<f64>()).collect();
        let values = values.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: format!("line {}: {e}", lineno + 1),
        })?;
        if values.len() != dim {
            return Err(Error::Contract(format!(
                "word vector for {token:?} has {} dimensions, model expects {dim}",
                values.len()
            )));
        }
        out.insert(token, values);
    }
    Ok(out)
}

/// Overwrite embedding rows for vocabulary tokens present in `vectors`.
/// Returns how many rows were initialized. PAD and UNK stay untouched.
pub fn apply_word_vectors(
    model: &mut Egcnn,
    vocab: &Vocab,
    vectors: &HashMap<String, Vec<f64>>,
) -> usize {
    let mut applied = 0;
    let id = model.ids.word_emb;
    for word_id in 2..vocab.len() {
        if let Some(vec) = vectors.get(vocab.token(word_id)) {
            model
                .store
                .get_mut(id)
                .value
                .row_mut(word_id)
                .copy_from_slice(vec);
            applied += 1;
        }
    }
    applied
}

// ── Checkpoint artifact ─────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    value: Vec<f64>,
    accum: Vec<f64>,
    frozen_rows: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    kind: String,
    config: ModelConfig,
    mode: TrainMode,
    domains: Vec<String>,
    vocab_hash: String,
    char_vocab_hash: String,
    aspect_hash: String,
    omega: Option<Vec<f64>>,
    phi_prime: Tensor,
    params: Vec<ParamRecord>,
    run_config: serde_json::Value,
    seed: u64,
}

pub fn save_checkpoint(
    model: &Egcnn,
    run_config: serde_json::Value,
    seed: u64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: "checkpoint".into(),
        config: model.config.clone(),
        mode: model.mode,
        domains: model.domains.clone(),
        vocab_hash: hex64(model.vocab_hash),
        char_vocab_hash: hex64(model.char_vocab_hash),
        aspect_hash: hex64(model.aspect_hash),
        omega: model.omega.clone(),
        phi_prime: model.phi_prime.rows.clone(),
        params: model
            .store
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                value: p.value.data().to_vec(),
                accum: p.accum.data().to_vec(),
                frozen_rows: p.frozen_rows.clone(),
            })
            .collect(),
        run_config,
        seed,
    };
    let json = serde_json::to_string(&file).expect("checkpoint serializes");
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Egcnn> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if file.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::ArtifactMismatch(format!(
            "checkpoint {} has format version {}, expected {}",
            path.display(),
            file.format_version,
            CHECKPOINT_FORMAT_VERSION
        )));
    }
    file.config.validate()?;
    let phi_rows = file.phi_prime;
    if phi_rows.shape().len() != 2 || phi_rows.shape()[1] != file.config.aspects {
        return Err(Error::Parse {
            path: path.display().to_string(),
            detail: "aspect matrix shape does not match configuration".into(),
        });
    }
    let phi_prime = WordAspectRepresentation {
        aspects: file.config.aspects,
        vocab_size: phi_rows.shape()[0],
        rows: phi_rows,
    };
    let vocab_size = phi_prime.vocab_size;
    let char_vocab_size = file
        .params
        .iter()
        .find(|p| p.name == "char_emb")
        .map(|p| p.shape[0])
        .ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            detail: "checkpoint is missing the char_emb parameter".into(),
        })?;

    let mut model = Egcnn::new(
        file.config,
        file.mode,
        vocab_size,
        char_vocab_size,
        file.domains,
        phi_prime,
        parse_hex(&file.vocab_hash, path)?,
        parse_hex(&file.char_vocab_hash, path)?,
        file.seed,
    )?;
    model.aspect_hash = parse_hex(&file.aspect_hash, path)?;
    model.omega = file.omega;

    let mut by_name: HashMap<&str, &ParamRecord> =
        file.params.iter().map(|p| (p.name.as_str(), p)).collect();
    for id in model.store.ids().collect::<Vec<_>>() {
        let p = model.store.get_mut(id);
        let rec = by_name.remove(p.name.as_str()).ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            detail: format!("checkpoint is missing parameter {}", p.name),
        })?;
        if rec.shape != p.value.shape() {
            return Err(Error::ArtifactMismatch(format!(
                "parameter {} has shape {:?} in the checkpoint but the model expects {:?}",
                p.name,
                rec.shape,
                p.value.shape()
            )));
        }
        p.value = Tensor::from_vec(&rec.shape, rec.value.clone())?;
        p.accum = Tensor::from_vec(&rec.shape, rec.accum.clone())?;
        p.frozen_rows = rec.frozen_rows.clone();
    }
    if !by_name.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            detail: format!(
                "checkpoint carries unexpected parameters: {:?}",
                by_name.keys().collect::<Vec<_>>()
            ),
        });
    }
    Ok(model)
}

fn parse_hex(s: &str, path: &Path) -> Result<u64> {
    u64::from_str_radix(s, 16).map_err(|_| Error::Parse {
        path: path.display().to_string(),
        detail: format!("bad hash field {s:?}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{CharVocab, EncodedReview, PAD_ID};

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            max_words: 8,
            word_dim: 6,
            char_dim: 4,
            char_channels: 5,
            char_width: 3,
            aspects: 3,
            filter_widths: vec![2, 3],
            channels: 4,
            max_word_len: 6,
        }
    }

    pub(crate) fn small_model(seed: u64) -> Egcnn {
        let cfg = small_config();
        Egcnn::new(
            cfg.clone(),
            TrainMode::Full,
            12,
            9,
            vec!["a".into(), "b".into()],
            WordAspectRepresentation::uniform(12, cfg.aspects),
            1,
            2,
            seed,
        )
        .unwrap()
    }

    pub(crate) fn review(word_ids: Vec<usize>, domain_id: usize, target: f64) -> EncodedReview {
        let cfg = small_config();
        let mut ids = word_ids;
        ids.resize(cfg.max_words, PAD_ID);
        let char_ids = ids
            .iter()
            .map(|&w| {
                if w == PAD_ID {
                    vec![PAD_ID; cfg.max_word_len]
                } else {
                    let mut cs = vec![2 + (w % 6), 2 + ((w * 3) % 6), 2 + ((w * 5) % 6)];
                    cs.resize(cfg.max_word_len, PAD_ID);
                    cs
                }
            })
            .collect();
        EncodedReview {
            word_ids: ids,
            char_ids,
            domain_id,
            target,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = small_config();
        c.filter_widths = vec![3, 2];
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.filter_widths = vec![2, 9];
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.char_width = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn stacked_dim_and_hidden_dim() {
        let c = ModelConfig {
            word_dim: 100,
            char_channels: 50,
            aspects: 100,
            ..ModelConfig::default()
        };
        assert_eq!(c.stacked_dim(), 250);
        assert_eq!(c.hidden_dim(), 512);
    }

    #[test]
    fn char_features_shape_invariant_and_pad_value() {
        let model = small_model(3);
        let cfg = &model.config;
        // All-PAD word: zero embeddings propagate to relu(bias) pooled.
        let pad_word = vec![PAD_ID; cfg.max_word_len];
        let feats = model.char_features(&pad_word).unwrap();
        assert_eq!(feats.len(), cfg.char_channels);
        let bias = model.store.value(model.ids.char_bias).data();
        for (f, b) in feats.iter().zip(bias) {
            assert!((f - b.max(0.0)).abs() < 1e-15);
        }
        // Length is the same for short and long words.
        let one_char = {
            let mut c = vec![2];
            c.resize(cfg.max_word_len, PAD_ID);
            c
        };
        assert_eq!(model.char_features(&one_char).unwrap().len(), cfg.char_channels);
    }

    #[test]
    fn char_features_sensitive_to_one_char() {
        let model = small_model(5);
        let cfg = &model.config;
        let mut a = vec![2, 3, 4];
        a.resize(cfg.max_word_len, PAD_ID);
        let mut b = vec![2, 3, 5];
        b.resize(cfg.max_word_len, PAD_ID);
        let fa = model.char_features(&a).unwrap();
        let fb = model.char_features(&b).unwrap();
        assert!(fa.iter().zip(&fb).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn word_representation_stacks_in_order() {
        let model = small_model(7);
        let cfg = &model.config;
        let chars = {
            let mut c = vec![2, 3];
            c.resize(cfg.max_word_len, PAD_ID);
            c
        };
        let rep = model.word_representation(4, &chars).unwrap();
        assert_eq!(rep.len(), cfg.stacked_dim());
        // Word slice equals the embedding row exactly.
        assert_eq!(
            &rep[..cfg.word_dim],
            model.store.value(model.ids.word_emb).row(4)
        );
        // Aspect tail is the (uniform) aspect row.
        let tail = &rep[cfg.word_dim + cfg.char_channels..];
        for v in tail {
            assert!((v - 1.0 / cfg.aspects as f64).abs() < 1e-15);
        }
        // PAD word: zero word part.
        let pad_rep = model
            .word_representation(PAD_ID, &vec![PAD_ID; cfg.max_word_len])
            .unwrap();
        assert!(pad_rep[..cfg.word_dim].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_examples() {
        let mut model = small_model(9);
        let d = model.config.stacked_dim();
        // Zero gate layer: every gate is exactly 0.5.
        model.store.get_mut(model.ids.gate_w).value.data_mut().fill(0.0);
        let g = model.gate_value(&vec![0.3; d]).unwrap();
        assert_eq!(g, 0.5);
        // Large bias saturates.
        model.store.get_mut(model.ids.gate_b).value.data_mut()[0] = 100.0;
        let g = model.gate_value(&vec![0.3; d]).unwrap();
        assert!(g > 0.999);
        // Hand value: sigma(1*0.1 + 2*0.2 + 0.1) = sigma(0.6).
        let mut tiny = small_model(9);
        tiny.store.get_mut(tiny.ids.gate_w).value.data_mut().fill(0.0);
        tiny.store.get_mut(tiny.ids.gate_w).value.data_mut()[0] = 1.0;
        tiny.store.get_mut(tiny.ids.gate_w).value.data_mut()[1] = 2.0;
        tiny.store.get_mut(tiny.ids.gate_b).value.data_mut()[0] = 0.1;
        let mut x = vec![0.0; d];
        x[0] = 0.1;
        x[1] = 0.2;
        let g = tiny.gate_value(&x).unwrap();
        assert!((g - 0.6456563062257954).abs() < 1e-9);
    }

    #[test]
    fn encode_shape_contract() {
        let model = small_model(11);
        let (h, gates) = model.encode(&review(vec![2, 3, 4], 0, 0.5)).unwrap();
        assert_eq!(h.len(), model.config.hidden_dim());
        assert_eq!(gates.len(), model.config.max_words);
        for g in gates {
            assert!(g > 0.0 && g < 1.0);
        }
    }

    #[test]
    fn clamped_gates_equal_ungated_encoder() {
        let model = small_model(13);
        let r = review(vec![2, 3, 4, 5], 1, 0.2);
        // Force learned gates to one by zeroing the gate layer and adding a
        // huge bias, then compare against the clamped path. Separately, the
        // clamped path must equal a literal gate-free forward.
        let mut tape = Tape::new();
        let clamped = model
            .encode_on_tape(&mut tape, &r, GateMode::ClampedOne)
            .unwrap();
        let clamped_h = tape.value(clamped.hidden).clone();

        let mut saturated = small_model(13);
        saturated
            .store
            .get_mut(saturated.ids.gate_w)
            .value
            .data_mut()
            .fill(0.0);
        saturated
            .store
            .get_mut(saturated.ids.gate_b)
            .value
            .data_mut()[0] = 1e9;
        let (sat_h, _) = saturated.encode(&r).unwrap();
        let max_diff = clamped_h
            .data()
            .iter()
            .zip(sat_h.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn pad_tail_permutation_is_invariant() {
        // All PAD rows are identical, so reordering the PAD tail cannot
        // change the encoder output.
        let model = small_model(17);
        let r = review(vec![2, 3], 0, 0.1);
        let (h1, _) = model.encode(&r).unwrap();
        let mut swapped = r.clone();
        swapped.word_ids.swap(4, 6);
        swapped.char_ids.swap(4, 6);
        let (h2, _) = model.encode(&swapped).unwrap();
        assert_eq!(h1.data(), h2.data());
    }

    #[test]
    fn predict_head_combinations() {
        let mut model = small_model(19);
        let h_len = model.config.hidden_dim();
        // Zero heads give zero prediction.
        model
            .store
            .get_mut(model.ids.shared_u.unwrap())
            .value
            .data_mut()
            .fill(0.0);
        let r = review(vec![2, 3], 0, 0.4);
        assert_eq!(model.predict(&r).unwrap(), 0.0);

        // Hand case: h=[1,2], U=[0.5,0], W_k=[0,0.5] -> 1.5.
        let mut tape = Tape::new();
        let h = tape
            .constant(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let mut two = small_model(19);
        two.store
            .get_mut(two.ids.shared_u.unwrap())
            .value
            .data_mut()
            .fill(0.0);
        two.store
            .get_mut(two.ids.domain_w.unwrap())
            .value
            .data_mut()
            .fill(0.0);
        // Shrink the heads to 2 dims for the hand case by building the dot
        // directly on the tape with slices of U and W.
        let u = tape
            .constant(Tensor::from_vec(&[2], vec![0.5, 0.0]).unwrap())
            .unwrap();
        let wk = tape
            .constant(Tensor::from_vec(&[2], vec![0.0, 0.5]).unwrap())
            .unwrap();
        let head = tape.add(u, wk).unwrap();
        let pred = tape.dot(head, h).unwrap();
        assert_eq!(tape.value(pred).item(), 1.5);

        // W_k = 0 reduces the full head to the shared head.
        let mut shared_only = small_model(19);
        shared_only
            .store
            .get_mut(shared_only.ids.domain_w.unwrap())
            .value
            .data_mut()
            .fill(0.0);
        let p_full = shared_only.predict(&r).unwrap();
        let mut tape = Tape::new();
        let enc = shared_only
            .encode_on_tape(&mut tape, &r, GateMode::Learned)
            .unwrap();
        let u = tape
            .param(&shared_only.store, shared_only.ids.shared_u.unwrap())
            .unwrap();
        let dot = tape.dot(u, enc.hidden).unwrap();
        assert_eq!(p_full, tape.value(dot).item());
        let _ = h_len;
    }

    #[test]
    fn inspect_gates_alignment() {
        let model = small_model(23);
        let vocab = Vocab::from_tokens(
            (0..model.vocab_size())
                .map(|i| match i {
                    0 => "<pad>".to_string(),
                    1 => "<unk>".to_string(),
                    i => format!("tok{i}"),
                })
                .collect(),
        );
        let r = review(vec![2, 3, 4], 0, 0.5);
        let gates = model.inspect_gates(&r, &vocab).unwrap();
        assert_eq!(gates.len(), 3);
        assert_eq!(gates[0].0, "tok2");

        // Untrained gate layer forced to zero gives exactly 0.5 everywhere.
        let mut flat = small_model(23);
        flat.store.get_mut(flat.ids.gate_w).value.data_mut().fill(0.0);
        let gates = flat.inspect_gates(&r, &vocab).unwrap();
        assert!(gates.iter().all(|(_, g)| *g == 0.5));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = small_model(29);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        save_checkpoint(&model, serde_json::json!({"cmd": "test"}), 29, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.digest(), model.digest());
        assert_eq!(loaded.mode, model.mode);
        assert_eq!(loaded.omega, model.omega);
        let r = review(vec![2, 5, 3], 1, 0.9);
        assert_eq!(loaded.predict(&r).unwrap(), model.predict(&r).unwrap());
    }

    #[test]
    fn glove_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.txt");
        std::fs::write(&path, "alpha 1 2 3 4 5 6\nbeta 9 9 9 9 9 9\n").unwrap();
        let vecs = load_word_vectors(&path, 6).unwrap();
        assert_eq!(vecs["alpha"], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(load_word_vectors(&path, 5).is_err());

        let mut model = small_model(31);
        let vocab = Vocab::from_tokens(vec![
            "<pad>".into(),
            "<unk>".into(),
            "alpha".into(),
            "gamma".into(),
        ]);
        let n = apply_word_vectors(&mut model, &vocab, &vecs);
        assert_eq!(n, 1);
        assert_eq!(
            model.store.value(model.ids.word_emb).row(2),
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
        );
    }
}

