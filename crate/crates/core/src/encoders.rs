//! Toy encoders standing in for transformer base models.
//!
//! The bi-encoder is a shared bag-of-tokens tower: mean-pooled token rows,
//! a linear projection and L2 normalization. The cross-encoder scores a
//! `keyphrase [SEP] category [SEP] title` sequence jointly: mean-pooled rows
//! plus a keyphrase/title token-overlap feature feed a two-layer scorer with
//! a sigmoid output.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::synthworld::SyntheticWorld;
use crate::tensor::{dot, norm, Matrix};

/// Vocabulary slot reserved for the separator.
pub const SEP_ID: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        Ok(TokenSeq(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercases, splits on non-alphanumerics and hashes each token (FNV-1a)
/// into `[1, vocab_size)`; slot 0 is the separator.
pub fn tokenize(text: &str, vocab_size: usize) -> Result<TokenSeq> {
    if vocab_size < 2 {
        return Err(Error::config("vocab_size", "must be at least 2"));
    }
    let buckets = (vocab_size - 1) as u64;
    let ids: Vec<u32> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| (1 + fnv1a64(t.to_lowercase().as_bytes()) % buckets) as u32)
        .collect();
    if ids.is_empty() {
        return Err(Error::EmptyInput("text has no alphanumeric tokens"));
    }
    Ok(TokenSeq(ids))
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `values` to unit length.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::NumericOverflow {
                path: "embedding norm".into(),
            });
        }
        Ok(Embedding(values.into_iter().map(|v| v / n).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// First `dim` coordinates, re-normalized.
    pub fn prefix(&self, dim: usize) -> Result<Embedding> {
        if dim == 0 || dim > self.0.len() {
            return Err(Error::config(
                "dim_prefix",
                format!("{dim} not in 1..={}", self.0.len()),
            ));
        }
        Embedding::normalized(self.0[..dim].to_vec())
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Cosine similarity. Vectors need not be normalized.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of {}-dim and {}-dim vectors",
            u.len(),
            v.len()
        )));
    }
    let denom = norm(u) * norm(v);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(u, v) / denom).clamp(-1.0, 1.0))
}

/// Cosine distance `1 - cosine`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine(u, v)?)
}

// ---------------------------------------------------------------------------
// Parameter sets
// ---------------------------------------------------------------------------

/// A set of named trainable matrices.
pub trait ParamSet: Clone {
    const KIND: u32;

    fn tensor_names(&self) -> &'static [&'static str];
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;
    fn from_tensors(tensors: Vec<Matrix>) -> Result<Self>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// SHA-256 of the serialized parameters, hex encoded.
    fn checksum(&self) -> String {
        let mut buf = Vec::new();
        write_params(self, &mut buf).expect("writing to a Vec cannot fail");
        hex::encode(Sha256::digest(&buf))
    }
}

const PARAM_MAGIC: &[u8; 4] = b"KPDP";
const PARAM_VERSION: u32 = 1;

/// Writes `params` in the flat binary format: magic, version, kind, tensor
/// count, `(rows, cols)` per tensor, then all entries as little-endian f64,
/// row-major, tensor by tensor.
pub fn write_params<P: ParamSet, W: Write>(params: &P, mut w: W) -> Result<()> {
    w.write_all(PARAM_MAGIC)?;
    w.write_u32::<LittleEndian>(PARAM_VERSION)?;
    w.write_u32::<LittleEndian>(P::KIND)?;
    let tensors = params.tensors();
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for t in &tensors {
        w.write_u64::<LittleEndian>(t.rows as u64)?;
        w.write_u64::<LittleEndian>(t.cols as u64)?;
    }
    for t in &tensors {
        for &v in &t.data {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_params<P: ParamSet, R: Read>(mut r: R) -> Result<P> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PARAM_MAGIC {
        return Err(Error::Format("not a parameter file (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != PARAM_VERSION {
        return Err(Error::Format(format!(
            "unsupported parameter version {version}"
        )));
    }
    let kind = r.read_u32::<LittleEndian>()?;
    if kind != P::KIND {
        return Err(Error::Format(format!(
            "parameter kind {kind}, expected {}",
            P::KIND
        )));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut dims = Vec::with_capacity(n);
    for _ in 0..n {
        let rows = r.read_u64::<LittleEndian>()? as usize;
        let cols = r.read_u64::<LittleEndian>()? as usize;
        dims.push((rows, cols));
    }
    let mut tensors = Vec::with_capacity(n);
    for (rows, cols) in dims {
        let mut data = vec![0.0; rows * cols];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        tensors.push(Matrix::from_vec(rows, cols, data));
    }
    P::from_tensors(tensors)
}

fn expect_tensors<const N: usize>(tensors: Vec<Matrix>, what: &str) -> Result<[Matrix; N]> {
    let got = tensors.len();
    tensors
        .try_into()
        .map_err(|_| Error::Format(format!("{what}: expected {N} tensors, got {got}")))
}

// ---------------------------------------------------------------------------
// Bi-encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiEncoderParams {
    /// vocab_size x hidden
    pub token_table: Matrix,
    /// hidden x dim
    pub projection: Matrix,
}

impl BiEncoderParams {
    pub fn new_random(vocab_size: usize, hidden: usize, dim: usize, seed: u64) -> Result<Self> {
        if vocab_size < 2 || hidden == 0 || dim == 0 {
            return Err(Error::config(
                "bi_encoder",
                "vocab_size >= 2, hidden >= 1, dim >= 1",
            ));
        }
        let mut r = rng::stream(seed, "init/bi", 0);
        let token_table = Matrix::random_normal(vocab_size, hidden, 1.0, &mut r);
        let projection = Matrix::random_normal(hidden, dim, 1.0 / (hidden as f64).sqrt(), &mut r);
        Ok(BiEncoderParams {
            token_table,
            projection,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.token_table.rows
    }

    pub fn hidden(&self) -> usize {
        self.token_table.cols
    }

    pub fn dim(&self) -> usize {
        self.projection.cols
    }
}

impl ParamSet for BiEncoderParams {
    const KIND: u32 = 1;

    fn tensor_names(&self) -> &'static [&'static str] {
        &["token_table", "projection"]
    }

    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.token_table, &self.projection]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.token_table, &mut self.projection]
    }

    fn from_tensors(tensors: Vec<Matrix>) -> Result<Self> {
        let [token_table, projection] = expect_tensors(tensors, "bi-encoder")?;
        if token_table.cols != projection.rows {
            return Err(Error::Format("bi-encoder hidden sizes disagree".into()));
        }
        Ok(BiEncoderParams {
            token_table,
            projection,
        })
    }
}

/// Intermediate values of one bi-encoder forward pass.
#[derive(Debug, Clone)]
pub struct BiForward {
    pub pooled: Vec<f64>,
    pub projected: Vec<f64>,
    pub projected_norm: f64,
    pub output: Vec<f64>,
}

pub(crate) fn check_ids(ids: &[u32], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&id| id as usize >= vocab) {
        Some(&id) => Err(Error::Shape(format!(
            "token id {id} outside vocabulary of {vocab}"
        ))),
        None => Ok(()),
    }
}

pub fn mean_pool(table: &Matrix, ids: &[u32]) -> Vec<f64> {
    let mut pooled = vec![0.0; table.cols];
    for &id in ids {
        for (p, &v) in pooled.iter_mut().zip(table.row(id as usize)) {
            *p += v;
        }
    }
    let inv = 1.0 / ids.len() as f64;
    pooled.iter_mut().for_each(|p| *p *= inv);
    pooled
}

pub fn forward_bi(params: &BiEncoderParams, seq: &TokenSeq) -> Result<BiForward> {
    if seq.is_empty() {
        return Err(Error::EmptyInput("token sequence"));
    }
    check_ids(seq.ids(), params.vocab_size())?;
    let pooled = mean_pool(&params.token_table, seq.ids());
    let projected = params.projection.vec_mul(&pooled);
    let projected_norm = norm(&projected);
    if !projected_norm.is_finite() {
        return Err(Error::NumericOverflow {
            path: "bi_encoder.projection".into(),
        });
    }
    if projected_norm == 0.0 {
        return Err(Error::NumericOverflow {
            path: "bi_encoder.projection (zero norm)".into(),
        });
    }
    let output = projected.iter().map(|v| v / projected_norm).collect();
    Ok(BiForward {
        pooled,
        projected,
        projected_norm,
        output,
    })
}

/// Mean pooling, projection, L2 normalization.
pub fn encode_bi(params: &BiEncoderParams, seq: &TokenSeq) -> Result<Embedding> {
    Ok(Embedding(forward_bi(params, seq)?.output))
}

// ---------------------------------------------------------------------------
// Cross-encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossEncoderParams {
    /// vocab_size x hidden
    pub token_table: Matrix,
    /// (hidden + 1) x hidden; the extra input row carries the overlap feature
    pub w1: Matrix,
    /// 1 x hidden
    pub b1: Matrix,
    /// hidden x 1
    pub w2: Matrix,
    /// 1 x 1
    pub b2: Matrix,
}

impl CrossEncoderParams {
    pub fn new_random(vocab_size: usize, hidden: usize, seed: u64) -> Result<Self> {
        if vocab_size < 2 || hidden == 0 {
            return Err(Error::config(
                "cross_encoder",
                "vocab_size >= 2, hidden >= 1",
            ));
        }
        let mut r = rng::stream(seed, "init/cross", 0);
        let token_table = Matrix::random_normal(vocab_size, hidden, 1.0, &mut r);
        let w1 = Matrix::random_normal(hidden + 1, hidden, 1.0 / (hidden as f64).sqrt(), &mut r);
        let w2 = Matrix::random_normal(hidden, 1, 1.0 / (hidden as f64).sqrt(), &mut r);
        Ok(CrossEncoderParams {
            token_table,
            w1,
            b1: Matrix::zeros(1, hidden),
            w2,
            b2: Matrix::zeros(1, 1),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.token_table.rows
    }

    pub fn hidden(&self) -> usize {
        self.token_table.cols
    }
}

impl ParamSet for CrossEncoderParams {
    const KIND: u32 = 2;

    fn tensor_names(&self) -> &'static [&'static str] {
        &["token_table", "w1", "b1", "w2", "b2"]
    }

    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.token_table, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.token_table,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn from_tensors(tensors: Vec<Matrix>) -> Result<Self> {
        let [token_table, w1, b1, w2, b2] = expect_tensors(tensors, "cross-encoder")?;
        let h = token_table.cols;
        if w1.shape() != (h + 1, h)
            || b1.shape() != (1, h)
            || w2.shape() != (h, 1)
            || b2.shape() != (1, 1)
        {
            return Err(Error::Format("cross-encoder tensor shapes disagree".into()));
        }
        Ok(CrossEncoderParams {
            token_table,
            w1,
            b1,
            w2,
            b2,
        })
    }
}

/// Token sequences of one cross-encoder input.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossInput {
    pub keyphrase: TokenSeq,
    pub category: Vec<u32>,
    pub title: TokenSeq,
}

impl CrossInput {
    /// `keyphrase [SEP] category [SEP] title`.
    pub fn joined(&self) -> Vec<u32> {
        let mut ids =
            Vec::with_capacity(self.keyphrase.len() + self.category.len() + self.title.len() + 2);
        ids.extend_from_slice(self.keyphrase.ids());
        ids.push(SEP_ID);
        ids.extend_from_slice(&self.category);
        ids.push(SEP_ID);
        ids.extend_from_slice(self.title.ids());
        ids
    }

    /// Fraction of keyphrase tokens that also occur in the title.
    pub fn overlap(&self) -> f64 {
        let title = self.title.ids();
        let hits = self
            .keyphrase
            .ids()
            .iter()
            .filter(|id| title.contains(id))
            .count();
        hits as f64 / self.keyphrase.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct CrossForward {
    pub ids: Vec<u32>,
    /// pooled rows followed by the overlap feature
    pub features: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logit: f64,
    pub score: f64,
}

pub fn forward_cross(params: &CrossEncoderParams, input: &CrossInput) -> Result<CrossForward> {
    if input.keyphrase.is_empty() {
        return Err(Error::EmptyInput("keyphrase"));
    }
    if input.title.is_empty() {
        return Err(Error::EmptyInput("title"));
    }
    let ids = input.joined();
    check_ids(&ids, params.vocab_size())?;
    let mut features = mean_pool(&params.token_table, &ids);
    features.push(input.overlap());
    let mut hidden = params.w1.vec_mul(&features);
    for (h, b) in hidden.iter_mut().zip(params.b1.row(0)) {
        *h = (*h + b).tanh();
    }
    let logit = dot(&hidden, &params.w2.data) + params.b2.data[0];
    if !logit.is_finite() {
        return Err(Error::NumericOverflow {
            path: "cross_encoder.logit".into(),
        });
    }
    let score = sigmoid(logit);
    Ok(CrossForward {
        ids,
        features,
        hidden,
        logit,
        score,
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Joint relevance score in `[0, 1]`.
pub fn score_cross(
    params: &CrossEncoderParams,
    kp: &TokenSeq,
    category: &[u32],
    title: &TokenSeq,
) -> Result<f64> {
    let input = CrossInput {
        keyphrase: kp.clone(),
        category: category.to_vec(),
        title: title.clone(),
    };
    Ok(forward_cross(params, &input)?.score)
}

// ---------------------------------------------------------------------------
// Tokenized views of a world
// ---------------------------------------------------------------------------

/// Pre-tokenized texts of every item and keyphrase for one hashing width.
#[derive(Debug, Clone)]
pub struct TokenizedWorld {
    pub vocab_size: usize,
    /// category + title, as the student embeds items
    pub item_text: Vec<TokenSeq>,
    pub item_title: Vec<TokenSeq>,
    pub item_category: Vec<Vec<u32>>,
    pub keyphrase: Vec<TokenSeq>,
}

impl TokenizedWorld {
    pub fn new(world: &SyntheticWorld, vocab_size: usize) -> Result<Self> {
        let mut item_text = Vec::with_capacity(world.items.len());
        let mut item_title = Vec::with_capacity(world.items.len());
        let mut item_category = Vec::with_capacity(world.items.len());
        for item in &world.items {
            item_text.push(tokenize(&item.full_text(), vocab_size)?);
            item_title.push(tokenize(&item.title(), vocab_size)?);
            item_category.push(match tokenize(&item.category(), vocab_size) {
                Ok(t) => t.0,
                Err(Error::EmptyInput(_)) => Vec::new(),
                Err(e) => return Err(e),
            });
        }
        let keyphrase = world
            .keyphrases
            .iter()
            .map(|k| tokenize(&k.text(), vocab_size))
            .collect::<Result<_>>()?;
        Ok(TokenizedWorld {
            vocab_size,
            item_text,
            item_title,
            item_category,
            keyphrase,
        })
    }

    pub fn cross_input(&self, item: usize, kp: usize) -> Result<CrossInput> {
        let title = self.item_title.get(item).ok_or(Error::Lookup {
            kind: "item",
            id: item,
        })?;
        let keyphrase = self.keyphrase.get(kp).ok_or(Error::Lookup {
            kind: "keyphrase",
            id: kp,
        })?;
        Ok(CrossInput {
            keyphrase: keyphrase.clone(),
            category: self.item_category[item].clone(),
            title: title.clone(),
        })
    }
}
