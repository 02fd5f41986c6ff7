//! Exact nearest-neighbour retrieval over keyphrase embeddings truncated to a
//! prefix dimension.

use std::cmp::Ordering;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{encode_bi, BiEncoderParams, Embedding, ParamSet, TokenizedWorld};
use crate::error::{Error, Result};
use crate::tensor::dot;

pub const DEFAULT_K: usize = 20;

/// Row-per-keyphrase unit vectors at `dim_prefix` dimensions. Immutable
/// once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    ids: Vec<usize>,
    dim_prefix: usize,
    full_dim: usize,
    data: Vec<f64>,
    source_checksum: String,
}

/// Ranked keyphrases for one item. Serializes as
/// `{"item":int,"kps":[[id,score],...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub item: usize,
    pub kps: Vec<(usize, f64)>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<usize> {
        self.kps.iter().map(|&(id, _)| id).collect()
    }
}

impl Index {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn dim_prefix(&self) -> usize {
        self.dim_prefix
    }

    pub fn full_dim(&self) -> usize {
        self.full_dim
    }

    /// Checksum of the student parameters the rows were embedded with.
    pub fn source_checksum(&self) -> &str {
        &self.source_checksum
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim_prefix..(i + 1) * self.dim_prefix]
    }
}

/// Truncates every embedding to `dim_prefix` and re-normalizes.
pub fn build_index(
    ids: Vec<usize>,
    embeddings: &[Embedding],
    dim_prefix: usize,
    source_checksum: &str,
) -> Result<Index> {
    if ids.len() != embeddings.len() {
        return Err(Error::Shape(format!(
            "{} ids for {} embeddings",
            ids.len(),
            embeddings.len()
        )));
    }
    let Some(first) = embeddings.first() else {
        return Err(Error::EmptyIndex);
    };
    let full_dim = first.dim();
    if dim_prefix == 0 || dim_prefix > full_dim {
        return Err(Error::config(
            "retrieval.dim_prefix",
            format!("{dim_prefix} not in 1..={full_dim}"),
        ));
    }
    let mut data = Vec::with_capacity(ids.len() * dim_prefix);
    for e in embeddings {
        if e.dim() != full_dim {
            return Err(Error::Shape(format!(
                "embedding of dim {} among dim {full_dim}",
                e.dim()
            )));
        }
        data.extend(e.prefix(dim_prefix)?.into_vec());
    }
    Ok(Index {
        ids,
        dim_prefix,
        full_dim,
        data,
        source_checksum: source_checksum.to_string(),
    })
}

/// Embeds every keyphrase of the world with the student and indexes them.
pub fn build_student_index(
    params: &BiEncoderParams,
    tw: &TokenizedWorld,
    dim_prefix: usize,
) -> Result<Index> {
    let embeddings = tw
        .keyphrase
        .par_iter()
        .map(|seq| encode_bi(params, seq))
        .collect::<Result<Vec<_>>>()?;
    build_index(
        (0..embeddings.len()).collect(),
        &embeddings,
        dim_prefix,
        &params.checksum(),
    )
}

fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Exact top-`k` by cosine; ties go to the smaller id.
pub fn knn(index: &Index, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if k == 0 {
        return Err(Error::config("retrieval.k", "must be >= 1"));
    }
    if query.len() < index.dim_prefix {
        return Err(Error::Shape(format!(
            "query of dim {} against index prefix {}",
            query.len(),
            index.dim_prefix
        )));
    }
    let q = Embedding::normalized(query[..index.dim_prefix].to_vec())?;
    let mut scored: Vec<(usize, f64)> = index
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, dot(q.as_slice(), index.row(i))))
        .collect();
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    Ok(scored)
}

/// Retrieves `k` keyphrases for each listed item with the student that
/// built `index`.
pub fn retrieve_for_items(
    params: &BiEncoderParams,
    tw: &TokenizedWorld,
    items: &[usize],
    index: &Index,
    k: usize,
) -> Result<Vec<RetrievalResult>> {
    let student = params.checksum();
    if student != index.source_checksum {
        return Err(Error::StaleIndex {
            index: index.source_checksum.clone(),
            student,
        });
    }
    items
        .par_iter()
        .map(|&item| {
            let seq = tw.item_text.get(item).ok_or(Error::Lookup {
                kind: "item",
                id: item,
            })?;
            let q = encode_bi(params, seq)?;
            Ok(RetrievalResult {
                item,
                kps: knn(index, q.as_slice(), k)?,
            })
        })
        .collect()
}

const INDEX_MAGIC: &[u8; 4] = b"KPDI";
const INDEX_VERSION: u32 = 1;

/// Binary layout: magic, version, row count, prefix dim, full dim, checksum
/// length and bytes, ids as u64, then rows as little-endian f64.
pub fn write_index<W: Write>(index: &Index, mut w: W) -> Result<()> {
    w.write_all(INDEX_MAGIC)?;
    w.write_u32::<LittleEndian>(INDEX_VERSION)?;
    w.write_u64::<LittleEndian>(index.ids.len() as u64)?;
    w.write_u64::<LittleEndian>(index.dim_prefix as u64)?;
    w.write_u64::<LittleEndian>(index.full_dim as u64)?;
    w.write_u32::<LittleEndian>(index.source_checksum.len() as u32)?;
    w.write_all(index.source_checksum.as_bytes())?;
    for &id in &index.ids {
        w.write_u64::<LittleEndian>(id as u64)?;
    }
    for &v in &index.data {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_index<R: Read>(mut r: R) -> Result<Index> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != INDEX_MAGIC {
        return Err(Error::Format("not an index file (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != INDEX_VERSION {
        return Err(Error::Format(format!(
            "unsupported index version {version}"
        )));
    }
    let n = r.read_u64::<LittleEndian>()? as usize;
    let dim_prefix = r.read_u64::<LittleEndian>()? as usize;
    let full_dim = r.read_u64::<LittleEndian>()? as usize;
    if dim_prefix == 0 || dim_prefix > full_dim {
        return Err(Error::Format(format!(
            "index prefix {dim_prefix} of full dim {full_dim}"
        )));
    }
    let clen = r.read_u32::<LittleEndian>()? as usize;
    let mut cbuf = vec![0u8; clen];
    r.read_exact(&mut cbuf)?;
    let source_checksum =
        String::from_utf8(cbuf).map_err(|_| Error::Format("index checksum is not utf-8".into()))?;
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        ids.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let mut data = vec![0.0; n * dim_prefix];
    r.read_f64_into::<LittleEndian>(&mut data)?;
    Ok(Index {
        ids,
        dim_prefix,
        full_dim,
        data,
        source_checksum,
    })
}

/// Mean Jaccard overlap of paired id lists.
pub fn mean_jaccard(a: &[Vec<usize>], b: &[Vec<usize>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "{} vs {} result lists",
            a.len(),
            b.len()
        )));
    }
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let xs: std::collections::BTreeSet<_> = x.iter().collect();
            let ys: std::collections::BTreeSet<_> = y.iter().collect();
            let union = xs.union(&ys).count();
            if union == 0 {
                1.0
            } else {
                xs.intersection(&ys).count() as f64 / union as f64
            }
        })
        .sum();
    Ok(total / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::normalized(v.to_vec()).unwrap()
    }

    #[test]
    fn full_prefix_is_identity() {
        let e = vec![emb(&[3.0, 4.0]), emb(&[1.0, 0.0])];
        let idx = build_index(vec![5, 9], &e, 2, "x").unwrap();
        assert_eq!(idx.row(0), e[0].as_slice());
        assert_eq!(idx.row(1), e[1].as_slice());
    }

    #[test]
    fn prefix_rows_are_unit() {
        let e = vec![emb(&[3.0, 4.0, 12.0])];
        let idx = build_index(vec![0], &e, 2, "x").unwrap();
        assert!((crate::tensor::norm(idx.row(0)) - 1.0).abs() < 1e-12);
        assert!(matches!(
            build_index(vec![0], &e, 4, "x"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn knn_ties_and_oversized_k() {
        let e = vec![emb(&[1.0, 0.0]), emb(&[0.0, 1.0]), emb(&[1.0, 0.0])];
        let idx = build_index(vec![7, 3, 2], &e, 2, "x").unwrap();
        let r = knn(&idx, &[1.0, 0.0], 10).unwrap();
        assert_eq!(r.iter().map(|p| p.0).collect::<Vec<_>>(), vec![2, 7, 3]);
        assert!((r[0].1 - 1.0).abs() < 1e-9);
        let top1 = knn(&idx, &[1.0, 0.0], 1).unwrap();
        assert_eq!(top1, vec![(2, 1.0)]);
    }

    #[test]
    fn empty_index() {
        assert!(matches!(
            build_index(vec![], &[], 1, "x"),
            Err(Error::EmptyIndex)
        ));
    }

    #[test]
    fn index_round_trip() {
        let e = vec![emb(&[0.3, -0.2, 0.9]), emb(&[1.0, 2.0, 3.0])];
        let idx = build_index(vec![1, 0], &e, 2, "abc").unwrap();
        let mut buf = Vec::new();
        write_index(&idx, &mut buf).unwrap();
        assert_eq!(read_index(buf.as_slice()).unwrap(), idx);
        buf[0] = b'X';
        assert!(matches!(read_index(buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn result_wire_format() {
        let r = RetrievalResult {
            item: 4,
            kps: vec![(2, 0.5), (1, 0.25)],
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"item":4,"kps":[[2,0.5],[1,0.25]]}"#
        );
    }
}
