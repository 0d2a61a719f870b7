//! Exact inner-product search over unit descriptors and mAP evaluation,
//! overall, per query blur level, and per (database, query) blur-level cell.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Blur levels reported in breakdowns.
pub const LEVELS: std::ops::RangeInclusive<u8> = 1..=6;

const MAGIC: &[u8; 8] = b"BLRDESC\0";
pub const DESCRIPTOR_FILE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cutoff {
    All,
    At(usize),
}

impl Cutoff {
    fn limit(self) -> usize {
        match self {
            Cutoff::All => usize::MAX,
            Cutoff::At(k) => k,
        }
    }
}

impl FromStr for Cutoff {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Cutoff::All),
            _ => s
                .parse::<usize>()
                .ok()
                .filter(|&k| k > 0)
                .map(Cutoff::At)
                .ok_or_else(|| Error::Config(format!("cutoff must be \"all\" or a positive integer, got {s:?}"))),
        }
    }
}

impl fmt::Display for Cutoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cutoff::All => f.write_str("all"),
            Cutoff::At(k) => write!(f, "{k}"),
        }
    }
}

/// Denominator of truncated AP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ApNorm {
    /// `min(n_positives, cutoff)`.
    #[default]
    Truncated,
    /// `n_positives`.
    Positives,
}

/// Unit descriptors (stored as f32) with per-row metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorStore {
    dim: usize,
    ids: Vec<u64>,
    object_ids: Vec<u64>,
    bls: Vec<u8>,
    data: Vec<f32>,
    id_set: HashSet<u64>,
}

impl DescriptorStore {
    pub fn new(dim: usize) -> Self {
        DescriptorStore {
            dim,
            ids: Vec::new(),
            object_ids: Vec::new(),
            bls: Vec::new(),
            data: Vec::new(),
            id_set: HashSet::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn object_ids(&self) -> &[u64] {
        &self.object_ids
    }

    pub fn bls(&self) -> &[u8] {
        &self.bls
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Row `i` widened to f64.
    pub fn vector(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    /// Adds a descriptor; it must have unit norm within 1e-6 and a new id.
    pub fn push(&mut self, id: u64, object_id: u64, bl: u8, descriptor: &[f64]) -> Result<()> {
        if descriptor.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "descriptor of dim {} for a store of dim {}",
                descriptor.len(),
                self.dim
            )));
        }
        let norm = descriptor.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= 1e-6) {
            return Err(Error::Domain(format!("descriptor {id} has norm {norm}, expected 1")));
        }
        if !self.id_set.insert(id) {
            return Err(Error::InvalidParameter(format!("duplicate descriptor id {id}")));
        }
        self.ids.push(id);
        self.object_ids.push(object_id);
        self.bls.push(bl);
        self.data.extend(descriptor.iter().map(|&v| v as f32));
        Ok(())
    }

    /// Rows whose blur level satisfies `keep`.
    pub fn filter_level(&self, keep: impl Fn(u8) -> bool) -> DescriptorStore {
        let mut out = DescriptorStore::new(self.dim);
        for i in (0..self.len()).filter(|&i| keep(self.bls[i])) {
            out.ids.push(self.ids[i]);
            out.object_ids.push(self.object_ids[i]);
            out.bls.push(self.bls[i]);
            out.data.extend_from_slice(self.row(i));
            out.id_set.insert(self.ids[i]);
        }
        out
    }

    fn score(&self, i: usize, query: &[f64]) -> f64 {
        self.row(i).iter().zip(query).map(|(&a, b)| f64::from(a) * b).sum()
    }

    /// Row indices sorted by descending inner product, ties by ascending id.
    fn ranking(&self, query: &[f64]) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = (0..self.len()).map(|i| (i, self.score(i, query))).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(self.ids[a.0].cmp(&self.ids[b.0])));
        scored
    }

    /// Exact top-`k` `(id, score)` by inner product.
    pub fn search(&self, query: &[f64], k: Cutoff) -> Result<Vec<(u64, f64)>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if query.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "query of dim {} for a store of dim {}",
                query.len(),
                self.dim
            )));
        }
        let mut ranked = self.ranking(query);
        ranked.truncate(k.limit());
        Ok(ranked.into_iter().map(|(i, s)| (self.ids[i], s)).collect())
    }

    /// Writes `b"BLRDESC\0"`, `u32` version, `u32` d, `u64` n, then per row
    /// `u64` id, `u64` object id, `u32` blur level, d × `f32`; little-endian.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + self.len() * (20 + 4 * self.dim));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&DESCRIPTOR_FILE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            buf.extend_from_slice(&self.ids[i].to_le_bytes());
            buf.extend_from_slice(&self.object_ids[i].to_le_bytes());
            buf.extend_from_slice(&u32::from(self.bls[i]).to_le_bytes());
            for v in self.row(i) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<DescriptorStore> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |detail: String| Error::Format {
            what: "descriptor file",
            detail,
        };
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic or truncated header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(8);
        if version != DESCRIPTOR_FILE_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dim = u32_at(12) as usize;
        let n = u64_at(16) as usize;
        let row = 20 + 4 * dim;
        if bytes.len() != 24 + n * row {
            return Err(bad(format!("expected {} bytes for {n} rows of dim {dim}, got {}", 24 + n * row, bytes.len())));
        }
        let mut store = DescriptorStore::new(dim);
        for i in 0..n {
            let o = 24 + i * row;
            let id = u64_at(o);
            let bl = u32_at(o + 16);
            if !store.id_set.insert(id) {
                return Err(bad(format!("duplicate id {id}")));
            }
            store.ids.push(id);
            store.object_ids.push(u64_at(o + 8));
            store.bls.push(u8::try_from(bl).map_err(|_| bad(format!("blur level {bl}")))?);
            store
                .data
                .extend(bytes[o + 20..o + row].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
        }
        Ok(store)
    }
}

/// AP of one ranking: `(1/denominator)·Σ precision@k` over relevant ranks
/// `k <= cutoff`. `None` when there are no positives.
pub fn average_precision(relevance: &[bool], n_positives: usize, cutoff: Cutoff, norm: ApNorm) -> Option<f64> {
    if n_positives == 0 {
        return None;
    }
    let limit = cutoff.limit();
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, _) in relevance.iter().enumerate().take(limit).filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (k + 1) as f64;
    }
    let denom = match norm {
        ApNorm::Truncated => n_positives.min(limit),
        ApNorm::Positives => n_positives,
    };
    Some(sum / denom as f64)
}

/// AP of every query against `database`; `None` for queries without positives.
pub fn query_aps(queries: &DescriptorStore, database: &DescriptorStore, cutoff: Cutoff, norm: ApNorm) -> Result<Vec<Option<f64>>> {
    if database.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if queries.dim != database.dim {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} vs database dim {}",
            queries.dim, database.dim
        )));
    }
    if let Some(id) = queries.ids.iter().find(|id| database.id_set.contains(id)) {
        return Err(Error::InvalidParameter(format!("id {id} is both a query and a database item")));
    }
    Ok((0..queries.len())
        .into_par_iter()
        .map(|q| {
            let obj = queries.object_ids[q];
            let n_pos = database.object_ids.iter().filter(|&&o| o == obj).count();
            if n_pos == 0 {
                return None;
            }
            let relevance: Vec<bool> = database
                .ranking(&queries.vector(q))
                .into_iter()
                .map(|(i, _)| database.object_ids[i] == obj)
                .collect();
            average_precision(&relevance, n_pos, cutoff, norm)
        })
        .collect())
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// (database BL, query BL) grid of mAP values with summary statistics over
/// the cells that could be computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurMatrix {
    /// `cells[d - 1][q - 1]`.
    pub cells: Vec<Vec<Option<f64>>>,
    pub range: Option<f64>,
    pub std: Option<f64>,
}

impl BlurMatrix {
    pub fn absent(&self) -> Vec<(u8, u8)> {
        let mut out = Vec::new();
        for (d, row) in self.cells.iter().enumerate() {
            for (q, c) in row.iter().enumerate() {
                if c.is_none() {
                    out.push((d as u8 + 1, q as u8 + 1));
                }
            }
        }
        out
    }
}

/// Population standard deviation and range of `values`.
pub fn summary(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let Some(m) = mean(values.iter().copied()) else {
        return (None, None);
    };
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    (Some(max - min), Some(var.sqrt()))
}

pub fn blur_matrix(queries: &DescriptorStore, database: &DescriptorStore, cutoff: Cutoff, norm: ApNorm) -> Result<BlurMatrix> {
    let mut cells = vec![vec![None; LEVELS.len()]; LEVELS.len()];
    for d in LEVELS {
        let db = database.filter_level(|b| b == d);
        if db.is_empty() {
            continue;
        }
        let aps = query_aps(queries, &db, cutoff, norm)?;
        for q in LEVELS {
            cells[usize::from(d) - 1][usize::from(q) - 1] =
                mean((0..queries.len()).filter(|&i| queries.bls[i] == q).filter_map(|i| aps[i]));
        }
    }
    let present: Vec<f64> = cells.iter().flatten().flatten().copied().collect();
    let (range, std) = summary(&present);
    Ok(BlurMatrix { cells, range, std })
}

/// Evaluation report; the JSON form is the documented output schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub overall: Option<f64>,
    pub per_query_bl: BTreeMap<u8, Option<f64>>,
    pub skipped_queries: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<Option<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

/// Overall and per-query-BL mAP. Queries without database positives are
/// skipped and counted.
pub fn evaluate(queries: &DescriptorStore, database: &DescriptorStore, cutoff: Cutoff, norm: ApNorm) -> Result<EvalReport> {
    let aps = query_aps(queries, database, cutoff, norm)?;
    let per_query_bl = LEVELS
        .map(|b| {
            let m = mean((0..queries.len()).filter(|&i| queries.bls[i] == b).filter_map(|i| aps[i]));
            (b, m)
        })
        .collect();
    Ok(EvalReport {
        overall: mean(aps.iter().flatten().copied()),
        per_query_bl,
        skipped_queries: aps.iter().filter(|a| a.is_none()).count(),
        matrix: None,
        range: None,
        std: None,
    })
}

/// [`evaluate`] plus the blur matrix and its summary.
pub fn evaluate_with_matrix(queries: &DescriptorStore, database: &DescriptorStore, cutoff: Cutoff, norm: ApNorm) -> Result<(EvalReport, BlurMatrix)> {
    let mut report = evaluate(queries, database, cutoff, norm)?;
    let m = blur_matrix(queries, database, cutoff, norm)?;
    report.matrix = Some(m.cells.clone());
    report.range = m.range;
    report.std = m.std;
    Ok((report, m))
}
