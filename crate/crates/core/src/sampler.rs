//! Blur-level windowed selection of contrastive tuples.

use std::collections::{BTreeMap, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Blur-level radius around the query's level.
    pub r: usize,
    pub n_p: usize,
    pub n_n: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { r: 5, n_p: 1, n_n: 5 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_p == 0 || self.n_n == 0 {
            return Err(Error::Config("n_pos and n_neg must be >= 1".into()));
        }
        Ok(())
    }
}

/// Record indices of one query and its selected samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastiveTuple {
    pub query: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// Radius actually used, `>= r` when the window had to be widened.
    pub radius: usize,
}

impl ContrastiveTuple {
    /// Query, positives, negatives in order.
    pub fn all(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.query)
            .chain(self.positives.iter().copied())
            .chain(self.negatives.iter().copied())
    }
}

/// Training records indexed by object and blur level.
#[derive(Clone, Debug)]
pub struct SamplerPool<'a> {
    records: &'a [ImageRecord],
    members: Vec<usize>,
    by_object: HashMap<u64, BTreeMap<u8, Vec<usize>>>,
    by_level: BTreeMap<u8, Vec<usize>>,
    min_bl: u8,
    max_bl: u8,
}

impl<'a> SamplerPool<'a> {
    /// `members` are indices into `records`.
    pub fn new(records: &'a [ImageRecord], members: Vec<usize>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidParameter("sampling pool is empty".into()));
        }
        let mut by_object: HashMap<u64, BTreeMap<u8, Vec<usize>>> = HashMap::new();
        let mut by_level: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for &i in &members {
            let r = &records[i];
            by_object.entry(r.object_id).or_default().entry(r.bl).or_default().push(i);
            by_level.entry(r.bl).or_default().push(i);
        }
        let min_bl = *by_level.keys().next().unwrap();
        let max_bl = *by_level.keys().next_back().unwrap();
        Ok(SamplerPool {
            records,
            members,
            by_object,
            by_level,
            min_bl,
            max_bl,
        })
    }

    pub fn records(&self) -> &'a [ImageRecord] {
        self.records
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    /// Realized blur-level range of the pool.
    pub fn level_range(&self) -> (u8, u8) {
        (self.min_bl, self.max_bl)
    }

    /// Levels `[b - r, b + r]` intersected with the realized range.
    fn window(&self, b: u8, r: usize) -> std::ops::RangeInclusive<u8> {
        let lo = (i64::from(b) - r as i64).max(i64::from(self.min_bl)) as u8;
        let hi = (i64::from(b) + r as i64).min(i64::from(self.max_bl)) as u8;
        lo..=hi
    }

    fn candidates(&self, query: usize, r: usize) -> (Vec<usize>, Vec<usize>) {
        let q = &self.records[query];
        let levels = self.window(q.bl, r);
        let positives = self.by_object[&q.object_id]
            .range(levels.clone())
            .flat_map(|(_, v)| v.iter().copied())
            .filter(|&i| i != query)
            .collect();
        let negatives = self
            .by_level
            .range(levels)
            .flat_map(|(_, v)| v.iter().copied())
            .filter(|&i| self.records[i].object_id != q.object_id)
            .collect();
        (positives, negatives)
    }
}

/// `n` draws from `pool`: without replacement when it is large enough.
fn draw(pool: &[usize], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if pool.len() >= n {
        pool.choose_multiple(rng, n).copied().collect()
    } else {
        (0..n).map(|_| *pool.choose(rng).unwrap()).collect()
    }
}

/// Samples positives (same object, other image) and negatives (other
/// objects) with blur level within `cfg.r` of the query's. When either set
/// is empty the radius grows by one until the window spans the pool's whole
/// level range.
pub fn select_tuple(query: usize, pool: &SamplerPool<'_>, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<ContrastiveTuple> {
    let q = pool.records.get(query).ok_or(Error::SamplingExhausted(query))?;
    if !pool.by_object.contains_key(&q.object_id) {
        return Err(Error::SamplingExhausted(query));
    }
    let full = usize::from(pool.max_bl - pool.min_bl);
    let mut r = cfg.r;
    loop {
        let (pos, neg) = pool.candidates(query, r);
        if !pos.is_empty() && !neg.is_empty() {
            return Ok(ContrastiveTuple {
                query,
                positives: draw(&pos, cfg.n_p, rng),
                negatives: draw(&neg, cfg.n_n, rng),
                radius: r,
            });
        }
        if r >= full {
            return Err(Error::SamplingExhausted(query));
        }
        r += 1;
    }
}

/// One epoch of tuple batches: every pool member is a query exactly once, in
/// an order shuffled by `(seed, epoch)`. Tuple `i` of the epoch draws from its
/// own stream, so batches do not depend on how they are computed.
pub fn epoch_batches(
    pool: &SamplerPool<'_>,
    batch_size: usize,
    cfg: &SamplerConfig,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<ContrastiveTuple>>> {
    if batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be >= 1".into()));
    }
    let mut order = pool.members.clone();
    order.shuffle(&mut rng::stream(seed, &[rng::TAG_EPOCH, epoch]));
    order
        .chunks(batch_size)
        .enumerate()
        .map(|(b, chunk)| {
            chunk
                .iter()
                .enumerate()
                .map(|(j, &q)| {
                    let pos = (b * batch_size + j) as u64;
                    select_tuple(q, pool, cfg, &mut rng::stream(seed, &[rng::TAG_TUPLE, epoch, pos]))
                })
                .collect()
        })
        .collect()
}
