use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;

use super::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

/// Object counts per split for a category of `n` objects: train and val are
/// rounded down and test takes the remainder. Val and test borrow from train
/// when rounding leaves them empty.
pub(crate) fn object_counts(n: usize, ratios: SplitRatios) -> Option<(usize, usize, usize)> {
    let floor = |r: f64| (r * n as f64 + 1e-9).floor() as usize;
    let mut train = floor(ratios.train).min(n);
    let mut val = floor(ratios.val).min(n - train);
    let mut test = n - train - val;
    for slot in [&mut val, &mut test] {
        if *slot == 0 && train > 1 {
            *slot += 1;
            train -= 1;
        }
    }
    (train >= 1 && val >= 1 && test >= 1).then_some((train, val, test))
}

/// Assigns train/val/test by object within each category, then turns up to
/// `queries_per_test_object` whole trajectories of every test object into
/// queries and the rest into database records. Distractor records keep
/// their split.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratios: SplitRatios,
    queries_per_test_object: usize,
) -> Result<DatasetManifest> {
    let mut by_category: BTreeMap<u32, BTreeSet<u64>> = BTreeMap::new();
    let mut trajectories: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for r in manifest.records.iter().filter(|r| r.split != Split::Distractor) {
        by_category.entry(r.category_id).or_default().insert(r.object_id);
        trajectories.entry(r.object_id).or_default().insert(r.trajectory_id);
    }

    let mut object_split: HashMap<u64, Split> = HashMap::new();
    let mut query_traj: BTreeSet<u64> = BTreeSet::new();
    for (&category_id, objects) in &by_category {
        let (n_train, n_val, _) =
            object_counts(objects.len(), ratios).ok_or(Error::InsufficientObjects {
                category_id,
                count: objects.len(),
            })?;
        let mut objs: Vec<u64> = objects.iter().copied().collect();
        objs.shuffle(&mut rng::stream(manifest.seed, &[rng::TAG_SPLIT, 0, u64::from(category_id)]));
        for (i, &o) in objs.iter().enumerate() {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::TestQuery
            };
            object_split.insert(o, split);
            if split == Split::TestQuery {
                let mut trajs: Vec<u64> = trajectories[&o].iter().copied().collect();
                trajs.shuffle(&mut rng::stream(manifest.seed, &[rng::TAG_SPLIT, 1, o]));
                // Keep at least one trajectory for the database.
                let n_query = queries_per_test_object.min(trajs.len().saturating_sub(1));
                query_traj.extend(&trajs[..n_query]);
            }
        }
    }

    let mut out = manifest.clone();
    for r in out.records.iter_mut().filter(|r| r.split != Split::Distractor) {
        r.split = match object_split[&r.object_id] {
            Split::TestQuery if query_traj.contains(&r.trajectory_id) => Split::TestQuery,
            Split::TestQuery => Split::TestDatabase,
            other => other,
        };
    }
    Ok(out)
}
