use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

/// Number of subjects per role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub labeled: usize,
    pub validation: usize,
    pub unlabeled: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { labeled: 8, validation: 8, unlabeled: 40, test: 12 }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.labeled + self.validation + self.unlabeled + self.test
    }
}

/// Disjoint subject lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_labeled: Vec<String>,
    pub validation: Vec<String>,
    pub unlabeled: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffle the (sorted, de-duplicated) subjects with the run seed and cut them
/// into consecutive groups. Surplus subjects are left out.
pub fn make_split(subjects: &[String], sizes: &SplitSizes, seed: u64) -> Result<DatasetSplit> {
    let mut ids = subjects.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < sizes.total() {
        return Err(Error::config(format!(
            "split needs {} subjects, only {} available",
            sizes.total(),
            ids.len()
        )));
    }
    if sizes.labeled == 0 {
        return Err(Error::config("split needs at least one labeled subject"));
    }
    ids.shuffle(&mut rng::stream(seed, &[rng::SPLIT]));
    let mut rest = ids.into_iter();
    let mut take = |n: usize| rest.by_ref().take(n).collect::<Vec<_>>();
    Ok(DatasetSplit {
        train_labeled: take(sizes.labeled),
        validation: take(sizes.validation),
        unlabeled: take(sizes.unlabeled),
        test: take(sizes.test),
    })
}
