//! Seeded train/validation/test partitioning.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMode {
    /// `⌊0.8n⌋ / ⌊0.1n⌋ / remainder`.
    Ratio,
    /// Exact sizes; they must add up to `n`.
    Fixed { train: usize, val: usize, test: usize },
}

impl SplitMode {
    /// 157 / 20 / 20, the published partition of a 197-patient cohort.
    pub const COHORT_197: SplitMode = SplitMode::Fixed {
        train: 157,
        val: 20,
        test: 20,
    };

    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        if n < 3 {
            return Err(Error::invalid("split", format!("need at least 3 samples, got {n}")));
        }
        match *self {
            SplitMode::Ratio => {
                let train = n * 8 / 10;
                let val = n / 10;
                Ok([train, val, n - train - val])
            }
            SplitMode::Fixed { train, val, test } => {
                if train + val + test != n {
                    return Err(Error::invalid(
                        "split",
                        format!("fixed sizes {train}/{val}/{test} do not add up to {n}"),
                    ));
                }
                Ok([train, val, test])
            }
        }
    }
}

/// Index sets into the original sample order, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_dataset(n: usize, seed: u64, mode: SplitMode) -> Result<Split> {
    let [a, b, _] = mode.sizes(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(seed, "split"));
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(Split {
        train: sorted(&order[..a]),
        val: sorted(&order[a..a + b]),
        test: sorted(&order[a + b..]),
    })
}
