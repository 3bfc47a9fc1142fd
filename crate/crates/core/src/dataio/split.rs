use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::fnv1a;

/// Share of the full-sample training range kept in few-shot mode.
pub const FEW_SHOT_RATIO: f64 = 0.1;

// Guards floor() against products like 0.6 * 5 = 3.0000000000000004 landing
// just under an integer on other inputs.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Train on the first [`FEW_SHOT_RATIO`] of the full-sample training
    /// range, where the full-sample training fraction is
    /// `train_fraction / FEW_SHOT_RATIO`.
    pub few_shot: bool,
}

impl SplitSpec {
    pub fn full_sample() -> Self {
        Self {
            train_fraction: 0.6,
            val_fraction: 0.2,
            test_fraction: 0.2,
            few_shot: false,
        }
    }

    pub fn few_shot() -> Self {
        Self {
            train_fraction: 0.06,
            val_fraction: 0.2,
            test_fraction: 0.2,
            few_shot: true,
        }
    }

    fn full_train_fraction(&self) -> f64 {
        if self.few_shot {
            self.train_fraction / FEW_SHOT_RATIO
        } else {
            self.train_fraction
        }
    }
}

/// Chronological, disjoint window-index ranges.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRanges {
    /// Stable fingerprint used to confirm that runs share identical splits.
    pub fn fingerprint(&self) -> String {
        let text = format!(
            "train={:?};val={:?};test={:?}",
            self.train, self.val, self.test
        );
        format!("{:016x}", fnv1a(text.as_bytes()))
    }
}

fn floor_count(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction + FLOOR_SLACK).floor() as usize
}

/// Every split size is `floor(n · fraction)`; windows past the test range are
/// left unused.
pub fn chronological_split(n_windows: usize, spec: &SplitSpec) -> Result<SplitRanges> {
    let full_train = spec.full_train_fraction();
    for (name, f) in [
        ("train", spec.train_fraction),
        ("val", spec.val_fraction),
        ("test", spec.test_fraction),
        ("full-sample train", full_train),
    ] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("{name} fraction {f} outside (0, 1]")));
        }
    }
    if full_train + spec.val_fraction + spec.test_fraction > 1.0 + FLOOR_SLACK {
        return Err(Error::Config("split fractions sum to more than 1".into()));
    }

    let full_len = floor_count(n_windows, full_train);
    let val_len = floor_count(n_windows, spec.val_fraction);
    let test_len = floor_count(n_windows, spec.test_fraction);
    let train_len = if spec.few_shot {
        floor_count(full_len, FEW_SHOT_RATIO)
    } else {
        full_len
    };
    let ranges = SplitRanges {
        train: 0..train_len,
        val: full_len..full_len + val_len,
        test: full_len + val_len..full_len + val_len + test_len,
    };
    for (name, r) in [("train", &ranges.train), ("val", &ranges.val), ("test", &ranges.test)] {
        if r.is_empty() {
            return Err(Error::Config(format!(
                "{name} split is empty for {n_windows} windows"
            )));
        }
    }
    Ok(ranges)
}
