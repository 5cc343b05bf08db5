use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::record::{DatasetManifest, ImageRecord, Split, Variety};
use crate::error::{Error, Result};

/// Condition axis used to stratify the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Variety,
    Weather,
    Maturity,
    Sunlight,
}

impl Dimension {
    pub const CONDITIONS: [Dimension; 3] = [Dimension::Weather, Dimension::Maturity, Dimension::Sunlight];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Variety => "variety",
            Dimension::Weather => "weather",
            Dimension::Maturity => "maturity",
            Dimension::Sunlight => "sunlight",
        }
    }

    /// The record's value on this axis, if it has one.
    pub fn value(self, r: &ImageRecord) -> Option<&'static str> {
        match self {
            Dimension::Variety => Some(r.variety.as_str()),
            Dimension::Weather => Some(r.weather.as_str()),
            Dimension::Maturity => r.maturity.map(|m| m.as_str()),
            Dimension::Sunlight => Some(r.sunlight.as_str()),
        }
    }

    /// Every value this axis can take, in table order.
    pub fn values(self) -> Vec<&'static str> {
        use crate::data::record::{Maturity, Sunlight, Weather};
        match self {
            Dimension::Variety => Variety::ALL.iter().map(|v| v.as_str()).collect(),
            Dimension::Weather => Weather::ALL.iter().map(|v| v.as_str()).collect(),
            Dimension::Maturity => Maturity::ALL.iter().map(|v| v.as_str()).collect(),
            Dimension::Sunlight => Sunlight::ALL.iter().map(|v| v.as_str()).collect(),
        }
    }
}

/// Raw-record counts per condition value. Records without a value on the
/// axis (the intermediate maturity stage) are not counted, so strata need
/// not sum to the number of raw records.
pub fn stratify(m: &DatasetManifest, dim: Dimension) -> BTreeMap<&'static str, usize> {
    stratify_records(m.raw_records(), dim)
}

/// [`stratify`] restricted to one variety.
pub fn stratify_variety(m: &DatasetManifest, variety: Variety, dim: Dimension) -> BTreeMap<&'static str, usize> {
    stratify_records(m.raw_records().filter(|r| r.variety == variety), dim)
}

fn stratify_records<'a>(records: impl Iterator<Item = &'a ImageRecord>, dim: Dimension) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        if let Some(v) = dim.value(r) {
            *out.entry(v).or_insert(0) += 1;
        }
    }
    out
}

/// Group counts `(train, val, test)` for `groups` source images.
pub fn split_sizes(groups: usize, ratios: [f64; 3]) -> Result<(usize, usize, usize)> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParam(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let train = (ratios[0] * groups as f64).floor() as usize;
    let val = (ratios[1] * groups as f64).floor() as usize;
    Ok((train, val, groups - train - val))
}

/// Assign splits by `source_id` group so augmented siblings follow their parent.
pub fn split(m: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<DatasetManifest> {
    let mut groups: Vec<&str> = m.records.iter().map(|r| r.source_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    let (train, val, _) = split_sizes(groups.len(), ratios)?;
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment: BTreeMap<&str, Split> = groups
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let s = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            (g, s)
        })
        .collect();
    let mut out = m.clone();
    for r in &mut out.records {
        r.split = assignment[r.source_id.as_str()];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::record::sample_record;

    fn manifest(groups: usize) -> DatasetManifest {
        DatasetManifest::new((0..groups).map(sample_record).collect(), vec![], ".")
    }

    fn group_counts(m: &DatasetManifest) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &m.records {
            match r.split {
                Split::Train => c[0] += 1,
                Split::Val => c[1] += 1,
                Split::Test => c[2] += 1,
                Split::Unassigned => panic!("unassigned after split"),
            }
        }
        c
    }

    #[test]
    fn floor_arithmetic_on_groups() {
        assert_eq!(split_sizes(10, [0.8, 0.1, 0.1]).unwrap(), (8, 1, 1));
        assert_eq!(split_sizes(459, [0.8, 0.1, 0.1]).unwrap(), (367, 45, 47));
        assert!(split_sizes(10, [0.8, 0.1, 0.2]).is_err());
        assert_eq!(group_counts(&split(&manifest(10), [0.8, 0.1, 0.1], 3).unwrap()), [8, 1, 1]);
    }

    #[test]
    fn split_is_deterministic() {
        let m = manifest(50);
        assert_eq!(split(&m, [0.8, 0.1, 0.1], 9).unwrap(), split(&m, [0.8, 0.1, 0.1], 9).unwrap());
        assert_ne!(split(&m, [0.8, 0.1, 0.1], 9).unwrap(), split(&m, [0.8, 0.1, 0.1], 10).unwrap());
    }

    #[test]
    fn single_record_stratifies_to_its_condition() {
        let m = manifest(1);
        assert_eq!(stratify(&m, Dimension::Sunlight), BTreeMap::from([("noon", 1)]));
        let mut m = manifest(1);
        m.records[0].maturity = None;
        assert!(stratify(&m, Dimension::Maturity).is_empty());
    }
}
