use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ImageRecord, ObjectClass};
use crate::error::{Error, Result};

/// Disjoint train/validation/test partition of dataset ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl DatasetSplit {
    /// Selects the records of one split, in dataset order.
    pub fn select<'a>(&self, dataset: &'a [ImageRecord], part: &[String]) -> Vec<&'a ImageRecord> {
        let wanted: std::collections::HashSet<&str> = part.iter().map(String::as_str).collect();
        dataset.iter().filter(|r| wanted.contains(r.id.as_str())).collect()
    }
}

/// Splits the dataset so each split carries a similar class distribution.
///
/// Every image is binned by the rarest class it contains (rarity = number of
/// images containing the class, ties broken by class code); images without
/// annotations form their own bin. Each bin is shuffled with `seed` and cut by
/// largest-remainder rounding of `len * ratio`.
pub fn stratified_split(dataset: &[ImageRecord], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    if ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }

    let mut images_per_class = [0usize; ObjectClass::COUNT];
    for rec in dataset {
        let mut present = [false; ObjectClass::COUNT];
        for a in &rec.annotations {
            present[a.object_class.code()] = true;
        }
        for (count, p) in images_per_class.iter_mut().zip(present) {
            *count += p as usize;
        }
    }

    // key: Some(class code) or None for annotation-free images
    let mut bins: BTreeMap<Option<usize>, Vec<&str>> = BTreeMap::new();
    for rec in dataset {
        let key = rec
            .annotations
            .iter()
            .map(|a| a.object_class.code())
            .min_by_key(|&c| (images_per_class[c], c));
        bins.entry(key).or_default().push(&rec.id);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = bins.values().map(Vec::len).collect();
    let allocation = apportion(&sizes, ratios)?;
    let mut parts: [Vec<String>; 3] = Default::default();
    for (ids, counts) in bins.values_mut().zip(allocation) {
        ids.shuffle(&mut rng);
        let mut it = ids.iter();
        for (part, n) in parts.iter_mut().zip(counts) {
            part.extend(it.by_ref().take(n).map(|s| s.to_string()));
        }
    }

    // Restore dataset order inside each split so the output is easy to diff.
    let position: std::collections::HashMap<&str, usize> =
        dataset.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    for part in &mut parts {
        part.sort_by_key(|id| position[id.as_str()]);
    }

    let warnings = ObjectClass::ALL
        .iter()
        .filter(|c| images_per_class[c.code()] < 3)
        .map(|c| {
            format!(
                "class `{c}` appears in only {} image(s); splits cannot all contain it",
                images_per_class[c.code()]
            )
        })
        .collect();

    let [train, validation, test] = parts;
    Ok(DatasetSplit {
        seed,
        ratios,
        train,
        validation,
        test,
        warnings,
    })
}

/// Per-bin split counts. Every bin gets the floor of its exact share plus at
/// most one extra unit per split, and the split totals equal the
/// largest-remainder rounding of the whole dataset. Leftover units go to the
/// splits with the most unmet demand (Ryser's greedy), ties by larger
/// fractional part.
pub(crate) fn apportion(sizes: &[usize], ratios: [f64; 3]) -> Result<Vec<[usize; 3]>> {
    let total: usize = sizes.iter().sum();
    let mut demand = largest_remainder(total, ratios);
    let mut out: Vec<[usize; 3]> = sizes
        .iter()
        .map(|&n| ratios.map(|r| (n as f64 * r).floor() as usize))
        .collect();
    for row in &out {
        for k in 0..3 {
            // Floors never exceed the rounded total.
            demand[k] -= row[k];
        }
    }
    for (row, &n) in out.iter_mut().zip(sizes) {
        let left = n - row.iter().sum::<usize>();
        let frac = ratios.map(|r| n as f64 * r - (n as f64 * r).floor());
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            demand[b]
                .cmp(&demand[a])
                .then(frac[b].partial_cmp(&frac[a]).unwrap())
                .then(a.cmp(&b))
        });
        for &k in order.iter().take(left) {
            if demand[k] == 0 {
                return Err(Error::InvalidArgument(format!("cannot apportion {sizes:?} by {ratios:?}")));
            }
            row[k] += 1;
            demand[k] -= 1;
        }
    }
    Ok(out)
}

/// Hamilton apportionment: floors first, leftover units to the largest
/// fractional parts (ties go to the earlier split).
pub(crate) fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact = ratios.map(|r| n as f64 * r);
    let mut counts = exact.map(|e| e.floor() as usize);
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Annotation, AnomalyLabel, BoundingBox, Image};
    use proptest::prelude::*;

    fn single_class_dataset(per_class: &[usize]) -> Vec<ImageRecord> {
        let mut out = Vec::new();
        for (code, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                out.push(ImageRecord {
                    id: format!("c{code}_{i}"),
                    image: Image::filled(1, 1, [0.0; 3]),
                    annotations: vec![Annotation {
                        bbox: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                        object_class: ObjectClass::from_code(code).unwrap(),
                        anomaly: AnomalyLabel::Benign,
                    }],
                });
            }
        }
        out
    }

    fn class_counts(split: &DatasetSplit, part: &[String]) -> [usize; 6] {
        let _ = split;
        let mut c = [0; 6];
        for id in part {
            let code: usize = id[1..2].parse().unwrap();
            c[code] += 1;
        }
        c
    }

    #[test]
    fn exact_divisibility_gives_exact_counts() {
        let ds = single_class_dataset(&[10; 6]);
        let s = stratified_split(&ds, [0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(class_counts(&s, &s.train), [6; 6]);
        assert_eq!(class_counts(&s, &s.validation), [2; 6]);
        assert_eq!(class_counts(&s, &s.test), [2; 6]);
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn same_seed_same_split() {
        let ds = single_class_dataset(&[5, 7, 3, 9, 4, 6]);
        let a = stratified_split(&ds, [0.6, 0.2, 0.2], 11).unwrap();
        let b = stratified_split(&ds, [0.6, 0.2, 0.2], 11).unwrap();
        assert_eq!(a, b);
        let c = stratified_split(&ds, [0.6, 0.2, 0.2], 12).unwrap();
        assert_ne!(a.train, c.train);
    }

    /// Hand oracle: enumerate every (a, b, c) with a + b + c = n that respects
    /// the floors, keep those with the smallest total deviation from
    /// n * ratio, then check the implementation picks one of them.
    #[test]
    fn seven_images_follow_largest_remainder() {
        let ratios = [0.6, 0.2, 0.2];
        let n = 7usize;
        let mut scored = Vec::new();
        for a in 0..=n {
            for b in 0..=n - a {
                let c = n - a - b;
                let k = [a, b, c];
                if k.iter().zip(ratios).all(|(&k, r)| k >= (n as f64 * r).floor() as usize) {
                    let dev: f64 = k.iter().zip(ratios).map(|(&k, r)| (k as f64 - n as f64 * r).abs()).sum();
                    scored.push((dev, k));
                }
            }
        }
        let best = scored.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
        let admissible: Vec<[usize; 3]> = scored.iter().filter(|s| s.0 - best < 1e-9).map(|s| s.1).collect();
        assert_eq!(admissible, vec![[4, 1, 2], [4, 2, 1]]);

        let ds = single_class_dataset(&[0, 0, 7, 0, 0, 0]);
        let s = stratified_split(&ds, ratios, 5).unwrap();
        let got = [s.train.len(), s.validation.len(), s.test.len()];
        assert!(admissible.contains(&got), "{got:?}");
        assert_eq!(got, [4, 2, 1]);
        // five classes are absent entirely
        assert_eq!(s.warnings.len(), 5);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(stratified_split(&[], [0.6, 0.2, 0.2], 0).is_err());
        let ds = single_class_dataset(&[3; 6]);
        assert!(stratified_split(&ds, [0.6, 0.3, 0.2], 0).is_err());
        assert!(stratified_split(&ds, [0.8, 0.0, 0.2], 0).is_err());
    }

    #[test]
    fn multi_class_images_follow_rarest_class() {
        let mut ds = single_class_dataset(&[6, 1, 0, 0, 0, 0]);
        // add a second class to the lone hairdryer image's bin partner
        let extra = Annotation {
            object_class: ObjectClass::Hairdryer,
            ..ds[0].annotations[0]
        };
        ds[0].annotations.push(extra);
        let s = stratified_split(&ds, [0.6, 0.2, 0.2], 1).unwrap();
        // hairdryer bin now has 2 images: floors 1,0,0 then remainders .2,.4,.4 -> val
        let hair_bin = ["c0_0", "c1_0"];
        let in_train = hair_bin.iter().filter(|id| s.train.iter().any(|t| t == *id)).count();
        let in_val = hair_bin.iter().filter(|id| s.validation.iter().any(|t| t == *id)).count();
        assert_eq!((in_train, in_val), (1, 1));
    }

    proptest! {
        #[test]
        fn splits_partition_the_dataset(
            counts in proptest::collection::vec(0usize..12, 6),
            seed in any::<u64>(),
        ) {
            prop_assume!(counts.iter().sum::<usize>() > 0);
            let ds = single_class_dataset(&counts);
            let s = stratified_split(&ds, [0.6, 0.2, 0.2], seed).unwrap();
            let mut all: Vec<&String> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
            prop_assert_eq!(all.len(), ds.len());
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), ds.len());
            for (k, part) in [&s.train, &s.validation, &s.test].into_iter().enumerate() {
                let got = class_counts(&s, part);
                for c in 0..6 {
                    let exact = counts[c] as f64 * s.ratios[k];
                    prop_assert!((got[c] as f64 - exact).abs() <= 1.0);
                }
            }
        }

        #[test]
        fn apportionment_hits_the_overall_totals(
            sizes in proptest::collection::vec(0usize..40, 1..9),
            a in 1u32..8,
            b in 1u32..8,
            c in 1u32..8,
        ) {
            let sum = f64::from(a + b + c);
            let ratios = [f64::from(a) / sum, f64::from(b) / sum, 1.0 - f64::from(a + b) / sum];
            let rows = apportion(&sizes, ratios).unwrap();
            let total: usize = sizes.iter().sum();
            let mut totals = [0usize; 3];
            for (row, &n) in rows.iter().zip(&sizes) {
                prop_assert_eq!(row.iter().sum::<usize>(), n);
                for k in 0..3 {
                    let floor = (n as f64 * ratios[k]).floor() as usize;
                    prop_assert!(row[k] == floor || row[k] == floor + 1, "{:?} of {} by {:?}", row, n, ratios);
                    totals[k] += row[k];
                }
            }
            prop_assert_eq!(totals, largest_remainder(total, ratios));
        }
    }
}
