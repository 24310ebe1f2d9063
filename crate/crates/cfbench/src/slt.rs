//! Sequential learning task construction: the eight D5-5 class partitions,
//! three D9-1 partitions, and the DP10-10 pixel-permutation task.
//!
//! Labels are never remapped inside an SLT; the 10-way readout is global and
//! a network simply never sees some labels during a phase.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SltKind {
    Partition,
    Permutation,
}

/// SLT type family, used for aggregation and CF thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SltType {
    D55,
    D91,
    Dp1010,
}

impl SltType {
    pub fn as_str(&self) -> &'static str {
        match self {
            SltType::D55 => "D5-5",
            SltType::D91 => "D9-1",
            SltType::Dp1010 => "DP10-10",
        }
    }
}

impl std::fmt::Display for SltType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SltSpec {
    pub name: String,
    pub kind: SltKind,
    pub d1_classes: Vec<u8>,
    pub d2_classes: Vec<u8>,
    /// Pixel permutation seeds (permutation kind only). `None` for the first
    /// sub-task means the identity permutation; `None` for the second means a
    /// shuffle drawn from the experiment's permutation stream.
    pub perm_seed_1: Option<u64>,
    pub perm_seed_2: Option<u64>,
}

impl SltSpec {
    pub fn slt_type(&self) -> SltType {
        match self.kind {
            SltKind::Permutation => SltType::Dp1010,
            SltKind::Partition if self.d2_classes.len() == 1 => SltType::D91,
            SltKind::Partition => SltType::D55,
        }
    }
}

fn partition(name: &str, d1: &[u8], d2: &[u8]) -> SltSpec {
    SltSpec {
        name: name.to_string(),
        kind: SltKind::Partition,
        d1_classes: d1.to_vec(),
        d2_classes: d2.to_vec(),
        perm_seed_1: None,
        perm_seed_2: None,
    }
}

/// The published class assignments for every SLT.
pub fn make_slt(name: &str) -> Result<SltSpec> {
    let spec = match name {
        "D5-5a" => partition(name, &[0, 1, 2, 3, 4], &[5, 6, 7, 8, 9]),
        "D5-5b" => partition(name, &[0, 2, 4, 6, 8], &[1, 3, 5, 7, 9]),
        "D5-5c" => partition(name, &[3, 4, 6, 8, 9], &[0, 1, 2, 5, 7]),
        "D5-5d" => partition(name, &[0, 2, 5, 6, 7], &[1, 3, 4, 8, 9]),
        "D5-5e" => partition(name, &[0, 1, 3, 4, 5], &[2, 6, 7, 8, 9]),
        "D5-5f" => partition(name, &[0, 3, 4, 8, 9], &[1, 2, 5, 6, 7]),
        "D5-5g" => partition(name, &[0, 5, 6, 7, 8], &[1, 2, 3, 4, 9]),
        "D5-5h" => partition(name, &[0, 2, 3, 6, 8], &[1, 4, 5, 7, 9]),
        "D9-1a" => partition(name, &[0, 1, 2, 3, 4, 5, 6, 7, 8], &[9]),
        "D9-1b" => partition(name, &[1, 2, 3, 4, 5, 6, 7, 8, 9], &[0]),
        "D9-1c" => partition(name, &[0, 2, 3, 4, 5, 6, 7, 8, 9], &[1]),
        "DP10-10" => SltSpec {
            name: name.to_string(),
            kind: SltKind::Permutation,
            d1_classes: (0..10).collect(),
            d2_classes: (0..10).collect(),
            perm_seed_1: None,
            perm_seed_2: None,
        },
        _ => return Err(Error::config(format!("unknown SLT name '{name}'"))),
    };
    Ok(spec)
}

/// All SLT specs matching the filter (`"D5-5"`, `"D9-1"`, `"DP10-10"` or
/// `"all"`).
pub fn list_slts(filter: &str) -> Result<Vec<SltSpec>> {
    let names: Vec<&str> = match filter {
        "D5-5" => vec!["D5-5a", "D5-5b", "D5-5c", "D5-5d", "D5-5e", "D5-5f", "D5-5g", "D5-5h"],
        "D9-1" => vec!["D9-1a", "D9-1b", "D9-1c"],
        "DP10-10" => vec!["DP10-10"],
        "all" => {
            let mut all = list_slts("D5-5")?;
            all.extend(list_slts("D9-1")?);
            all.extend(list_slts("DP10-10")?);
            return Ok(all);
        }
        _ => return Err(Error::config(format!("unknown SLT filter '{filter}'"))),
    };
    names.into_iter().map(make_slt).collect()
}

/// Which splits of an [`SltInstance`] have been touched. The protocol uses
/// this to prove phase-1 model selection never read the second sub-task.
#[derive(Default, Debug)]
pub struct SplitAudit {
    d1_train: AtomicBool,
    d1_test: AtomicBool,
    d2_train: AtomicBool,
    d2_test: AtomicBool,
    joint_train: AtomicBool,
    joint_test: AtomicBool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSnapshot {
    pub d1_train: bool,
    pub d1_test: bool,
    pub d2_train: bool,
    pub d2_test: bool,
    pub joint_train: bool,
    pub joint_test: bool,
}

impl AuditSnapshot {
    /// True when nothing containing second-sub-task data has been read.
    pub fn d2_untouched(&self) -> bool {
        !self.d2_train && !self.d2_test && !self.joint_train && !self.joint_test
    }
}

/// The materialized SLT: both sub-tasks plus their union, behind an
/// access-audited handle.
pub struct SltInstance {
    pub spec: SltSpec,
    d1_train: Dataset,
    d1_test: Dataset,
    d2_train: Dataset,
    d2_test: Dataset,
    joint_train: Dataset,
    joint_test: Dataset,
    audit: Arc<SplitAudit>,
}

macro_rules! audited {
    ($get:ident, $flag:ident) => {
        pub fn $get(&self) -> &Dataset {
            self.audit.$flag.store(true, Ordering::Relaxed);
            &self.$flag
        }
    };
}

impl SltInstance {
    audited!(d1_train, d1_train);
    audited!(d1_test, d1_test);
    audited!(d2_train, d2_train);
    audited!(d2_test, d2_test);
    audited!(joint_train, joint_train);
    audited!(joint_test, joint_test);

    pub fn audit(&self) -> AuditSnapshot {
        AuditSnapshot {
            d1_train: self.audit.d1_train.load(Ordering::Relaxed),
            d1_test: self.audit.d1_test.load(Ordering::Relaxed),
            d2_train: self.audit.d2_train.load(Ordering::Relaxed),
            d2_test: self.audit.d2_test.load(Ordering::Relaxed),
            joint_train: self.audit.joint_train.load(Ordering::Relaxed),
            joint_test: self.audit.joint_test.load(Ordering::Relaxed),
        }
    }
}

fn filter_classes(ds: &Dataset, classes: &[u8]) -> Dataset {
    let idx: Vec<usize> = (0..ds.len())
        .filter(|&i| classes.contains(&ds.labels[i]))
        .collect();
    ds.subset(&idx)
}

fn concat(a: &Dataset, b: &Dataset) -> Dataset {
    debug_assert_eq!(a.image_dims(), b.image_dims());
    let [h, w, c] = a.image_dims();
    let mut data = a.images.data().to_vec();
    data.extend_from_slice(b.images.data());
    let mut labels = a.labels.clone();
    labels.extend_from_slice(&b.labels);
    Dataset {
        images: Tensor::from_vec(&[a.len() + b.len(), h, w, c], data),
        labels,
        split: a.split,
    }
}

/// Applies a pixel permutation to every image: output position `i` takes the
/// value at input position `perm[i]`.
pub fn permute_pixels(ds: &Dataset, perm: &[usize]) -> Dataset {
    let [h, w, c] = ds.image_dims();
    let stride = h * w * c;
    assert_eq!(perm.len(), stride, "permutation length must match pixel count");
    let src = ds.images.data();
    let mut data = vec![0.0; src.len()];
    for img in 0..ds.len() {
        let base = img * stride;
        for (i, &p) in perm.iter().enumerate() {
            data[base + i] = src[base + p];
        }
    }
    Dataset {
        images: Tensor::from_vec(&[ds.len(), h, w, c], data),
        labels: ds.labels.clone(),
        split: ds.split,
    }
}

fn resolve_perm(
    seed: Option<u64>,
    identity_default: bool,
    base: &RngStream,
    tag: u64,
    n: usize,
) -> Vec<usize> {
    match seed {
        Some(s) => RngStream::new(s).permutation(n),
        None if identity_default => (0..n).collect(),
        None => base.fork(tag).permutation(n),
    }
}

/// Materializes an SLT from a 10-class base dataset pair. Partition SLTs
/// filter by class membership with labels unchanged; the permutation SLT
/// applies seeded pixel permutations to all images. Deterministic given the
/// permutation stream.
pub fn apply_slt(spec: &SltSpec, train: &Dataset, test: &Dataset, rng: &RngStream) -> Result<SltInstance> {
    if train.split != Split::Train || test.split != Split::Test {
        return Err(Error::data("apply_slt needs a (train, test) dataset pair"));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::data("apply_slt needs nonempty train and test splits"));
    }

    let (d1_train, d1_test, d2_train, d2_test) = match spec.kind {
        SltKind::Partition => (
            filter_classes(train, &spec.d1_classes),
            filter_classes(test, &spec.d1_classes),
            filter_classes(train, &spec.d2_classes),
            filter_classes(test, &spec.d2_classes),
        ),
        SltKind::Permutation => {
            let [h, w, c] = train.image_dims();
            let n = h * w * c;
            let p1 = resolve_perm(spec.perm_seed_1, true, rng, 1, n);
            let p2 = resolve_perm(spec.perm_seed_2, false, rng, 2, n);
            (
                permute_pixels(train, &p1),
                permute_pixels(test, &p1),
                permute_pixels(train, &p2),
                permute_pixels(test, &p2),
            )
        }
    };

    let joint_train = concat(&d1_train, &d2_train);
    let joint_test = concat(&d1_test, &d2_test);
    Ok(SltInstance {
        spec: spec.clone(),
        d1_train,
        d1_test,
        d2_train,
        d2_test,
        joint_train,
        joint_test,
        audit: Arc::new(SplitAudit::default()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;

    fn base_pair(n_per_class: usize) -> (Dataset, Dataset) {
        let rng = RngStream::new(99);
        let train = synthetic_blobs(n_per_class, 9, 8.0, &mut rng.fork(1), Split::Train);
        let test = synthetic_blobs(n_per_class / 2, 9, 8.0, &mut rng.fork(2), Split::Test);
        (train, test)
    }

    #[test]
    fn table_assignments() {
        let a = make_slt("D5-5a").unwrap();
        assert_eq!(a.d1_classes, vec![0, 1, 2, 3, 4]);
        assert_eq!(a.d2_classes, vec![5, 6, 7, 8, 9]);
        let b = make_slt("D9-1b").unwrap();
        assert_eq!(b.d1_classes, (1..10).collect::<Vec<u8>>());
        assert_eq!(b.d2_classes, vec![0]);
        let f = make_slt("D5-5f").unwrap();
        assert_eq!(f.d1_classes, vec![0, 3, 4, 8, 9]);
        assert_eq!(f.d2_classes, vec![1, 2, 5, 6, 7]);
        let c = make_slt("D5-5c").unwrap();
        assert_eq!(c.d1_classes, vec![3, 4, 6, 8, 9]);
        assert_eq!(c.d2_classes, vec![0, 1, 2, 5, 7]);
    }

    #[test]
    fn unknown_name_is_rejected() {
        assert!(make_slt("D5-5z").is_err());
    }

    #[test]
    fn listing_cardinalities() {
        assert_eq!(list_slts("D5-5").unwrap().len(), 8);
        assert_eq!(list_slts("D9-1").unwrap().len(), 3);
        assert_eq!(list_slts("DP10-10").unwrap().len(), 1);
        assert_eq!(list_slts("all").unwrap().len(), 12);
    }

    #[test]
    fn slt_types_classify_by_structure() {
        assert_eq!(make_slt("D5-5d").unwrap().slt_type(), SltType::D55);
        assert_eq!(make_slt("D9-1c").unwrap().slt_type(), SltType::D91);
        assert_eq!(make_slt("DP10-10").unwrap().slt_type(), SltType::Dp1010);
    }

    #[test]
    fn partition_cardinalities_on_balanced_data() {
        let (train, test) = base_pair(20);
        let spec = make_slt("D9-1a").unwrap();
        let inst = apply_slt(&spec, &train, &test, &RngStream::new(4)).unwrap();
        assert_eq!(inst.d1_train().len(), 9 * 20);
        assert_eq!(inst.d2_train().len(), 20);
        // |D2| / |D1| = 1/9 exactly on balanced data.
        assert_eq!(inst.d1_train().len(), 9 * inst.d2_train().len());
        assert_eq!(inst.joint_test().len(), test.len());
    }

    #[test]
    fn partition_label_sets_are_disjoint() {
        let (train, test) = base_pair(12);
        for name in ["D5-5a", "D5-5e", "D9-1b"] {
            let spec = make_slt(name).unwrap();
            let inst = apply_slt(&spec, &train, &test, &RngStream::new(4)).unwrap();
            let l1 = inst.d1_test().class_counts();
            let l2 = inst.d2_test().class_counts();
            assert!(l1.keys().all(|k| !l2.contains_key(k)));
            // Every joint-test label appears in exactly one sub-task test set.
            let joint = inst.joint_test().class_counts();
            for (k, n) in joint {
                let in1 = l1.get(&k).copied().unwrap_or(0);
                let in2 = l2.get(&k).copied().unwrap_or(0);
                assert_eq!(in1 + in2, n);
                assert!(in1 == 0 || in2 == 0);
            }
        }
    }

    #[test]
    fn identity_seed_keeps_first_subtask_unpermuted() {
        let (train, test) = base_pair(6);
        let spec = make_slt("DP10-10").unwrap();
        let inst = apply_slt(&spec, &train, &test, &RngStream::new(4)).unwrap();
        assert_eq!(inst.d1_train().images, train.images);
        assert_ne!(inst.d2_train().images, train.images);
        assert_eq!(inst.joint_train().len(), 2 * train.len());
    }

    #[test]
    fn pixel_permutation_round_trips() {
        let (train, _) = base_pair(4);
        let mut rng = RngStream::new(17);
        let perm = rng.permutation(9);
        let mut inverse = vec![0usize; 9];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let permuted = permute_pixels(&train, &perm);
        let restored = permute_pixels(&permuted, &inverse);
        assert_eq!(restored.images, train.images);
    }

    #[test]
    fn audit_records_split_access() {
        let (train, test) = base_pair(4);
        let spec = make_slt("D5-5a").unwrap();
        let inst = apply_slt(&spec, &train, &test, &RngStream::new(4)).unwrap();
        assert!(inst.audit().d2_untouched());
        let _ = inst.d1_train();
        let _ = inst.d1_test();
        assert!(inst.audit().d2_untouched());
        let _ = inst.d2_test();
        assert!(!inst.audit().d2_untouched());
    }
}
