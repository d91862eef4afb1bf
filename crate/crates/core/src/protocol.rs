//! Subject-dependent (SD) and leave-one-subject-out (LOSO) splits, plus
//! reference-set sampling with the leakage guard.
//!
//! The critical invariant: no sampled reference set may touch a fold's
//! held-out data. In LOSO that means reference subjects are disjoint from the
//! test subject; in SD (where train and test share the one subject) it means
//! references come only from training-split trials. Violations are hard
//! errors, never warnings.

use crate::error::{GrnError, Result};
use crate::seeding::rng_from;
use crate::signal::EegSegment;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtocolKind {
    Sd,
    Loso,
}

impl ProtocolKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProtocolKind::Sd => "sd",
            ProtocolKind::Loso => "loso",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sd" => Ok(ProtocolKind::Sd),
            "loso" => Ok(ProtocolKind::Loso),
            other => Err(GrnError::Config(format!(
                "unknown protocol '{other}' (expected sd or loso)"
            ))),
        }
    }
}

/// One cross-validation fold: disjoint index lists into the dataset.
#[derive(Debug, Clone)]
pub struct Fold {
    pub fold_id: usize,
    pub kind: ProtocolKind,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub train_subjects: Vec<u32>,
    pub test_subjects: Vec<u32>,
}

/// A sampled reference cohort: dataset indices plus their subjects, and the
/// class it was matched to when drawn during training.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    pub indices: Vec<usize>,
    pub subject_ids: Vec<u32>,
    pub label: Option<u32>,
}

const TAG_SD: u64 = 0x5D;
const TAG_LOSO: u64 = 0x105;
const TAG_REF_EVAL: u64 = 0xEFA1;

fn subjects_of(dataset: &[EegSegment]) -> Vec<u32> {
    let mut ids: Vec<u32> = dataset.iter().map(|s| s.subject_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

fn indices_by_class(dataset: &[EegSegment], indices: &[usize]) -> BTreeMap<u32, Vec<usize>> {
    let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        map.entry(dataset[i].label).or_default().push(i);
    }
    map
}

/// Within-subject splits: one fold per subject, partitioned per class so the
/// label balance of each partition stays within one trial of the ideal
/// fraction.
pub fn split_sd(
    dataset: &[EegSegment],
    val_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<Vec<Fold>> {
    if !(0.0..1.0).contains(&val_frac)
        || !(0.0..1.0).contains(&test_frac)
        || val_frac <= 0.0
        || test_frac <= 0.0
        || val_frac + test_frac >= 1.0
    {
        return Err(GrnError::Config(format!(
            "sd fractions must lie in (0,1) and sum below 1, got val={val_frac} test={test_frac}"
        )));
    }
    let subjects = subjects_of(dataset);
    let mut folds = Vec::with_capacity(subjects.len());
    for (fold_id, &subject) in subjects.iter().enumerate() {
        let own: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset[i].subject_id == subject)
            .collect();
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        let mut rng = rng_from(&[seed, TAG_SD, subject as u64]);
        for (label, mut ids) in indices_by_class(dataset, &own) {
            let n = ids.len();
            if n < 3 {
                return Err(GrnError::Config(format!(
                    "subject {subject} has only {n} trials of class {label}; sd needs at least 3"
                )));
            }
            ids.shuffle(&mut rng);
            let n_test = ((n as f64 * test_frac).round() as usize).max(1);
            let n_val = ((n as f64 * val_frac).round() as usize).max(1);
            if n_test + n_val >= n {
                return Err(GrnError::Config(format!(
                    "sd fractions leave no training trials for subject {subject} class {label}"
                )));
            }
            test.extend_from_slice(&ids[..n_test]);
            val.extend_from_slice(&ids[n_test..n_test + n_val]);
            train.extend_from_slice(&ids[n_test + n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        folds.push(Fold {
            fold_id,
            kind: ProtocolKind::Sd,
            train_indices: train,
            val_indices: val,
            test_indices: test,
            train_subjects: vec![subject],
            test_subjects: vec![subject],
        });
    }
    Ok(folds)
}

/// Leave-one-subject-out: each subject in turn is the entire test set; the
/// remaining subjects' trials are split into train/val, stratified by class.
pub fn split_loso(dataset: &[EegSegment], val_frac: f64, seed: u64) -> Result<Vec<Fold>> {
    let subjects = subjects_of(dataset);
    if subjects.len() < 3 {
        return Err(GrnError::Config(format!(
            "loso needs at least 3 subjects, got {}",
            subjects.len()
        )));
    }
    if !(0.0..1.0).contains(&val_frac) || val_frac <= 0.0 {
        return Err(GrnError::Config(format!(
            "loso val_frac must lie in (0,1), got {val_frac}"
        )));
    }
    let mut folds = Vec::with_capacity(subjects.len());
    for (fold_id, &held_out) in subjects.iter().enumerate() {
        let test: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset[i].subject_id == held_out)
            .collect();
        let pool: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset[i].subject_id != held_out)
            .collect();
        let mut rng = rng_from(&[seed, TAG_LOSO, fold_id as u64]);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (label, mut ids) in indices_by_class(dataset, &pool) {
            ids.shuffle(&mut rng);
            let n_val = ((ids.len() as f64 * val_frac).round() as usize).max(1);
            if n_val >= ids.len() {
                return Err(GrnError::Config(format!(
                    "loso val_frac {val_frac} leaves no training trials for class {label}"
                )));
            }
            val.extend_from_slice(&ids[..n_val]);
            train.extend_from_slice(&ids[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        folds.push(Fold {
            fold_id,
            kind: ProtocolKind::Loso,
            train_indices: train,
            val_indices: val,
            test_indices: test,
            train_subjects: subjects.iter().copied().filter(|&s| s != held_out).collect(),
            test_subjects: vec![held_out],
        });
    }
    Ok(folds)
}

/// The leakage guard shared by every sampling path. Checks that the cohort
/// never touches held-out data: reference subjects disjoint from the test
/// subject in LOSO, and reference trials confined to the training split in
/// both protocols.
fn guard_reference_set(
    fold: &Fold,
    dataset: &[EegSegment],
    sample_idx: usize,
    refs: &[usize],
) -> Result<()> {
    for &r in refs {
        if r == sample_idx {
            return Err(GrnError::Leakage(format!(
                "trial {} sampled as its own reference",
                dataset[r].trial_id
            )));
        }
        if fold.kind == ProtocolKind::Loso
            && fold.test_subjects.contains(&dataset[r].subject_id)
        {
            return Err(GrnError::Leakage(format!(
                "reference trial {} belongs to held-out subject {} (fold {})",
                dataset[r].trial_id, dataset[r].subject_id, fold.fold_id
            )));
        }
        if !fold.train_indices.contains(&r) {
            return Err(GrnError::Leakage(format!(
                "reference trial {} is outside the training split of fold {}",
                dataset[r].trial_id, fold.fold_id
            )));
        }
    }
    Ok(())
}

/// Draw references from an explicit candidate pool. This is the hook the
/// leakage tests use to inject a bad pool and prove the guard trips; normal
/// callers go through [`sample_references`] / [`sample_references_eval`],
/// which construct the legitimate pool.
pub fn sample_references_from_pool(
    fold: &Fold,
    dataset: &[EegSegment],
    sample_idx: usize,
    k_r: usize,
    rng: &mut ChaCha8Rng,
    pool: &[usize],
    label: Option<u32>,
) -> Result<ReferenceSet> {
    let sample_subject = dataset[sample_idx].subject_id;
    let distinct_subjects = fold.kind == ProtocolKind::Loso;
    let refs = if distinct_subjects {
        // Group pool by subject, then draw K_r distinct subjects and one trial
        // from each. The sample's own subject is only eligible when K_r needs
        // every training subject.
        let mut by_subject: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in pool {
            if i != sample_idx {
                by_subject.entry(dataset[i].subject_id).or_default().push(i);
            }
        }
        let mut subjects: Vec<u32> = by_subject.keys().copied().collect();
        if subjects.len() > k_r {
            subjects.retain(|&s| s != sample_subject);
        }
        if subjects.len() < k_r {
            return Err(GrnError::Invalid(format!(
                "need {k_r} distinct reference subjects, only {} available",
                subjects.len()
            )));
        }
        subjects.shuffle(rng);
        let mut chosen = Vec::with_capacity(k_r);
        for &s in subjects.iter().take(k_r) {
            let candidates = &by_subject[&s];
            let matched: Vec<usize> = match label {
                Some(l) => candidates
                    .iter()
                    .copied()
                    .filter(|&i| dataset[i].label == l)
                    .collect(),
                None => Vec::new(),
            };
            let from = if matched.is_empty() { candidates } else { &matched };
            chosen.push(from[rng.gen_range(0..from.len())]);
        }
        chosen
    } else {
        // SD: K_r distinct trials of the one training subject.
        let mut candidates: Vec<usize> = pool.iter().copied().filter(|&i| i != sample_idx).collect();
        if let Some(l) = label {
            let matched: Vec<usize> = candidates
                .iter()
                .copied()
                .filter(|&i| dataset[i].label == l)
                .collect();
            if matched.len() >= k_r {
                candidates = matched;
            }
        }
        if candidates.len() < k_r {
            return Err(GrnError::Invalid(format!(
                "need {k_r} reference trials, only {} available",
                candidates.len()
            )));
        }
        candidates.shuffle(rng);
        candidates.truncate(k_r);
        candidates
    };
    guard_reference_set(fold, dataset, sample_idx, &refs)?;
    Ok(ReferenceSet {
        subject_ids: refs.iter().map(|&i| dataset[i].subject_id).collect(),
        indices: refs,
        label,
    })
}

/// Training-time reference draw: label-matched trials from the fold's training
/// split, from K_r distinct training subjects in LOSO.
pub fn sample_references(
    fold: &Fold,
    dataset: &[EegSegment],
    sample_idx: usize,
    k_r: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ReferenceSet> {
    let label = Some(dataset[sample_idx].label);
    sample_references_from_pool(fold, dataset, sample_idx, k_r, rng, &fold.train_indices, label)
}

/// Evaluation-time reference draw: the label is unknown, so trials are drawn
/// uniformly from the training split; the stream is seeded by (fold, trial) so
/// repeated evaluations of the same trial see the same cohort.
pub fn sample_references_eval(
    fold: &Fold,
    dataset: &[EegSegment],
    sample_idx: usize,
    k_r: usize,
) -> Result<ReferenceSet> {
    let mut rng = rng_from(&[
        TAG_REF_EVAL,
        fold.fold_id as u64,
        dataset[sample_idx].trial_id as u64,
    ]);
    sample_references_from_pool(
        fold,
        dataset,
        sample_idx,
        k_r,
        &mut rng,
        &fold.train_indices,
        None,
    )
}

/// CSV manifest of a split: fold_id, partition, trial_index, subject_id, label.
pub fn fold_manifest_csv(folds: &[Fold], dataset: &[EegSegment]) -> String {
    let mut out = String::from("fold_id,partition,trial_index,subject_id,label\n");
    for fold in folds {
        for (name, ids) in [
            ("train", &fold.train_indices),
            ("val", &fold.val_indices),
            ("test", &fold.test_indices),
        ] {
            for &i in ids {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    fold.fold_id, name, i, dataset[i].subject_id, dataset[i].label
                ));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{gen_synthetic_dataset, SynthConfig};

    fn dataset(n_subjects: usize, trials_per_class: usize) -> Vec<EegSegment> {
        gen_synthetic_dataset(&SynthConfig {
            n_subjects,
            n_trials_per_class: trials_per_class,
            n_classes: 3,
            channels: 4,
            samples: 256,
            subject_noise_std: 0.2,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn sd_splits_6_3_3() {
        let data = dataset(3, 4); // 12 trials per subject
        let folds = split_sd(&data, 0.25, 0.25, 9).unwrap();
        assert_eq!(folds.len(), 3);
        for fold in &folds {
            assert_eq!(fold.train_indices.len(), 6);
            assert_eq!(fold.val_indices.len(), 3);
            assert_eq!(fold.test_indices.len(), 3);
            // every trial of the subject appears exactly once
            let mut all: Vec<usize> = fold
                .train_indices
                .iter()
                .chain(&fold.val_indices)
                .chain(&fold.test_indices)
                .copied()
                .collect();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), 12);
            assert!(all.iter().all(|&i| data[i].subject_id == fold.test_subjects[0]));
        }
    }

    #[test]
    fn sd_deterministic_and_errors() {
        let data = dataset(3, 4);
        let a = split_sd(&data, 0.25, 0.25, 9).unwrap();
        let b = split_sd(&data, 0.25, 0.25, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.train_indices, y.train_indices);
            assert_eq!(x.val_indices, y.val_indices);
            assert_eq!(x.test_indices, y.test_indices);
        }
        let tiny = dataset(3, 2); // 2 trials per class < 3
        assert!(split_sd(&tiny, 0.25, 0.25, 9).is_err());
        assert!(split_sd(&data, 0.5, 0.5, 9).is_err());
    }

    #[test]
    fn loso_folds_partition_dataset() {
        let data = dataset(5, 4);
        let folds = split_loso(&data, 0.125, 3).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen_test: Vec<usize> = Vec::new();
        for fold in &folds {
            assert_eq!(fold.test_subjects.len(), 1);
            assert!(!fold.train_subjects.contains(&fold.test_subjects[0]));
            // disjointness within the fold
            for &i in &fold.train_indices {
                assert!(!fold.val_indices.contains(&i));
                assert!(!fold.test_indices.contains(&i));
            }
            seen_test.extend_from_slice(&fold.test_indices);
        }
        seen_test.sort_unstable();
        assert_eq!(seen_test, (0..data.len()).collect::<Vec<_>>());
    }

    #[test]
    fn loso_rejects_too_few_subjects() {
        let data = dataset(3, 4);
        let two_subjects: Vec<EegSegment> = data
            .into_iter()
            .filter(|s| s.subject_id < 2)
            .collect();
        assert!(split_loso(&two_subjects, 0.125, 3).is_err());
    }

    #[test]
    fn loso_val_stratified_within_one() {
        let data = dataset(5, 5);
        let folds = split_loso(&data, 0.2, 17).unwrap();
        for fold in &folds {
            let by_class = indices_by_class(&data, &fold.val_indices);
            // pool per class = 4 subjects x 5 trials = 20, ideal = 4
            for (_, ids) in by_class {
                assert!((ids.len() as i64 - 4).abs() <= 1);
            }
        }
    }

    #[test]
    fn reference_sampling_respects_loso_guard() {
        let data = dataset(5, 4);
        let folds = split_loso(&data, 0.125, 3).unwrap();
        let fold = &folds[3];
        let held_out = fold.test_subjects[0];
        let mut rng = rng_from(&[100]);
        for &train_idx in fold.train_indices.iter().take(10) {
            let refs = sample_references(fold, &data, train_idx, 3, &mut rng).unwrap();
            assert_eq!(refs.indices.len(), 3);
            assert!(refs.subject_ids.iter().all(|&s| s != held_out));
            // distinct subjects
            let mut subs = refs.subject_ids.clone();
            subs.sort_unstable();
            subs.dedup();
            assert_eq!(subs.len(), 3);
            assert_eq!(refs.label, Some(data[train_idx].label));
            // matched labels available in this dataset
            assert!(refs.indices.iter().all(|&i| data[i].label == data[train_idx].label));
        }
    }

    #[test]
    fn exhaustive_draw_uses_every_training_subject_once() {
        let data = dataset(5, 4);
        let folds = split_loso(&data, 0.125, 3).unwrap();
        let fold = &folds[0];
        let test_idx = fold.test_indices[0];
        let refs = sample_references_eval(fold, &data, test_idx, 4).unwrap();
        let mut subs = refs.subject_ids.clone();
        subs.sort_unstable();
        assert_eq!(subs, fold.train_subjects);
    }

    #[test]
    fn eval_draw_is_reproducible() {
        let data = dataset(5, 4);
        let folds = split_loso(&data, 0.125, 3).unwrap();
        let fold = &folds[2];
        let test_idx = fold.test_indices[1];
        let a = sample_references_eval(fold, &data, test_idx, 3).unwrap();
        let b = sample_references_eval(fold, &data, test_idx, 3).unwrap();
        assert_eq!(a.indices, b.indices);
    }

    #[test]
    fn insufficient_subjects_is_an_error() {
        let data = dataset(4, 4);
        let folds = split_loso(&data, 0.125, 3).unwrap();
        let fold = &folds[0];
        // only 3 training subjects
        assert!(sample_references_eval(fold, &data, fold.test_indices[0], 4).is_err());
    }

    #[test]
    fn injected_bad_pool_trips_the_guard() {
        let data = dataset(5, 4);
        let folds = split_loso(&data, 0.125, 3).unwrap();
        let fold = &folds[1];
        let all: Vec<usize> = (0..data.len()).collect();
        let mut violations = 0;
        for attempt in 0..50 {
            let mut rng = rng_from(&[attempt]);
            match sample_references_from_pool(
                fold,
                &data,
                fold.test_indices[0],
                3,
                &mut rng,
                &all,
                None,
            ) {
                Err(GrnError::Leakage(_)) => violations += 1,
                Err(other) => panic!("unexpected error: {other}"),
                Ok(refs) => {
                    // the guard only passes when the draw happened to avoid
                    // held-out data entirely
                    assert!(refs
                        .subject_ids
                        .iter()
                        .all(|s| !fold.test_subjects.contains(s)));
                    assert!(refs.indices.iter().all(|i| fold.train_indices.contains(i)));
                }
            }
        }
        assert!(violations > 0, "no injection attempt tripped the guard");
    }

    #[test]
    fn sd_references_stay_in_training_split() {
        let data = dataset(3, 4);
        let folds = split_sd(&data, 0.25, 0.25, 9).unwrap();
        let fold = &folds[0];
        let mut rng = rng_from(&[7]);
        let sample_idx = fold.train_indices[0];
        let refs = sample_references(fold, &data, sample_idx, 2, &mut rng).unwrap();
        assert_eq!(refs.indices.len(), 2);
        assert!(refs.indices.iter().all(|i| fold.train_indices.contains(i)));
        assert!(refs.indices.iter().all(|&i| i != sample_idx));
        // eval draw from a test trial also confined to the training split
        let refs = sample_references_eval(fold, &data, fold.test_indices[0], 2).unwrap();
        assert!(refs.indices.iter().all(|i| fold.train_indices.contains(i)));
    }

    #[test]
    fn manifest_lists_every_partition() {
        let data = dataset(3, 4);
        let folds = split_sd(&data, 0.25, 0.25, 9).unwrap();
        let csv = fold_manifest_csv(&folds, &data);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "fold_id,partition,trial_index,subject_id,label");
        assert_eq!(lines.len(), 1 + 3 * 12);
        assert!(lines.iter().any(|l| l.contains(",train,")));
        assert!(lines.iter().any(|l| l.contains(",val,")));
        assert!(lines.iter().any(|l| l.contains(",test,")));
    }
}
