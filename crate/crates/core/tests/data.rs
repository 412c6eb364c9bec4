mod common;

use std::collections::BTreeSet;

use medfuse_core::data::{self, LabelSchema, LabeledRecord, Survival, SynthConfig};
use medfuse_core::diff::Tensor;
use medfuse_core::error::Error;
use medfuse_core::modality::{Modality, ModalityBundle};

#[test]
fn lab_sentences() {
    assert_eq!(
        data::textualize_labs(&[("Sodium", Some("140"))], "patient"),
        "Sodium of the patient is 140."
    );
    assert_eq!(data::textualize_labs(&[], "patient"), "");
    assert_eq!(
        data::textualize_labs(&[("Sodium", Some("140")), ("Potassium", None)], "patient"),
        "Sodium of the patient is 140."
    );
    assert_eq!(
        data::textualize_labs(&[("BNP", Some("90")), ("Troponin", Some("0.01"))], "subject"),
        "BNP of the subject is 90. Troponin of the subject is 0.01."
    );
}

#[test]
fn schema_names_round_trip() {
    for s in [LabelSchema::Diagnosis, LabelSchema::Prognosis, LabelSchema::Retrieval] {
        assert_eq!(s.name().parse::<LabelSchema>().unwrap(), s);
    }
    assert!(matches!("triage".parse::<LabelSchema>(), Err(Error::UnknownTask(_))));
}

fn record(class: Option<i32>, survival: Option<Survival>) -> LabeledRecord {
    LabeledRecord {
        id: "r".into(),
        bundle: ModalityBundle::new(Some(Tensor::zeros(1, 2)), None, None).unwrap(),
        class,
        survival,
    }
}

#[test]
fn record_labels_are_checked_per_schema() {
    let ok = Some(Survival { time: 3.0, event: true });
    assert!(record(Some(1), None).validate(LabelSchema::Diagnosis).is_ok());
    assert!(record(Some(2), None).validate(LabelSchema::Diagnosis).is_err());
    assert!(record(None, None).validate(LabelSchema::Diagnosis).is_err());
    assert!(record(None, ok).validate(LabelSchema::Prognosis).is_ok());
    let zero = Some(Survival { time: 0.0, event: true });
    assert!(matches!(
        record(None, zero).validate(LabelSchema::Prognosis),
        Err(Error::SchemaMismatch { task: "prognosis", .. })
    ));
    assert!(record(None, None).validate(LabelSchema::Retrieval).is_ok());
    let both = record(Some(1), ok);
    assert_eq!(both.clone().strip_to(LabelSchema::Diagnosis).survival, None);
    assert_eq!(both.clone().strip_to(LabelSchema::Prognosis).class, None);
    let r = both.strip_to(LabelSchema::Retrieval);
    assert_eq!((r.class, r.survival), (None, None));
}

#[test]
fn synth_is_deterministic_per_seed() {
    let cfg = SynthConfig { n: 40, ..SynthConfig::default() };
    let a = data::synth_generate(&cfg).unwrap();
    assert_eq!(a, data::synth_generate(&cfg).unwrap());
    let b = data::synth_generate(&SynthConfig { seed: 1, ..cfg.clone() }).unwrap();
    assert_ne!(a, b);
    assert_eq!(a.len(), 40);
    assert_eq!(a[7].id, "synth-00007");
    for r in &a {
        assert_eq!(r.bundle.dims(), [cfg.token_len, cfg.feature_dim]);
        for m in Modality::ALL {
            assert!(r.bundle.get(m).is_some());
        }
        assert!(r.validate(LabelSchema::Diagnosis).is_ok());
        assert!(r.validate(LabelSchema::Prognosis).is_ok());
    }
}

#[test]
fn synth_config_is_validated() {
    let base = SynthConfig::default();
    for bad in [
        SynthConfig { n: 0, ..base.clone() },
        SynthConfig { latent_dim: 17, ..base.clone() },
        SynthConfig { noise_sigma: 0.0, ..base.clone() },
        SynthConfig { censoring: 1.0, ..base.clone() },
        SynthConfig { attenuation: -0.5, ..base.clone() },
    ] {
        assert!(data::synth_generate(&bad).is_err());
    }
}

fn flatten(r: &LabeledRecord) -> Vec<f64> {
    Modality::ALL.iter().flat_map(|&m| r.bundle.get(m).unwrap().data().to_vec()).collect()
}

fn stacked(mats: &[Tensor]) -> Vec<Vec<f64>> {
    mats.iter().flat_map(|a| (0..a.rows()).map(move |i| a.row_slice(i).to_vec())).collect()
}

/// Solve `m x = b` by Gauss-Jordan elimination with partial pivoting.
fn solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().partial_cmp(&m[j][c].abs()).unwrap()).unwrap();
        m.swap(c, p);
        b.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = m[r][c] / m[c][c];
                for k in c..n {
                    m[r][k] -= f * m[c][k];
                }
                b[r] -= f * b[c];
            }
        }
    }
    (0..n).map(|i| b[i] / m[i][i]).collect()
}

fn gram(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = a[0].len();
    (0..k).map(|i| (0..k).map(|j| a.iter().map(|r| r[i] * r[j]).sum()).collect()).collect()
}

#[test]
fn near_noiseless_trimodal_readout_recovers_labels() {
    let cfg = SynthConfig {
        n: 2000,
        noise_sigma: 0.01,
        seed: 3,
        ..SynthConfig::default()
    };
    let recs = data::synth_generate(&cfg).unwrap();
    let a = stacked(&data::mixing_matrices(&cfg));
    let g = gram(&a);
    let w = cfg.label_weights();
    let mut hits = 0;
    for r in &recs {
        let x = flatten(r);
        let atx: Vec<f64> = (0..cfg.latent_dim).map(|j| a.iter().zip(&x).map(|(row, xi)| row[j] * xi).sum()).collect();
        let u = solve(g.clone(), atx);
        let score: f64 = w.iter().zip(&u).map(|(a, b)| a * b).sum();
        hits += ((score > 0.0) as i32 == r.class.unwrap()) as usize;
    }
    let acc = hits as f64 / recs.len() as f64;
    assert!(acc >= 0.99, "readout accuracy {}", acc);
}

#[test]
fn each_modality_alone_sees_the_label_direction_with_more_noise() {
    // Variance of the least-squares estimate of w.u per unit noise variance:
    // w^T (A^T A)^-1 w.
    let cfg = SynthConfig::default();
    let mats = data::mixing_matrices(&cfg);
    let w = cfg.label_weights();
    let var = |a: &[Vec<f64>]| -> f64 {
        let z = solve(gram(a), w.clone());
        w.iter().zip(&z).map(|(x, y)| x * y).sum()
    };
    let all = var(&stacked(&mats));
    for m in &mats {
        let single = var(&stacked(std::slice::from_ref(m)));
        assert!(single > 1.5 * all, "single {} vs combined {}", single, all);
    }
}

#[test]
fn labels_are_balanced_and_censoring_follows_rate() {
    let cfg = SynthConfig {
        n: 2000,
        seed: 42,
        ..SynthConfig::default()
    };
    let recs = data::synth_generate(&cfg).unwrap();
    let pos = recs.iter().filter(|r| r.class == Some(1)).count() as f64 / 2000.0;
    assert!((pos - 0.5).abs() <= 0.05, "positive rate {}", pos);
    let censored = recs.iter().filter(|r| !r.survival.unwrap().event).count() as f64 / 2000.0;
    assert!((censored - cfg.censoring).abs() <= 0.04, "censored {}", censored);
    let times: BTreeSet<u64> = recs.iter().map(|r| r.survival.unwrap().time.to_bits()).collect();
    assert_eq!(times.len(), 2000);
}

#[test]
fn positive_class_fails_sooner() {
    let recs = data::synth_generate(&SynthConfig { n: 1000, ..SynthConfig::default() }).unwrap();
    let median = |c: i32| {
        let mut t: Vec<f64> = recs
            .iter()
            .filter(|r| r.class == Some(c) && r.survival.unwrap().event)
            .map(|r| r.survival.unwrap().time)
            .collect();
        t.sort_by(|a, b| a.partial_cmp(b).unwrap());
        t[t.len() / 2]
    };
    assert!(median(1) < median(0));
}

fn balanced(n: usize) -> Vec<i64> {
    (0..n).map(|i| (i % 2) as i64).collect()
}

#[test]
fn split_of_balanced_700_is_500_100_100() {
    let strata = balanced(700);
    let s = data::stratified_split(&strata, [5, 1, 1], 0).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (500, 100, 100));
    let all: BTreeSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    assert_eq!(all.len(), 700);
}

#[test]
fn split_keeps_class_proportions() {
    let strata: Vec<i64> = (0..293).map(|i| (i % 7 < 2) as i64).collect();
    let s = data::stratified_split(&strata, [5, 1, 1], 9).unwrap();
    let global = strata.iter().filter(|&&c| c == 1).count() as f64 / strata.len() as f64;
    for part in [&s.train, &s.val, &s.test] {
        let pos = part.iter().filter(|&&i| strata[i] == 1).count() as f64;
        assert!((pos - global * part.len() as f64).abs() <= 1.0);
    }
}

#[test]
fn split_is_seeded() {
    let strata = balanced(70);
    let a = data::stratified_split(&strata, [5, 1, 1], 1).unwrap();
    assert_eq!(a, data::stratified_split(&strata, [5, 1, 1], 1).unwrap());
    assert_ne!(a, data::stratified_split(&strata, [5, 1, 1], 2).unwrap());
}

#[test]
fn split_rejects_small_classes() {
    let mut strata = balanced(40);
    strata.extend([2; 6]);
    assert!(matches!(
        data::stratified_split(&strata, [5, 1, 1], 0),
        Err(Error::ClassTooSmall { class: 2, count: 6, needed: 7 })
    ));
}

#[test]
fn two_fold_on_ten_records() {
    let strata = balanced(10);
    let folds = data::repeated_kfold(&strata, 2, 1, 0.0, 0).unwrap();
    assert_eq!(folds.len(), 2);
    for f in &folds {
        assert_eq!(f.test.len(), 5);
        assert!(f.test.iter().any(|&i| strata[i] == 0));
        assert!(f.test.iter().any(|&i| strata[i] == 1));
    }
}

#[test]
fn repeated_folds_partition_each_round() {
    let strata: Vec<i64> = (0..103).map(|i| (i % 3 == 0) as i64).collect();
    let folds = data::repeated_kfold(&strata, 2, 5, 0.2, 4).unwrap();
    assert_eq!(folds.len(), 10);
    for repeat in 0..5 {
        let round: Vec<_> = folds.iter().filter(|f| f.repeat == repeat).collect();
        let tests: Vec<usize> = round.iter().flat_map(|f| f.test.clone()).collect();
        let unique: BTreeSet<usize> = tests.iter().copied().collect();
        assert_eq!((tests.len(), unique.len()), (103, 103));
        for f in round {
            let mut all: Vec<usize> = f.train.iter().chain(&f.val).chain(&f.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..103).collect::<Vec<_>>());
            let held = f.val.len() as f64 / (f.val.len() + f.train.len()) as f64;
            assert!((held - 0.2).abs() < 0.02);
        }
    }
    assert_ne!(folds[0].test, folds[2].test);
    assert_eq!(folds, data::repeated_kfold(&strata, 2, 5, 0.2, 4).unwrap());
}

#[test]
fn kfold_rejects_small_classes() {
    let strata = vec![0, 0, 0, 1];
    assert!(matches!(
        data::repeated_kfold(&strata, 2, 1, 0.2, 0),
        Err(Error::ClassTooSmall { class: 1, count: 1, needed: 2 })
    ));
}
