use std::collections::BTreeSet;

use proptest::prelude::*;

use pargraph::cluster::{cluster_groups, AffinityMode, ClusterConfig, Partition};
use pargraph::data::{load_dataset, save_dataset, synth_generate, FeatureStorage, SynthConfig};
use pargraph::metrics::{group_detection_scores, match_groups, multilabel_prf};
use pargraph::nn::{row_softmax, Tensor2};

fn matrix(max_n: usize) -> impl Strategy<Value = Tensor2> {
    (1..=max_n, 1..=max_n).prop_flat_map(|(r, c)| {
        prop::collection::vec(
            prop_oneof![9 => -30.0..30.0f64, 1 => Just(f64::NEG_INFINITY)],
            r * c,
        )
        .prop_map(move |d| Tensor2::new(r, c, d).unwrap())
    })
}

fn assignment(max_n: usize) -> impl Strategy<Value = Vec<usize>> {
    (1..=max_n).prop_flat_map(|n| prop::collection::vec(0..n, n))
}

fn symmetric(max_n: usize) -> impl Strategy<Value = Tensor2> {
    (1..=max_n).prop_flat_map(|n| {
        prop::collection::vec(0.0..1.0f64, n * n).prop_map(move |d| {
            let mut m = Tensor2::zeros(n, n);
            for i in 0..n {
                m[(i, i)] = 1.0;
                for j in i + 1..n {
                    m[(i, j)] = d[i * n + j];
                    m[(j, i)] = d[i * n + j];
                }
            }
            m
        })
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_or_vanish(m in matrix(7)) {
        let s = row_softmax(&m).unwrap();
        for i in 0..m.rows() {
            let total: f64 = s.row(i).iter().sum();
            if m.row(i).iter().all(|v| *v == f64::NEG_INFINITY) {
                prop_assert_eq!(total, 0.0);
            } else {
                prop_assert!((total - 1.0).abs() <= 1e-9);
            }
            for (x, y) in m.row(i).iter().zip(s.row(i)) {
                prop_assert!(*y >= 0.0);
                if *x == f64::NEG_INFINITY {
                    prop_assert_eq!(*y, 0.0);
                }
            }
        }
    }

    #[test]
    fn clustering_returns_a_valid_partition(r in symmetric(10), t in 0.05..0.95f64, raw in any::<bool>()) {
        let cfg = ClusterConfig {
            affinity: if raw { AffinityMode::Raw } else { AffinityMode::Threshold(t) },
            ..ClusterConfig::default()
        };
        let p = cluster_groups(&r, &cfg).unwrap();
        let n = r.rows();
        let mut seen = BTreeSet::new();
        for g in p.groups() {
            prop_assert!(g.len() >= 2);
            for &i in g {
                prop_assert!(i < n && seen.insert(i));
            }
        }
        for &i in p.singletons() {
            prop_assert!(i < n && seen.insert(i));
        }
        prop_assert_eq!(seen.len(), n);
    }

    #[test]
    fn group_scores_are_invariant_to_relabeling(
        (a, b, perm) in (2usize..=8).prop_flat_map(|n| (
            prop::collection::vec(0..n, n),
            prop::collection::vec(0..n, n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        ))
    ) {
        let (pa, pb) = (Partition::from_labels(&a), Partition::from_labels(&b));
        let before = group_detection_scores(std::slice::from_ref(&pa), std::slice::from_ref(&pb)).unwrap();
        let after = group_detection_scores(&[pa.permuted(&perm)], &[pb.permuted(&perm)]).unwrap();
        prop_assert_eq!(before, after);

        // Group order does not matter either.
        let mut rev = pa.groups().to_vec();
        rev.reverse();
        let fwd = match_groups(pa.groups(), pb.groups(), 0.5).len();
        prop_assert_eq!(match_groups(&rev, pb.groups(), 0.5).len(), fwd);
    }

    #[test]
    fn label_scores_are_invariant_to_label_renaming(
        (pred, gt, shift) in (prop::collection::btree_set(0usize..6, 0..6), prop::collection::btree_set(0usize..6, 0..6), 0usize..6)
    ) {
        let rename = |s: &BTreeSet<usize>| s.iter().map(|l| (l + shift) % 6).collect::<BTreeSet<_>>();
        let x = multilabel_prf(&pred, &gt, 6).unwrap();
        let y = multilabel_prf(&rename(&pred), &rename(&gt), 6).unwrap();
        prop_assert_eq!(x, y);
        prop_assert!(x.f1 <= x.precision.max(x.recall) + 1e-15);
    }

    #[test]
    fn mat_iou_is_one_exactly_on_identical_pairs(a in assignment(8), b in assignment(8)) {
        let n = a.len().min(b.len());
        let (pa, pb) = (Partition::from_labels(&a[..n]), Partition::from_labels(&b[..n]));
        let s = group_detection_scores(std::slice::from_ref(&pa), std::slice::from_ref(&pb)).unwrap();
        prop_assert_eq!(s.mat_iou == 1.0, pa.to_relation() == pb.to_relation());
        prop_assert!(s.iou_auc <= s.iou_50 + 1e-15);
    }
}

#[test]
fn dataset_round_trips_inline_and_blob() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_frames: 7,
        n_subjects: 7,
        n_groups: 3,
        feature_dim: 5,
        ..SynthConfig::default()
    };
    let frames = synth_generate(&cfg, 21).unwrap();

    let inline = dir.path().join("inline.ndjson");
    save_dataset(&inline, &frames, &FeatureStorage::Inline).unwrap();
    assert_eq!(load_dataset(&inline).unwrap(), frames);

    let blob = dir.path().join("blob.ndjson");
    save_dataset(&blob, &frames, &FeatureStorage::Blob("feat.parf".into())).unwrap();
    let back = load_dataset(&blob).unwrap();
    assert_eq!(back.len(), frames.len());
    for (x, y) in back.iter().zip(&frames) {
        assert_eq!(x.groups, y.groups);
        assert_eq!(x.global_activities, y.global_activities);
        for (s, t) in x.subjects.iter().zip(&y.subjects) {
            assert_eq!((s.id, s.bbox, &s.actions), (t.id, t.bbox, &t.actions));
            for (u, v) in s.feature.iter().zip(&t.feature) {
                assert_eq!(*u, *v as f32 as f64);
            }
        }
    }
}
