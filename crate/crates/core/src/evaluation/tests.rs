use super::*;
use crate::features::{split_gcd, synth_generate, ImageParts, SynthSpec};

fn toy_gt() -> GroundTruthParts {
    // Three classes, two slots. Classes 0 and 1 share slot 0 and differ on
    // slot 1; class 2 shares nothing with either.
    let images = (0..6)
        .map(|i| ImageParts {
            image_id: i,
            class: i as usize % 3,
            patch_parts: vec![Some(0), Some(0), Some(1), None, Some(1)],
            dropped: Vec::new(),
        })
        .collect();
    GroundTruthParts {
        parts_per_class: 2,
        images,
        prototypes: vec![vec![1.0, 0.0]; 5],
        class_prototypes: vec![vec![0, 1], vec![0, 2], vec![3, 4]],
        discriminative_slots: vec![1],
    }
}

#[test]
fn oracle_assignment_is_perfect() {
    let gt = toy_gt();
    let winners: Vec<Vec<usize>> = gt
        .images
        .iter()
        .map(|img| img.patch_parts.iter().map(|s| s.unwrap_or(2)).collect())
        .collect();
    let a: Vec<(u32, &[usize])> = gt
        .images
        .iter()
        .zip(&winners)
        .map(|(i, w)| (i.image_id, w.as_slice()))
        .collect();
    let q = part_quality(&a, &gt, 3);
    assert_eq!(q.purity, 1.0);
    assert_eq!((q.ari, q.ari_global), (1.0, 1.0));
    assert!(q.iou.iter().all(|&x| x == 1.0));
    assert_eq!(q.query_to_slot[0][..2], [Some(0), Some(1)]);
}

#[test]
fn per_class_relabeling_keeps_purity_but_not_global_ari() {
    let gt = toy_gt();
    let winners: Vec<Vec<usize>> = gt
        .images
        .iter()
        .map(|img| {
            img.patch_parts
                .iter()
                .map(|s| match (img.class, s) {
                    (1, Some(k)) => 1 - k,
                    (_, Some(k)) => *k,
                    (_, None) => 0,
                })
                .collect()
        })
        .collect();
    let a: Vec<(u32, &[usize])> = gt
        .images
        .iter()
        .zip(&winners)
        .map(|(i, w)| (i.image_id, w.as_slice()))
        .collect();
    let q = part_quality(&a, &gt, 2);
    assert_eq!(q.purity, 1.0);
    assert_eq!(q.ari, 1.0);
    assert!(q.ari_global < 1.0);
    assert_eq!(q.query_to_slot[1], vec![Some(1), Some(0)]);
}

#[test]
fn single_part_purity_is_majority_share() {
    let gt = toy_gt();
    let zeros = vec![0usize; 5];
    let a: Vec<(u32, &[usize])> = gt
        .images
        .iter()
        .map(|i| (i.image_id, zeros.as_slice()))
        .collect();
    let q = part_quality(&a, &gt, 2);
    // Each image has two patches per slot, so one query covers half.
    assert_eq!(q.purity, 0.5);
    assert_eq!(q.ari, 0.0);
}

#[test]
fn histogram_bins() {
    let mut h = Histogram::new(4);
    assert_eq!(
        h.bins.iter().map(|b| b.0).collect::<Vec<_>>(),
        vec![-1.0, -0.5, 0.0, 0.5]
    );
    for x in [-1.0, -0.75, 0.0, 0.49, 1.0, 1.5] {
        h.add(x);
    }
    assert_eq!(
        h.bins.iter().map(|b| b.1).collect::<Vec<_>>(),
        vec![2, 0, 2, 2]
    );
    assert_eq!(h.count(), 6);
}

fn eval_record(id: u32, label: usize, rows: &[Vec<f64>]) -> RecordEval {
    RecordEval {
        image_id: id,
        view_id: 0,
        label: Some(label),
        pooled: Vec::new(),
        prediction: 0,
        parts: Some(PartSnapshot {
            winners: Vec::new(),
            empty: vec![false; rows.len()],
            features: Tensor::from_rows(rows),
        }),
    }
}

#[test]
fn similarity_report_on_hand_built_pairs() {
    let gt = toy_gt();
    let map = vec![vec![Some(0), Some(1)]; 3];
    // Shared part identical, differing part orthogonal: a hit.
    let hit = [
        eval_record(0, 0, &[vec![1.0, 0.0], vec![1.0, 0.0]]),
        eval_record(1, 1, &[vec![1.0, 0.0], vec![0.0, 1.0]]),
    ];
    let r = similarity_report(&hit, &gt, &map, 4);
    assert_eq!(r.class_pairs, vec![(0, 1)]);
    assert_eq!(r.image_pairs, 1);
    assert_eq!(r.hit_rate, 1.0);
    assert!(r.mean_argmin_similarity.abs() < 1e-12);
    assert!((r.mean_shared_similarity - 1.0).abs() < 1e-12);
    assert_eq!(r.argmin_histogram.count(), 1);
    assert_eq!(r.other_histogram.count(), 1);

    // Swapped roles: the least similar part sits on the shared slot.
    let miss = [
        eval_record(0, 0, &[vec![1.0, 0.0], vec![1.0, 0.0]]),
        eval_record(1, 1, &[vec![-1.0, 0.0], vec![1.0, 0.0]]),
    ];
    let r = similarity_report(&miss, &gt, &map, 4);
    assert_eq!(r.hit_rate, 0.0);
    assert!((r.mean_argmin_similarity + 1.0).abs() < 1e-12);
}

#[test]
fn empty_parts_are_not_compared() {
    let gt = toy_gt();
    let map = vec![vec![Some(0), Some(1)]; 3];
    let mut a = eval_record(0, 0, &[vec![1.0, 0.0], vec![0.0, 0.0]]);
    a.parts.as_mut().unwrap().empty = vec![false, true];
    let b = eval_record(1, 1, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let r = similarity_report(&[a, b], &gt, &map, 4);
    assert_eq!(r.image_pairs, 1);
    assert_eq!(r.hit_rate, 0.0);
    assert!((r.mean_argmin_similarity - 1.0).abs() < 1e-12);
}

#[test]
fn untrained_model_report_is_well_formed() {
    let spec = SynthSpec {
        images_per_class: 6,
        ..SynthSpec::default()
    };
    let (ds, gt) = synth_generate(&spec).unwrap();
    let split = split_gcd(&ds, 0.5).unwrap();
    let cfg = TrainConfig::default();
    let state = ModelState::init(&cfg, spec.dim, ds.class_count);
    let report = evaluate(
        &state,
        &cfg,
        &split.unlabeled,
        &split.known_classes,
        &ds.records,
        Some(&gt),
    )
    .unwrap();
    assert_eq!(report.unlabeled_count, split.unlabeled.len());
    for x in [
        report.acc_all,
        report.acc_known,
        report.acc_novel,
        report.part_purity.unwrap(),
    ] {
        assert!((0.0..=1.0).contains(&x));
    }
    let again = evaluate(
        &state,
        &cfg,
        &split.unlabeled,
        &split.known_classes,
        &ds.records,
        Some(&gt),
    )
    .unwrap();
    assert_eq!(report, again);
    let text = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<EvalReport>(&text).unwrap(), report);

    let cls_cfg = cfg.with_ablation(crate::training::Ablation::NoParts);
    let r = evaluate(
        &state,
        &cls_cfg,
        &split.unlabeled,
        &split.known_classes,
        &ds.records,
        Some(&gt),
    )
    .unwrap();
    assert!(r.part_purity.is_none() && r.similarity.is_none());
}
