use apl_core::evaluation::{clustering_acc, hungarian_match, part_quality, ConfusionMatrix};
use apl_core::features::{GroundTruthParts, ImageParts};
use apl_core::objectives::{
    all_min_loss, build_pair_plan, diversity_loss, gcd_losses, AnchorSets, BatchItem, Head,
    ObjectiveConfig, PairPlan, PartSet,
};
use apl_core::parts::straight_through;
use apl_core::tensor::gradcheck;
use apl_core::{Graph, Tensor, Var};
use itertools::Itertools;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0..2.0f64, rows * cols)
        .prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn shaped(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| matrix(r, c))
}

type Unary = for<'g> fn(Var<'g>) -> apl_core::tensor::Result<Var<'g>>;

const SMOOTH: [(&str, Unary); 7] = [
    ("exp", |x| x.scale(0.5)?.exp()),
    ("row_softmax", |x| x.row_softmax()),
    ("logsumexp_rows", |x| x.logsumexp_rows()),
    ("l2_normalize_rows", |x| {
        x.add_scalar(3.0)?.l2_normalize_rows()
    }),
    ("log", |x| x.mul(x)?.add_scalar(0.5)?.log()),
    ("div", |x| x.div(x.mul(x)?.add_scalar(1.0)?)),
    ("mean_axis", |x| x.mean_axis(0)?.mul(x.mean_axis(0)?)),
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn smooth_primitives_match_finite_differences(x in shaped(3, 4), op in 0..SMOOTH.len(), w in matrix(3, 4)) {
        let (name, f) = SMOOTH[op];
        let report = gradcheck(
            |g, v| {
                let y = f(v[0])?;
                let s = y.shape();
                let r = Tensor::matrix(s[0], s[1], w.data()[..s[0] * s[1]].to_vec())?;
                y.mul(g.constant(r))?.sum()
            },
            &[x],
            1e-5,
            1e-4,
        ).unwrap();
        prop_assert!(report.passed(), "{name}: {report:?}");
    }

    #[test]
    fn softmax_rows_are_distributions(x in shaped(5, 6)) {
        let g = Graph::new();
        let s = g.constant(x.map(|v| v * 10.0)).row_softmax().unwrap().value();
        for r in 0..s.rows() {
            prop_assert!(s.row(r).iter().all(|&v| v >= 0.0));
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn normalized_rows_have_unit_norm(x in shaped(5, 6)) {
        let g = Graph::new();
        let n = g.constant(x.clone()).l2_normalize_rows().unwrap().value();
        for r in 0..x.rows() {
            if x.row(r).iter().any(|&v| v != 0.0) {
                let norm = n.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_linear_in_sub_losses(x in matrix(3, 4)) {
        let grad = |which: u8| {
            let g = Graph::new();
            let v = g.param(x.clone());
            let a = || v.row_softmax().unwrap().mul(v).unwrap().sum().unwrap();
            let b = || v.l2_normalize_rows().unwrap().sum_axis(1).unwrap().exp().unwrap().sum().unwrap();
            let loss = match which {
                0 => a(),
                1 => b(),
                _ => a().add(b()).unwrap(),
            };
            g.backward(loss).unwrap().wrt(&v)
        };
        let (ga, gb, gs) = (grad(0), grad(1), grad(2));
        for i in 0..gs.numel() {
            prop_assert!((gs.data()[i] - ga.data()[i] - gb.data()[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn hard_assignment_is_one_hot_and_shift_invariant(logits in matrix(3, 7), noise in matrix(3, 7), shift in prop::collection::vec(-5.0..5.0f64, 7)) {
        let g = Graph::new();
        let st = straight_through(g.param(logits.clone()), Some(&noise), 1.0).unwrap();
        let hard = st.hard.value();
        for p in 0..7 {
            let col: Vec<f64> = (0..3).map(|q| hard.get(q, p)).collect();
            prop_assert_eq!(col.iter().filter(|&&v| v == 1.0).count(), 1);
            prop_assert_eq!(col.iter().filter(|&&v| v == 0.0).count(), 2);
        }
        let mut shifted = logits.clone();
        for q in 0..3 {
            for (p, s) in shift.iter().enumerate() {
                shifted.set(q, p, shifted.get(q, p) + s);
            }
        }
        let g2 = Graph::new();
        let st2 = straight_through(g2.param(shifted), Some(&noise), 1.0).unwrap();
        prop_assert_eq!(st.winners, st2.winners);
    }

    #[test]
    fn diversity_is_nonnegative_and_zero_iff_no_positive_cosine(x in matrix(4, 3), empty in prop::collection::vec(any::<bool>(), 4)) {
        let g = Graph::new();
        let mut x = x;
        for (t, &e) in empty.iter().enumerate() {
            if e {
                x.row_mut(t).fill(0.0);
            }
        }
        let d = diversity_loss(&PartSet { features: g.param(x.clone()), empty: empty.clone() }).unwrap().item();
        prop_assert!(d >= 0.0);
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            let n = |v: &[f64]| v.iter().map(|z| z * z).sum::<f64>().sqrt();
            dot / (n(a) * n(b))
        };
        let live: Vec<usize> = (0..4).filter(|&t| !empty[t]).collect();
        let any_positive = live.iter().tuple_combinations().any(|(&a, &b)| cos(x.row(a), x.row(b)) > 0.0);
        prop_assert_eq!(d == 0.0, !any_positive);
    }

    #[test]
    fn losses_are_invariant_to_batch_order(
        feats in prop::collection::vec(matrix(3, 4), 6),
        pooled in matrix(6, 4),
        proj in matrix(4, 3),
        cls in matrix(4, 3),
        perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(),
        seed in any::<u64>(),
    ) {
        // Images 0..3, two views each; image 0 and 1 labeled with classes 0, 1.
        let items: Vec<BatchItem> = (0..6)
            .map(|i| BatchItem { image_id: (i / 2) as u32, view_id: (i % 2) as u32, label: [Some(0), Some(1), None][i / 2] })
            .collect();
        let cfg = ObjectiveConfig::default();
        let eval = |order: &[usize], plan: Option<&PairPlan>| {
            let g = Graph::new();
            let parts: Vec<PartSet> = order
                .iter()
                .map(|&i| PartSet { features: g.param(feats[i].clone()), empty: vec![false; 3] })
                .collect();
            let its: Vec<BatchItem> = order.iter().map(|&i| items[i]).collect();
            let plan = match plan {
                Some(p) => p.clone(),
                None => build_pair_plan(&its, &parts, 2, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap(),
            };
            let am = all_min_loss(&plan, &parts, 0.1).unwrap().item();
            let rows: Vec<Vec<f64>> = order.iter().map(|&i| pooled.row(i).to_vec()).collect();
            let head = Head { projector: g.param(proj.clone()), classifier: g.param(cls.clone()) };
            let t = gcd_losses(g.param(Tensor::from_rows(&rows)), &its, &head, &cfg).unwrap();
            let gcd = [t.rep_supervised, t.rep_unsupervised, t.cls_supervised, t.cls_unsupervised].map(|v| v.item());
            (plan, am, gcd)
        };
        let identity: Vec<usize> = (0..6).collect();
        let (plan, am, gcd) = eval(&identity, None);
        // Same plan, re-indexed: position j now holds original record perm[j].
        let mut inv = [0; 6];
        for (j, &i) in perm.iter().enumerate() {
            inv[i] = j;
        }
        let remap = |v: &[usize]| v.iter().map(|&b| inv[b]).collect::<Vec<_>>();
        let anchors = perm
            .iter()
            .map(|&i| AnchorSets { positives: remap(&plan.anchors[i].positives), negatives: remap(&plan.anchors[i].negatives) })
            .collect();
        let permuted = PairPlan { anchors, neg_threshold: plan.neg_threshold };
        let (_, am2, gcd2) = eval(&perm, Some(&permuted));
        prop_assert!((am - am2).abs() <= 1e-12, "{am} vs {am2}");
        for (a, b) in gcd.iter().zip(&gcd2) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn acc_is_invariant_to_prediction_relabeling(
        pairs in prop::collection::vec((0..4usize, 0..4usize), 1..40),
        sigma in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let (preds, truths): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let relabeled: Vec<usize> = preds.iter().map(|&p| sigma[p]).collect();
        let a = clustering_acc(&preds, &truths, &[0, 1]).unwrap();
        let b = clustering_acc(&relabeled, &truths, &[0, 1]).unwrap();
        prop_assert_eq!(a.all, b.all);
        // With a unique optimal matching the subsets agree as well.
        let cm = ConfusionMatrix::from_labels(&preds, &truths);
        let best = hungarian_match(&cm).matched;
        let k = cm.size();
        let optima = (0..k).permutations(k).filter(|p| (0..k).map(|i| cm.get(i, p[i])).sum::<u64>() == best).count();
        if optima == 1 {
            prop_assert_eq!((a.known, a.novel), (b.known, b.novel));
        }
    }

    #[test]
    fn acc_all_decomposes_by_subset_size(pairs in prop::collection::vec((0..5usize, 0..5usize), 1..60)) {
        let (preds, truths): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let a = clustering_acc(&preds, &truths, &[0, 1]).unwrap();
        prop_assert_eq!(a.hits_known + a.hits_novel, (a.all * truths.len() as f64).round() as usize);
        let w = a.n_known as f64 / truths.len() as f64;
        prop_assert!((a.all - (w * a.known + (1.0 - w) * a.novel)).abs() <= 1e-12);
    }

    #[test]
    fn purity_is_invariant_to_part_index_permutation(
        winners in prop::collection::vec(prop::collection::vec(0..3usize, 6), 4),
        sigma in Just(vec![0usize, 1, 2]).prop_shuffle(),
    ) {
        let gt = GroundTruthParts {
            parts_per_class: 2,
            images: (0..4)
                .map(|i| ImageParts { image_id: i, class: i as usize % 2, patch_parts: vec![Some(0), Some(0), Some(1), Some(1), None, Some(1)], dropped: vec![] })
                .collect(),
            prototypes: vec![vec![1.0]; 3],
            class_prototypes: vec![vec![0, 1], vec![0, 2]],
            discriminative_slots: vec![1],
        };
        let relabeled: Vec<Vec<usize>> = winners.iter().map(|w| w.iter().map(|&q| sigma[q]).collect()).collect();
        let view = |w: &[Vec<usize>]| -> Vec<(u32, Vec<usize>)> { w.iter().enumerate().map(|(i, v)| (i as u32, v.clone())).collect() };
        let (a, b) = (view(&winners), view(&relabeled));
        let qa = part_quality(&a.iter().map(|(i, v)| (*i, v.as_slice())).collect::<Vec<_>>(), &gt, 3);
        let qb = part_quality(&b.iter().map(|(i, v)| (*i, v.as_slice())).collect::<Vec<_>>(), &gt, 3);
        prop_assert_eq!(qa.purity, qb.purity);
        prop_assert!((qa.ari - qb.ari).abs() <= 1e-12);
    }
}
