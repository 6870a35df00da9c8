use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use super::FeatureRecord;

/// A background patch: isotropic Gaussian with expected norm `scale`.
pub fn background_patch<R: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    let sd = scale / (dim as f64).sqrt();
    (0..dim)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Feature-space augmentation: a random `drop_frac` share of patches is
/// replaced by background, the rest receive Gaussian jitter, and attention
/// rows are renormalized over the surviving patches.
///
/// The CLS feature moves by the change in the patch mean, so it stays the
/// patch mean for synthetic records.
pub fn augment<R: Rng + ?Sized>(
    record: &FeatureRecord,
    drop_frac: f64,
    jitter_sigma: f64,
    rng: &mut R,
) -> FeatureRecord {
    assert!(
        (0.0..1.0).contains(&drop_frac),
        "drop_frac {drop_frac} outside [0, 1)"
    );
    let n = record.patch_features.rows();
    let c = record.patch_features.cols();
    let n_drop = (drop_frac * n as f64).floor() as usize;
    let mut dropped = vec![false; n];
    for i in sample(rng, n, n_drop) {
        dropped[i] = true;
    }

    let mut patches = record.patch_features.clone();
    for (p, &gone) in dropped.iter().enumerate() {
        if gone {
            let bg = background_patch(c, 1.0, rng);
            patches.row_mut(p).copy_from_slice(&bg);
        } else if jitter_sigma > 0.0 {
            for x in patches.row_mut(p) {
                *x += jitter_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    let mut attention = record.head_attention.clone();
    for m in 0..attention.rows() {
        let row = attention.row_mut(m);
        for (a, &gone) in row.iter_mut().zip(&dropped) {
            if gone {
                *a = 0.0;
            }
        }
        let z: f64 = row.iter().sum();
        if z > 0.0 {
            row.iter_mut().for_each(|a| *a /= z);
        } else {
            let alive = dropped.iter().filter(|d| !**d).count().max(1) as f64;
            for (a, &gone) in row.iter_mut().zip(&dropped) {
                *a = if gone { 0.0 } else { 1.0 / alive };
            }
        }
    }

    let mut cls = record.cls_feature.clone();
    if n_drop > 0 || jitter_sigma > 0.0 {
        for j in 0..c {
            let before: f64 =
                (0..n).map(|p| record.patch_features.get(p, j)).sum::<f64>() / n as f64;
            let after: f64 = (0..n).map(|p| patches.get(p, j)).sum::<f64>() / n as f64;
            cls.data_mut()[j] += after - before;
        }
    }

    FeatureRecord {
        image_id: record.image_id,
        view_id: record.view_id + 1,
        patch_features: patches,
        cls_feature: cls,
        head_attention: attention,
        label: record.label,
        is_labeled: record.is_labeled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{synth_generate, SynthSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(n: usize) -> FeatureRecord {
        let spec = SynthSpec {
            patch_count: n,
            patches_per_part: n / 4,
            background_patches: n - 3 * (n / 4),
            images_per_class: 1,
            ..SynthSpec::default()
        };
        synth_generate(&spec).unwrap().0.records.remove(0)
    }

    #[test]
    fn identity_augmentation() {
        let r = record(16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = augment(&r, 0.0, 0.0, &mut rng);
        assert_eq!(a.patch_features, r.patch_features);
        assert_eq!(a.cls_feature, r.cls_feature);
        assert_eq!(a.image_id, r.image_id);
        assert_eq!(a.view_id, r.view_id + 1);
    }

    #[test]
    fn quarter_drop_replaces_four_of_sixteen() {
        let r = record(16);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = augment(&r, 0.25, 0.0, &mut rng);
        let changed = (0..16)
            .filter(|&p| a.patch_features.row(p) != r.patch_features.row(p))
            .count();
        assert_eq!(changed, 4);
        let zeroed = (0..16)
            .filter(|&p| a.head_attention.get(0, p) == 0.0)
            .count();
        assert_eq!(zeroed, 4);
    }

    #[test]
    fn attention_rows_renormalized() {
        let r = record(32);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = augment(&r, 0.5, 0.05, &mut rng);
        for m in 0..a.head_attention.rows() {
            let s: f64 = a.head_attention.row(m).iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {m} sums to {s}");
        }
        a.check(a.dims(), 4).unwrap();
    }
}
