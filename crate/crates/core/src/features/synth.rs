use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{augment::background_patch, f32_exact, Dataset, Dims, FeatureError, FeatureRecord};
use crate::tensor::Tensor;

/// Parameters of the planted-part generator.
///
/// Every class is a mixture of `parts_per_class` part prototypes. Slot `k`
/// of `shared_part_map` lists, per class, a group id: classes with the same
/// group id in a slot share that slot's prototype. A slot whose group ids
/// are all distinct is discriminative. Attention head `m` concentrates on
/// the patches of slot `m mod K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub num_known_classes: usize,
    pub parts_per_class: usize,
    pub patch_count: usize,
    pub dim: usize,
    pub heads: usize,
    pub patches_per_part: usize,
    pub background_patches: usize,
    pub images_per_class: usize,
    /// Per-coordinate standard deviation of part-patch noise.
    pub noise_sigma: f64,
    /// Probability that an image loses one droppable part.
    pub part_drop_prob: f64,
    /// Expected norm of a background patch.
    pub background_scale: f64,
    /// Fraction of each head's attention placed on its planted part.
    pub attention_focus: f64,
    /// `K` slots × `num_classes` group ids. Empty means the default layout:
    /// slot 0 shared by every class, the last slot unique per class, and any
    /// middle slot shared by classes `c` and `c + ceil(num_classes / 2)`.
    pub shared_part_map: Vec<Vec<usize>>,
    /// Slots eligible for dropping. Empty means every non-discriminative slot.
    pub droppable_parts: Vec<usize>,
    pub rng_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            num_known_classes: 2,
            parts_per_class: 3,
            patch_count: 32,
            dim: 32,
            heads: 4,
            patches_per_part: 8,
            background_patches: 8,
            images_per_class: 40,
            noise_sigma: 0.1,
            part_drop_prob: 0.2,
            background_scale: 1.0,
            attention_focus: 0.8,
            shared_part_map: Vec::new(),
            droppable_parts: Vec::new(),
            rng_seed: 0,
        }
    }
}

impl SynthSpec {
    /// `shared_part_map`, with the default layout filled in when empty.
    pub fn part_map(&self) -> Vec<Vec<usize>> {
        if !self.shared_part_map.is_empty() {
            return self.shared_part_map.clone();
        }
        let k = self.parts_per_class;
        let nc = self.num_classes;
        let half = nc.div_ceil(2).max(1);
        (0..k)
            .map(|slot| {
                (0..nc)
                    .map(|c| {
                        if slot + 1 == k {
                            c
                        } else if slot == 0 {
                            0
                        } else {
                            c % half
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Slots whose prototype differs between every pair of classes.
    pub fn discriminative_slots(&self) -> Vec<usize> {
        self.part_map()
            .iter()
            .enumerate()
            .filter(|(_, groups)| {
                let mut g = (*groups).clone();
                g.sort_unstable();
                g.dedup();
                g.len() == groups.len()
            })
            .map(|(k, _)| k)
            .collect()
    }

    pub fn droppable(&self) -> Vec<usize> {
        if !self.droppable_parts.is_empty() {
            return self.droppable_parts.clone();
        }
        let disc = self.discriminative_slots();
        (0..self.parts_per_class)
            .filter(|k| !disc.contains(k))
            .collect()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: String| Err(FeatureError::InvalidSpec(m));
        if self.parts_per_class == 0 || self.dim == 0 || self.heads == 0 {
            return bad("parts_per_class, dim and heads must be positive".into());
        }
        if self.parts_per_class > self.heads {
            return bad(format!(
                "K <= M violated: parts_per_class {} exceeds heads {}",
                self.parts_per_class, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.part_drop_prob) {
            return bad(format!(
                "part_drop_prob {} outside [0, 1)",
                self.part_drop_prob
            ));
        }
        if self.num_known_classes >= self.num_classes {
            return bad(format!(
                "num_known_classes {} must be below num_classes {}",
                self.num_known_classes, self.num_classes
            ));
        }
        if self.patches_per_part == 0 {
            return bad("patches_per_part must be positive".into());
        }
        if self.parts_per_class * self.patches_per_part + self.background_patches
            != self.patch_count
        {
            return bad(format!(
                "patch_count {} != parts_per_class * patches_per_part + background_patches ({})",
                self.patch_count,
                self.parts_per_class * self.patches_per_part + self.background_patches
            ));
        }
        if self.images_per_class == 0 {
            return bad("images_per_class must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.background_scale >= 0.0) {
            return bad("noise_sigma and background_scale must be non-negative".into());
        }
        if !(self.attention_focus > 0.0 && self.attention_focus <= 1.0) {
            return bad(format!(
                "attention_focus {} outside (0, 1]",
                self.attention_focus
            ));
        }
        let map = self.part_map();
        if map.len() != self.parts_per_class || map.iter().any(|s| s.len() != self.num_classes) {
            return bad(format!(
                "shared_part_map must be {} slots of {} group ids",
                self.parts_per_class, self.num_classes
            ));
        }
        let disc = self.discriminative_slots();
        if disc.is_empty() {
            return bad(
                "no discriminative slot: at least one prototype must be unique per class".into(),
            );
        }
        for &d in &self.droppable() {
            if d >= self.parts_per_class {
                return bad(format!("droppable slot {d} out of range"));
            }
            if disc.contains(&d) {
                return bad(format!("droppable slot {d} is discriminative"));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims {
            patches: self.patch_count,
            channels: self.dim,
            heads: self.heads,
        }
    }
}

/// Planted layout of one generated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageParts {
    pub image_id: u32,
    pub class: usize,
    /// Planted slot per patch; `None` marks background.
    pub patch_parts: Vec<Option<usize>>,
    pub dropped: Vec<usize>,
}

/// Everything the generator planted, for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthParts {
    pub parts_per_class: usize,
    pub images: Vec<ImageParts>,
    /// Unit prototype vectors.
    pub prototypes: Vec<Vec<f64>>,
    /// `class_prototypes[c][k]` indexes `prototypes`.
    pub class_prototypes: Vec<Vec<usize>>,
    pub discriminative_slots: Vec<usize>,
}

impl GroundTruthParts {
    pub fn image(&self, image_id: u32) -> Option<&ImageParts> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    /// Slots whose prototypes differ between classes `a` and `b`.
    pub fn differing_slots(&self, a: usize, b: usize) -> Vec<usize> {
        (0..self.parts_per_class)
            .filter(|&k| self.class_prototypes[a][k] != self.class_prototypes[b][k])
            .collect()
    }

    pub fn shared_slot_count(&self, a: usize, b: usize) -> usize {
        self.parts_per_class - self.differing_slots(a, b).len()
    }
}

fn random_unit_vectors(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v: Vec<f64> = (0..dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        // Orthogonalize against earlier prototypes while there is room.
        if out.len() < dim {
            for u in &out {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let n = crate::tensor::norm(&v);
        v.iter_mut().for_each(|x| *x /= n);
        out.push(v);
    }
    out
}

/// Generates a planted-part dataset and its ground truth.
///
/// All values are rounded to `f32` precision so the dataset survives a
/// save/load round trip bit for bit.
pub fn synth_generate(spec: &SynthSpec) -> Result<(Dataset, GroundTruthParts), FeatureError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let (k, n, c, m) = (spec.parts_per_class, spec.patch_count, spec.dim, spec.heads);
    let map = spec.part_map();

    // One prototype per (slot, group).
    let mut class_prototypes = vec![vec![0usize; k]; spec.num_classes];
    let mut count = 0;
    for (slot, groups) in map.iter().enumerate() {
        let mut ids: Vec<(usize, usize)> = Vec::new();
        for (cls, &grp) in groups.iter().enumerate() {
            let id = match ids.iter().find(|(g, _)| *g == grp) {
                Some(&(_, id)) => id,
                None => {
                    ids.push((grp, count));
                    count += 1;
                    count - 1
                }
            };
            class_prototypes[cls][slot] = id;
        }
    }
    let prototypes = random_unit_vectors(count, c, &mut rng);
    let droppable = spec.droppable();

    let mut records = Vec::with_capacity(spec.num_classes * spec.images_per_class);
    let mut images = Vec::with_capacity(records.capacity());
    let mut image_id = 0u32;
    for cls in 0..spec.num_classes {
        for _ in 0..spec.images_per_class {
            let mut dropped = Vec::new();
            if !droppable.is_empty() && rng.random::<f64>() < spec.part_drop_prob {
                dropped.push(droppable[rng.random_range(0..droppable.len())]);
            }
            let mut layout: Vec<Option<usize>> = Vec::with_capacity(n);
            for slot in 0..k {
                let lbl = if dropped.contains(&slot) {
                    None
                } else {
                    Some(slot)
                };
                layout.extend(std::iter::repeat_n(lbl, spec.patches_per_part));
            }
            layout.extend(std::iter::repeat_n(None, spec.background_patches));
            layout.shuffle(&mut rng);

            let mut patches = Tensor::zeros(n, c);
            for (p, lbl) in layout.iter().enumerate() {
                let row = patches.row_mut(p);
                match lbl {
                    Some(slot) => {
                        let proto = &prototypes[class_prototypes[cls][*slot]];
                        for (x, &b) in row.iter_mut().zip(proto) {
                            let eps: f64 = if spec.noise_sigma > 0.0 {
                                spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                            } else {
                                0.0
                            };
                            *x = f32_exact(b + eps);
                        }
                    }
                    None => {
                        let bg = background_patch(c, spec.background_scale, &mut rng);
                        row.iter_mut().zip(bg).for_each(|(x, b)| *x = f32_exact(b));
                    }
                }
            }

            let mut attention = Tensor::zeros(m, n);
            for head in 0..m {
                let target = head % k;
                let on: Vec<usize> = (0..n).filter(|&p| layout[p] == Some(target)).collect();
                let weights: Vec<f64> = (0..n)
                    .map(|_| {
                        if spec.noise_sigma > 0.0 {
                            (spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)).exp()
                        } else {
                            1.0
                        }
                    })
                    .collect();
                let row = attention.row_mut(head);
                if on.is_empty() {
                    let z: f64 = weights.iter().sum();
                    row.iter_mut().zip(&weights).for_each(|(a, w)| *a = w / z);
                } else {
                    let z_on: f64 = on.iter().map(|&p| weights[p]).sum();
                    let z_off: f64 = (0..n).filter(|p| !on.contains(p)).map(|p| weights[p]).sum();
                    for p in 0..n {
                        row[p] = if on.contains(&p) {
                            spec.attention_focus * weights[p] / z_on
                        } else if z_off > 0.0 {
                            (1.0 - spec.attention_focus) * weights[p] / z_off
                        } else {
                            0.0
                        };
                    }
                }
                row.iter_mut().for_each(|a| *a = f32_exact(*a));
            }

            let mut cls_feature = Tensor::zeros(1, c);
            for p in 0..n {
                for (j, v) in patches.row(p).iter().enumerate() {
                    cls_feature.data_mut()[j] += v / n as f64;
                }
            }
            cls_feature
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = f32_exact(*v));

            records.push(FeatureRecord {
                image_id,
                view_id: 0,
                patch_features: patches,
                cls_feature,
                head_attention: attention,
                label: Some(cls),
                is_labeled: false,
            });
            images.push(ImageParts {
                image_id,
                class: cls,
                patch_parts: layout,
                dropped,
            });
            image_id += 1;
        }
    }

    let dataset = Dataset {
        dims: spec.dims(),
        class_count: spec.num_classes,
        known_class_count: spec.num_known_classes,
        records,
    };
    let gt = GroundTruthParts {
        parts_per_class: k,
        images,
        prototypes: prototypes
            .into_iter()
            .map(|p| p.into_iter().map(f32_exact).collect())
            .collect(),
        class_prototypes,
        discriminative_slots: spec.discriminative_slots(),
    };
    Ok((dataset, gt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_noise() -> SynthSpec {
        SynthSpec {
            noise_sigma: 0.0,
            part_drop_prob: 0.0,
            images_per_class: 5,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn default_layout_has_shared_and_unique_slots() {
        let s = SynthSpec::default();
        assert_eq!(
            s.part_map(),
            vec![vec![0, 0, 0, 0], vec![0, 1, 0, 1], vec![0, 1, 2, 3]]
        );
        assert_eq!(s.discriminative_slots(), vec![2]);
        assert_eq!(s.droppable(), vec![0, 1]);
    }

    #[test]
    fn zero_noise_patches_equal_prototypes() {
        let (ds, gt) = synth_generate(&zero_noise()).unwrap();
        ds.validate().unwrap();
        for (rec, img) in ds.records.iter().zip(&gt.images) {
            let mut per_slot = vec![0; 3];
            for (p, lbl) in img.patch_parts.iter().enumerate() {
                if let Some(k) = lbl {
                    per_slot[*k] += 1;
                    let proto = &gt.prototypes[gt.class_prototypes[img.class][*k]];
                    assert_eq!(rec.patch_features.row(p), proto.as_slice());
                }
            }
            assert_eq!(per_slot, vec![8, 8, 8]);
        }
    }

    #[test]
    fn forced_drop_empties_the_droppable_part() {
        let spec = SynthSpec {
            part_drop_prob: 0.999_999,
            droppable_parts: vec![1],
            images_per_class: 6,
            ..SynthSpec::default()
        };
        let (_, gt) = synth_generate(&spec).unwrap();
        for img in &gt.images {
            assert_eq!(img.dropped, vec![1]);
            assert!(img.patch_parts.iter().all(|p| *p != Some(1)));
        }
    }

    #[test]
    fn shared_prototype_in_every_class_pair() {
        let (_, gt) = synth_generate(&SynthSpec::default()).unwrap();
        for a in 0..4 {
            for b in a + 1..4 {
                let sa: Vec<_> = gt.class_prototypes[a].clone();
                let inter: Vec<_> = gt.class_prototypes[b]
                    .iter()
                    .filter(|p| sa.contains(p))
                    .collect();
                assert!(inter.contains(&&gt.class_prototypes[0][0]));
            }
        }
    }

    #[test]
    fn head_threshold_at_mean_selects_planted_part() {
        let (ds, gt) = synth_generate(&zero_noise()).unwrap();
        for (rec, img) in ds.records.iter().zip(&gt.images) {
            for m in 0..4 {
                let row = rec.head_attention.row(m);
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                for (p, &a) in row.iter().enumerate() {
                    assert_eq!(a > mean, img.patch_parts[p] == Some(m % 3));
                }
            }
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let s = SynthSpec::default();
        assert_eq!(synth_generate(&s).unwrap(), synth_generate(&s).unwrap());
        let other = SynthSpec {
            rng_seed: 9,
            ..s.clone()
        };
        assert_ne!(
            synth_generate(&s).unwrap().0,
            synth_generate(&other).unwrap().0
        );
    }

    #[test]
    fn rejects_more_parts_than_heads() {
        let s = SynthSpec {
            heads: 2,
            ..SynthSpec::default()
        };
        let err = synth_generate(&s).unwrap_err().to_string();
        assert!(err.contains("K <= M"), "{err}");
    }

    #[test]
    fn rejects_drop_prob_of_one() {
        let s = SynthSpec {
            part_drop_prob: 1.0,
            ..SynthSpec::default()
        };
        assert!(s.validate().is_err());
    }
}
