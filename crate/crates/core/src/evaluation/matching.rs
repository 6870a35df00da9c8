use serde::{Deserialize, Serialize};

/// Square count matrix, rows are predicted clusters, columns true classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    /// Pads the shorter side with zeros so the result is square.
    pub fn from_rectangular(counts: &[Vec<u64>]) -> Self {
        let rows = counts.len();
        let cols = counts.iter().map(Vec::len).max().unwrap_or(0);
        let k = rows.max(cols);
        let mut m = Self::zeros(k);
        for (i, row) in counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                m.counts[i][j] = c;
            }
        }
        m
    }

    pub fn from_labels(preds: &[usize], truths: &[usize]) -> Self {
        let k = preds
            .iter()
            .chain(truths)
            .map(|&x| x + 1)
            .max()
            .unwrap_or(0);
        let mut m = Self::zeros(k);
        for (&p, &t) in preds.iter().zip(truths) {
            m.counts[p][t] += 1;
        }
        m
    }

    pub fn size(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, pred: usize, truth: usize) -> u64 {
        self.counts[pred][truth]
    }

    pub fn add(&mut self, pred: usize, truth: usize, n: u64) {
        self.counts[pred][truth] += n;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }
}

/// Optimal one-to-one map from predicted clusters to true classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    /// `perm[pred] = truth`.
    pub perm: Vec<usize>,
    pub matched: u64,
}

/// Maximum-weight assignment by the O(k³) shortest augmenting path method
/// on `-count·(k+1) + [i != j]`. The perturbation is below one count unit,
/// so among optimal matchings the one with the most fixed points wins.
pub fn hungarian_match(cm: &ConfusionMatrix) -> Matching {
    let k = cm.size();
    if k == 0 {
        return Matching {
            perm: Vec::new(),
            matched: 0,
        };
    }
    let scale = k as i64 + 1;
    let cost: Vec<Vec<i64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| -(cm.get(i, j) as i64) * scale + i64::from(i != j))
                .collect()
        })
        .collect();
    let perm = min_cost_assignment(&cost);
    let matched = perm.iter().enumerate().map(|(i, &j)| cm.get(i, j)).sum();
    Matching { perm, matched }
}

/// Row-to-column assignment minimizing total cost (square input).
pub fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut ans = vec![0; n];
    for j in 1..=n {
        ans[p[j] - 1] = j - 1;
    }
    ans
}

/// Clustering accuracy over the unlabeled set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub all: f64,
    pub known: f64,
    pub novel: f64,
    pub n_known: usize,
    pub n_novel: usize,
    pub hits_known: usize,
    pub hits_novel: usize,
    pub perm: Vec<usize>,
}

/// One global matching over all predictions, reused for the known and
/// novel subsets. An empty subset scores 0.
pub fn clustering_acc(
    preds: &[usize],
    truths: &[usize],
    known: &[usize],
) -> Result<Accuracy, String> {
    if preds.len() != truths.len() {
        return Err(format!(
            "{} predictions for {} labels",
            preds.len(),
            truths.len()
        ));
    }
    let cm = ConfusionMatrix::from_labels(preds, truths);
    let m = hungarian_match(&cm);
    let (mut n_known, mut n_novel, mut hits_known, mut hits_novel) = (0, 0, 0, 0);
    for (&p, &t) in preds.iter().zip(truths) {
        let hit = usize::from(m.perm[p] == t);
        if known.contains(&t) {
            n_known += 1;
            hits_known += hit;
        } else {
            n_novel += 1;
            hits_novel += hit;
        }
    }
    let frac = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(Accuracy {
        all: frac(hits_known + hits_novel, preds.len()),
        known: frac(hits_known, n_known),
        novel: frac(hits_novel, n_novel),
        n_known,
        n_novel,
        hits_known,
        hits_novel,
        perm: m.perm,
    })
}

fn choose2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index of two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let cm = ConfusionMatrix::from_labels(a, b);
    let k = cm.size();
    let index: f64 = cm.rows().iter().flatten().map(|&c| choose2(c)).sum();
    let sa: f64 = (0..k).map(|i| choose2(cm.rows()[i].iter().sum())).sum();
    let sb: f64 = (0..k)
        .map(|j| choose2((0..k).map(|i| cm.get(i, j)).sum()))
        .sum();
    let total = choose2(a.len() as u64);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use itertools::Itertools;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn brute_force(cm: &ConfusionMatrix) -> u64 {
        let k = cm.size();
        (0..k)
            .permutations(k)
            .map(|p| p.iter().enumerate().map(|(i, &j)| cm.get(i, j)).sum())
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn diagonal_gives_identity() {
        let cm = ConfusionMatrix::from_rectangular(&[vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 7]]);
        let m = hungarian_match(&cm);
        assert_eq!(m.perm, vec![0, 1, 2]);
        assert_eq!(m.matched, 15);
    }

    #[test]
    fn anti_diagonal_forces_swap() {
        let m = hungarian_match(&ConfusionMatrix::from_rectangular(&[
            vec![0, 5],
            vec![5, 0],
        ]));
        assert_eq!(m.perm, vec![1, 0]);
        assert_eq!(m.matched, 10);
    }

    #[test]
    fn ties_prefer_identity() {
        let m = hungarian_match(&ConfusionMatrix::from_rectangular(&[
            vec![2, 2],
            vec![2, 2],
        ]));
        assert_eq!(m.perm, vec![0, 1]);
    }

    #[test]
    fn matches_factorial_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in 2..=6 {
            for _ in 0..30 {
                let rows: Vec<Vec<u64>> = (0..k)
                    .map(|_| (0..k).map(|_| rng.random_range(0..20)).collect())
                    .collect();
                let cm = ConfusionMatrix::from_rectangular(&rows);
                assert_eq!(hungarian_match(&cm).matched, brute_force(&cm));
            }
        }
    }

    #[test]
    fn rectangular_is_padded() {
        let cm = ConfusionMatrix::from_rectangular(&[vec![1, 9, 0]]);
        assert_eq!(cm.size(), 3);
        assert_eq!(hungarian_match(&cm).matched, 9);
    }

    #[test]
    fn accuracy_absorbs_permutation() {
        let truths = [0, 0, 1, 1, 2, 2, 3];
        let preds = [2, 2, 0, 0, 3, 3, 1];
        let a = clustering_acc(&preds, &truths, &[0, 1]).unwrap();
        assert_eq!(a.all, 1.0);
        assert_eq!((a.known, a.novel), (1.0, 1.0));
    }

    #[test]
    fn single_cluster_scores_one_class() {
        let truths: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let a = clustering_acc(&vec![0; 40], &truths, &[0, 1]).unwrap();
        assert_eq!(a.all, 0.25);
    }

    #[test]
    fn random_predictions_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truths: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..4)).collect();
        let preds: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..4)).collect();
        let a = clustering_acc(&preds, &truths, &[0, 1]).unwrap();
        assert!((a.all - 0.25).abs() < 0.05, "{}", a.all);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(clustering_acc(&[0, 1], &[0], &[0]).is_err());
    }

    #[test]
    fn ari_extremes() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[0, 0, 0]), 1.0);
        let v = adjusted_rand_index(&[0, 1, 0, 1], &[0, 0, 1, 1]);
        assert!(v < 0.0);
    }

    #[test]
    fn ari_matches_reference_value() {
        // Two labelings with a known ARI of 0.24242424...
        let a = [0, 0, 0, 1, 1, 1];
        let b = [0, 0, 1, 1, 2, 2];
        assert!((adjusted_rand_index(&a, &b) - 0.242_424_242_424_242_4).abs() < 1e-12);
    }
}
