//! Confusion statistics and the class-affinity structure built from them:
//! top-K confusion neighbors, the neighbor indicator, affinity similarity,
//! motion families and the family-size-driven temperature.

use serde::{Deserialize, Serialize};

use crate::error::{AclError, Result};

/// Counts of training samples of class `i` predicted as class `j != i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionStats {
    class_count: usize,
    counts: Vec<u64>,
    total_samples: u64,
}

impl ConfusionStats {
    pub fn new(class_count: usize) -> Self {
        Self {
            class_count,
            counts: vec![0; class_count * class_count],
            total_samples: 0,
        }
    }

    /// Builds stats from a dense row-major matrix. The diagonal is ignored.
    pub fn from_matrix(class_count: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != class_count * class_count {
            return Err(AclError::shape(format!(
                "confusion matrix has {} entries, expected {}",
                counts.len(),
                class_count * class_count
            )));
        }
        let mut counts = counts;
        for i in 0..class_count {
            counts[i * class_count + i] = 0;
        }
        let total_samples = counts.iter().sum();
        Ok(Self {
            class_count,
            counts,
            total_samples,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn total_samples(&self) -> u64 {
        self.total_samples
    }

    pub fn get(&self, true_class: usize, pred_class: usize) -> u64 {
        self.counts[true_class * self.class_count + pred_class]
    }

    pub fn row(&self, class: usize) -> &[u64] {
        &self.counts[class * self.class_count..(class + 1) * self.class_count]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn record(&mut self, true_labels: &[usize], pred_labels: &[usize]) -> Result<()> {
        if true_labels.len() != pred_labels.len() {
            return Err(AclError::shape(format!(
                "{} true labels but {} predictions",
                true_labels.len(),
                pred_labels.len()
            )));
        }
        let c = self.class_count;
        if let Some(&label) = true_labels.iter().chain(pred_labels).find(|&&l| l >= c) {
            return Err(AclError::LabelOutOfRange { label, classes: c });
        }
        for (&t, &p) in true_labels.iter().zip(pred_labels) {
            if t != p {
                self.counts[t * c + p] += 1;
                self.total_samples += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionStats) -> Result<()> {
        if other.class_count != self.class_count {
            return Err(AclError::shape(
                "cannot merge confusion stats of different class counts",
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total_samples += other.total_samples;
        Ok(())
    }

    pub fn clear(&mut self) {
        self.counts.fill(0);
        self.total_samples = 0;
    }
}

/// Consuming form of [`ConfusionStats::record`].
pub fn record_confusion(
    mut stats: ConfusionStats,
    true_labels: &[usize],
    pred_labels: &[usize],
) -> Result<ConfusionStats> {
    stats.record(true_labels, pred_labels)?;
    Ok(stats)
}

/// Up to `k` classes `j != i` with the largest positive counts in row `i`,
/// larger counts first, ties broken by the smaller class index.
pub fn top_k_neighbors(stats: &ConfusionStats, i: usize, k: usize) -> Vec<usize> {
    let row = stats.row(i);
    let mut candidates: Vec<usize> = (0..row.len()).filter(|&j| j != i && row[j] > 0).collect();
    candidates.sort_by(|&a, &b| row[b].cmp(&row[a]).then(a.cmp(&b)));
    candidates.truncate(k);
    candidates
}

/// Affinity similarity held as exact ratios `numer / denom`.
///
/// `w_ij = I(i,j)/2 + M(i,j)/|N(i)| = (I(i,j)·|N(i)| + 2·M(i,j)) / (2·|N(i)|)`,
/// and `w_ij = 0` when `N(i)` is empty (stored as `0 / 0`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    class_count: usize,
    numer: Vec<u64>,
    denom: Vec<u64>,
}

impl AffinityMatrix {
    /// Builds from explicit ratios. `denom == 0` means zero affinity.
    pub fn from_ratios(class_count: usize, numer: Vec<u64>, denom: Vec<u64>) -> Result<Self> {
        let n = class_count * class_count;
        if numer.len() != n || denom.len() != n {
            return Err(AclError::shape("affinity ratio arrays must be c×c"));
        }
        Ok(Self {
            class_count,
            numer,
            denom,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn ratio(&self, i: usize, j: usize) -> (u64, u64) {
        let k = i * self.class_count + j;
        (self.numer[k], self.denom[k])
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        match self.ratio(i, j) {
            (_, 0) => 0.0,
            (n, d) => n as f64 / d as f64,
        }
    }

    /// Dense row-major `f64` view.
    pub fn to_dense(&self) -> Vec<f64> {
        let c = self.class_count;
        (0..c * c).map(|k| self.value(k / c, k % c)).collect()
    }

    /// Exact test of `w_ij > n_a / k`.
    pub fn exceeds(&self, i: usize, j: usize, n_a: usize, k: usize) -> bool {
        match self.ratio(i, j) {
            (_, 0) => false,
            (n, d) => n as u128 * k as u128 > n_a as u128 * d as u128,
        }
    }
}

/// Motion families: `members[i] = W(i)`, ascending class order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionFamilies {
    pub members: Vec<Vec<usize>>,
}

impl MotionFamilies {
    pub fn empty(class_count: usize) -> Self {
        Self {
            members: vec![Vec::new(); class_count],
        }
    }

    /// `N_w = |W(i)|`, not counting the anchor class.
    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    pub fn of(&self, class: usize) -> &[usize] {
        &self.members[class]
    }

    pub fn non_empty_count(&self) -> usize {
        self.members.iter().filter(|m| !m.is_empty()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.non_empty_count() == 0
    }
}

/// `W(i) = { j != i : w_ij > n_a / k }`.
pub fn build_motion_families(w: &AffinityMatrix, n_a: usize, k: usize) -> MotionFamilies {
    let c = w.class_count();
    MotionFamilies {
        members: (0..c)
            .map(|i| (0..c).filter(|&j| j != i && w.exceeds(i, j, n_a, k)).collect())
            .collect(),
    }
}

/// Piecewise temperature by family size: 0.1 up to `k`, 0.5 up to `2k`, 1.0 beyond.
pub fn family_temperature(family_size: usize, k: usize) -> f64 {
    if family_size <= k {
        0.1
    } else if family_size <= 2 * k {
        0.5
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityModel {
    k: usize,
    n_a: usize,
    neighbor_sets: Vec<Vec<usize>>,
    indicator: Vec<bool>,
    w: AffinityMatrix,
    families: MotionFamilies,
}

impl AffinityModel {
    /// No evidence yet: empty neighbor sets and families.
    pub fn empty(class_count: usize, k: usize, n_a: usize) -> Result<Self> {
        Self::build(&ConfusionStats::new(class_count), k, n_a)
    }

    pub fn build(stats: &ConfusionStats, k: usize, n_a: usize) -> Result<Self> {
        let neighbor_sets = (0..stats.class_count()).map(|i| top_k_neighbors(stats, i, k)).collect();
        Self::from_neighbor_sets(neighbor_sets, k, n_a)
    }

    pub fn from_neighbor_sets(neighbor_sets: Vec<Vec<usize>>, k: usize, n_a: usize) -> Result<Self> {
        if k == 0 {
            return Err(AclError::invalid("K must be positive"));
        }
        if n_a == 0 || n_a > k {
            return Err(AclError::invalid(format!(
                "overlap threshold n_a = {n_a} must lie in 1..={k}"
            )));
        }
        let c = neighbor_sets.len();
        let mut indicator = vec![false; c * c];
        for (i, set) in neighbor_sets.iter().enumerate() {
            if set.len() > k {
                return Err(AclError::invalid(format!(
                    "class {i} has {} neighbors, K = {k}",
                    set.len()
                )));
            }
            for &j in set {
                if j >= c || j == i {
                    return Err(AclError::invalid(format!("invalid neighbor {j} for class {i}")));
                }
                indicator[i * c + j] = true;
            }
        }
        let mut numer = vec![0; c * c];
        let mut denom = vec![0; c * c];
        for i in 0..c {
            let size = neighbor_sets[i].len() as u64;
            if size == 0 {
                continue;
            }
            for j in 0..c {
                if j == i {
                    continue;
                }
                let shared = (0..c).filter(|&p| indicator[i * c + p] && indicator[j * c + p]).count() as u64;
                numer[i * c + j] = u64::from(indicator[i * c + j]) * size + 2 * shared;
                denom[i * c + j] = 2 * size;
            }
        }
        let w = AffinityMatrix {
            class_count: c,
            numer,
            denom,
        };
        let families = build_motion_families(&w, n_a, k);
        Ok(Self {
            k,
            n_a,
            neighbor_sets,
            indicator,
            w,
            families,
        })
    }

    pub fn class_count(&self) -> usize {
        self.neighbor_sets.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_a(&self) -> usize {
        self.n_a
    }

    pub fn neighbor_sets(&self) -> &[Vec<usize>] {
        &self.neighbor_sets
    }

    pub fn indicator(&self, i: usize, j: usize) -> bool {
        self.indicator[i * self.class_count() + j]
    }

    /// `M(i, j)`: neighbors shared by `i` and `j`.
    pub fn shared_neighbors(&self, i: usize, j: usize) -> usize {
        let c = self.class_count();
        (0..c).filter(|&p| self.indicator(i, p) && self.indicator(j, p)).count()
    }

    pub fn affinity(&self) -> &AffinityMatrix {
        &self.w
    }

    pub fn families(&self) -> &MotionFamilies {
        &self.families
    }

    pub fn family_temperature(&self, class: usize) -> f64 {
        family_temperature(self.families.of(class).len(), self.k)
    }
}

pub fn affinity_similarity(model: &AffinityModel, i: usize, j: usize) -> Result<f64> {
    if i == j {
        return Err(AclError::SelfAffinity);
    }
    let c = model.class_count();
    if i >= c || j >= c {
        return Err(AclError::LabelOutOfRange {
            label: i.max(j),
            classes: c,
        });
    }
    Ok(model.affinity().value(i, j))
}

/// Pairwise F1 between learned family pairs `{i, j : j ∈ W(i) or i ∈ W(j)}`
/// and the same-group pairs of a reference partition.
pub fn family_recovery_f1(families: &MotionFamilies, planted: &[Vec<usize>]) -> f64 {
    let c = families.members.len();
    let mut group = vec![usize::MAX; c];
    for (g, members) in planted.iter().enumerate() {
        for &m in members {
            if m < c {
                group[m] = g;
            }
        }
    }
    let mut learned = vec![false; c * c];
    for (i, members) in families.members.iter().enumerate() {
        for &j in members {
            let (a, b) = (i.min(j), i.max(j));
            learned[a * c + b] = true;
        }
    }
    let (mut tp, mut learned_n, mut planted_n) = (0usize, 0usize, 0usize);
    for a in 0..c {
        for b in a + 1..c {
            let same = group[a] != usize::MAX && group[a] == group[b];
            let hit = learned[a * c + b];
            planted_n += usize::from(same);
            learned_n += usize::from(hit);
            tp += usize::from(same && hit);
        }
    }
    match (learned_n, planted_n) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * tp as f64 / (learned_n + planted_n) as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_with_row(c: usize, i: usize, row: &[u64]) -> ConfusionStats {
        let mut m = vec![0; c * c];
        m[i * c..(i + 1) * c].copy_from_slice(row);
        ConfusionStats::from_matrix(c, m).unwrap()
    }

    #[test]
    fn record_examples() {
        let mut s = ConfusionStats::new(4);
        s.record(&[2], &[2]).unwrap();
        assert_eq!(s, ConfusionStats::new(4));
        s = record_confusion(s, &[1, 1], &[3, 3]).unwrap();
        assert_eq!(s.get(1, 3), 2);
        assert_eq!(s.total_samples(), 2);
        assert!(matches!(
            s.record(&[4], &[0]),
            Err(AclError::LabelOutOfRange { label: 4, classes: 4 })
        ));
        assert!(s.record(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn merge_equals_concatenated_recording() {
        let t1 = [0, 1, 2, 2, 3];
        let p1 = [1, 1, 0, 3, 0];
        let t2 = [3, 3, 0];
        let p2 = [0, 2, 1];
        let mut a = ConfusionStats::new(4);
        a.record(&t1, &p1).unwrap();
        let mut b = ConfusionStats::new(4);
        b.record(&t2, &p2).unwrap();
        a.merge(&b).unwrap();
        let mut all = ConfusionStats::new(4);
        all.record(&[&t1[..], &t2[..]].concat(), &[&p1[..], &p2[..]].concat())
            .unwrap();
        assert_eq!(a, all);
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(
            top_k_neighbors(&stats_with_row(5, 0, &[0, 5, 3, 0, 7]), 0, 2),
            vec![4, 1]
        );
        assert!(top_k_neighbors(&ConfusionStats::new(5), 0, 3).is_empty());
        assert_eq!(
            top_k_neighbors(&stats_with_row(5, 0, &[0, 2, 2, 2, 0]), 0, 2),
            vec![1, 2]
        );
        // diagonal never listed
        assert_eq!(top_k_neighbors(&stats_with_row(3, 1, &[0, 9, 1]), 1, 5), vec![2]);
    }

    #[test]
    fn affinity_examples() {
        let sets = vec![vec![1, 2, 3], vec![0, 2, 3], vec![], vec![]];
        let m = AffinityModel::from_neighbor_sets(sets, 3, 1).unwrap();
        // 1/2 + |{2,3}|/3
        assert_eq!(m.affinity().ratio(0, 1), (7, 6));
        assert!((affinity_similarity(&m, 0, 1).unwrap() - 7.0 / 6.0).abs() < 1e-15);
        assert!(matches!(affinity_similarity(&m, 2, 2), Err(AclError::SelfAffinity)));
        // empty neighbor set
        assert_eq!(affinity_similarity(&m, 2, 0).unwrap(), 0.0);

        let disjoint = AffinityModel::from_neighbor_sets(vec![vec![2], vec![3], vec![], vec![]], 2, 1).unwrap();
        assert_eq!(affinity_similarity(&disjoint, 0, 1).unwrap(), 0.0);

        let mutual = AffinityModel::from_neighbor_sets(vec![vec![1, 2], vec![0, 2], vec![], vec![]], 2, 1).unwrap();
        // 1/2 + |{2}|/2
        assert_eq!(affinity_similarity(&mutual, 0, 1).unwrap(), 1.0);
        let full = AffinityModel::from_neighbor_sets(vec![vec![1, 2], vec![0, 1, 2], vec![1], vec![]], 3, 1);
        assert!(full.is_err(), "self neighbor rejected");
    }

    #[test]
    fn affinity_upper_bound() {
        // j ∈ N(i) and N(i) ⊆ N(j) ∪ {j} gives the largest reachable value,
        // 1/2 + (|N(i)| - 1)/|N(i)|; j can never be its own neighbor, so 1.5
        // is a strict bound.
        let sets = vec![vec![1, 2, 3, 4], vec![0, 2, 3, 4], vec![], vec![], vec![]];
        let m = AffinityModel::from_neighbor_sets(sets, 4, 1).unwrap();
        assert_eq!(m.affinity().ratio(0, 1), (4 + 2 * 3, 8));
        assert!(m.affinity().value(0, 1) < 1.5);
    }

    #[test]
    fn families_threshold() {
        // 0.5 = 1/2 > 4/10
        let w =
            AffinityMatrix::from_ratios(3, vec![0, 1, 3, 0, 0, 0, 0, 0, 0], vec![0, 2, 10, 0, 0, 0, 0, 0, 0]).unwrap();
        let f = build_motion_families(&w, 4, 10);
        assert_eq!(f.of(0), &[1]);
        assert!(!f.of(0).contains(&2), "0.3 is below the threshold");
        let zero = AffinityMatrix::from_ratios(3, vec![0; 9], vec![0; 9]).unwrap();
        assert!(build_motion_families(&zero, 4, 10).is_empty());
        // boundary is strict: 0.4 is not > 0.4
        let at = AffinityMatrix::from_ratios(2, vec![0, 2, 0, 0], vec![0, 5, 0, 0]).unwrap();
        assert!(build_motion_families(&at, 4, 10).of(0).is_empty());
    }

    #[test]
    fn temperature_schedule() {
        assert_eq!(family_temperature(8, 10), 0.1);
        assert_eq!(family_temperature(12, 10), 0.5);
        assert_eq!(family_temperature(25, 10), 1.0);
        assert_eq!(family_temperature(10, 10), 0.1);
        assert_eq!(family_temperature(20, 10), 0.5);
        assert_eq!(family_temperature(21, 10), 1.0);
    }

    #[test]
    fn neighbor_implies_family_at_defaults() {
        let mut m = vec![0; 16];
        m[1] = 3;
        m[2] = 1;
        m[4] = 2;
        let s = ConfusionStats::from_matrix(4, m).unwrap();
        let model = AffinityModel::build(&s, 10, 4).unwrap();
        for i in 0..4 {
            for &j in &model.neighbor_sets()[i] {
                assert!(model.affinity().value(i, j) >= 0.5);
                assert!(model.families().of(i).contains(&j));
            }
        }
    }

    #[test]
    fn model_rejects_bad_parameters() {
        assert!(AffinityModel::empty(3, 0, 1).is_err());
        assert!(AffinityModel::empty(3, 2, 3).is_err());
        assert!(AffinityModel::empty(3, 2, 0).is_err());
    }

    #[test]
    fn recovery_f1() {
        let planted = vec![vec![0, 1], vec![2, 3]];
        let perfect = MotionFamilies {
            members: vec![vec![1], vec![0], vec![3], vec![]],
        };
        assert_eq!(family_recovery_f1(&perfect, &planted), 1.0);
        assert_eq!(family_recovery_f1(&MotionFamilies::empty(4), &planted), 0.0);
        let noisy = MotionFamilies {
            members: vec![vec![1, 2], vec![], vec![], vec![]],
        };
        // learned {01, 02}, planted {01, 23}: tp = 1
        assert_eq!(family_recovery_f1(&noisy, &planted), 0.5);
    }
}
