//! Representation-quality metrics: Hungarian accuracy, k-nearest-neighbor
//! accuracy, linear probing and silhouette score. Also a seeded k-means used
//! as a reference clustering.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::model::{Adam, ClusterHead, Parameters};
use crate::rng::SeededRng;
use crate::Matrix;

/// Counts indexed `[predicted][true]`, over dense relabelings of both
/// alphabets (sorted order of the original ids).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub predicted_ids: Vec<usize>,
    pub true_ids: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Dimension(format!(
                "{} predictions for {} labels",
                pred.len(),
                truth.len()
            )));
        }
        if pred.is_empty() {
            return Err(Error::Dimension("no points to evaluate".into()));
        }
        let dense = |v: &[usize]| -> (BTreeMap<usize, usize>, Vec<usize>) {
            let ids: Vec<usize> = v
                .iter()
                .copied()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            (ids.iter().enumerate().map(|(i, &id)| (id, i)).collect(), ids)
        };
        let (pmap, predicted_ids) = dense(pred);
        let (tmap, true_ids) = dense(truth);
        let mut counts = vec![vec![0u64; true_ids.len()]; predicted_ids.len()];
        for (p, t) in pred.iter().zip(truth) {
            counts[pmap[p]][tmap[t]] += 1;
        }
        Ok(ConfusionMatrix {
            counts,
            predicted_ids,
            true_ids,
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Optimal matching of predicted clusters onto true classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    /// `mapping[p] = Some(t)`: dense predicted index `p` matched to dense true
    /// index `t`. Unmatched clusters (more clusters than classes) are `None`.
    pub mapping: Vec<Option<usize>>,
    pub matched: u64,
}

/// Minimum-cost perfect matching on a square cost matrix by shortest
/// augmenting paths with potentials, `O(n^3)`. Returns the column assigned to
/// each row.
pub fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    const INF: i64 = i64::MAX / 4;
    // 1-based potentials; column 0 is the virtual root of each search
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
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
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        col_of[row_of[j] - 1] = j - 1;
    }
    col_of
}

/// Maximum-weight matching on the confusion matrix. Rectangular matrices are
/// padded with zero rows or columns.
pub fn best_assignment(cm: &ConfusionMatrix) -> Assignment {
    let rows = cm.counts.len();
    let cols = cm.true_ids.len();
    let n = rows.max(cols);
    let cost: Vec<Vec<i64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i < rows && j < cols {
                        -(cm.counts[i][j] as i64)
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect();
    let col_of = min_cost_assignment(&cost);
    let mut matched = 0;
    let mapping = (0..rows)
        .map(|i| {
            let j = col_of[i];
            (j < cols).then(|| {
                matched += cm.counts[i][j];
                j
            })
        })
        .collect();
    Assignment { mapping, matched }
}

/// Index of the largest entry per row; the first one wins ties.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for c in 1..r.len() {
                if r[c] > r[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Fraction of points correctly labeled after optimally matching predicted
/// clusters to true classes.
pub fn hungarian_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let cm = ConfusionMatrix::new(pred, truth)?;
    let a = best_assignment(&cm);
    Ok(a.matched as f64 / cm.total() as f64)
}

#[inline]
fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Majority vote among the `k` nearest training points (Euclidean). Distance
/// ties go to the smaller training index, vote ties to the smaller class id.
pub fn knn_predict(
    train_z: &Matrix,
    train_y: &[usize],
    test_z: &Matrix,
    k: usize,
) -> Result<Vec<usize>> {
    if train_z.nrows() != train_y.len() {
        return Err(Error::Dimension(format!(
            "{} training rows but {} labels",
            train_z.nrows(),
            train_y.len()
        )));
    }
    if train_z.ncols() != test_z.ncols() {
        return Err(Error::Dimension(format!(
            "train features have {} columns, test features {}",
            train_z.ncols(),
            test_z.ncols()
        )));
    }
    if k == 0 || k > train_z.nrows() {
        return Err(Error::Precondition(format!(
            "k = {k} must lie in [1, {}]",
            train_z.nrows()
        )));
    }
    let classes = train_y.iter().max().map_or(0, |m| m + 1);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(train_z.nrows());
    let mut votes = vec![0usize; classes];
    Ok(test_z
        .axis_iter(Axis(0))
        .map(|t| {
            dist.clear();
            dist.extend(
                train_z
                    .axis_iter(Axis(0))
                    .enumerate()
                    .map(|(j, r)| (sq_dist(t, r), j)),
            );
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            votes.iter_mut().for_each(|v| *v = 0);
            for &(_, j) in &dist[..k] {
                votes[train_y[j]] += 1;
            }
            // first maximum wins, i.e. the smallest class id among ties
            let mut best = 0;
            for c in 1..classes {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

pub fn knn_accuracy(
    train_z: &Matrix,
    train_y: &[usize],
    test_z: &Matrix,
    test_y: &[usize],
    k: usize,
) -> Result<f64> {
    if test_z.nrows() != test_y.len() || test_y.is_empty() {
        return Err(Error::Dimension(format!(
            "{} test rows but {} labels",
            test_z.nrows(),
            test_y.len()
        )));
    }
    let pred = knn_predict(train_z, train_y, test_z, k)?;
    Ok(accuracy(&pred, test_y))
}

pub const PROBE_EPOCHS: usize = 200;
pub const PROBE_LR: f64 = 1e-2;

/// Top-1 test accuracy of a softmax linear classifier trained full-batch with
/// Adam on frozen features.
pub fn linear_probe(
    train_z: &Matrix,
    train_y: &[usize],
    test_z: &Matrix,
    test_y: &[usize],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    if train_z.nrows() != train_y.len() || test_z.nrows() != test_y.len() {
        return Err(Error::Dimension("feature rows and labels differ in length".into()));
    }
    if train_z.ncols() != test_z.ncols() {
        return Err(Error::Dimension("train and test feature widths differ".into()));
    }
    if test_y.is_empty() || train_y.is_empty() {
        return Err(Error::Dimension("empty probe split".into()));
    }
    let classes = train_y.iter().chain(test_y).max().map_or(0, |m| m + 1);
    if classes < 2 {
        return Err(Error::Precondition("linear probe needs at least 2 classes".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut head = ClusterHead::init(train_z.ncols(), classes, &mut rng);
    let mut adam = Adam::new(lr);
    let n = train_z.nrows() as f64;
    for epoch in 0..epochs {
        let phi = head.forward(train_z)?;
        let loss: f64 = train_y
            .iter()
            .enumerate()
            .map(|(i, &y)| -phi[[i, y]].max(1e-300).ln())
            .sum::<f64>()
            / n;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "linear probe loss is {loss} at epoch {epoch}"
            )));
        }
        let mut dlogits = phi;
        for (i, &y) in train_y.iter().enumerate() {
            dlogits[[i, y]] -= 1.0;
        }
        dlogits.mapv_inplace(|v| v / n);
        let grads = head.backward_logits(train_z, &dlogits)?.params;
        adam.step(head.tensors_mut(), &grads)?;
    }
    let logits = head.logits(test_z)?;
    let pred: Vec<usize> = logits
        .axis_iter(Axis(0))
        .map(|r| {
            let mut best = 0;
            for c in 1..r.len() {
                if r[c] > r[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    Ok(accuracy(&pred, test_y))
}

/// Mean silhouette with Euclidean distances. Points in singleton clusters
/// score 0, as do points whose intra and nearest-cluster mean distances are
/// both 0.
pub fn silhouette(z: &Matrix, labels: &[usize]) -> Result<f64> {
    let n = z.nrows();
    if n != labels.len() {
        return Err(Error::Dimension(format!("{n} rows but {} labels", labels.len())));
    }
    if n < 3 {
        return Err(Error::Precondition(format!("silhouette needs N >= 3, got {n}")));
    }
    let ids: Vec<usize> = labels
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if ids.len() < 2 {
        return Err(Error::Precondition("silhouette needs at least 2 clusters".into()));
    }
    let index: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let dense: Vec<usize> = labels.iter().map(|l| index[l]).collect();
    let mut sizes = vec![0usize; ids.len()];
    for &c in &dense {
        sizes[c] += 1;
    }
    let mut sums = vec![0.0; ids.len()];
    let mut total = 0.0;
    for i in 0..n {
        let own = dense[i];
        if sizes[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[dense[j]] += sq_dist(z.row(i), z.row(j)).sqrt();
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..ids.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Deterministic holdout: every fifth point (index `4 mod 5`) is held out.
/// Returns `(train, test)` indices.
pub fn holdout_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|i| i % 5 != 4)
}

pub fn select_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    m.select(Axis(0), idx)
}

pub fn select<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

/// k-NN accuracy under [`holdout_split`]: the held-out fifth is classified
/// against the rest.
pub fn holdout_knn_accuracy(z: &Matrix, labels: &[usize], k: usize) -> Result<f64> {
    if z.nrows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} rows but {} labels",
            z.nrows(),
            labels.len()
        )));
    }
    let (train, test) = holdout_split(z.nrows());
    knn_accuracy(
        &select_rows(z, &train),
        &select(labels, &train),
        &select_rows(z, &test),
        &select(labels, &test),
        k,
    )
}

/// Linear-probe accuracy under [`holdout_split`].
pub fn holdout_linear_probe(z: &Matrix, labels: &[usize], seed: u64) -> Result<f64> {
    if z.nrows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} rows but {} labels",
            z.nrows(),
            labels.len()
        )));
    }
    let (train, test) = holdout_split(z.nrows());
    linear_probe(
        &select_rows(z, &train),
        &select(labels, &train),
        &select_rows(z, &test),
        &select(labels, &test),
        PROBE_EPOCHS,
        PROBE_LR,
        seed,
    )
}

/// Lloyd's k-means with k-means++ seeding, best of `restarts` by inertia.
pub fn kmeans(x: &Matrix, k: usize, restarts: usize, seed: u64) -> Result<Vec<usize>> {
    let n = x.nrows();
    if k == 0 || k > n {
        return Err(Error::Precondition(format!("k = {k} must lie in [1, {n}]")));
    }
    let mut rng = SeededRng::new(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        // k-means++ seeding
        let mut centers = Array2::zeros((k, x.ncols()));
        centers.row_mut(0).assign(&x.row(rng.below(n)));
        let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centers.row(0))).collect();
        for c in 1..k {
            let total: f64 = d2.iter().sum();
            let mut pick = n - 1;
            if total > 0.0 {
                let mut target = rng.uniform() * total;
                for (i, &w) in d2.iter().enumerate() {
                    if target < w {
                        pick = i;
                        break;
                    }
                    target -= w;
                }
            } else {
                pick = rng.below(n);
            }
            centers.row_mut(c).assign(&x.row(pick));
            for i in 0..n {
                d2[i] = d2[i].min(sq_dist(x.row(i), centers.row(c)));
            }
        }
        let mut assign = vec![usize::MAX; n];
        let mut inertia = 0.0;
        for _ in 0..300 {
            let mut changed = false;
            inertia = 0.0;
            for i in 0..n {
                let (c, d) = (0..k)
                    .map(|c| (c, sq_dist(x.row(i), centers.row(c))))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("k >= 1");
                inertia += d;
                if assign[i] != c {
                    assign[i] = c;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let mut sums = Array2::<f64>::zeros((k, x.ncols()));
            let mut counts = vec![0usize; k];
            for i in 0..n {
                sums.row_mut(assign[i]).scaled_add(1.0, &x.row(i));
                counts[assign[i]] += 1;
            }
            for c in 0..k {
                if counts[c] > 0 {
                    centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
                }
            }
        }
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, assign));
        }
    }
    Ok(best.expect("at least one restart").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hungarian_identity_and_permutation() {
        let truth = [0, 0, 1, 1, 2, 2, 2];
        assert_eq!(hungarian_accuracy(&truth, &truth).unwrap(), 1.0);
        let renamed: Vec<usize> = truth.iter().map(|&t| [7, 3, 5][t]).collect();
        assert_eq!(hungarian_accuracy(&renamed, &truth).unwrap(), 1.0);
        assert!(matches!(hungarian_accuracy(&[], &[]), Err(Error::Dimension(_))));
        assert!(hungarian_accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn hungarian_rectangular() {
        // three predicted clusters, two true classes
        let pred = [0, 0, 1, 1, 2, 2];
        let truth = [0, 0, 0, 1, 1, 1];
        let acc = hungarian_accuracy(&pred, &truth).unwrap();
        assert!((acc - 4.0 / 6.0).abs() < 1e-15);
        // single predicted cluster
        let acc = hungarian_accuracy(&[0; 6], &truth).unwrap();
        assert!((acc - 0.5).abs() < 1e-15);
    }

    #[test]
    fn min_cost_small() {
        let cost = vec![vec![4, 1, 3], vec![2, 0, 5], vec![3, 2, 2]];
        let a = min_cost_assignment(&cost);
        let total: i64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        assert_eq!(total, 5);
    }

    #[test]
    fn knn_coincident_point_and_tie_rule() {
        let train = array![[0.0, 0.0], [5.0, 5.0], [9.0, 1.0]];
        let y = [2, 0, 1];
        let test = array![[5.0, 5.0]];
        assert_eq!(knn_predict(&train, &y, &test, 1).unwrap(), vec![0]);
        // k = all with one vote each: smallest class id wins
        assert_eq!(knn_predict(&train, &y, &test, 3).unwrap(), vec![0]);
        let y = [3, 1, 3, 1];
        let train = array![[0.0], [1.0], [2.0], [3.0]];
        assert_eq!(knn_predict(&train, &y, &array![[100.0]], 4).unwrap(), vec![1]);
        assert!(matches!(
            knn_accuracy(&train, &y, &array![[1.0, 2.0]], &[1], 1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn silhouette_handcrafted_line() {
        let z = array![[0.0], [1.0], [2.0], [10.0], [11.0], [12.0]];
        let s = silhouette(&z, &[0, 0, 0, 1, 1, 1]).unwrap();
        let expect = (2.0 * 9.5 / 11.0 + 2.0 * 0.9 + 2.0 * 7.5 / 9.0) / 6.0;
        assert!((s - expect).abs() < 1e-9);
    }

    #[test]
    fn silhouette_degenerate_cases() {
        let z = Array2::from_elem((4, 2), 3.0);
        assert_eq!(silhouette(&z, &[0, 1, 0, 1]).unwrap(), 0.0);
        assert!(matches!(
            silhouette(&z, &[1, 1, 1, 1]),
            Err(Error::Precondition(_))
        ));
        // singleton cluster scores 0 for its point
        let z = array![[0.0], [0.1], [10.0]];
        let s = silhouette(&z, &[0, 0, 1]).unwrap();
        let per = (10.0 - 0.1) / 10.0 + (9.9 - 0.1) / 9.9;
        assert!((s - per / 3.0).abs() < 1e-12);
    }

    #[test]
    fn probe_repeated_points() {
        let train = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [-1.0, -1.0]];
        let y = [0, 0, 1, 1, 2];
        let acc = linear_probe(&train, &y, &train, &y, 200, 0.05, 0).unwrap();
        assert_eq!(acc, 1.0);
        assert!(linear_probe(&train, &[0; 5], &train, &[0; 5], 10, 0.1, 0).is_err());
    }

    #[test]
    fn kmeans_recovers_separated_groups() {
        let x = array![[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0], [-10.0, 5.0], [-10.0, 5.1]];
        let a = kmeans(&x, 3, 3, 0).unwrap();
        assert_eq!(hungarian_accuracy(&a, &[0, 0, 1, 1, 2, 2]).unwrap(), 1.0);
    }

    #[test]
    fn holdout_is_a_partition() {
        let (tr, te) = holdout_split(12);
        assert_eq!(te, vec![4, 9]);
        assert_eq!(tr.len() + te.len(), 12);
    }
}
