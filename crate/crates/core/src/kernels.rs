//! Neighborhood distributions: learned ones built from embeddings through a
//! softmax similarity kernel or cluster-probability overlap, and the fixed
//! supervisory ones (Gaussian perplexity calibration, shared labels, k nearest
//! neighbors).
//!
//! Every distribution is an `N x N` row-stochastic matrix with a zero
//! diagonal: a point is never its own neighbor.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::divergence::SIMPLEX_TOL;
use crate::error::{Error, Result};
use crate::Matrix;

/// How pairwise scores are formed before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// `C * (u_i . u_j)` on unit-normalized rows (cosine similarity).
    Angular,
    /// `-C * |z_i - z_j|^2`.
    Distance,
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::Angular => "angular",
            KernelFamily::Distance => "distance",
        })
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "angular" | "cosine" => Ok(KernelFamily::Angular),
            "distance" | "euclidean" => Ok(KernelFamily::Distance),
            _ => Err(Error::Config(format!(
                "unknown kernel {s:?}; expected angular or distance"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub scale: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Domain(format!("kernel scale must be > 0, got {scale}")));
        }
        Ok(KernelSpec { family, scale })
    }

    pub fn distance(scale: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Distance,
            scale,
        }
    }

    pub fn angular(scale: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Angular,
            scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Supervisory,
    Learned,
}

/// Row-stochastic transition matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodDistribution {
    matrix: Matrix,
    role: Role,
}

impl NeighborhoodDistribution {
    /// Wraps `matrix` after checking the invariants.
    pub fn new(matrix: Matrix, role: Role) -> Result<Self> {
        let d = NeighborhoodDistribution { matrix, role };
        d.check_invariants()?;
        Ok(d)
    }

    /// Wraps a matrix whose invariants hold by construction.
    pub(crate) fn from_parts(matrix: Matrix, role: Role) -> Self {
        debug_assert!(matrix.is_square());
        NeighborhoodDistribution { matrix, role }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.matrix.row(i)
    }

    /// Square shape, zero diagonal, entries in `[0, 1]`, rows summing to 1.
    pub fn check_invariants(&self) -> Result<()> {
        let m = &self.matrix;
        if !m.is_square() || m.nrows() < 2 {
            return Err(Error::Dimension(format!(
                "neighborhood distribution must be square with N >= 2, got {:?}",
                m.dim()
            )));
        }
        for (i, row) in m.axis_iter(Axis(0)).enumerate() {
            if row[i] != 0.0 {
                return Err(Error::Domain(format!("diagonal entry {i} is {}", row[i])));
            }
            if let Some(x) = row.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Error::Domain(format!("row {i} has entry {x} outside [0, 1]")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Domain(format!("row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    /// Restricts the distribution to the points in `idx` and renormalizes each
    /// sub-row. A sub-row left with no mass falls back to the row of
    /// `fallback` (indexed by batch position), which must itself be valid.
    pub fn restrict(&self, idx: &[usize], fallback: impl Fn(usize) -> Vec<f64>) -> Self {
        let b = idx.len();
        let mut out = Array2::zeros((b, b));
        for (a, &i) in idx.iter().enumerate() {
            let mut mass = 0.0;
            for (c, &j) in idx.iter().enumerate() {
                if a != c {
                    let v = self.matrix[[i, j]];
                    out[[a, c]] = v;
                    mass += v;
                }
            }
            if mass > 0.0 {
                out.row_mut(a).mapv_inplace(|v| v / mass);
            } else {
                let row = fallback(a);
                out.row_mut(a).assign(&ArrayView1::from(&row[..]));
            }
        }
        NeighborhoodDistribution::from_parts(out, self.role)
    }
}

fn check_finite(z: &Matrix, what: &str) -> Result<()> {
    if let Some(((i, j), x)) = z.indexed_iter().find(|(_, x)| !x.is_finite()) {
        return Err(Error::Domain(format!("{what} entry ({i}, {j}) = {x} is not finite")));
    }
    Ok(())
}

fn check_points(z: &Matrix) -> Result<()> {
    if z.nrows() < 2 {
        return Err(Error::Dimension(format!("need N >= 2 points, got {}", z.nrows())));
    }
    check_finite(z, "embedding")
}

#[inline]
fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// All pairwise squared Euclidean distances.
pub fn squared_distances(x: &Matrix) -> Matrix {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sq_dist(x.row(i), x.row(j));
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Scales each row to unit norm. Returns the normalized rows and the original
/// norms.
pub fn normalize_rows(z: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = z.clone();
    let mut norms = Vec::with_capacity(z.nrows());
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Domain(format!(
                "row {i} has norm {n}; the angular kernel needs nonzero rows"
            )));
        }
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Pairwise kernel scores `s_ij`. The diagonal is excluded from every
/// neighborhood and is set to `-inf`.
///
/// The angular family expects rows already on the unit sphere (see
/// [`normalize_rows`]).
pub fn similarity_matrix(z: &Matrix, spec: &KernelSpec) -> Result<Matrix> {
    check_points(z)?;
    let n = z.nrows();
    let c = spec.scale;
    let mut s = Array2::zeros((n, n));
    match spec.family {
        KernelFamily::Distance => {
            for i in 0..n {
                for j in (i + 1)..n {
                    let v = -c * sq_dist(z.row(i), z.row(j));
                    s[[i, j]] = v;
                    s[[j, i]] = v;
                }
            }
        }
        KernelFamily::Angular => {
            for (i, row) in z.axis_iter(Axis(0)).enumerate() {
                let norm = row.dot(&row).sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(Error::Domain(format!(
                        "angular kernel needs unit rows; row {i} has norm {norm}"
                    )));
                }
            }
            let g = z.dot(&z.t());
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        s[[i, j]] = c * g[[i, j]];
                    }
                }
            }
        }
    }
    for i in 0..n {
        s[[i, i]] = f64::NEG_INFINITY;
    }
    Ok(s)
}

/// Row-wise softmax over the off-diagonal scores, with max subtraction.
pub fn kernel_rows(scores: &Matrix) -> Result<NeighborhoodDistribution> {
    let n = scores.nrows();
    if n < 2 || !scores.is_square() {
        return Err(Error::Dimension(format!(
            "score matrix must be square with N >= 2, got {:?}",
            scores.dim()
        )));
    }
    let mut q = Array2::zeros((n, n));
    for i in 0..n {
        let row = scores.row(i);
        let mut max = f64::NEG_INFINITY;
        for (j, &s) in row.iter().enumerate() {
            if j == i {
                continue;
            }
            if !s.is_finite() {
                return Err(Error::Domain(format!("score ({i}, {j}) = {s} is not finite")));
            }
            max = max.max(s);
        }
        let mut total = 0.0;
        for (j, &s) in row.iter().enumerate() {
            if j != i {
                let e = (s - max).exp();
                q[[i, j]] = e;
                total += e;
            }
        }
        q.row_mut(i).mapv_inplace(|v| v / total);
    }
    Ok(NeighborhoodDistribution::from_parts(q, Role::Learned))
}

/// Softmax backward: `dL/ds_ij = q_ij (g_ij - sum_k g_ik q_ik)`.
fn softmax_backward(q: &Matrix, dl_dq: &Matrix) -> Matrix {
    let n = q.nrows();
    let mut gs = Array2::zeros((n, n));
    for i in 0..n {
        let qi = q.row(i);
        let gi = dl_dq.row(i);
        let mut dot = 0.0;
        for j in 0..n {
            if j != i {
                dot += gi[j] * qi[j];
            }
        }
        for j in 0..n {
            if j != i {
                gs[[i, j]] = qi[j] * (gi[j] - dot);
            }
        }
    }
    gs
}

fn check_square_like(dl_dq: &Matrix, n: usize) -> Result<()> {
    if dl_dq.dim() != (n, n) {
        return Err(Error::Dimension(format!(
            "dL/dq has shape {:?}, expected ({n}, {n})",
            dl_dq.dim()
        )));
    }
    Ok(())
}

/// Cached forward pass of the similarity kernel, reused by the backward pass.
#[derive(Debug, Clone)]
pub struct KernelPass {
    spec: KernelSpec,
    /// Unit rows and original norms (angular family only).
    unit: Option<(Matrix, Vec<f64>)>,
    q: NeighborhoodDistribution,
}

impl KernelPass {
    pub fn forward(z: &Matrix, spec: &KernelSpec) -> Result<Self> {
        check_points(z)?;
        let (scores, unit) = match spec.family {
            KernelFamily::Distance => (similarity_matrix(z, spec)?, None),
            KernelFamily::Angular => {
                let (u, norms) = normalize_rows(z)?;
                (similarity_matrix(&u, spec)?, Some((u, norms)))
            }
        };
        Ok(KernelPass {
            spec: *spec,
            unit,
            q: kernel_rows(&scores)?,
        })
    }

    pub fn q(&self) -> &NeighborhoodDistribution {
        &self.q
    }

    /// Gradient of the loss with respect to the raw embedding `z` given
    /// `dL/dq`. For the angular family the result includes the Jacobian of
    /// the row normalization.
    pub fn backward(&self, z: &Matrix, dl_dq: &Matrix) -> Result<Matrix> {
        let n = z.nrows();
        check_square_like(dl_dq, n)?;
        let gs = softmax_backward(self.q.matrix(), dl_dq);
        let sym = &gs + &gs.t();
        let c = self.spec.scale;
        match &self.unit {
            None => {
                // dz_i = -2C sum_j (G_ij + G_ji)(z_i - z_j)
                let row_sums = sym.sum_axis(Axis(1));
                let mut dz = sym.dot(z);
                for (i, mut r) in dz.axis_iter_mut(Axis(0)).enumerate() {
                    r.zip_mut_with(&z.row(i), |d, &zi| *d = -2.0 * c * (row_sums[i] * zi - *d));
                }
                Ok(dz)
            }
            Some((u, norms)) => {
                // du_i = C sum_j (G_ij + G_ji) u_j, then project onto the
                // tangent space at u_i and divide by |z_i|.
                let mut du = sym.dot(u);
                du.mapv_inplace(|v| v * c);
                for (i, mut r) in du.axis_iter_mut(Axis(0)).enumerate() {
                    let ui = u.row(i);
                    let radial = r.dot(&ui);
                    r.zip_mut_with(&ui, |d, &uk| *d = (*d - radial * uk) / norms[i]);
                }
                Ok(du)
            }
        }
    }
}

/// Learned distribution `q` from raw embeddings; normalizes rows first for
/// the angular family.
pub fn learned_distribution(z: &Matrix, spec: &KernelSpec) -> Result<NeighborhoodDistribution> {
    Ok(KernelPass::forward(z, spec)?.q)
}

/// `dL/dz` through the kernel, given `dL/dq`.
pub fn kernel_rows_grad(z: &Matrix, spec: &KernelSpec, dl_dq: &Matrix) -> Result<Matrix> {
    if dl_dq.dim() != (z.nrows(), z.nrows()) {
        return Err(Error::Dimension(format!(
            "dL/dq has shape {:?} but z has {} rows",
            dl_dq.dim(),
            z.nrows()
        )));
    }
    KernelPass::forward(z, spec)?.backward(z, dl_dq)
}

/// Shannon entropy (nats) of a row, with `0 ln 0 = 0`.
pub fn row_entropy(row: ArrayView1<'_, f64>) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

const PERPLEXITY_TOL: f64 = 1e-4;
const BISECTION_STEPS: usize = 64;

/// Gaussian conditionals `p_ij ~ exp(-|x_i - x_j|^2 / (2 sigma_i^2))` with each
/// bandwidth calibrated by bisection so that `exp(H_i)` equals `perplexity`.
pub fn supervisory_sne(x: &Matrix, perplexity: f64) -> Result<NeighborhoodDistribution> {
    check_points(x)?;
    let n = x.nrows();
    if !(perplexity >= 2.0 && perplexity <= (n - 1) as f64) {
        return Err(Error::Precondition(format!(
            "perplexity {perplexity} must lie in [2, N-1] = [2, {}]",
            n - 1
        )));
    }
    let target = perplexity.ln();
    let d = squared_distances(x);
    let mut p = Array2::zeros((n, n));
    let mut scaled = vec![0.0; n];
    for i in 0..n {
        let (mut lo_d, mut hi_d) = (f64::INFINITY, f64::NEG_INFINITY);
        for j in (0..n).filter(|&j| j != i) {
            lo_d = lo_d.min(d[[i, j]]);
            hi_d = hi_d.max(d[[i, j]]);
        }
        let spread = hi_d - lo_d;
        if spread <= 1e-12 * hi_d.max(f64::MIN_POSITIVE) {
            // equidistant neighbors: every bandwidth gives the uniform row
            let u = 1.0 / (n - 1) as f64;
            for j in (0..n).filter(|&j| j != i) {
                p[[i, j]] = u;
            }
            continue;
        }
        for j in 0..n {
            scaled[j] = (d[[i, j]] - lo_d) / spread;
        }
        // entropy of the row at precision exp(log_beta), distances in [0, 1]
        let entropy = |log_beta: f64| -> f64 {
            let beta = log_beta.exp();
            let (mut z, mut weighted) = (0.0, 0.0);
            for j in (0..n).filter(|&j| j != i) {
                let e = (-beta * scaled[j]).exp();
                z += e;
                weighted += e * scaled[j];
            }
            z.ln() + beta * weighted / z
        };
        let (mut lo, mut hi) = (-30.0f64, 60.0f64);
        let mut log_beta = 0.5 * (lo + hi);
        let mut converged = false;
        for _ in 0..BISECTION_STEPS {
            log_beta = 0.5 * (lo + hi);
            let h = entropy(log_beta);
            if (h.exp() - perplexity).abs() < 1e-7 {
                converged = true;
                break;
            }
            if h > target {
                lo = log_beta;
            } else {
                hi = log_beta;
            }
        }
        if !converged && (entropy(log_beta).exp() - perplexity).abs() > PERPLEXITY_TOL {
            return Err(Error::BisectionFailed { row: i });
        }
        let beta = log_beta.exp();
        let mut total = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            let e = (-beta * scaled[j]).exp();
            p[[i, j]] = e;
            total += e;
        }
        p.row_mut(i).mapv_inplace(|v| v / total);
    }
    Ok(NeighborhoodDistribution::from_parts(p, Role::Supervisory))
}

/// `p(j|i)` uniform over the other members of `i`'s class.
pub fn supervisory_labels(labels: &[usize]) -> Result<NeighborhoodDistribution> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::Dimension(format!("need N >= 2 labels, got {n}")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c == 1) {
        return Err(Error::SingletonClass { class });
    }
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let w = 1.0 / (counts[labels[i]] - 1) as f64;
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                p[[i, j]] = w;
            }
        }
    }
    Ok(NeighborhoodDistribution::from_parts(p, Role::Supervisory))
}

/// Indices of the `k` nearest neighbors of point `i` (squared Euclidean,
/// ties to the smaller index).
pub fn nearest_neighbors(d: &Matrix, i: usize, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..d.ncols()).filter(|&j| j != i).collect();
    order.sort_by(|&a, &b| d[[i, a]].total_cmp(&d[[i, b]]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// `p(j|i) = 1/k` on the `k` nearest neighbors of `x_i`.
pub fn supervisory_knn(x: &Matrix, k: usize) -> Result<NeighborhoodDistribution> {
    check_points(x)?;
    let n = x.nrows();
    if k == 0 || k > n - 1 {
        return Err(Error::Precondition(format!("k = {k} must lie in [1, N-1] = [1, {}]", n - 1)));
    }
    let d = squared_distances(x);
    let mut p = Array2::zeros((n, n));
    let w = 1.0 / k as f64;
    for i in 0..n {
        for j in nearest_neighbors(&d, i, k) {
            p[[i, j]] = w;
        }
    }
    Ok(NeighborhoodDistribution::from_parts(p, Role::Supervisory))
}

fn check_assignments(phi: &Matrix) -> Result<()> {
    check_points(phi)?;
    for (i, row) in phi.axis_iter(Axis(0)).enumerate() {
        if row.iter().any(|&v| v < 0.0) || (row.sum() - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain(format!("assignment row {i} is not on the simplex")));
        }
    }
    Ok(())
}

/// Cached forward pass of [`cluster_transition`].
#[derive(Debug, Clone)]
pub struct ClusterPass {
    row_mass: Vec<f64>,
    q: NeighborhoodDistribution,
}

impl ClusterPass {
    pub fn forward(phi: &Matrix) -> Result<Self> {
        check_assignments(phi)?;
        Self::forward_unchecked(phi)
    }

    /// Forward pass for any non-negative `phi`, simplex rows or not.
    pub(crate) fn forward_unchecked(phi: &Matrix) -> Result<Self> {
        let n = phi.nrows();
        let mut s = phi.dot(&phi.t());
        let mut row_mass = Vec::with_capacity(n);
        for (i, mut row) in s.axis_iter_mut(Axis(0)).enumerate() {
            row[i] = 0.0;
            let r = row.sum();
            if !(r > 0.0) {
                return Err(Error::DegenerateRow { row: i });
            }
            row.mapv_inplace(|v| v / r);
            row_mass.push(r);
        }
        Ok(ClusterPass {
            row_mass,
            q: NeighborhoodDistribution::from_parts(s, Role::Learned),
        })
    }

    pub fn q(&self) -> &NeighborhoodDistribution {
        &self.q
    }

    /// `dL/dphi` given `dL/dq`.
    pub fn backward(&self, phi: &Matrix, dl_dq: &Matrix) -> Result<Matrix> {
        let n = phi.nrows();
        check_square_like(dl_dq, n)?;
        let q = self.q.matrix();
        // dL/dS_ij = (g_ij - sum_k g_ik q_ik) / r_i
        let mut h = Array2::zeros((n, n));
        for i in 0..n {
            let mut dot = 0.0;
            for j in 0..n {
                if j != i {
                    dot += dl_dq[[i, j]] * q[[i, j]];
                }
            }
            for j in 0..n {
                if j != i {
                    h[[i, j]] = (dl_dq[[i, j]] - dot) / self.row_mass[i];
                }
            }
        }
        let sym = &h + &h.t();
        Ok(sym.dot(phi))
    }
}

/// `q(j|i) = (phi_i . phi_j) / sum_{k != i} (phi_i . phi_k)` from soft cluster
/// assignments.
pub fn cluster_transition(assignments: &Matrix) -> Result<NeighborhoodDistribution> {
    Ok(ClusterPass::forward(assignments)?.q)
}

pub fn cluster_transition_grad(assignments: &Matrix, dl_dq: &Matrix) -> Result<Matrix> {
    ClusterPass::forward(assignments)?.backward(assignments, dl_dq)
}
