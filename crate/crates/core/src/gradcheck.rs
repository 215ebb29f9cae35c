//! Central finite-difference checks of every analytic gradient.
//!
//! Each component is checked on a few seeded random instances. The error for
//! one entry is `|a - n| / max(|a|, |n|, REL_FLOOR)`, `a` analytic and `n`
//! numeric; a component passes when its worst entry is within [`TOLERANCE`].
//! The floor keeps entries that are zero up to roundoff from dominating.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::divergence::{self, Divergence};
use crate::error::{Error, Result};
use crate::kernels::{self, ClusterPass, KernelFamily, KernelSpec};
use crate::model::{ClusterHead, Encoder, EncoderKind, FreeEmbedding, Parameters};
use crate::rng::SeededRng;
use crate::trainers::{cluster_loss, encoder_loss, kernel_loss};
use crate::Matrix;

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-4;
const INSTANCES: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Divergences,
    Kernels,
    Model,
    End2end,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Divergences, Scope::Kernels, Scope::Model, Scope::End2end];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Divergences => "divergences",
            Scope::Kernels => "kernels",
            Scope::Model => "model",
            Scope::End2end => "end2end",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown gradcheck scope {s:?}; expected divergences, kernels, model or end2end"
                ))
            })
    }
}

/// Worst-case result for one component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentCheck {
    pub component: String,
    pub worst: f64,
    /// Instance and entry where the worst error occurred.
    pub location: String,
    pub entries: usize,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.worst <= TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub scope: Scope,
    pub checks: Vec<ComponentCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(ComponentCheck::passed)
    }

    pub fn failures(&self) -> Vec<&ComponentCheck> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.worst).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<4} {:<40} worst_rel_err={:.3e} at {} ({} entries)",
                if c.passed() { "ok" } else { "FAIL" },
                c.component,
                c.worst,
                c.location,
                c.entries
            )?;
        }
        write!(
            f,
            "{} scope {}: worst relative error {:.3e} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.scope,
            self.worst(),
            TOLERANCE
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_gradient(x: &Matrix, mut f: impl FnMut(&Matrix) -> Result<f64>) -> Result<Matrix> {
    let mut work = x.clone();
    let mut g = Array2::zeros(x.dim());
    for idx in ndarray::indices(x.dim()) {
        let orig = work[idx];
        work[idx] = orig + FD_STEP;
        let up = f(&work)?;
        work[idx] = orig - FD_STEP;
        let down = f(&work)?;
        work[idx] = orig;
        g[idx] = (up - down) / (2.0 * FD_STEP);
    }
    Ok(g)
}

/// Central differences with respect to every tensor of a parameter container.
pub fn numeric_param_gradients<M: Parameters + Clone>(
    model: &M,
    f: impl Fn(&M) -> Result<f64>,
) -> Result<Vec<Matrix>> {
    let count = model.tensors().len();
    (0..count)
        .map(|t| {
            let base = model.tensors()[t].clone();
            numeric_gradient(&base, |w| {
                let mut m = model.clone();
                m.tensors_mut()[t].assign(w);
                f(&m)
            })
        })
        .collect()
}

/// Runs checks and aggregates them per component name. A component whose
/// name contains the fault string gets its analytic gradient perturbed, which
/// lets callers confirm that the harness detects a broken gradient.
struct Checker<'a> {
    fault: Option<&'a str>,
    checks: Vec<ComponentCheck>,
}

impl Checker<'_> {
    fn compare(&mut self, component: &str, instance: u64, analytic: &Matrix, numeric: &Matrix) {
        let mut analytic = analytic.clone();
        if self.fault.is_some_and(|f| component.contains(f)) {
            if let Some(v) = analytic.iter_mut().next() {
                *v += 1e-2 * (1.0 + v.abs());
            }
        }
        let mut worst = 0.0;
        let mut at = (0, 0);
        for (idx, (&a, &n)) in ndarray::indices(analytic.dim())
            .into_iter()
            .zip(analytic.iter().zip(numeric.iter()))
        {
            let e = relative_error(a, n);
            if !(e <= worst) {
                worst = e;
                at = idx;
            }
        }
        let location = format!("instance {instance}, entry ({}, {})", at.0, at.1);
        match self.checks.iter_mut().find(|c| c.component == component) {
            Some(c) => {
                c.entries += analytic.len();
                if !(worst <= c.worst) {
                    c.worst = worst;
                    c.location = location;
                }
            }
            None => self.checks.push(ComponentCheck {
                component: component.to_string(),
                worst,
                location,
                entries: analytic.len(),
            }),
        }
    }

    fn compare_all(&mut self, prefix: &str, names: &[&str], inst: u64, a: &[Matrix], n: &[Matrix]) {
        for ((name, a), n) in names.iter().zip(a).zip(n) {
            self.compare(&format!("{prefix}/{name}"), inst, a, n);
        }
    }
}

fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.normal())
}

/// Simplex point bounded away from the faces.
fn interior_simplex(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| 0.2 + rng.uniform()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn instance_rng(seed: u64, salt: u64, instance: u64) -> SeededRng {
    SeededRng::new(
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(salt.wrapping_mul(1_000_003))
            .wrapping_add(instance),
    )
}

fn family_name(f: KernelFamily) -> &'static str {
    match f {
        KernelFamily::Angular => "angular",
        KernelFamily::Distance => "distance",
    }
}

const FAMILIES: [KernelFamily; 2] = [KernelFamily::Distance, KernelFamily::Angular];

fn row_vec(v: &[f64]) -> Matrix {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("one row")
}

fn check_divergences(ck: &mut Checker<'_>, seed: u64) -> Result<()> {
    for (salt, d) in Divergence::ALL.into_iter().enumerate() {
        for inst in 0..INSTANCES * 4 {
            let mut rng = instance_rng(seed, salt as u64, inst);
            let p = interior_simplex(8, &mut rng);
            let q = interior_simplex(8, &mut rng);
            let analytic = row_vec(&divergence::divergence_grad_q(d, &p, &q)?);
            let numeric = numeric_gradient(&row_vec(&q), |qq| {
                Ok(d.value(&p, qq.as_slice().expect("standard layout")))
            })?;
            ck.compare(&format!("divergence/{d}"), inst, &analytic, &numeric);
        }
    }
    Ok(())
}

fn check_kernels(ck: &mut Checker<'_>, seed: u64) -> Result<()> {
    // Softmax kernels under a random linear functional of q, then under each
    // divergence against a random supervisory distribution.
    for (salt, family) in FAMILIES.into_iter().enumerate() {
        let spec = KernelSpec { family, scale: 1.5 };
        for inst in 0..INSTANCES {
            let mut rng = instance_rng(seed, 10 + salt as u64, inst);
            let z = normal_matrix(5, 3, 1.0, &mut rng);
            let mut w = normal_matrix(5, 5, 1.0, &mut rng);
            w.diag_mut().fill(0.0);
            let analytic = kernels::kernel_rows_grad(&z, &spec, &w)?;
            let numeric = numeric_gradient(&z, |zz| {
                let q = kernels::learned_distribution(zz, &spec)?;
                Ok((q.matrix() * &w).sum())
            })?;
            ck.compare(&format!("kernel_rows/{}", family_name(family)), inst, &analytic, &numeric);

            let p = kernels::learned_distribution(&normal_matrix(5, 3, 1.0, &mut rng), &spec)?;
            for d in Divergence::ALL {
                let (_, analytic) = kernel_loss(d, &p, &spec, &z)?;
                let numeric = numeric_gradient(&z, |zz| Ok(kernel_loss(d, &p, &spec, zz)?.0))?;
                ck.compare(
                    &format!("kernel_loss/{}/{d}", family_name(family)),
                    inst,
                    &analytic,
                    &numeric,
                );
            }
        }
    }
    for inst in 0..INSTANCES {
        let mut rng = instance_rng(seed, 20, inst);
        let phi = crate::model::softmax_rows(&normal_matrix(6, 4, 1.0, &mut rng));
        let mut w = normal_matrix(6, 6, 1.0, &mut rng);
        w.diag_mut().fill(0.0);
        let analytic = ClusterPass::forward(&phi)?.backward(&phi, &w)?;
        let numeric = numeric_gradient(&phi, |pp| {
            Ok((ClusterPass::forward_unchecked(pp)?.q().matrix() * &w).sum())
        })?;
        ck.compare("cluster_transition", inst, &analytic, &numeric);
    }
    Ok(())
}

fn check_model(ck: &mut Checker<'_>, seed: u64) -> Result<()> {
    for (salt, kind) in [EncoderKind::Linear, EncoderKind::Mlp1].into_iter().enumerate() {
        let prefix = format!("encoder/{kind}");
        for inst in 0..INSTANCES {
            let mut rng = instance_rng(seed, 30 + salt as u64, inst);
            let mut enc = Encoder::init(kind, 4, 5, 3, &mut rng);
            // Non-zero biases so their gradients are exercised away from init.
            for t in enc.tensors_mut() {
                t.mapv_inplace(|v| v + 0.1 * rng.normal());
            }
            let x = normal_matrix(6, 4, 1.0, &mut rng);
            let r = normal_matrix(6, 3, 1.0, &mut rng);
            let back = enc.backward(&x, &r)?;
            let numeric = numeric_param_gradients(&enc, |e| Ok((e.forward(&x)? * &r).sum()))?;
            ck.compare_all(&prefix, &enc.tensor_names(), inst, &back.params, &numeric);
            let nx = numeric_gradient(&x, |xx| Ok((enc.forward(xx)? * &r).sum()))?;
            ck.compare(&format!("{prefix}/input"), inst, &back.input, &nx);
        }
    }
    for inst in 0..INSTANCES {
        let mut rng = instance_rng(seed, 40, inst);
        let mut head = ClusterHead::init(4, 3, &mut rng);
        head.bias.mapv_inplace(|_| 0.3 * rng.normal());
        let x = normal_matrix(6, 4, 1.0, &mut rng);
        let r = normal_matrix(6, 3, 1.0, &mut rng);
        let back = head.backward(&x, &r)?;
        let numeric = numeric_param_gradients(&head, |h| Ok((h.forward(&x)? * &r).sum()))?;
        ck.compare_all("cluster_head", &head.tensor_names(), inst, &back.params, &numeric);
        let nx = numeric_gradient(&x, |xx| Ok((head.forward(xx)? * &r).sum()))?;
        ck.compare("cluster_head/input", inst, &back.input, &nx);
    }
    Ok(())
}

const E2E_N: usize = 8;
const E2E_D: usize = 4;

fn check_end2end(ck: &mut Checker<'_>, seed: u64) -> Result<()> {
    for inst in 0..INSTANCES {
        let mut rng = instance_rng(seed, 50, inst);
        let x = normal_matrix(E2E_N, E2E_D, 1.0, &mut rng);
        let p_sne = kernels::supervisory_sne(&x, 3.0)?;
        let labels = [0, 0, 0, 1, 1, 1, 2, 2];
        let p_sup = kernels::supervisory_labels(&labels)?;
        let p_knn = kernels::supervisory_knn(&x, 3)?;
        let emb = FreeEmbedding {
            table: normal_matrix(E2E_N, 2, 1.0, &mut rng),
        };
        let enc_sne = Encoder::init(EncoderKind::Mlp1, E2E_D, 5, 2, &mut rng);
        let enc_sup = Encoder::init(EncoderKind::Mlp1, E2E_D, 5, 3, &mut rng);
        let mut head = ClusterHead::init(E2E_D, 3, &mut rng);
        head.weights.mapv_inplace(|v| 2.0 * v);

        for d in Divergence::ALL {
            for family in FAMILIES {
                let spec = KernelSpec { family, scale: 1.0 };
                let fam = family_name(family);

                let prefix = format!("sne-free/{d}/{fam}");
                let (_, dz) = kernel_loss(d, &p_sne, &spec, &emb.table)?;
                let numeric = numeric_param_gradients(&emb, |m| {
                    Ok(kernel_loss(d, &p_sne, &spec, &m.table)?.0)
                })?;
                ck.compare_all(&prefix, &emb.tensor_names(), inst, &[dz], &numeric);

                for (task, p, enc) in [("sne-parametric", &p_sne, &enc_sne), ("supcon", &p_sup, &enc_sup)] {
                    let prefix = format!("{task}/{d}/{fam}");
                    let ev = encoder_loss(d, p, &spec, enc, &x)?;
                    let numeric = numeric_param_gradients(enc, |e| {
                        Ok(encoder_loss(d, p, &spec, e, &x)?.loss)
                    })?;
                    ck.compare_all(&prefix, &enc.tensor_names(), inst, &ev.grads, &numeric);
                }
            }
            // The cluster assembly has no similarity kernel.
            let prefix = format!("cluster/{d}");
            let ev = cluster_loss(d, &p_knn, &head, &x)?;
            let numeric =
                numeric_param_gradients(&head, |h| Ok(cluster_loss(d, &p_knn, h, &x)?.loss))?;
            ck.compare_all(&prefix, &head.tensor_names(), inst, &ev.grads, &numeric);
        }
    }
    Ok(())
}

/// Runs the checks for `scope`. `fault` names (a substring of) a component
/// whose analytic gradient is deliberately corrupted.
pub fn run(scope: Scope, seed: u64, fault: Option<&str>) -> Result<GradcheckReport> {
    let mut ck = Checker {
        fault,
        checks: Vec::new(),
    };
    match scope {
        Scope::Divergences => check_divergences(&mut ck, seed)?,
        Scope::Kernels => check_kernels(&mut ck, seed)?,
        Scope::Model => check_model(&mut ck, seed)?,
        Scope::End2end => check_end2end(&mut ck, seed)?,
    }
    Ok(GradcheckReport {
        scope,
        checks: ck.checks,
    })
}
