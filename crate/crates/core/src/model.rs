//! Small differentiable parameter containers with hand-written backward
//! passes, an Adam optimizer, and the flat binary checkpoint format.
//!
//! Every container exposes its tensors in a fixed order (see
//! [`Parameters::tensor_names`]); gradients, optimizer moments and checkpoint
//! payloads all follow that order. Biases are stored as `1 x n` matrices.

use std::fmt;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::Matrix;

pub trait Parameters {
    fn tensor_names(&self) -> Vec<&'static str>;
    fn tensors(&self) -> Vec<&Matrix>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;
}

/// Glorot-uniform matrix: entries in `(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.uniform_range(-a, a))
}

fn check_cols(x: &Matrix, expected: usize, what: &str) -> Result<()> {
    if x.ncols() != expected {
        return Err(Error::Dimension(format!(
            "{what}: input has {} columns, expected {expected}",
            x.ncols()
        )));
    }
    Ok(())
}

fn check_shape(m: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.dim() != (rows, cols) {
        return Err(Error::Dimension(format!(
            "{what} has shape {:?}, expected ({rows}, {cols})",
            m.dim()
        )));
    }
    Ok(())
}

fn add_bias(mut m: Matrix, b: &Matrix) -> Matrix {
    m += &b.row(0);
    m
}

fn col_sums(m: &Matrix) -> Matrix {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

/// Trainable `N x out_dim` table, optimized directly.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeEmbedding {
    pub table: Matrix,
}

impl FreeEmbedding {
    /// Entries drawn from `N(0, std^2)`.
    pub fn init(n: usize, out_dim: usize, std: f64, rng: &mut SeededRng) -> Self {
        FreeEmbedding {
            table: Array2::from_shape_simple_fn((n, out_dim), || std * rng.normal()),
        }
    }
}

impl Parameters for FreeEmbedding {
    fn tensor_names(&self) -> Vec<&'static str> {
        vec!["embedding"]
    }
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.table]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.table]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Linear,
    Mlp1,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Linear => "linear",
            EncoderKind::Mlp1 => "mlp1",
        })
    }
}

/// `linear`: `x W1 + b1`. `mlp1`: `tanh(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub w1: Matrix,
    pub b1: Matrix,
    pub second: Option<(Matrix, Matrix)>,
}

/// Gradients from a backward pass: parameters in tensor order, and the input.
#[derive(Debug, Clone)]
pub struct Backward {
    pub params: Vec<Matrix>,
    pub input: Matrix,
}

impl Encoder {
    pub fn linear(w: Matrix, b: Matrix) -> Result<Self> {
        check_shape(&b, 1, w.ncols(), "bias")?;
        Ok(Encoder {
            w1: w,
            b1: b,
            second: None,
        })
    }

    pub fn mlp1(w1: Matrix, b1: Matrix, w2: Matrix, b2: Matrix) -> Result<Self> {
        check_shape(&b1, 1, w1.ncols(), "first bias")?;
        check_shape(&w2, w1.ncols(), w2.ncols(), "second weight")?;
        check_shape(&b2, 1, w2.ncols(), "second bias")?;
        Ok(Encoder {
            w1,
            b1,
            second: Some((w2, b2)),
        })
    }

    /// Glorot weights and zero biases. `hidden` is ignored for `linear`.
    pub fn init(
        kind: EncoderKind,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut SeededRng,
    ) -> Self {
        match kind {
            EncoderKind::Linear => Encoder {
                w1: glorot(input, output, rng),
                b1: Array2::zeros((1, output)),
                second: None,
            },
            EncoderKind::Mlp1 => {
                let w1 = glorot(input, hidden, rng);
                let w2 = glorot(hidden, output, rng);
                Encoder {
                    w1,
                    b1: Array2::zeros((1, hidden)),
                    second: Some((w2, Array2::zeros((1, output)))),
                }
            }
        }
    }

    pub fn kind(&self) -> EncoderKind {
        if self.second.is_some() {
            EncoderKind::Mlp1
        } else {
            EncoderKind::Linear
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        match &self.second {
            Some((w2, _)) => w2.ncols(),
            None => self.w1.ncols(),
        }
    }

    fn pre_activation(&self, x: &Matrix) -> Matrix {
        add_bias(x.dot(&self.w1), &self.b1)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        check_cols(x, self.input_dim(), "encoder")?;
        let a = self.pre_activation(x);
        Ok(match &self.second {
            None => a,
            Some((w2, b2)) => add_bias(a.mapv(f64::tanh).dot(w2), b2),
        })
    }

    pub fn backward(&self, x: &Matrix, dl_dout: &Matrix) -> Result<Backward> {
        check_cols(x, self.input_dim(), "encoder")?;
        check_shape(dl_dout, x.nrows(), self.output_dim(), "dL/dout")?;
        match &self.second {
            None => Ok(Backward {
                params: vec![x.t().dot(dl_dout), col_sums(dl_dout)],
                input: dl_dout.dot(&self.w1.t()),
            }),
            Some((w2, _)) => {
                let h = self.pre_activation(x).mapv(f64::tanh);
                let dw2 = h.t().dot(dl_dout);
                let db2 = col_sums(dl_dout);
                let mut da = dl_dout.dot(&w2.t());
                da.zip_mut_with(&h, |d, &t| *d *= 1.0 - t * t);
                Ok(Backward {
                    params: vec![x.t().dot(&da), col_sums(&da), dw2, db2],
                    input: da.dot(&self.w1.t()),
                })
            }
        }
    }
}

impl Parameters for Encoder {
    fn tensor_names(&self) -> Vec<&'static str> {
        match self.second {
            None => vec!["w1", "b1"],
            Some(_) => vec!["w1", "b1", "w2", "b2"],
        }
    }
    fn tensors(&self) -> Vec<&Matrix> {
        let mut v = vec![&self.w1, &self.b1];
        if let Some((w2, b2)) = &self.second {
            v.push(w2);
            v.push(b2);
        }
        v
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![&mut self.w1, &mut self.b1];
        if let Some((w2, b2)) = &mut self.second {
            v.push(w2);
            v.push(b2);
        }
        v
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Linear classifier whose outputs go through a row softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterHead {
    pub weights: Matrix,
    pub bias: Matrix,
}

impl ClusterHead {
    pub fn new(weights: Matrix, bias: Matrix) -> Result<Self> {
        check_shape(&bias, 1, weights.ncols(), "bias")?;
        Ok(ClusterHead { weights, bias })
    }

    pub fn init(input: usize, clusters: usize, rng: &mut SeededRng) -> Self {
        ClusterHead {
            weights: glorot(input, clusters, rng),
            bias: Array2::zeros((1, clusters)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn clusters(&self) -> usize {
        self.weights.ncols()
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        check_cols(x, self.input_dim(), "cluster head")?;
        Ok(add_bias(x.dot(&self.weights), &self.bias))
    }

    /// Assignment matrix: each row on the simplex.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    /// Backward from `dL/dlogits`.
    pub fn backward_logits(&self, x: &Matrix, dl_dlogits: &Matrix) -> Result<Backward> {
        check_cols(x, self.input_dim(), "cluster head")?;
        check_shape(dl_dlogits, x.nrows(), self.clusters(), "dL/dlogits")?;
        Ok(Backward {
            params: vec![x.t().dot(dl_dlogits), col_sums(dl_dlogits)],
            input: dl_dlogits.dot(&self.weights.t()),
        })
    }

    /// Backward from `dL/dassignments`, through the softmax.
    pub fn backward(&self, x: &Matrix, dl_dphi: &Matrix) -> Result<Backward> {
        let phi = self.forward(x)?;
        check_shape(dl_dphi, phi.nrows(), phi.ncols(), "dL/dassignments")?;
        let mut dlogits = dl_dphi.clone();
        for (mut d, p) in dlogits.axis_iter_mut(Axis(0)).zip(phi.axis_iter(Axis(0))) {
            let dot = d.dot(&p);
            d.zip_mut_with(&p, |g, &pk| *g = pk * (*g - dot));
        }
        self.backward_logits(x, &dlogits)
    }
}

impl Parameters for ClusterHead {
    fn tensor_names(&self) -> Vec<&'static str> {
        vec!["weights", "bias"]
    }
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.weights, &self.bias]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of `params` in place. Rejects non-finite gradients before
    /// touching any state.
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (t, (p, g)) in params.iter().zip(grads).enumerate() {
            check_shape(g, p.nrows(), p.ncols(), &format!("gradient {t}"))?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { tensor: t });
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Array2::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len()
            || self.m.iter().zip(grads).any(|(m, g)| m.dim() != g.dim())
        {
            return Err(Error::Dimension("parameter shapes changed between steps".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Any of the parameter containers, as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Free(FreeEmbedding),
    Encoder(Encoder),
    ClusterHead(ClusterHead),
}

const CHECKPOINT_MAGIC: &[u8; 5] = b"BICN1";

impl Model {
    fn tag(&self) -> u64 {
        match self {
            Model::Free(_) => 0,
            Model::Encoder(e) if e.second.is_none() => 1,
            Model::Encoder(_) => 2,
            Model::ClusterHead(_) => 3,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.tag() {
            0 => "free",
            1 => "linear",
            2 => "mlp1",
            _ => "cluster_head",
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        match self {
            Model::Free(m) => m.tensors(),
            Model::Encoder(m) => m.tensors(),
            Model::ClusterHead(m) => m.tensors(),
        }
    }

    /// Checkpoint bytes: magic `BICN1`, then as little-endian `u64`s the kind
    /// tag (0 free, 1 linear, 2 mlp1, 3 cluster head), the tensor count and
    /// each tensor's rows and cols, then every tensor's entries as
    /// little-endian `f64` in row-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.tag().to_le_bytes());
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for t in &tensors {
            out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        }
        for t in &tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(5)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing BICN1 magic".into()));
        }
        let tag = r.u64()?;
        let expected = match tag {
            0 => 1,
            1 | 3 => 2,
            2 => 4,
            _ => return Err(Error::Format(format!("unknown model kind tag {tag}"))),
        };
        let count = r.u64()?;
        if count != expected {
            return Err(Error::Format(format!(
                "kind {tag} stores {expected} tensors, header says {count}"
            )));
        }
        let mut shapes = Vec::with_capacity(expected as usize);
        for _ in 0..expected {
            let rows = r.usize()?;
            let cols = r.usize()?;
            shapes.push((rows, cols));
        }
        let mut tensors = Vec::with_capacity(shapes.len());
        for (rows, cols) in shapes {
            tensors.push(r.matrix(rows, cols)?);
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("tensor count checked above");
        let model = match tag {
            0 => Model::Free(FreeEmbedding { table: next() }),
            1 => Model::Encoder(Encoder::linear(next(), next())?),
            2 => Model::Encoder(Encoder::mlp1(next(), next(), next(), next())?),
            _ => Model::ClusterHead(ClusterHead::new(next(), next())?),
        };
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&bytes)
    }
}

/// Bounds-checked little-endian reader shared by the binary decoders.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn i64(&mut self) -> Result<i64> {
        let b = self.take(8)?;
        Ok(i64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("size {v} does not fit")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// `rows x cols` little-endian `f64`s, refusing sizes larger than the
    /// remaining input before allocating.
    pub(crate) fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("shape ({rows}, {cols}) overflows")))?;
        if len > self.remaining() {
            return Err(Error::Format(format!(
                "shape ({rows}, {cols}) needs {len} bytes, {} left",
                self.remaining()
            )));
        }
        let data = (0..rows * cols)
            .map(|_| self.f64())
            .collect::<Result<Vec<_>>>()?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
    }
}
