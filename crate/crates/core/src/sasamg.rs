//! Similarity adjacency generation: query/key attention over patches followed by
//! percentile-based dynamic erasure.
//!
//! For patch embeddings `x: N×Cin`,
//!
//! ```text
//! S = softmax_rows((x·W_q)(x·W_k)ᵀ / sqrt(Cin))
//! A[i][j] = S[i][j] if S[i][j] > p(S, beta) else 0
//! ```
//!
//! where `p(S, beta)` is the `ceil(beta/100 · N²)`-th smallest entry of `S`
//! (1-based). The threshold is recomputed on every forward pass and the mask is
//! a constant for backpropagation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A percentile in `[0, 100]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Percentile(f64);

impl Percentile {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=100.0).contains(&value) {
            return Err(Error::Domain(format!(
                "percentile {value} outside [0, 100]"
            )));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// 1-based rank `ceil(beta/100 · n)` of the threshold entry.
    pub fn rank(self, n: usize) -> usize {
        // beta·n is exact for integral beta, so divide last.
        let k = (self.0 * n as f64 / 100.0).ceil() as usize;
        k.min(n)
    }
}

impl TryFrom<f64> for Percentile {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Percentile> for f64 {
    fn from(p: Percentile) -> f64 {
        p.0
    }
}

impl std::fmt::Display for Percentile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Query/key projections of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct SasamgParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
}

impl SasamgParams {
    pub fn new(w_q: Tensor, w_k: Tensor) -> Result<Self> {
        let p = Self { w_q, w_k };
        p.channels()?;
        Ok(p)
    }

    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let shape = [channels, channels];
        Self {
            w_q: Tensor::xavier_uniform(&shape, channels, channels, rng),
            w_k: Tensor::xavier_uniform(&shape, channels, channels, rng),
        }
    }

    /// Per-branch channel count `Cin`, which is also the key width `d_k`.
    pub fn channels(&self) -> Result<usize> {
        let (a, b) = self.w_q.dims2()?;
        if a != b || self.w_k.shape() != self.w_q.shape() {
            return Err(Error::shape(format!(
                "query/key weights must be equal square matrices, got {:?} and {:?}",
                self.w_q.shape(),
                self.w_k.shape()
            )));
        }
        Ok(a)
    }

    pub fn d_k(&self) -> Result<usize> {
        self.channels()
    }

    pub fn bind(&self, tape: &mut Tape) -> SasamgVars {
        SasamgVars {
            w_q: tape.param(self.w_q.clone()),
            w_k: tape.param(self.w_k.clone()),
        }
    }
}

/// [`SasamgParams`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SasamgVars {
    pub w_q: Var,
    pub w_k: Var,
}

/// Row-stochastic `N×N` attention matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix(pub Tensor);

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.0.shape()[0]
    }
}

/// Post-erasure adjacency together with the threshold that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityAdjacency {
    pub a: Tensor,
    /// `p(S, beta)`; `-inf` when `beta` erases nothing.
    pub threshold: f64,
    pub beta: Percentile,
}

impl SimilarityAdjacency {
    pub fn nonzeros(&self) -> usize {
        self.a.data().iter().filter(|&&v| v != 0.0).count()
    }

    /// Attention mass each patch receives: column sums of `A`.
    pub fn column_mass(&self) -> Vec<f64> {
        let (m, n) = self.a.dims2().expect("square");
        (0..n).map(|j| (0..m).map(|i| self.a.at(i, j)).sum()).collect()
    }
}

/// Recorded outputs of [`sasamg_forward`].
#[derive(Clone, Copy, Debug)]
pub struct SasamgOutput {
    pub s: Var,
    pub a: Var,
    pub threshold: f64,
}

/// `softmax_rows((x·W_q)(x·W_k)ᵀ / sqrt(d_k))` on the tape.
pub fn similarity(tape: &mut Tape, x: Var, params: &SasamgVars) -> Result<Var> {
    let (_, cin) = tape.value(x).dims2()?;
    let (wq_in, d_k) = tape.value(params.w_q).dims2()?;
    if cin != wq_in || tape.value(params.w_k).shape() != tape.value(params.w_q).shape() {
        return Err(Error::shape(format!(
            "patches with {cin} channels against query/key weights {:?} / {:?}",
            tape.value(params.w_q).shape(),
            tape.value(params.w_k).shape()
        )));
    }
    let q = tape.matmul(x, params.w_q)?;
    let k = tape.matmul(x, params.w_k)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / (d_k as f64).sqrt());
    tape.softmax_rows(scaled)
}

/// The `ceil(beta/100 · n)`-th smallest of `values` (1-based), or `-inf` when
/// that rank is 0.
pub fn percentile_threshold(values: &[f64], beta: Percentile) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("percentile of an empty matrix".into()));
    }
    let k = beta.rank(values.len());
    if k == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

/// Keeps entries strictly above the percentile threshold. Returns the masked
/// matrix and the threshold.
pub fn erase(tape: &mut Tape, s: Var, beta: Percentile) -> Result<(Var, f64)> {
    let threshold = percentile_threshold(tape.value(s).data(), beta)?;
    let keep = tape.value(s).data().iter().map(|&v| v > threshold || v.is_nan()).collect();
    Ok((tape.mask(s, keep)?, threshold))
}

pub fn sasamg_forward(
    tape: &mut Tape,
    x: Var,
    params: &SasamgVars,
    beta: Percentile,
) -> Result<SasamgOutput> {
    let s = similarity(tape, x, params)?;
    let (a, threshold) = erase(tape, s, beta)?;
    Ok(SasamgOutput { s, a, threshold })
}

/// Tape-free convenience wrapper around [`sasamg_forward`].
pub fn generate_adjacency(
    x: &Tensor,
    params: &SasamgParams,
    beta: Percentile,
) -> Result<(SimilarityMatrix, SimilarityAdjacency)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = SasamgVars {
        w_q: tape.constant(params.w_q.clone()),
        w_k: tape.constant(params.w_k.clone()),
    };
    let out = sasamg_forward(&mut tape, xv, &vars, beta)?;
    Ok((
        SimilarityMatrix(tape.value(out.s).clone()),
        SimilarityAdjacency {
            a: tape.value(out.a).clone(),
            threshold: out.threshold,
            beta,
        },
    ))
}

/// Applies erasure to an already computed similarity matrix.
pub fn erase_matrix(s: &SimilarityMatrix, beta: Percentile) -> Result<SimilarityAdjacency> {
    let threshold = percentile_threshold(s.0.data(), beta)?;
    let data = s
        .0
        .data()
        .iter()
        .map(|&v| if v > threshold || v.is_nan() { v } else { 0.0 })
        .collect();
    Ok(SimilarityAdjacency {
        a: Tensor::new(s.0.shape().to_vec(), data)?,
        threshold,
        beta,
    })
}
