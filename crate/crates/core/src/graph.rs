//! Graph propagation over the similarity adjacency, and the two-branch block
//! built around it.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::sasamg::{sasamg_forward, Percentile, SasamgParams, SasamgVars};
use crate::tensor::Tensor;

/// Two-layer perceptron `relu(x·W1 + b1)·W2 + b2` that merges the branches.
#[derive(Clone, Debug, PartialEq)]
pub struct FfdParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfdParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: Tensor::xavier_uniform(&[channels, hidden], channels, hidden, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::xavier_uniform(&[hidden, channels], hidden, channels, rng),
            b2: Tensor::zeros(&[channels]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfdVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Parameters of one block over `N` patches with `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub p_pos: Tensor,
    pub branch_a: SasamgParams,
    pub branch_b: SasamgParams,
    pub w_gn_a: Tensor,
    pub w_gn_b: Tensor,
    pub ffd: FfdParams,
}

/// Positional encodings start from N(0, 0.02²).
pub const P_POS_STD: f64 = 0.02;

impl BlockParams {
    pub fn init<R: Rng + ?Sized>(
        n_patches: usize,
        channels: usize,
        ffd_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels % 2 != 0 || channels == 0 {
            return Err(Error::Config(format!(
                "block channels must be even and positive, got {channels}"
            )));
        }
        let half = channels / 2;
        Ok(Self {
            p_pos: Tensor::normal(&[n_patches, channels], 0.0, P_POS_STD, rng),
            branch_a: SasamgParams::init(half, rng),
            branch_b: SasamgParams::init(half, rng),
            w_gn_a: Tensor::xavier_uniform(&[half, half], half, half, rng),
            w_gn_b: Tensor::xavier_uniform(&[half, half], half, half, rng),
            ffd: FfdParams::init(channels, ffd_hidden, rng),
        })
    }

    /// `(N, C)` the block accepts.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let (n, c) = self.p_pos.dims2()?;
        if c % 2 != 0 {
            return Err(Error::shape(format!("odd channel count {c}")));
        }
        Ok((n, c))
    }

    /// Every tensor under its dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("p_pos", &self.p_pos),
            ("branch_a.w_q", &self.branch_a.w_q),
            ("branch_a.w_k", &self.branch_a.w_k),
            ("branch_b.w_q", &self.branch_b.w_q),
            ("branch_b.w_k", &self.branch_b.w_k),
            ("w_gn_a", &self.w_gn_a),
            ("w_gn_b", &self.w_gn_b),
            ("ffd.w1", &self.ffd.w1),
            ("ffd.b1", &self.ffd.b1),
            ("ffd.w2", &self.ffd.w2),
            ("ffd.b2", &self.ffd.b2),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("p_pos", &mut self.p_pos),
            ("branch_a.w_q", &mut self.branch_a.w_q),
            ("branch_a.w_k", &mut self.branch_a.w_k),
            ("branch_b.w_q", &mut self.branch_b.w_q),
            ("branch_b.w_k", &mut self.branch_b.w_k),
            ("w_gn_a", &mut self.w_gn_a),
            ("w_gn_b", &mut self.w_gn_b),
            ("ffd.w1", &mut self.ffd.w1),
            ("ffd.b1", &mut self.ffd.b1),
            ("ffd.w2", &mut self.ffd.w2),
            ("ffd.b2", &mut self.ffd.b2),
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> BlockVars {
        BlockVars {
            p_pos: tape.param(self.p_pos.clone()),
            branch_a: self.branch_a.bind(tape),
            branch_b: self.branch_b.bind(tape),
            w_gn_a: tape.param(self.w_gn_a.clone()),
            w_gn_b: tape.param(self.w_gn_b.clone()),
            ffd: FfdVars {
                w1: tape.param(self.ffd.w1.clone()),
                b1: tape.param(self.ffd.b1.clone()),
                w2: tape.param(self.ffd.w2.clone()),
                b2: tape.param(self.ffd.b2.clone()),
            },
        }
    }
}

/// [`BlockParams`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub p_pos: Var,
    pub branch_a: SasamgVars,
    pub branch_b: SasamgVars,
    pub w_gn_a: Var,
    pub w_gn_b: Var,
    pub ffd: FfdVars,
}

impl BlockVars {
    /// Same order as [`BlockParams::named`].
    pub fn vars(&self) -> [Var; 11] {
        [
            self.p_pos,
            self.branch_a.w_q,
            self.branch_a.w_k,
            self.branch_b.w_q,
            self.branch_b.w_k,
            self.w_gn_a,
            self.w_gn_b,
            self.ffd.w1,
            self.ffd.b1,
            self.ffd.w2,
            self.ffd.b2,
        ]
    }
}

/// Intermediate values of one branch, kept for diagnostics.
#[derive(Clone, Copy, Debug)]
pub struct BranchTrace {
    pub s: Var,
    pub a: Var,
    pub threshold: f64,
    pub output: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockTrace {
    pub input: Var,
    pub branch_a: BranchTrace,
    pub branch_b: BranchTrace,
    pub output: Var,
}

pub fn add_positional(tape: &mut Tape, x: Var, p_pos: Var) -> Result<Var> {
    tape.add(x, p_pos)
}

/// `relu(A · h · Wᵀ)`: row `i` sums `A[i][j] · W h_j` over the columns `j`
/// that survived erasure. A fully erased row maps to zero.
pub fn graph_propagate(tape: &mut Tape, h: Var, a: Var, w: Var) -> Result<Var> {
    let (n, cb) = tape.value(h).dims2()?;
    let (an, am) = tape.value(a).dims2()?;
    let (wr, wc) = tape.value(w).dims2()?;
    if an != n || am != n || wr != cb || wc != cb {
        return Err(Error::shape(format!(
            "graph propagation of features {:?} with adjacency {:?} and weight {:?}",
            tape.value(h).shape(),
            tape.value(a).shape(),
            tape.value(w).shape()
        )));
    }
    let wt = tape.transpose(w)?;
    let hw = tape.matmul(h, wt)?;
    let agg = tape.matmul(a, hw)?;
    Ok(tape.relu(agg))
}

fn branch(
    tape: &mut Tape,
    h: Var,
    sasamg: &SasamgVars,
    w_gn: Var,
    beta: Percentile,
) -> Result<BranchTrace> {
    let adj = sasamg_forward(tape, h, sasamg, beta)?;
    let output = graph_propagate(tape, h, adj.a, w_gn)?;
    Ok(BranchTrace {
        s: adj.s,
        a: adj.a,
        threshold: adj.threshold,
        output,
    })
}

/// One block: positional encoding, channel split, per-branch adjacency and
/// propagation, channel concatenation, feed-forward merge.
pub fn dsamgn_block(
    tape: &mut Tape,
    x: Var,
    params: &BlockVars,
    beta: Percentile,
    residual: bool,
) -> Result<BlockTrace> {
    let (_, c) = tape.value(x).dims2()?;
    if c % 2 != 0 {
        return Err(Error::shape(format!(
            "block input needs an even channel count, got {c}"
        )));
    }
    let pos = add_positional(tape, x, params.p_pos)?;
    let halves = tape.split_channels(pos, 2)?;
    let branch_a = branch(tape, halves[0], &params.branch_a, params.w_gn_a, beta)?;
    let branch_b = branch(tape, halves[1], &params.branch_b, params.w_gn_b, beta)?;
    let merged = tape.concat_cols(&[branch_a.output, branch_b.output])?;
    let hidden = tape.matmul(merged, params.ffd.w1)?;
    let hidden = tape.add_row_vector(hidden, params.ffd.b1)?;
    let hidden = tape.relu(hidden);
    let out = tape.matmul(hidden, params.ffd.w2)?;
    let mut output = tape.add_row_vector(out, params.ffd.b2)?;
    if residual {
        output = tape.add(output, x)?;
    }
    Ok(BlockTrace {
        input: x,
        branch_a,
        branch_b,
        output,
    })
}

/// Applies the blocks in order; returns one trace per block.
pub fn stack_blocks(
    tape: &mut Tape,
    x: Var,
    blocks: &[BlockVars],
    beta: Percentile,
    residual: bool,
) -> Result<Vec<BlockTrace>> {
    if blocks.is_empty() {
        return Err(Error::Config("a block stack needs at least one block".into()));
    }
    let mut traces = Vec::with_capacity(blocks.len());
    let mut h = x;
    for block in blocks {
        let trace = dsamgn_block(tape, h, block, beta, residual)?;
        h = trace.output;
        traces.push(trace);
    }
    Ok(traces)
}
