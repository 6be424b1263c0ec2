//! Row-level attention that fuses the per-graph branch outputs.
//!
//! One scoring head is shared by all branches: row r of branch i gets the
//! scalar score tanh(z_r W_a) v, the scores are softmaxed across branches
//! per row, and the fused matrix is the resulting convex combination of the
//! branch rows. Every fused entry therefore stays inside the range spanned
//! by the branch values for that entry.

use crate::autodiff::{NodeId, Tape};
use crate::cheb::random_uniform;
use crate::error::{MgmcError, Result};
use crate::matrix::Matrix;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct FusionHead {
    pub data_dim: usize,
    pub a_dim: usize,
    /// data_dim x a_dim projection shared across branches.
    pub w_a: Matrix,
    /// a_dim x 1 scoring vector.
    pub v: Matrix,
}

pub struct FusionNodes {
    pub w_a: NodeId,
    pub v: NodeId,
}

/// Outputs of [`fuse`]: the blended matrix and the n x I attention weights.
pub struct FusedOutput {
    pub fused: NodeId,
    pub attention: NodeId,
}

impl FusionHead {
    pub fn init(data_dim: usize, a_dim: usize, rng: &mut impl Rng) -> Self {
        let s_w = (6.0 / (data_dim + a_dim) as f64).sqrt();
        let s_v = (6.0 / (a_dim + 1) as f64).sqrt();
        FusionHead {
            data_dim,
            a_dim,
            w_a: random_uniform(data_dim, a_dim, s_w, rng),
            v: random_uniform(a_dim, 1, s_v, rng),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> FusionNodes {
        FusionNodes {
            w_a: tape.leaf(self.w_a.clone()),
            v: tape.leaf(self.v.clone()),
        }
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![&self.w_a, &self.v]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w_a, &mut self.v]
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        vec![format!("{prefix}.w_a"), format!("{prefix}.v")]
    }
}

impl FusionNodes {
    /// Node ids in the same order as [`FusionHead::params`].
    pub fn param_nodes(&self) -> Vec<NodeId> {
        vec![self.w_a, self.v]
    }
}

/// Blend the branch outputs into one matrix with shared-head attention.
pub fn fuse(tape: &mut Tape, nodes: &FusionNodes, branches: &[NodeId]) -> Result<FusedOutput> {
    if branches.is_empty() {
        return Err(MgmcError::Contract("fusion requires at least one branch".into()));
    }
    let mut scores = None;
    for &z in branches {
        let proj = tape.matmul(z, nodes.w_a)?;
        let proj = tape.tanh(proj);
        let score = tape.matmul(proj, nodes.v)?;
        scores = Some(match scores {
            None => score,
            Some(prev) => tape.concat_cols(prev, score)?,
        });
    }
    let attention = tape.rowwise_softmax(scores.expect("non-empty branches"));

    let mut fused = None;
    for (i, &z) in branches.iter().enumerate() {
        let alpha_i = tape.slice_cols(attention, i, i + 1)?;
        let weighted = tape.mul_col_broadcast(z, alpha_i)?;
        fused = Some(match fused {
            None => weighted,
            Some(prev) => tape.add(prev, weighted)?,
        });
    }
    Ok(FusedOutput { fused: fused.expect("non-empty branches"), attention })
}
