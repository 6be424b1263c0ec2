//! Per-graph recurrent refinement branch.
//!
//! Each graph gets its own branch: a Chebyshev convolution summarizes the
//! input matrix over the graph, an LSTM consumes that summary for a fixed
//! number of steps, and each step emits an additive correction through a
//! zero-initialized linear head. Because the head starts at zero, a fresh
//! branch reproduces its input exactly.
//!
//! In the default mode the convolution runs once on the original input and
//! the LSTM re-reads the same summary every step, so the unroll does not
//! feed its own output back. The autoregressive variant recomputes the
//! convolution from the partially refined matrix at every step.

use crate::autodiff::{NodeId, Tape};
use crate::cheb::{cheb_forward, ChebLayer, ChebNodes};
use crate::error::Result;
use crate::lstm::{lstm_step, LstmCell, LstmNodes};
use crate::matrix::Matrix;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct RecurrentBranch {
    pub cheb: ChebLayer,
    pub lstm: LstmCell,
    /// hidden_dim x data_dim output head; zero at init.
    pub w_out: Matrix,
    /// 1 x data_dim output bias; zero at init.
    pub b_out: Matrix,
}

pub struct BranchNodes {
    pub cheb: ChebNodes,
    pub lstm: LstmNodes,
    pub w_out: NodeId,
    pub b_out: NodeId,
}

impl RecurrentBranch {
    pub fn init(
        data_dim: usize,
        hidden_dim: usize,
        order: usize,
        use_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        RecurrentBranch {
            cheb: ChebLayer::init(order, data_dim, hidden_dim, use_bias, rng),
            lstm: LstmCell::init(hidden_dim, hidden_dim, rng),
            w_out: Matrix::zeros(hidden_dim, data_dim),
            b_out: Matrix::zeros(1, data_dim),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> BranchNodes {
        BranchNodes {
            cheb: self.cheb.register(tape),
            lstm: self.lstm.register(tape),
            w_out: tape.leaf(self.w_out.clone()),
            b_out: tape.leaf(self.b_out.clone()),
        }
    }

    /// Trainable parameters in a fixed order (conv, cell, output head).
    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = self.cheb.params();
        p.extend(self.lstm.params());
        p.push(&self.w_out);
        p.push(&self.b_out);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.cheb.params_mut();
        p.extend(self.lstm.params_mut());
        p.push(&mut self.w_out);
        p.push(&mut self.b_out);
        p
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = self.cheb.param_names(&format!("{prefix}.cheb"));
        names.extend(self.lstm.param_names(&format!("{prefix}.lstm")));
        names.push(format!("{prefix}.w_out"));
        names.push(format!("{prefix}.b_out"));
        names
    }
}

impl BranchNodes {
    /// Node ids in the same order as [`RecurrentBranch::params`].
    pub fn param_nodes(&self) -> Vec<NodeId> {
        let mut ids = self.cheb.param_nodes();
        ids.extend(self.lstm.param_nodes());
        ids.push(self.w_out);
        ids.push(self.b_out);
        ids
    }
}

/// Unroll one branch for `steps` updates and return the refined matrix node.
///
/// `lt` is the graph's rescaled Laplacian as a tape constant and `z` the
/// n x data_dim input. With `autoregressive` false the graph convolution is
/// evaluated once on `z`; otherwise it is re-evaluated on the running
/// accumulator before every step.
pub fn branch_forward(
    tape: &mut Tape,
    nodes: &BranchNodes,
    lt: NodeId,
    z: NodeId,
    steps: usize,
    autoregressive: bool,
) -> Result<NodeId> {
    let n = tape.value(z).rows();
    let hidden = tape.value(nodes.lstm.w_i).cols();

    let pinned = if autoregressive {
        None
    } else {
        let pre = cheb_forward(tape, &nodes.cheb, lt, z)?;
        Some(tape.relu(pre))
    };

    let mut acc = z;
    let mut h = tape.constant(Matrix::zeros(n, hidden));
    let mut c = tape.constant(Matrix::zeros(n, hidden));
    for _ in 0..steps {
        let q = match pinned {
            Some(q) => q,
            None => {
                let pre = cheb_forward(tape, &nodes.cheb, lt, acc)?;
                tape.relu(pre)
            }
        };
        let (h2, c2) = lstm_step(tape, &nodes.lstm, q, h, c)?;
        h = h2;
        c = c2;
        let delta = tape.matmul(h, nodes.w_out)?;
        let delta = tape.add_row_broadcast(delta, nodes.b_out)?;
        acc = tape.add(acc, delta)?;
    }
    Ok(acc)
}
