//! A standard LSTM cell on the autodiff tape.
//!
//! Gates follow the usual formulation: input/forget/output gates are
//! sigmoids of affine maps of (x, h), the candidate is a tanh, and
//! c' = f*c + i*g, h' = o*tanh(c'). The forget-gate bias starts at 1 so the
//! cell keeps state early in training.

use crate::autodiff::{NodeId, Tape};
use crate::cheb::random_uniform;
use crate::error::Result;
use crate::matrix::Matrix;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Input-to-hidden weights, one per gate (i, f, o, g); input_dim x hidden_dim.
    pub w_i: Matrix,
    pub w_f: Matrix,
    pub w_o: Matrix,
    pub w_g: Matrix,
    /// Hidden-to-hidden weights; hidden_dim x hidden_dim.
    pub u_i: Matrix,
    pub u_f: Matrix,
    pub u_o: Matrix,
    pub u_g: Matrix,
    /// Per-gate biases; 1 x hidden_dim.
    pub b_i: Matrix,
    pub b_f: Matrix,
    pub b_o: Matrix,
    pub b_g: Matrix,
}

pub struct LstmNodes {
    pub w_i: NodeId,
    pub w_f: NodeId,
    pub w_o: NodeId,
    pub w_g: NodeId,
    pub u_i: NodeId,
    pub u_f: NodeId,
    pub u_o: NodeId,
    pub u_g: NodeId,
    pub b_i: NodeId,
    pub b_f: NodeId,
    pub b_o: NodeId,
    pub b_g: NodeId,
}

impl LstmCell {
    /// Uniform(-s, s) weights with s = 1/sqrt(hidden_dim); forget bias 1,
    /// other biases 0.
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (hidden_dim as f64).sqrt();
        let mut w = |r: usize| random_uniform(r, hidden_dim, s, rng);
        LstmCell {
            input_dim,
            hidden_dim,
            w_i: w(input_dim),
            w_f: w(input_dim),
            w_o: w(input_dim),
            w_g: w(input_dim),
            u_i: w(hidden_dim),
            u_f: w(hidden_dim),
            u_o: w(hidden_dim),
            u_g: w(hidden_dim),
            b_i: Matrix::zeros(1, hidden_dim),
            b_f: Matrix::filled(1, hidden_dim, 1.0),
            b_o: Matrix::zeros(1, hidden_dim),
            b_g: Matrix::zeros(1, hidden_dim),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> LstmNodes {
        LstmNodes {
            w_i: tape.leaf(self.w_i.clone()),
            w_f: tape.leaf(self.w_f.clone()),
            w_o: tape.leaf(self.w_o.clone()),
            w_g: tape.leaf(self.w_g.clone()),
            u_i: tape.leaf(self.u_i.clone()),
            u_f: tape.leaf(self.u_f.clone()),
            u_o: tape.leaf(self.u_o.clone()),
            u_g: tape.leaf(self.u_g.clone()),
            b_i: tape.leaf(self.b_i.clone()),
            b_f: tape.leaf(self.b_f.clone()),
            b_o: tape.leaf(self.b_o.clone()),
            b_g: tape.leaf(self.b_g.clone()),
        }
    }

    /// Trainable parameters in a fixed order (w_*, u_*, b_* by gate i/f/o/g).
    pub fn params(&self) -> Vec<&Matrix> {
        vec![
            &self.w_i, &self.w_f, &self.w_o, &self.w_g,
            &self.u_i, &self.u_f, &self.u_o, &self.u_g,
            &self.b_i, &self.b_f, &self.b_o, &self.b_g,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.w_i, &mut self.w_f, &mut self.w_o, &mut self.w_g,
            &mut self.u_i, &mut self.u_f, &mut self.u_o, &mut self.u_g,
            &mut self.b_i, &mut self.b_f, &mut self.b_o, &mut self.b_g,
        ]
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        ["w_i", "w_f", "w_o", "w_g", "u_i", "u_f", "u_o", "u_g", "b_i", "b_f", "b_o", "b_g"]
            .iter()
            .map(|n| format!("{prefix}.{n}"))
            .collect()
    }
}

impl LstmNodes {
    /// Node ids in the same order as [`LstmCell::params`].
    pub fn param_nodes(&self) -> Vec<NodeId> {
        vec![
            self.w_i, self.w_f, self.w_o, self.w_g,
            self.u_i, self.u_f, self.u_o, self.u_g,
            self.b_i, self.b_f, self.b_o, self.b_g,
        ]
    }
}

/// One cell update. `x` is n x input_dim; `h` and `c` are n x hidden_dim.
/// Returns (h', c').
pub fn lstm_step(
    tape: &mut Tape,
    nodes: &LstmNodes,
    x: NodeId,
    h: NodeId,
    c: NodeId,
) -> Result<(NodeId, NodeId)> {
    let gate = |tape: &mut Tape, w: NodeId, u: NodeId, b: NodeId| -> Result<NodeId> {
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(h, u)?;
        let pre = tape.add(xw, hu)?;
        tape.add_row_broadcast(pre, b)
    };
    let i_pre = gate(tape, nodes.w_i, nodes.u_i, nodes.b_i)?;
    let f_pre = gate(tape, nodes.w_f, nodes.u_f, nodes.b_f)?;
    let o_pre = gate(tape, nodes.w_o, nodes.u_o, nodes.b_o)?;
    let g_pre = gate(tape, nodes.w_g, nodes.u_g, nodes.b_g)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let o = tape.sigmoid(o_pre);
    let g = tape.tanh(g_pre);

    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let c_act = tape.tanh(c_next);
    let h_next = tape.mul(o, c_act)?;
    Ok((h_next, c_next))
}
