//! Chebyshev polynomial graph convolution.
//!
//! The filter is a degree-K polynomial in the rescaled Laplacian, evaluated
//! by the three-term recurrence instead of an eigendecomposition:
//! B0 = X, B1 = L~ X, B_k = 2 L~ B_{k-1} - B_{k-2}, and the layer output is
//! sum_k B_k W_k (+ bias). The Laplacian is a constant; only the W_k and the
//! bias train.

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::matrix::Matrix;
use rand::Rng;

/// One spectral convolution layer: K+1 weight matrices plus optional bias.
#[derive(Debug, Clone)]
pub struct ChebLayer {
    pub order: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    /// weights[k] multiplies the k-th Chebyshev basis term; in_dim x out_dim.
    pub weights: Vec<Matrix>,
    /// 1 x out_dim, broadcast per row. Ignored when `use_bias` is false.
    pub bias: Matrix,
    pub use_bias: bool,
}

/// Tape nodes for one registration of a [`ChebLayer`]'s parameters.
pub struct ChebNodes {
    pub weights: Vec<NodeId>,
    pub bias: Option<NodeId>,
}

impl ChebLayer {
    /// Glorot-style uniform init for each weight matrix; zero bias.
    pub fn init(order: usize, in_dim: usize, out_dim: usize, use_bias: bool, rng: &mut impl Rng) -> Self {
        let s = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..=order)
            .map(|_| random_uniform(in_dim, out_dim, s, rng))
            .collect();
        ChebLayer {
            order,
            in_dim,
            out_dim,
            weights,
            bias: Matrix::zeros(1, out_dim),
            use_bias,
        }
    }

    pub fn register(&self, tape: &mut Tape) -> ChebNodes {
        let weights = self.weights.iter().map(|w| tape.leaf(w.clone())).collect();
        let bias = if self.use_bias { Some(tape.leaf(self.bias.clone())) } else { None };
        ChebNodes { weights, bias }
    }

    /// Trainable parameters in a fixed order (weights by degree, then bias).
    pub fn params(&self) -> Vec<&Matrix> {
        let mut p: Vec<&Matrix> = self.weights.iter().collect();
        if self.use_bias {
            p.push(&self.bias);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p: Vec<&mut Matrix> = self.weights.iter_mut().collect();
        if self.use_bias {
            p.push(&mut self.bias);
        }
        p
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names: Vec<String> =
            (0..self.weights.len()).map(|k| format!("{prefix}.w{k}")).collect();
        if self.use_bias {
            names.push(format!("{prefix}.bias"));
        }
        names
    }
}

impl ChebNodes {
    /// Node ids in the same order as [`ChebLayer::params`].
    pub fn param_nodes(&self) -> Vec<NodeId> {
        let mut ids = self.weights.clone();
        ids.extend(self.bias);
        ids
    }
}

pub(crate) fn random_uniform(rows: usize, cols: usize, s: f64, rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = rng.gen_range(-s..s);
    }
    m
}

/// Chebyshev basis terms B_0..B_K for input `x` on the graph with rescaled
/// Laplacian node `lt` (a tape constant; it receives no gradient).
pub fn cheb_basis(tape: &mut Tape, lt: NodeId, x: NodeId, order: usize) -> Result<Vec<NodeId>> {
    let mut basis = Vec::with_capacity(order + 1);
    basis.push(x);
    if order >= 1 {
        basis.push(tape.matmul(lt, x)?);
    }
    for k in 2..=order {
        let prod = tape.matmul(lt, basis[k - 1])?;
        let doubled = tape.scale(prod, 2.0);
        basis.push(tape.sub(doubled, basis[k - 2])?);
    }
    Ok(basis)
}

/// Layer output sum_k B_k W_k (+ bias), before any activation.
pub fn cheb_forward(
    tape: &mut Tape,
    nodes: &ChebNodes,
    lt: NodeId,
    x: NodeId,
) -> Result<NodeId> {
    let basis = cheb_basis(tape, lt, x, nodes.weights.len() - 1)?;
    let mut acc = tape.matmul(basis[0], nodes.weights[0])?;
    for k in 1..nodes.weights.len() {
        let term = tape.matmul(basis[k], nodes.weights[k])?;
        acc = tape.add(acc, term)?;
    }
    if let Some(bias) = nodes.bias {
        acc = tape.add_row_broadcast(acc, bias)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::graph::{build_graph, MetaFeature};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn order_zero_basis_is_input_only() {
        let mut tape = Tape::new();
        let lt = tape.constant(Matrix::identity(3).scale(-1.0));
        let x = tape.constant(Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]));
        let basis = cheb_basis(&mut tape, lt, x, 0).unwrap();
        assert_eq!(basis.len(), 1);
        assert_eq!(basis[0], x);
    }

    #[test]
    fn two_node_recurrence_hand_values() {
        let lt_m = Matrix::from_rows(&[vec![0.0, -1.0], vec![-1.0, 0.0]]);
        let mut tape = Tape::new();
        let lt = tape.constant(lt_m);
        let x = tape.constant(Matrix::from_rows(&[vec![1.0], vec![0.0]]));
        let basis = cheb_basis(&mut tape, lt, x, 2).unwrap();
        assert_eq!(tape.value(basis[1]), &Matrix::from_rows(&[vec![0.0], vec![-1.0]]));
        assert_eq!(tape.value(basis[2]), &Matrix::from_rows(&[vec![1.0], vec![0.0]]));
    }

    #[test]
    fn edgeless_basis_alternates_sign() {
        // Edgeless graph rescales to -I, so B_k = (-1)^k X.
        let mut tape = Tape::new();
        let lt = tape.constant(Matrix::identity(4).scale(-1.0));
        let xm = Matrix::from_rows(&[
            vec![1.0, 2.0],
            vec![-1.0, 0.5],
            vec![3.0, 0.0],
            vec![0.25, -4.0],
        ]);
        let x = tape.constant(xm.clone());
        let basis = cheb_basis(&mut tape, lt, x, 3).unwrap();
        assert_eq!(tape.value(basis[1]), &xm.scale(-1.0));
        assert_eq!(tape.value(basis[2]), &xm);
        assert_eq!(tape.value(basis[3]), &xm.scale(-1.0));
    }

    #[test]
    fn basis_matches_spectral_oracle() {
        // T_k(lambda) = cos(k arccos lambda) through a dense eigendecomposition.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..10 {
            use rand::Rng;
            let n = rng.gen_range(4..=20);
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..6.0)).collect();
            let g = build_graph(&MetaFeature::new("t", values, 1.5).unwrap()).unwrap();
            let xm = random_uniform(n, 3, 1.0, &mut rng);

            let mut tape = Tape::new();
            let lt = tape.constant(g.rescaled.clone());
            let x = tape.constant(xm.clone());
            let basis = cheb_basis(&mut tape, lt, x, 5).unwrap();

            let dm = nalgebra::DMatrix::from_fn(n, n, |i, j| g.rescaled.get(i, j));
            let eig = dm.clone().symmetric_eigen();
            for (k, node) in basis.iter().enumerate() {
                // T_k on the spectrum, mapped back: Q diag(T_k(lambda)) Q^T X.
                let tk = nalgebra::DMatrix::from_diagonal(&eig.eigenvalues.map(|l| {
                    let l = l.clamp(-1.0, 1.0);
                    (k as f64 * l.acos()).cos()
                }));
                let tk_full = &eig.eigenvectors * tk * eig.eigenvectors.transpose();
                let xd = nalgebra::DMatrix::from_fn(n, 3, |i, j| xm.get(i, j));
                let expected = tk_full * xd;
                let got = tape.value(*node);
                let mut max_err = 0.0_f64;
                for i in 0..n {
                    for j in 0..3 {
                        max_err = max_err.max((got.get(i, j) - expected[(i, j)]).abs());
                    }
                }
                assert!(max_err <= 1e-9, "trial {trial} k={k}: max err {max_err}");
            }
        }
    }

    #[test]
    fn identity_filter_returns_input() {
        let mut layer = ChebLayer::init(0, 2, 2, true, &mut ChaCha8Rng::seed_from_u64(1));
        layer.weights[0] = Matrix::identity(2);
        layer.bias = Matrix::zeros(1, 2);

        let xm = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let mut tape = Tape::new();
        let lt = tape.constant(Matrix::identity(2).scale(-1.0));
        let x = tape.constant(xm.clone());
        let nodes = layer.register(&mut tape);
        let out = cheb_forward(&mut tape, &nodes, lt, x).unwrap();
        assert_eq!(tape.value(out), &xm);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut layer = ChebLayer::init(2, 3, 4, true, &mut ChaCha8Rng::seed_from_u64(2));
        for w in &mut layer.weights {
            *w = Matrix::zeros(3, 4);
        }
        let g = build_graph(&MetaFeature::new("t", vec![1.0, 1.0, 2.0], 0.0).unwrap()).unwrap();
        let mut tape = Tape::new();
        let lt = tape.constant(g.rescaled.clone());
        let x = tape.constant(Matrix::filled(3, 3, 2.5));
        let nodes = layer.register(&mut tape);
        let out = cheb_forward(&mut tape, &nodes, lt, x).unwrap();
        assert_eq!(tape.value(out), &Matrix::zeros(3, 4));
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = build_graph(&MetaFeature::new("t", vec![1.0, 1.5, 3.0, 1.2], 0.6).unwrap())
            .unwrap();
        let xm = random_uniform(4, 3, 1.0, &mut rng);
        let layer = ChebLayer::init(2, 3, 2, true, &mut rng);

        let params: Vec<Matrix> = layer
            .weights
            .iter()
            .cloned()
            .chain(std::iter::once(layer.bias.clone()))
            .collect();
        let loss_fn = |params: &[Matrix]| {
            let mut tape = Tape::new();
            let weights = params[..3].iter().map(|w| tape.leaf(w.clone())).collect();
            let bias = Some(tape.leaf(params[3].clone()));
            let nodes = ChebNodes { weights, bias };
            let lt = tape.constant(g.rescaled.clone());
            let x = tape.constant(xm.clone());
            let out = cheb_forward(&mut tape, &nodes, lt, x)?;
            let out = tape.relu(out);
            let loss = tape.sum(out);
            tape.backward(loss)?;
            let grads = nodes
                .weights
                .iter()
                .chain(nodes.bias.iter())
                .map(|id| tape.grad(*id).clone())
                .collect();
            Ok((tape.value(loss).scalar_value(), grads))
        };
        let report =
            grad_check(loss_fn, &params, &["w0", "w1", "w2", "bias"], 1e-5, 1e-6).unwrap();
        assert!(report.all_within_tol(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values = vec![1.0, 2.0, 1.4, 3.0, 2.2];
        let g = build_graph(&MetaFeature::new("t", values.clone(), 0.7).unwrap()).unwrap();
        let xm = random_uniform(5, 2, 1.0, &mut rng);
        let layer = ChebLayer::init(3, 2, 2, true, &mut rng);

        let run = |lt_m: &Matrix, x_m: &Matrix| -> Matrix {
            let mut tape = Tape::new();
            let lt = tape.constant(lt_m.clone());
            let x = tape.constant(x_m.clone());
            let nodes = layer.register(&mut tape);
            let out = cheb_forward(&mut tape, &nodes, lt, x).unwrap();
            tape.value(out).clone()
        };

        let base = run(&g.rescaled, &xm);

        let perm = [3usize, 0, 4, 2, 1];
        let mut lt_p = Matrix::zeros(5, 5);
        let mut x_p = Matrix::zeros(5, 2);
        for a in 0..5 {
            for b in 0..5 {
                lt_p.set(a, b, g.rescaled.get(perm[a], perm[b]));
            }
            for c in 0..2 {
                x_p.set(a, c, xm.get(perm[a], c));
            }
        }
        let permuted = run(&lt_p, &x_p);
        for a in 0..5 {
            for c in 0..2 {
                assert!(
                    (permuted.get(a, c) - base.get(perm[a], c)).abs() <= 1e-10,
                    "row {a} col {c}"
                );
            }
        }
    }
}
