//! Reference imputers and classifiers used for comparison: mean imputation,
//! k-nearest-neighbour imputation, softmax (multinomial logistic) regression,
//! and a single-graph Chebyshev-convolution classifier on pre-imputed
//! features.
//!
//! Both imputers preserve observed entries bitwise and take their statistics
//! from training rows only, so evaluation rows never leak into the fill
//! values.

use crate::autodiff::Tape;
use crate::cheb::{cheb_forward, ChebLayer};
use crate::error::{MgmcError, Result};
use crate::graph::PopulationGraph;
use crate::matrix::Matrix;
use crate::train::AdamState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// ── Imputers ────────────────────────────────────────────────────────────────

/// A feature matrix with its missing entries filled in.
#[derive(Debug, Clone)]
pub struct ImputedMatrix {
    pub x_filled: Matrix,
    /// 1 where the value was imputed, 0 where it came from the input.
    pub imputed: Matrix,
}

fn check_impute_inputs(x: &Matrix, observed: &Matrix, train_rows: &[bool]) -> Result<()> {
    if !observed.same_shape(x) {
        return Err(MgmcError::Dimension(format!(
            "mask is {:?} but matrix is {:?}",
            observed.shape(),
            x.shape()
        )));
    }
    if train_rows.len() != x.rows() {
        return Err(MgmcError::Contract(format!(
            "train-row flags cover {} rows but matrix has {}",
            train_rows.len(),
            x.rows()
        )));
    }
    if observed.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(MgmcError::Contract("observation mask entries must be 0 or 1".into()));
    }
    Ok(())
}

/// Observed-training-entry mean of every column; columns with no observed
/// training entry fall back to 0 (the standardized global mean) with a log
/// message.
fn train_column_means(x: &Matrix, observed: &Matrix, train_rows: &[bool]) -> Vec<f64> {
    let mut means = vec![0.0; x.cols()];
    for c in 0..x.cols() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for r in 0..x.rows() {
            if train_rows[r] && observed.get(r, c) == 1.0 {
                sum += x.get(r, c);
                count += 1;
            }
        }
        if count == 0 {
            log::warn!("column {c} has no observed training entries; imputing 0");
        } else {
            means[c] = sum / count as f64;
        }
    }
    means
}

/// Fill every missing entry with its column's observed-training-row mean.
pub fn mean_impute(x: &Matrix, observed: &Matrix, train_rows: &[bool]) -> Result<ImputedMatrix> {
    check_impute_inputs(x, observed, train_rows)?;
    let means = train_column_means(x, observed, train_rows);
    let mut x_filled = x.clone();
    let mut imputed = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            if observed.get(r, c) == 0.0 {
                x_filled.set(r, c, means[c]);
                imputed.set(r, c, 1.0);
            }
        }
    }
    Ok(ImputedMatrix { x_filled, imputed })
}

/// Mean squared difference over mutually observed coordinates; `None` when
/// the rows share no observed coordinate.
fn overlap_distance(x: &Matrix, observed: &Matrix, a: usize, b: usize) -> Option<f64> {
    let mut ss = 0.0;
    let mut overlap = 0usize;
    for c in 0..x.cols() {
        if observed.get(a, c) == 1.0 && observed.get(b, c) == 1.0 {
            let d = x.get(a, c) - x.get(b, c);
            ss += d * d;
            overlap += 1;
        }
    }
    (overlap > 0).then(|| ss / overlap as f64)
}

/// Fill each missing entry (r, c) with the mean of column c over the k
/// nearest rows that observe c. Distance is Euclidean over mutually observed
/// coordinates, normalized by the overlap count; ties break by row index.
/// Entries with no usable neighbour fall back to the training-column mean.
pub fn knn_impute(
    x: &Matrix,
    observed: &Matrix,
    k: usize,
    train_rows: &[bool],
) -> Result<ImputedMatrix> {
    check_impute_inputs(x, observed, train_rows)?;
    if k == 0 {
        return Err(MgmcError::Config("k must be at least 1".into()));
    }
    let n = x.rows();
    let k = if k > n.saturating_sub(1) {
        log::warn!("k = {k} exceeds n - 1 = {}; clamping", n - 1);
        n - 1
    } else {
        k
    };
    let fallback = train_column_means(x, observed, train_rows);

    let mut x_filled = x.clone();
    let mut imputed = Matrix::zeros(n, x.cols());
    for r in 0..n {
        if (0..x.cols()).all(|c| observed.get(r, c) == 1.0) {
            continue;
        }
        // (distance, row) for every comparable other row, nearest first.
        let mut neighbours: Vec<(f64, usize)> = (0..n)
            .filter(|&s| s != r)
            .filter_map(|s| overlap_distance(x, observed, r, s).map(|d| (d, s)))
            .collect();
        neighbours.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

        for c in 0..x.cols() {
            if observed.get(r, c) == 1.0 {
                continue;
            }
            let mut sum = 0.0;
            let mut used = 0usize;
            for &(_, s) in &neighbours {
                if observed.get(s, c) == 1.0 {
                    sum += x.get(s, c);
                    used += 1;
                    if used == k {
                        break;
                    }
                }
            }
            let value = if used > 0 { sum / used as f64 } else { fallback[c] };
            x_filled.set(r, c, value);
            imputed.set(r, c, 1.0);
        }
    }
    Ok(ImputedMatrix { x_filled, imputed })
}

// ── Softmax regression ──────────────────────────────────────────────────────

/// Linear logits with a softmax link, trained by cross-entropy.
#[derive(Debug, Clone)]
pub struct SoftmaxRegression {
    pub w: Matrix,
    pub b: Matrix,
}

impl SoftmaxRegression {
    /// Zero weights: uniform probabilities before any training.
    pub fn zeros(num_features: usize, num_classes: usize) -> Self {
        Self { w: Matrix::zeros(num_features, num_classes), b: Matrix::zeros(1, num_classes) }
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        let mut out = features.matmul(&self.w)?;
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.get(r, c) + self.b.get(0, c);
                out.set(r, c, v);
            }
        }
        Ok(out)
    }

    /// Class probabilities, each row summing to 1.
    pub fn predict(&self, features: &Matrix) -> Result<Matrix> {
        let mut out = self.logits(features)?;
        for r in 0..out.rows() {
            crate::autodiff::softmax_row_in_place(out.row_mut(r));
        }
        Ok(out)
    }
}

/// Fit a softmax regression on the flagged training rows with full-batch
/// Adam. Rows outside `train_rows` contribute nothing to the fit.
pub fn softmax_regression(
    features: &Matrix,
    labels: &[usize],
    num_classes: usize,
    train_rows: &[bool],
    learning_rate: f64,
    epochs: usize,
) -> Result<SoftmaxRegression> {
    if labels.len() != features.rows() || train_rows.len() != features.rows() {
        return Err(MgmcError::Contract(format!(
            "features have {} rows but got {} labels / {} row flags",
            features.rows(),
            labels.len(),
            train_rows.len()
        )));
    }
    if num_classes < 2 {
        return Err(MgmcError::Data(format!("need at least 2 classes, got {num_classes}")));
    }
    let mut seen = vec![false; num_classes];
    let mut targets = Matrix::zeros(features.rows(), num_classes);
    for r in 0..features.rows() {
        if labels[r] >= num_classes {
            return Err(MgmcError::Data(format!(
                "label {} out of range for {num_classes} classes",
                labels[r]
            )));
        }
        if train_rows[r] {
            seen[labels[r]] = true;
            targets.set(r, labels[r], 1.0);
        }
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(MgmcError::Data("training rows contain fewer than 2 classes".into()));
    }

    let mut model = SoftmaxRegression::zeros(features.cols(), num_classes);
    let mut adam = AdamState::new(&[&model.w, &model.b]);
    for _ in 0..epochs {
        let mut tape = Tape::new();
        let w = tape.leaf(model.w.clone());
        let b = tape.leaf(model.b.clone());
        let x = tape.constant(features.clone());
        let wx = tape.matmul(x, w)?;
        let logits = tape.add_row_broadcast(wx, b)?;
        let loss = tape.masked_cross_entropy(logits, &targets, train_rows)?;
        tape.backward(loss)?;
        let grads = vec![tape.grad(w).clone(), tape.grad(b).clone()];
        adam.step(vec![&mut model.w, &mut model.b], &grads, learning_rate)?;
    }
    Ok(model)
}

// ── Graph-convolutional classifier ──────────────────────────────────────────

/// Settings for [`gcn_classifier`].
#[derive(Debug, Clone)]
pub struct GcnConfig {
    pub hidden_dim: usize,
    pub cheb_order: usize,
    pub cheb_bias: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            cheb_order: 3,
            cheb_bias: true,
            learning_rate: 0.01,
            epochs: 500,
            patience: 30,
            seed: 0,
        }
    }
}

/// One Chebyshev convolution layer with a ReLU, followed by a linear head.
#[derive(Debug, Clone)]
pub struct GcnClassifier {
    pub cheb: ChebLayer,
    pub w_out: Matrix,
    pub b_out: Matrix,
}

impl GcnClassifier {
    fn params(&self) -> Vec<&Matrix> {
        let mut out = self.cheb.params();
        out.push(&self.w_out);
        out.push(&self.b_out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.cheb.params_mut();
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    /// Logit tape for `features` under the graph's rescaled Laplacian;
    /// returns the logit node and the trainable leaves in `params` order.
    fn build(
        &self,
        tape: &mut Tape,
        features: &Matrix,
        rescaled: &Matrix,
    ) -> Result<(crate::autodiff::NodeId, Vec<crate::autodiff::NodeId>)> {
        let cheb_nodes = self.cheb.register(tape);
        let w_out = tape.leaf(self.w_out.clone());
        let b_out = tape.leaf(self.b_out.clone());
        let x = tape.constant(features.clone());
        let lt = tape.constant(rescaled.clone());
        let conv = cheb_forward(tape, &cheb_nodes, lt, x)?;
        let hidden = tape.relu(conv);
        let proj = tape.matmul(hidden, w_out)?;
        let logits = tape.add_row_broadcast(proj, b_out)?;
        let mut leaves = cheb_nodes.param_nodes();
        leaves.push(w_out);
        leaves.push(b_out);
        Ok((logits, leaves))
    }

    pub fn logits(&self, features: &Matrix, graph: &PopulationGraph) -> Result<Matrix> {
        let mut tape = Tape::new();
        let (logits, _) = self.build(&mut tape, features, &graph.rescaled)?;
        Ok(tape.value(logits).clone())
    }

    /// Class probabilities, each row summing to 1.
    pub fn predict(&self, features: &Matrix, graph: &PopulationGraph) -> Result<Matrix> {
        let mut out = self.logits(features, graph)?;
        for r in 0..out.rows() {
            crate::autodiff::softmax_row_in_place(out.row_mut(r));
        }
        Ok(out)
    }
}

/// A trained classifier with its model-selection score.
#[derive(Debug, Clone)]
pub struct GcnFit {
    pub classifier: GcnClassifier,
    /// Validation cross-entropy at the restored (best) epoch.
    pub best_val_ce: f64,
    pub epochs_run: usize,
}

/// Train a single-graph convolutional classifier with masked cross-entropy,
/// early stopping on validation cross-entropy, and best-epoch restoration.
/// `features` must already be imputed (no missing entries).
pub fn gcn_classifier(
    features: &Matrix,
    graph: &PopulationGraph,
    train_targets: &Matrix,
    train_rows: &[bool],
    val_targets: &Matrix,
    val_rows: &[bool],
    config: &GcnConfig,
) -> Result<GcnFit> {
    let n = features.rows();
    if train_targets.rows() != n
        || val_targets.rows() != n
        || train_rows.len() != n
        || val_rows.len() != n
        || graph.n != n
    {
        return Err(MgmcError::Contract("classifier inputs cover different row counts".into()));
    }
    if train_targets.cols() < 2 || train_targets.cols() != val_targets.cols() {
        return Err(MgmcError::Contract("targets must share a class dimension of at least 2".into()));
    }
    if config.hidden_dim == 0 || config.cheb_order == 0 || config.epochs == 0 {
        return Err(MgmcError::Config("hidden_dim, cheb_order, and epochs must be positive".into()));
    }
    if !val_rows.iter().any(|&v| v) {
        return Err(MgmcError::Data("no validation rows; early stopping needs some".into()));
    }
    let num_classes = train_targets.cols();
    for k in 0..num_classes {
        let covered = (0..n).any(|r| train_rows[r] && train_targets.get(r, k) == 1.0);
        if !covered {
            return Err(MgmcError::Data(format!("class {k} has no labeled training rows")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = GcnClassifier {
        cheb: ChebLayer::init(
            config.cheb_order,
            features.cols(),
            config.hidden_dim,
            config.cheb_bias,
            &mut rng,
        ),
        w_out: Matrix::zeros(config.hidden_dim, num_classes),
        b_out: Matrix::zeros(1, num_classes),
    };

    let mut adam = AdamState::new(&model.params());
    let mut best: Option<(f64, Vec<Matrix>, usize)> = None;
    let mut since_best = 0usize;
    let mut epochs_run = 0usize;
    for epoch in 0..config.epochs {
        epochs_run = epoch + 1;
        let mut tape = Tape::new();
        let (logits, leaves) = model.build(&mut tape, features, &graph.rescaled)?;
        let loss = tape.masked_cross_entropy(logits, train_targets, train_rows)?;
        let val_ce_node = tape.masked_cross_entropy(logits, val_targets, val_rows)?;
        let val_ce = tape.value(val_ce_node).scalar_value();
        if !val_ce.is_finite() || !tape.value(loss).scalar_value().is_finite() {
            return Err(MgmcError::Numeric(format!("non-finite loss at epoch {epoch}")));
        }

        if best.as_ref().map_or(true, |(b, _, _)| val_ce < *b) {
            best = Some((val_ce, model.params().into_iter().cloned().collect(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }

        tape.backward(loss)?;
        let grads: Vec<Matrix> = leaves.iter().map(|&l| tape.grad(l).clone()).collect();
        adam.step(model.params_mut(), &grads, config.learning_rate).map_err(|e| {
            MgmcError::Numeric(format!("optimizer step failed at epoch {epoch}: {e}"))
        })?;
    }

    let (best_val_ce, snapshot, _) = best.expect("at least one epoch ran");
    for (param, saved) in model.params_mut().into_iter().zip(&snapshot) {
        *param = saved.clone();
    }
    Ok(GcnFit { classifier: model, best_val_ce, epochs_run })
}
