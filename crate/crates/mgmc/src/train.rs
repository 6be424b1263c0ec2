//! Full-batch transductive training with Adam, early stopping on validation
//! cross-entropy, and seeded random hyperparameter search.
//!
//! Every epoch runs one forward pass over all rows (test-row features take
//! part in graph diffusion; test-row labels are never in the input matrix or
//! the label mask), applies the three-term objective to the training labels,
//! and takes one Adam step. Validation cross-entropy is read off the same
//! forward pass; the parameters from the best validation epoch are restored
//! when training stops.

use crate::autodiff::Tape;
use crate::error::{MgmcError, Result};
use crate::loss::{mgmc_loss, LossInputs, LossWeights, MaskPair};
use crate::matrix::Matrix;
use crate::model::{MgmcModel, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;

// ── Configuration ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Recurrent unroll steps T.
    pub steps: usize,
    /// Chebyshev order K.
    pub cheb_order: usize,
    pub hidden_dim: usize,
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub gamma_c: f64,
    pub a_dim: usize,
    pub cheb_bias: bool,
    pub seed: u64,
    pub autoregressive: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 500,
            patience: 30,
            steps: 10,
            cheb_order: 3,
            hidden_dim: 32,
            gamma_a: 1.0,
            gamma_b: 1.0,
            gamma_c: 1.0,
            a_dim: 16,
            cheb_bias: true,
            seed: 0,
            autoregressive: false,
        }
    }
}

impl TrainConfig {
    /// Range checks mirroring the hyperparameter search space. A loss weight
    /// of exactly 0 is allowed as an explicit off switch (the plain GCN
    /// baseline trains with only the cross-entropy term).
    pub fn validate(&self) -> Result<()> {
        if !(1e-5..=0.1).contains(&self.learning_rate) {
            return Err(MgmcError::Config(format!(
                "learning_rate {} outside [1e-5, 0.1]",
                self.learning_rate
            )));
        }
        if !(1..=20).contains(&self.cheb_order) {
            return Err(MgmcError::Config(format!(
                "cheb_order {} outside [1, 20]",
                self.cheb_order
            )));
        }
        if !(8..=512).contains(&self.hidden_dim) {
            return Err(MgmcError::Config(format!(
                "hidden_dim {} outside [8, 512]",
                self.hidden_dim
            )));
        }
        for (name, g) in [
            ("gamma_a", self.gamma_a),
            ("gamma_b", self.gamma_b),
            ("gamma_c", self.gamma_c),
        ] {
            if g != 0.0 && !(0.001..=1000.0).contains(&g) {
                return Err(MgmcError::Config(format!(
                    "{name} = {g} must be 0 or within [0.001, 1000]"
                )));
            }
        }
        if self.epochs == 0 || self.patience == 0 || self.steps == 0 || self.a_dim == 0 {
            return Err(MgmcError::Config(
                "epochs, patience, steps, and a_dim must be at least 1".into(),
            ));
        }
        // Reuses the all-zero check.
        LossWeights::new(self.gamma_a, self.gamma_b, self.gamma_c)?;
        Ok(())
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.gamma_a, self.gamma_b, self.gamma_c)
    }

    pub fn model_config(&self, data_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            data_dim,
            num_classes,
            hidden_dim: self.hidden_dim,
            cheb_order: self.cheb_order,
            steps: self.steps,
            a_dim: self.a_dim,
            cheb_bias: self.cheb_bias,
            autoregressive: self.autoregressive,
        }
    }
}

// ── Adam ────────────────────────────────────────────────────────────────────

/// Per-parameter first/second moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[&Matrix]) -> Self {
        AdamState {
            m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of every parameter in place.
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix], lr: f64) -> Result<()> {
        if lr <= 0.0 {
            return Err(MgmcError::Config(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(MgmcError::Contract(format!(
                "Adam sizes disagree: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for g in grads {
            if !g.is_finite() {
                return Err(MgmcError::Numeric("non-finite gradient".into()));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if !p.same_shape(g) || !p.same_shape(m) {
                return Err(MgmcError::Contract("Adam shape mismatch".into()));
            }
            let ps = p.as_mut_slice();
            let gs = g.as_slice();
            let ms = m.as_mut_slice();
            let vs = v.as_mut_slice();
            for i in 0..ps.len() {
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gs[i];
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gs[i] * gs[i];
                let m_hat = ms[i] / bc1;
                let v_hat = vs[i] / bc2;
                ps[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// ── Training ────────────────────────────────────────────────────────────────

/// Assembled inputs for one training run. The dataset module produces this
/// from a split, masked dataset plus its population graphs.
pub struct TrainData<'a> {
    /// n x (m+c) input: standardized features (missing = 0) next to one-hot
    /// training labels (zero rows for validation/test).
    pub z: &'a Matrix,
    pub masks: &'a MaskPair,
    pub label_cols: (usize, usize),
    /// Positive semidefinite Laplacians for the objective, one per graph.
    pub laplacians: &'a [Matrix],
    /// Rescaled Laplacians for the spectral filters, aligned with the above.
    pub rescaled: &'a [Matrix],
    pub val_rows: &'a [bool],
    /// One-hot targets on validation rows only (zero elsewhere), n x c.
    pub val_targets: &'a Matrix,
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub dirichlet: f64,
    pub reconstruction: f64,
    pub cross_entropy: f64,
    pub val_ce: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_ce: f64,
    pub stopped_early: bool,
}

impl TrainingLog {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "epoch,total,dirichlet,reconstruction,cross_entropy,val_ce")?;
        for r in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.epoch, r.total, r.dirichlet, r.reconstruction, r.cross_entropy, r.val_ce
            )?;
        }
        Ok(())
    }
}

/// Train a model on the full row set, stopping early on validation
/// cross-entropy and restoring the best-epoch parameters.
pub fn train(data: &TrainData, config: &TrainConfig) -> Result<(MgmcModel, TrainingLog)> {
    config.validate()?;
    let weights = config.weights()?;
    let (from, to) = data.label_cols;
    let num_classes = to - from;
    if data.laplacians.len() != data.rescaled.len() || data.laplacians.is_empty() {
        return Err(MgmcError::Contract(
            "need one objective Laplacian and one rescaled Laplacian per graph".into(),
        ));
    }
    if !data.val_rows.iter().any(|&b| b) {
        return Err(MgmcError::Data("no validation rows for early stopping".into()));
    }

    // Every class must appear among the labeled training rows.
    let labeled = data.masks.labeled_rows(data.label_cols)?;
    let targets = data.z.slice_cols(from, to)?;
    let mut seen = vec![false; num_classes];
    for (r, &is_labeled) in labeled.iter().enumerate() {
        if is_labeled {
            for (k, &y) in targets.row(r).iter().enumerate() {
                if y == 1.0 {
                    seen[k] = true;
                }
            }
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(MgmcError::Data(format!(
            "class {missing} has no labeled training rows"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = MgmcModel::init(
        config.model_config(data.z.cols(), num_classes),
        data.laplacians.len(),
        &mut rng,
    )?;
    let mut adam = AdamState::new(&model.params());

    let mut log = TrainingLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_ce: f64::INFINITY,
        stopped_early: false,
    };
    let mut best_model = model.clone();
    let mut stall = 0usize;

    for epoch in 0..config.epochs {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, data.z, data.rescaled)?;
        let terms = mgmc_loss(
            &mut tape,
            &weights,
            &LossInputs {
                branch_outputs: &fwd.branch_outputs,
                fused: fwd.fused,
                laplacians: data.laplacians,
                z: data.z,
                masks: data.masks,
                label_cols: data.label_cols,
            },
        )?;
        // Validation cross-entropy from the same forward pass; this node is
        // off the gradient path of the training loss.
        let val_logits = tape.slice_cols(fwd.fused, from, to)?;
        let val_ce_node = tape.masked_cross_entropy(val_logits, data.val_targets, data.val_rows)?;
        let val_ce = tape.value(val_ce_node).scalar_value();

        let values = terms.values(&tape);
        if !values.total.is_finite() || !val_ce.is_finite() {
            return Err(MgmcError::Numeric(format!(
                "non-finite loss at epoch {epoch} (total {}, val {val_ce})",
                values.total
            )));
        }
        log.epochs.push(EpochRecord {
            epoch,
            total: values.total,
            dirichlet: values.dirichlet,
            reconstruction: values.reconstruction,
            cross_entropy: values.cross_entropy,
            val_ce,
        });

        // Snapshot before the update: these parameters produced val_ce.
        if val_ce < log.best_val_ce {
            log.best_val_ce = val_ce;
            log.best_epoch = epoch;
            best_model = model.clone();
            stall = 0;
        } else {
            stall += 1;
            if stall >= config.patience {
                log.stopped_early = true;
                break;
            }
        }

        tape.backward(terms.total)?;
        let grads: Vec<Matrix> =
            fwd.param_nodes.iter().map(|id| tape.grad(*id).clone()).collect();
        adam.step(model.params_mut(), &grads, config.learning_rate)
            .map_err(|e| match e {
                MgmcError::Numeric(msg) => MgmcError::Numeric(format!("epoch {epoch}: {msg}")),
                other => other,
            })?;
    }

    model.copy_params_from(&best_model)?;
    Ok((model, log))
}

// ── Random hyperparameter search ────────────────────────────────────────────

/// Sampling ranges. Learning rate and loss weights are drawn log-uniformly,
/// integer ranges uniformly (inclusive); everything else comes from `base`.
#[derive(Debug, Clone)]
pub struct SearchSpace {
    pub learning_rate: (f64, f64),
    pub gamma: (f64, f64),
    pub cheb_order: (usize, usize),
    pub hidden_dim: (usize, usize),
    pub base: TrainConfig,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            learning_rate: (1e-5, 0.1),
            gamma: (0.001, 1000.0),
            cheb_order: (1, 20),
            hidden_dim: (8, 512),
            base: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trial {
    pub index: usize,
    pub config: TrainConfig,
    pub val_ce: f64,
    pub error: Option<String>,
}

/// Draw `budget` configurations from the space; the sequence depends only on
/// `seed`.
pub fn sample_configs(space: &SearchSpace, budget: usize, seed: u64) -> Vec<TrainConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_uniform = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| -> f64 {
        (rng.gen_range(lo.ln()..hi.ln())).exp()
    };
    (0..budget)
        .map(|_| {
            let mut c = space.base.clone();
            c.learning_rate = log_uniform(space.learning_rate.0, space.learning_rate.1, &mut rng);
            c.gamma_a = log_uniform(space.gamma.0, space.gamma.1, &mut rng);
            c.gamma_b = log_uniform(space.gamma.0, space.gamma.1, &mut rng);
            c.gamma_c = log_uniform(space.gamma.0, space.gamma.1, &mut rng);
            c.cheb_order = rng.gen_range(space.cheb_order.0..=space.cheb_order.1);
            c.hidden_dim = rng.gen_range(space.hidden_dim.0..=space.hidden_dim.1);
            c
        })
        .collect()
}

/// Random search: train once per sampled config and keep the one with the
/// lowest best-epoch validation cross-entropy. Failed trials are recorded
/// and skipped. Trials run in parallel; results are merged by trial index,
/// so the outcome is independent of scheduling.
pub fn hyper_search(
    data: &TrainData,
    space: &SearchSpace,
    budget: usize,
    seed: u64,
) -> Result<(TrainConfig, Vec<Trial>)> {
    if budget == 0 {
        return Err(MgmcError::Config("search budget must be at least 1".into()));
    }
    let configs = sample_configs(space, budget, seed);
    let trials: Vec<Trial> = configs
        .into_par_iter()
        .enumerate()
        .map(|(index, config)| match train(data, &config) {
            Ok((_, log)) => Trial { index, config, val_ce: log.best_val_ce, error: None },
            Err(e) => Trial {
                index,
                config,
                val_ce: f64::INFINITY,
                error: Some(e.to_string()),
            },
        })
        .collect();

    let best = trials
        .iter()
        .filter(|t| t.error.is_none() && t.val_ce.is_finite())
        .min_by(|a, b| {
            a.val_ce
                .partial_cmp(&b.val_ce)
                .unwrap()
                .then(a.index.cmp(&b.index))
        })
        .ok_or_else(|| MgmcError::Numeric("every search trial failed".into()))?;
    Ok((best.config.clone(), trials))
}

pub fn write_trial_table(trials: &[Trial], mut w: impl Write) -> Result<()> {
    writeln!(
        w,
        "trial,learning_rate,gamma_a,gamma_b,gamma_c,cheb_order,hidden_dim,val_ce,status"
    )?;
    for t in trials {
        let status = match &t.error {
            None => "ok".to_string(),
            Some(e) => format!("failed: {}", e.replace(',', ";")),
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            t.index,
            t.config.learning_rate,
            t.config.gamma_a,
            t.config.gamma_b,
            t.config.gamma_c,
            t.config.cheb_order,
            t.config.hidden_dim,
            t.val_ce,
            status
        )?;
    }
    Ok(())
}
