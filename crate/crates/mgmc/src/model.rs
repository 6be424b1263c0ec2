//! The full multigraph model: one recurrent branch per graph plus the
//! attention fusion head, with a flat parameter registry for the optimizer
//! and a versioned binary format for checkpoints.

use crate::attention::{fuse, FusionHead};
use crate::autodiff::{softmax_row_in_place, NodeId, Tape};
use crate::branch::{branch_forward, RecurrentBranch};
use crate::error::{MgmcError, Result};
use crate::matrix::Matrix;
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

/// File magic for serialized models; the trailing digit is the format version.
pub const MODEL_MAGIC: &[u8; 5] = b"MGMC1";

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Total input width: feature columns plus label columns.
    pub data_dim: usize,
    pub num_classes: usize,
    pub hidden_dim: usize,
    /// Chebyshev polynomial degree K.
    pub cheb_order: usize,
    /// Recurrent refinement steps T.
    pub steps: usize,
    /// Attention projection width.
    pub a_dim: usize,
    pub cheb_bias: bool,
    /// Feed each refinement step the previous step's output instead of the
    /// original input (ablation mode).
    pub autoregressive: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(MgmcError::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.data_dim <= self.num_classes {
            return Err(MgmcError::Config(format!(
                "data_dim {} must exceed num_classes {} (no feature columns?)",
                self.data_dim, self.num_classes
            )));
        }
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("cheb_order", self.cheb_order),
            ("steps", self.steps),
            ("a_dim", self.a_dim),
        ] {
            if v == 0 {
                return Err(MgmcError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Column range [from, to) of the label block inside the input matrix.
    pub fn label_cols(&self) -> (usize, usize) {
        (self.data_dim - self.num_classes, self.data_dim)
    }
}

#[derive(Debug, Clone)]
pub struct MgmcModel {
    pub config: ModelConfig,
    pub branches: Vec<RecurrentBranch>,
    pub fusion: FusionHead,
}

/// Tape nodes produced by one forward pass.
pub struct ModelForward {
    /// Refined matrix per branch, each n x data_dim.
    pub branch_outputs: Vec<NodeId>,
    /// Fused matrix, n x data_dim.
    pub fused: NodeId,
    /// Attention weights, n x num_graphs.
    pub attention: NodeId,
    /// Parameter leaves aligned with [`MgmcModel::params`].
    pub param_nodes: Vec<NodeId>,
}

impl MgmcModel {
    pub fn init(config: ModelConfig, num_graphs: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if num_graphs == 0 {
            return Err(MgmcError::Config("model needs at least one graph".into()));
        }
        let branches = (0..num_graphs)
            .map(|_| {
                RecurrentBranch::init(
                    config.data_dim,
                    config.hidden_dim,
                    config.cheb_order,
                    config.cheb_bias,
                    rng,
                )
            })
            .collect();
        let fusion = FusionHead::init(config.data_dim, config.a_dim, rng);
        Ok(MgmcModel { config, branches, fusion })
    }

    pub fn num_graphs(&self) -> usize {
        self.branches.len()
    }

    /// All trainable matrices in a fixed order: branches first, fusion last.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = Vec::new();
        for b in &self.branches {
            p.extend(b.params());
        }
        p.extend(self.fusion.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = Vec::new();
        for b in &mut self.branches {
            p.extend(b.params_mut());
        }
        p.extend(self.fusion.params_mut());
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, b) in self.branches.iter().enumerate() {
            names.extend(b.param_names(&format!("branch{i}")));
        }
        names.extend(self.fusion.param_names("fusion"));
        names
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.params().iter().map(|m| m.rows() * m.cols()).sum()
    }

    /// Run the model on input `z` over one rescaled Laplacian per branch.
    pub fn forward(&self, tape: &mut Tape, z: &Matrix, rescaled: &[Matrix]) -> Result<ModelForward> {
        if rescaled.len() != self.branches.len() {
            return Err(MgmcError::Contract(format!(
                "{} Laplacians for {} branches",
                rescaled.len(),
                self.branches.len()
            )));
        }
        if z.cols() != self.config.data_dim {
            return Err(MgmcError::Dimension(format!(
                "input has {} columns, model expects {}",
                z.cols(),
                self.config.data_dim
            )));
        }
        let z_node = tape.constant(z.clone());
        let mut branch_outputs = Vec::with_capacity(self.branches.len());
        let mut param_nodes = Vec::new();
        for (branch, lt_m) in self.branches.iter().zip(rescaled) {
            let nodes = branch.register(tape);
            let lt = tape.constant(lt_m.clone());
            let out = branch_forward(
                tape,
                &nodes,
                lt,
                z_node,
                self.config.steps,
                self.config.autoregressive,
            )?;
            param_nodes.extend(nodes.param_nodes());
            branch_outputs.push(out);
        }
        let fusion_nodes = self.fusion.register(tape);
        let fused_out = fuse(tape, &fusion_nodes, &branch_outputs)?;
        param_nodes.extend(fusion_nodes.param_nodes());
        debug_assert_eq!(param_nodes.len(), self.params().len());
        Ok(ModelForward {
            branch_outputs,
            fused: fused_out.fused,
            attention: fused_out.attention,
            param_nodes,
        })
    }

    /// Per-row class probabilities from a fused output value: softmax over
    /// the label block.
    pub fn class_probabilities(&self, fused: &Matrix) -> Result<Matrix> {
        let (from, to) = self.config.label_cols();
        let mut probs = fused.slice_cols(from, to)?;
        for r in 0..probs.rows() {
            softmax_row_in_place(probs.row_mut(r));
        }
        Ok(probs)
    }

    /// Copy parameter values from `other` (same architecture).
    pub fn copy_params_from(&mut self, other: &MgmcModel) -> Result<()> {
        let src: Vec<Matrix> = other.params().into_iter().cloned().collect();
        let dst = self.params_mut();
        if src.len() != dst.len() {
            return Err(MgmcError::Contract(format!(
                "parameter count mismatch: {} vs {}",
                src.len(),
                dst.len()
            )));
        }
        for (d, s) in dst.into_iter().zip(src) {
            if !d.same_shape(&s) {
                return Err(MgmcError::Contract("parameter shape mismatch".into()));
            }
            *d = s;
        }
        Ok(())
    }

    // ── Serialization ──────────────────────────────────────────────────────

    pub fn save(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        let c = &self.config;
        let flags: u32 =
            (c.cheb_bias as u32) | ((c.autoregressive as u32) << 1);
        for v in [
            self.branches.len() as u32,
            c.data_dim as u32,
            c.num_classes as u32,
            c.hidden_dim as u32,
            c.cheb_order as u32,
            c.steps as u32,
            c.a_dim as u32,
            flags,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        let params = self.params();
        let names = self.param_names();
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for (m, name) in params.iter().zip(&names) {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(m.rows() as u32).to_le_bytes())?;
            w.write_all(&(m.cols() as u32).to_le_bytes())?;
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_to_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.save(std::io::BufWriter::new(file))
    }

    pub fn load(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        read_exact(&mut r, &mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(MgmcError::Data(format!(
                "not a model file (magic {:?})",
                String::from_utf8_lossy(&magic)
            )));
        }
        let num_graphs = read_u32(&mut r)? as usize;
        let data_dim = read_u32(&mut r)? as usize;
        let num_classes = read_u32(&mut r)? as usize;
        let hidden_dim = read_u32(&mut r)? as usize;
        let cheb_order = read_u32(&mut r)? as usize;
        let steps = read_u32(&mut r)? as usize;
        let a_dim = read_u32(&mut r)? as usize;
        let flags = read_u32(&mut r)?;
        let config = ModelConfig {
            data_dim,
            num_classes,
            hidden_dim,
            cheb_order,
            steps,
            a_dim,
            cheb_bias: flags & 1 != 0,
            autoregressive: flags & 2 != 0,
        };
        config.validate().map_err(|e| MgmcError::Data(format!("model header invalid: {e}")))?;
        if num_graphs == 0 {
            return Err(MgmcError::Data("model header declares zero graphs".into()));
        }

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let mut model = MgmcModel::init(config, num_graphs, &mut rng)?;

        let count = read_u32(&mut r)? as usize;
        let expected_names = model.param_names();
        if count != expected_names.len() {
            return Err(MgmcError::Data(format!(
                "model holds {count} parameters, architecture needs {}",
                expected_names.len()
            )));
        }
        for (slot, expected_name) in model.params_mut().into_iter().zip(expected_names) {
            let name_len = read_u16(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(&mut r, &mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| MgmcError::Data("parameter name is not UTF-8".into()))?;
            if name != expected_name {
                return Err(MgmcError::Data(format!(
                    "parameter order mismatch: found {name}, expected {expected_name}"
                )));
            }
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            if (rows, cols) != slot.shape() {
                return Err(MgmcError::Data(format!(
                    "{name}: stored shape {rows}x{cols}, architecture needs {}x{}",
                    slot.rows(),
                    slot.cols()
                )));
            }
            let mut data = vec![0.0f64; rows * cols];
            for v in &mut data {
                let mut buf = [0u8; 8];
                read_exact(&mut r, &mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            *slot = Matrix::new(rows, cols, data)
                .map_err(|e| MgmcError::Data(format!("{name}: {e}")))?;
        }
        Ok(model)
    }

    pub fn load_from_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::load(std::io::BufReader::new(file))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| MgmcError::Data("model file truncated".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    read_exact(r, &mut buf)?;
    Ok(u16::from_le_bytes(buf))
}
