//! Dataset ingestion and assembly: CSV loading against a JSON schema,
//! stratified split assignment, artificial availability masking, input-matrix
//! assembly with training-row standardization, and a synthetic generator with
//! retained ground truth.
//!
//! A dataset keeps raw feature values alongside two 0/1 masks: the entries
//! observed in the file (`observed_baseline`) and the entries still visible
//! after availability masking (`observed`). Removed entries keep their raw
//! values, so the held-out truth for imputation scoring needs no extra
//! storage.

use crate::error::{MgmcError, Result};
use crate::graph::{build_graph, MetaFeature, PopulationGraph};
use crate::loss::MaskPair;
use crate::matrix::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

// ── Schema ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Feature,
    Meta,
    Label,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub role: Role,
    /// Similarity threshold for meta columns; defaults to 0 (exact match).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

/// Declares the role of every dataset column. Stored as a JSON sidecar next
/// to the CSV: `{"columns": [{"name": ..., "role": "feature" | "meta" |
/// "label", "threshold": ...}]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Schema = serde_json::from_str(text)
            .map_err(|e| MgmcError::Schema(format!("cannot parse schema: {e}")))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut text = String::new();
        std::fs::File::open(path)?.read_to_string(&mut text)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for col in &self.columns {
            if !seen.insert(col.name.as_str()) {
                return Err(MgmcError::Schema(format!("duplicate column '{}'", col.name)));
            }
            if let Some(t) = col.threshold {
                if col.role != Role::Meta {
                    return Err(MgmcError::Schema(format!(
                        "column '{}' has a threshold but is not a meta column",
                        col.name
                    )));
                }
                if !t.is_finite() || t < 0.0 {
                    return Err(MgmcError::Schema(format!(
                        "column '{}' threshold must be finite and >= 0, got {t}",
                        col.name
                    )));
                }
            }
        }
        let labels = self.columns.iter().filter(|c| c.role == Role::Label).count();
        if labels != 1 {
            return Err(MgmcError::Schema(format!(
                "schema must declare exactly one label column, found {labels}"
            )));
        }
        if !self.columns.iter().any(|c| c.role == Role::Feature) {
            return Err(MgmcError::Schema("schema declares no feature columns".into()));
        }
        Ok(())
    }

    fn by_role(&self, role: Role) -> impl Iterator<Item = &ColumnSpec> {
        self.columns.iter().filter(move |c| c.role == role)
    }
}

// ── Dataset ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct MaskedDataset {
    pub feature_names: Vec<String>,
    /// Class names in first-appearance order; label k means class_names[k].
    pub class_names: Vec<String>,
    pub meta: Vec<MetaFeature>,
    /// Raw feature values; entries are only meaningful where
    /// `observed_baseline` is 1 (missing cells hold 0).
    pub x: Matrix,
    /// 1 where the file had a value.
    pub observed_baseline: Matrix,
    /// 1 where the value is still visible after availability masking.
    pub observed: Matrix,
    pub labels: Vec<usize>,
    pub split: Vec<Split>,
    /// Fraction of baseline-observed entries retained (1.0 = untouched).
    pub availability: f64,
    /// Complete raw feature matrix; synthetic datasets only.
    pub ground_truth_x: Option<Matrix>,
}

impl MaskedDataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn m(&self) -> usize {
        self.x.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        if n == 0 || self.m() == 0 {
            return Err(MgmcError::Data("dataset needs at least one row and one feature".into()));
        }
        if self.num_classes() < 2 {
            return Err(MgmcError::Data(format!(
                "need at least 2 classes, found {}",
                self.num_classes()
            )));
        }
        if self.labels.len() != n || self.split.len() != n {
            return Err(MgmcError::Contract("per-row vectors out of step with x".into()));
        }
        for meta in &self.meta {
            if meta.values.len() != n {
                return Err(MgmcError::Contract(format!(
                    "meta-feature '{}' has {} values for {} rows",
                    meta.name,
                    meta.values.len(),
                    n
                )));
            }
        }
        if !self.observed.same_shape(&self.x) || !self.observed_baseline.same_shape(&self.x) {
            return Err(MgmcError::Contract("mask shapes out of step with x".into()));
        }
        Ok(())
    }

    pub fn rows_in(&self, split: Split) -> Vec<bool> {
        self.split.iter().map(|&s| s == split).collect()
    }

    /// Population graph per meta-feature, in declaration order.
    pub fn build_graphs(&self) -> Result<Vec<PopulationGraph>> {
        if self.meta.is_empty() {
            return Err(MgmcError::Config(
                "dataset has no meta columns; population graphs need at least one".into(),
            ));
        }
        self.meta.iter().map(build_graph).collect()
    }

    /// Entries observed at baseline but hidden by availability masking, in
    /// row-major order.
    pub fn held_out_entries(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.n() {
            for c in 0..self.m() {
                if self.observed_baseline.get(r, c) == 1.0 && self.observed.get(r, c) == 0.0 {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// Build the model input and everything derived from the current split
    /// and masks. Feature statistics come from observed training entries
    /// only, so the result never leaks validation/test values.
    pub fn assemble(&self) -> Result<AssembledData> {
        self.validate()?;
        let (n, m, c) = (self.n(), self.m(), self.num_classes());

        let mut col_mean = vec![0.0; m];
        let mut col_std = vec![1.0; m];
        for j in 0..m {
            let mut sum = 0.0;
            let mut count = 0usize;
            for r in 0..n {
                if self.split[r] == Split::Train && self.observed.get(r, j) == 1.0 {
                    sum += self.x.get(r, j);
                    count += 1;
                }
            }
            if count == 0 {
                log::warn!("feature column {j} has no observed training entries; using mean 0, std 1");
                continue;
            }
            let mean = sum / count as f64;
            let mut ss = 0.0;
            for r in 0..n {
                if self.split[r] == Split::Train && self.observed.get(r, j) == 1.0 {
                    let d = self.x.get(r, j) - mean;
                    ss += d * d;
                }
            }
            let std = (ss / count as f64).sqrt();
            col_mean[j] = mean;
            col_std[j] = if std < 1e-12 { 1.0 } else { std };
        }

        let mut z = Matrix::zeros(n, m + c);
        let mut omega_x = Matrix::zeros(n, m + c);
        let mut omega_y = Matrix::zeros(n, m + c);
        let mut val_targets = Matrix::zeros(n, c);
        let mut val_rows = vec![false; n];
        let mut meta_std = Matrix::zeros(n, self.meta.len());
        for r in 0..n {
            for j in 0..m {
                if self.observed.get(r, j) == 1.0 {
                    z.set(r, j, (self.x.get(r, j) - col_mean[j]) / col_std[j]);
                    omega_x.set(r, j, 1.0);
                }
            }
            match self.split[r] {
                Split::Train => {
                    z.set(r, m + self.labels[r], 1.0);
                    for k in 0..c {
                        omega_y.set(r, m + k, 1.0);
                    }
                }
                Split::Val => {
                    val_rows[r] = true;
                    val_targets.set(r, self.labels[r], 1.0);
                }
                Split::Test => {}
            }
        }

        // Standardized meta columns for baselines that consume meta as plain
        // features; missing meta values become 0 after standardization.
        for (j, meta) in self.meta.iter().enumerate() {
            let train_vals: Vec<f64> = (0..n)
                .filter(|&r| self.split[r] == Split::Train && meta.values[r].is_finite())
                .map(|r| meta.values[r])
                .collect();
            let (mean, std) = if train_vals.is_empty() {
                (0.0, 1.0)
            } else {
                let mean = train_vals.iter().sum::<f64>() / train_vals.len() as f64;
                let ss: f64 = train_vals.iter().map(|v| (v - mean) * (v - mean)).sum();
                let std = (ss / train_vals.len() as f64).sqrt();
                (mean, if std < 1e-12 { 1.0 } else { std })
            };
            for r in 0..n {
                if meta.values[r].is_finite() {
                    meta_std.set(r, j, (meta.values[r] - mean) / std);
                }
            }
        }

        Ok(AssembledData {
            z,
            masks: MaskPair::new(omega_x, omega_y)?,
            label_cols: (m, m + c),
            col_mean,
            col_std,
            val_rows,
            val_targets,
            meta_std,
        })
    }
}

/// The model-facing view of a dataset under its current split and masks.
#[derive(Debug, Clone)]
pub struct AssembledData {
    /// n x (m+c): standardized features (missing = 0) next to one-hot labels
    /// for training rows (zero rows for validation/test).
    pub z: Matrix,
    pub masks: MaskPair,
    pub label_cols: (usize, usize),
    pub col_mean: Vec<f64>,
    pub col_std: Vec<f64>,
    pub val_rows: Vec<bool>,
    /// One-hot targets on validation rows, n x c.
    pub val_targets: Matrix,
    /// Standardized meta columns (n x I), for baselines that concatenate
    /// meta onto the feature matrix.
    pub meta_std: Matrix,
}

impl AssembledData {
    /// Standardized feature block of `z` (missing entries are 0).
    pub fn x_std(&self) -> Result<Matrix> {
        self.z.slice_cols(0, self.label_cols.0)
    }

    /// Map a raw feature value to the standardized scale of column `col`.
    pub fn standardize(&self, value: f64, col: usize) -> f64 {
        (value - self.col_mean[col]) / self.col_std[col]
    }
}

// ── CSV loading ─────────────────────────────────────────────────────────────

fn parse_cell(cell: &str, row: usize, name: &str) -> Result<f64> {
    let s = cell.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(MgmcError::Data(format!(
            "row {}, column '{}': cannot parse '{}' as a number",
            row + 1,
            name,
            s
        ))),
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<MaskedDataset> {
    let file = std::fs::File::open(&path)?;
    load_csv_reader(file, schema)
}

pub fn load_csv_reader(reader: impl Read, schema: &Schema) -> Result<MaskedDataset> {
    schema.validate()?;
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| MgmcError::Data(format!("cannot read CSV header: {e}")))?
        .clone();

    let mut index_of = HashMap::new();
    for (i, h) in headers.iter().enumerate() {
        if index_of.insert(h.to_string(), i).is_some() {
            return Err(MgmcError::Schema(format!("duplicate header '{h}' in CSV")));
        }
    }
    let declared: std::collections::HashSet<&str> =
        schema.columns.iter().map(|c| c.name.as_str()).collect();
    let extra: Vec<&str> = headers.iter().filter(|h| !declared.contains(h)).collect();
    if !extra.is_empty() {
        log::warn!("ignoring {} CSV columns absent from the schema: {:?}", extra.len(), extra);
    }
    let column_index = |name: &str| -> Result<usize> {
        index_of
            .get(name)
            .copied()
            .ok_or_else(|| MgmcError::Schema(format!("schema column '{name}' missing from CSV")))
    };

    let feature_cols: Vec<(String, usize)> = schema
        .by_role(Role::Feature)
        .map(|c| Ok((c.name.clone(), column_index(&c.name)?)))
        .collect::<Result<_>>()?;
    let meta_cols: Vec<(String, usize, f64)> = schema
        .by_role(Role::Meta)
        .map(|c| Ok((c.name.clone(), column_index(&c.name)?, c.threshold.unwrap_or(0.0))))
        .collect::<Result<_>>()?;
    let label_col = schema.by_role(Role::Label).next().expect("validated");
    let label_index = column_index(&label_col.name)?;

    let mut rows_x: Vec<Vec<f64>> = Vec::new();
    let mut meta_values: Vec<Vec<f64>> = vec![Vec::new(); meta_cols.len()];
    let mut class_names: Vec<String> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (row, record) in csv.records().enumerate() {
        let record = record.map_err(|e| {
            MgmcError::Data(format!("row {}: malformed CSV record: {e}", row + 1))
        })?;
        let cell = |i: usize| record.get(i).unwrap_or("");

        let mut x_row = Vec::with_capacity(feature_cols.len());
        for (name, i) in &feature_cols {
            x_row.push(parse_cell(cell(*i), row, name)?);
        }
        rows_x.push(x_row);
        for (j, (name, i, _)) in meta_cols.iter().enumerate() {
            meta_values[j].push(parse_cell(cell(*i), row, name)?);
        }

        let label = cell(label_index).trim();
        if label.is_empty() {
            return Err(MgmcError::Data(format!("row {}: empty label", row + 1)));
        }
        let class = match class_names.iter().position(|c| c == label) {
            Some(k) => k,
            None => {
                class_names.push(label.to_string());
                class_names.len() - 1
            }
        };
        labels.push(class);
    }

    let n = rows_x.len();
    if n == 0 {
        return Err(MgmcError::Data("CSV has no data rows".into()));
    }
    let m = feature_cols.len();
    let mut x = Matrix::zeros(n, m);
    let mut observed = Matrix::zeros(n, m);
    for (r, row) in rows_x.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            if v.is_finite() {
                x.set(r, c, v);
                observed.set(r, c, 1.0);
            }
        }
    }

    let meta = meta_cols
        .into_iter()
        .zip(meta_values)
        .map(|((name, _, threshold), values)| MetaFeature::new(name, values, threshold))
        .collect::<Result<Vec<_>>>()?;

    let dataset = MaskedDataset {
        feature_names: feature_cols.into_iter().map(|(name, _)| name).collect(),
        class_names,
        meta,
        observed_baseline: observed.clone(),
        observed,
        x,
        labels,
        split: vec![Split::Train; n],
        availability: 1.0,
        ground_truth_x: None,
    };
    dataset.validate()?;
    Ok(dataset)
}

// ── Split assignment ────────────────────────────────────────────────────────

/// Largest-remainder allocation of `total` across buckets proportional to
/// their sizes. Leftover units go to the largest fractional remainders,
/// ties to the lower bucket index.
fn allocate(sizes: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = sizes.iter().sum();
    if sum == 0 || total == 0 {
        return vec![0; sizes.len()];
    }
    let mut counts: Vec<usize> = Vec::with_capacity(sizes.len());
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(sizes.len());
    let mut assigned = 0usize;
    for (i, &s) in sizes.iter().enumerate() {
        let quota = s as f64 * total as f64 / sum as f64;
        let base = (quota.floor() as usize).min(s);
        counts.push(base);
        assigned += base;
        remainders.push((quota - base as f64, i));
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut left = total.saturating_sub(assigned);
    for &(_, i) in remainders.iter().cycle().take(remainders.len() * 2) {
        if left == 0 {
            break;
        }
        if counts[i] < sizes[i] {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Stratified holdout assignment: 10% of rows to test, 10% of the remainder
/// to validation, the rest to train; rounding always favors train. Classes
/// with fewer than 3 members are pooled and allocated together.
pub fn assign_splits(dataset: &MaskedDataset, seed: u64) -> Result<MaskedDataset> {
    dataset.validate()?;
    let n = dataset.n();
    if n < 10 {
        return Err(MgmcError::Data(format!("need at least 10 rows to split, got {n}")));
    }

    // Buckets: one per large-enough class, plus one pooled bucket.
    let c = dataset.num_classes();
    let mut class_rows: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (r, &k) in dataset.labels.iter().enumerate() {
        class_rows[k].push(r);
    }
    let mut buckets: Vec<Vec<usize>> = Vec::new();
    let mut pooled: Vec<usize> = Vec::new();
    for (k, rows) in class_rows.into_iter().enumerate() {
        if rows.len() < 3 {
            log::warn!(
                "class '{}' has only {} rows; assigning it without stratification",
                dataset.class_names[k],
                rows.len()
            );
            pooled.extend(rows);
        } else {
            buckets.push(rows);
        }
    }
    if !pooled.is_empty() {
        buckets.push(pooled);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for bucket in &mut buckets {
        bucket.shuffle(&mut rng);
    }

    let total_test = n / 10;
    let total_val = (n - total_test) / 10;
    let sizes: Vec<usize> = buckets.iter().map(Vec::len).collect();
    let test_counts = allocate(&sizes, total_test);
    let remaining: Vec<usize> = sizes.iter().zip(&test_counts).map(|(s, t)| s - t).collect();
    let val_counts = allocate(&remaining, total_val);

    let mut split = vec![Split::Train; n];
    for ((bucket, &tc), &vc) in buckets.iter().zip(&test_counts).zip(&val_counts) {
        for (i, &row) in bucket.iter().enumerate() {
            split[row] = if i < tc {
                Split::Test
            } else if i < tc + vc {
                Split::Val
            } else {
                Split::Train
            };
        }
    }

    let mut out = dataset.clone();
    out.split = split;
    Ok(out)
}

// ── Availability masking ────────────────────────────────────────────────────

/// Keep a level-sized fraction of the baseline-observed entries, chosen by
/// ranking one seeded permutation. For a fixed seed the retained sets nest:
/// everything kept at 25% is also kept at 50% and 75%, which keeps
/// availability curves comparable. Labels and meta are never touched.
pub fn apply_availability(dataset: &MaskedDataset, level: f64, seed: u64) -> Result<MaskedDataset> {
    if !(level > 0.0 && level <= 1.0) {
        return Err(MgmcError::Config(format!(
            "availability level must be in (0, 1], got {level}"
        )));
    }
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for r in 0..dataset.n() {
        for c in 0..dataset.m() {
            if dataset.observed_baseline.get(r, c) == 1.0 {
                coords.push((r, c));
            }
        }
    }
    let keep = (level * coords.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);

    let mut observed = Matrix::zeros(dataset.n(), dataset.m());
    for &(r, c) in coords.iter().take(keep) {
        observed.set(r, c, 1.0);
    }

    let empty_rows = (0..dataset.n())
        .filter(|&r| (0..dataset.m()).all(|c| observed.get(r, c) == 0.0))
        .count();
    if empty_rows > 0 {
        log::warn!("availability {level} leaves {empty_rows} rows with no observed features");
    }

    let mut out = dataset.clone();
    out.observed = observed;
    out.availability = level;
    Ok(out)
}

// ── Synthetic generation ────────────────────────────────────────────────────

/// Settings for the synthetic benchmark generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub m: usize,
    /// Classes (= latent clusters).
    pub c: usize,
    /// Latent rank of the feature matrix.
    pub rank: usize,
    /// Additive feature noise after the low-rank construction.
    pub sigma: f64,
    pub num_meta: usize,
    /// Probability that a meta value equals the row's cluster id.
    pub rho: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(MgmcError::Config("n and m must be positive".into()));
        }
        if self.c < 2 {
            return Err(MgmcError::Config(format!("need at least 2 classes, got {}", self.c)));
        }
        if self.rank == 0 || self.rank > self.n.min(self.m) {
            return Err(MgmcError::Config(format!(
                "rank {} outside [1, min(n, m) = {}]",
                self.rank,
                self.n.min(self.m)
            )));
        }
        if !(self.sigma >= 0.0) {
            return Err(MgmcError::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(MgmcError::Config(format!("rho must be in [0, 1], got {}", self.rho)));
        }
        if self.num_meta == 0 {
            return Err(MgmcError::Config("need at least one meta-feature".into()));
        }
        Ok(())
    }
}

/// Separation between latent cluster centers, in units of the within-cluster
/// standard deviation. Kept moderate so the clusters overlap: rowwise feature
/// evidence alone should not settle the class, otherwise the meta-feature
/// graphs would have nothing to add.
const CENTER_SCALE: f64 = 1.25;

/// Rows are drawn from `c` clusters living in a shared rank-`rank` latent
/// space: row i is (center_k + noise) V^T plus feature noise, the label is
/// the cluster id, and every meta-feature reports the cluster id with
/// probability rho (otherwise a random other categorical code). The complete
/// feature matrix is retained as ground truth.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MaskedDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    // Shared latent-to-feature map.
    let mut v = Matrix::zeros(spec.m, spec.rank);
    for e in v.as_mut_slice() {
        *e = normal(&mut rng);
    }

    // Deterministic, well-separated cluster centers: signed latent basis
    // vectors first, random directions if there are more clusters than 2r.
    let mut centers = Vec::with_capacity(spec.c);
    for k in 0..spec.c {
        let mut center = vec![0.0; spec.rank];
        if k < 2 * spec.rank {
            let sign = if k < spec.rank { 1.0 } else { -1.0 };
            center[k % spec.rank] = sign * CENTER_SCALE;
        } else {
            for e in center.iter_mut() {
                *e = CENTER_SCALE * normal(&mut rng) / (spec.rank as f64).sqrt();
            }
        }
        centers.push(center);
    }

    let mut x = Matrix::zeros(spec.n, spec.m);
    let mut labels = Vec::with_capacity(spec.n);
    for r in 0..spec.n {
        let k = rng.gen_range(0..spec.c);
        labels.push(k);
        let u: Vec<f64> = centers[k].iter().map(|&c| c + normal(&mut rng)).collect();
        for j in 0..spec.m {
            let mut val = 0.0;
            for (d, &ud) in u.iter().enumerate() {
                val += ud * v.get(j, d);
            }
            if spec.sigma > 0.0 {
                val += spec.sigma * normal(&mut rng);
            }
            x.set(r, j, val);
        }
    }

    // Each meta-feature is a categorical code over 3c values of which only
    // the first c ever mark a cluster. A miscoded row therefore usually falls
    // into a small spurious category (no class signal) rather than into
    // another cluster's category (active misinformation), mirroring site or
    // scanner tags whose error modes are mostly benign.
    let mut meta = Vec::with_capacity(spec.num_meta);
    for i in 0..spec.num_meta {
        let values: Vec<f64> = labels
            .iter()
            .map(|&k| {
                if rng.gen_range(0.0..1.0) < spec.rho {
                    k as f64
                } else {
                    // Uniform over all other codes in the widened range.
                    let mut other = rng.gen_range(0..3 * spec.c - 1);
                    if other >= k {
                        other += 1;
                    }
                    other as f64
                }
            })
            .collect();
        meta.push(MetaFeature::new(format!("meta{i}"), values, 0.0)?);
    }

    let observed = Matrix::filled(spec.n, spec.m, 1.0);
    let dataset = MaskedDataset {
        feature_names: (0..spec.m).map(|j| format!("f{j}")).collect(),
        class_names: (0..spec.c).map(|k| k.to_string()).collect(),
        meta,
        observed_baseline: observed.clone(),
        observed,
        ground_truth_x: Some(x.clone()),
        x,
        labels,
        split: vec![Split::Train; spec.n],
        availability: 1.0,
    };
    dataset.validate()?;
    Ok(dataset)
}

// ── Export ──────────────────────────────────────────────────────────────────

/// Write the dataset in loadable form: currently-masked entries become empty
/// cells, meta and label columns follow the feature block.
pub fn write_dataset_csv(dataset: &MaskedDataset, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = dataset.feature_names.clone();
    header.extend(dataset.meta.iter().map(|m| m.name.clone()));
    header.push("label".to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in 0..dataset.n() {
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        for c in 0..dataset.m() {
            if dataset.observed.get(r, c) == 1.0 {
                record.push(format!("{}", dataset.x.get(r, c)));
            } else {
                record.push(String::new());
            }
        }
        for meta in &dataset.meta {
            let v = meta.values[r];
            record.push(if v.is_finite() { format!("{v}") } else { String::new() });
        }
        record.push(dataset.class_names[dataset.labels[r]].clone());
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Schema sidecar matching [`write_dataset_csv`]'s layout.
pub fn dataset_schema(dataset: &MaskedDataset) -> Schema {
    let mut columns: Vec<ColumnSpec> = dataset
        .feature_names
        .iter()
        .map(|name| ColumnSpec { name: name.clone(), role: Role::Feature, threshold: None })
        .collect();
    columns.extend(dataset.meta.iter().map(|m| ColumnSpec {
        name: m.name.clone(),
        role: Role::Meta,
        threshold: Some(m.threshold),
    }));
    columns.push(ColumnSpec { name: "label".into(), role: Role::Label, threshold: None });
    Schema { columns }
}

/// Complete feature matrix as CSV; only available for synthetic datasets.
pub fn write_truth_csv(dataset: &MaskedDataset, writer: impl Write) -> Result<()> {
    let truth = dataset
        .ground_truth_x
        .as_ref()
        .ok_or_else(|| MgmcError::Data("dataset has no ground-truth features".into()))?;
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(&dataset.feature_names).map_err(csv_err)?;
    for r in 0..dataset.n() {
        let record: Vec<String> = (0..dataset.m()).map(|c| format!("{}", truth.get(r, c))).collect();
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> MgmcError {
    MgmcError::Data(format!("CSV write failed: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_schema() -> Schema {
        Schema {
            columns: vec![
                ColumnSpec { name: "f0".into(), role: Role::Feature, threshold: None },
                ColumnSpec { name: "f1".into(), role: Role::Feature, threshold: None },
                ColumnSpec { name: "age".into(), role: Role::Meta, threshold: Some(2.0) },
                ColumnSpec { name: "dx".into(), role: Role::Label, threshold: None },
            ],
        }
    }

    #[test]
    fn schema_round_trips_and_validates() {
        let schema = toy_schema();
        let json = serde_json::to_string(&schema).unwrap();
        let back = Schema::from_json(&json).unwrap();
        assert_eq!(back.columns.len(), 4);
        assert_eq!(back.columns[2].threshold, Some(2.0));

        let mut dup = toy_schema();
        dup.columns[1].name = "f0".into();
        assert_eq!(dup.validate().unwrap_err().category(), "config");

        let mut no_label = toy_schema();
        no_label.columns.retain(|c| c.role != Role::Label);
        assert!(no_label.validate().is_err());

        let mut two_labels = toy_schema();
        two_labels.columns.push(ColumnSpec {
            name: "dx2".into(),
            role: Role::Label,
            threshold: None,
        });
        assert!(two_labels.validate().is_err());

        let bad = r#"{"columns": [{"name": "f", "role": "widget"}]}"#;
        assert!(Schema::from_json(bad).is_err());
    }

    #[test]
    fn load_csv_basic() {
        let csv = "f0,f1,age,dx\n1.0,2.0,50,A\n,3.0,52,B\n2.0,4.0,70,A\n";
        let ds = load_csv_reader(csv.as_bytes(), &toy_schema()).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.m(), 2);
        assert_eq!(ds.class_names, vec!["A", "B"]);
        assert_eq!(ds.labels, vec![0, 1, 0]);
        assert_eq!(ds.observed_baseline.get(1, 0), 0.0);
        let observed: f64 = ds.observed_baseline.as_slice().iter().sum();
        assert_eq!(observed, 5.0);
        assert_eq!(ds.meta.len(), 1);
        assert_eq!(ds.meta[0].values, vec![50.0, 52.0, 70.0]);
        assert_eq!(ds.meta[0].threshold, 2.0);

        // Standardization over observed train entries: mean 0.
        let asm = ds.assemble().unwrap();
        let x_std = asm.x_std().unwrap();
        let col0_mean = (x_std.get(0, 0) + x_std.get(2, 0)) / 2.0;
        assert!(col0_mean.abs() <= 1e-12);
        // Missing entry is exactly 0 in z.
        assert_eq!(x_std.get(1, 0), 0.0);
    }

    #[test]
    fn load_csv_error_cases() {
        // Non-numeric feature cell.
        let bad = "f0,f1,age,dx\n1.0,x,50,A\n2.0,3.0,52,B\n";
        let err = load_csv_reader(bad.as_bytes(), &toy_schema()).unwrap_err();
        assert_eq!(err.category(), "data");
        assert!(err.to_string().contains("row 1"));
        assert!(err.to_string().contains("f1"));

        // Empty label.
        let bad = "f0,f1,age,dx\n1.0,2.0,50,\n2.0,3.0,52,B\n";
        let err = load_csv_reader(bad.as_bytes(), &toy_schema()).unwrap_err();
        assert!(err.to_string().contains("empty label"));

        // Duplicate CSV header.
        let bad = "f0,f0,age,dx\n1.0,2.0,50,A\n";
        let err = load_csv_reader(bad.as_bytes(), &toy_schema()).unwrap_err();
        assert_eq!(err.category(), "config");

        // Declared column missing from the file.
        let bad = "f0,age,dx\n1.0,50,A\n";
        let err = load_csv_reader(bad.as_bytes(), &toy_schema()).unwrap_err();
        assert!(err.to_string().contains("f1"));

        // Single class.
        let bad = "f0,f1,age,dx\n1.0,2.0,50,A\n2.0,3.0,52,A\n";
        let err = load_csv_reader(bad.as_bytes(), &toy_schema()).unwrap_err();
        assert!(err.to_string().contains("2 classes"));
    }

    #[test]
    fn wide_file_accepted() {
        // Clinical-table shape: 813 rows x 435 features.
        let (rows, cols) = (813, 435);
        let mut text = String::new();
        for j in 0..cols {
            text.push_str(&format!("c{j},"));
        }
        text.push_str("age,dx\n");
        for r in 0..rows {
            for j in 0..cols {
                if (r + j) % 17 == 0 {
                    text.push(',');
                } else {
                    text.push_str(&format!("{},", (r * 31 + j * 7) % 100));
                }
            }
            text.push_str(&format!("{},{}\n", 50 + r % 40, if r % 3 == 0 { "A" } else { "B" }));
        }
        let mut columns: Vec<ColumnSpec> = (0..cols)
            .map(|j| ColumnSpec { name: format!("c{j}"), role: Role::Feature, threshold: None })
            .collect();
        columns.push(ColumnSpec { name: "age".into(), role: Role::Meta, threshold: Some(2.0) });
        columns.push(ColumnSpec { name: "dx".into(), role: Role::Label, threshold: None });
        let ds = load_csv_reader(text.as_bytes(), &Schema { columns }).unwrap();
        assert_eq!((ds.n(), ds.m()), (rows, cols));
    }

    fn balanced_dataset(n: usize) -> MaskedDataset {
        let spec = SyntheticSpec {
            n,
            m: 4,
            c: 2,
            rank: 2,
            sigma: 0.1,
            num_meta: 1,
            rho: 1.0,
            seed: 5,
        };
        let mut ds = generate_synthetic(&spec).unwrap();
        // Force an exactly balanced label vector for the counting tests.
        for r in 0..n {
            ds.labels[r] = r % 2;
            ds.meta[0].values[r] = (r % 2) as f64;
        }
        ds
    }

    #[test]
    fn split_counts_match_protocol() {
        let ds = balanced_dataset(100);
        let split = assign_splits(&ds, 7).unwrap();
        let count = |s: Split| split.split.iter().filter(|&&x| x == s).count();
        assert_eq!(count(Split::Test), 10);
        assert_eq!(count(Split::Val), 9);
        assert_eq!(count(Split::Train), 81);

        // Same seed, same assignment; different seed, different assignment.
        let again = assign_splits(&ds, 7).unwrap();
        assert_eq!(split.split, again.split);
        let other = assign_splits(&ds, 8).unwrap();
        assert_ne!(split.split, other.split);
    }

    #[test]
    fn splits_are_stratified_within_one_member() {
        let spec = SyntheticSpec {
            n: 143,
            m: 4,
            c: 3,
            rank: 2,
            sigma: 0.1,
            num_meta: 1,
            rho: 0.8,
            seed: 9,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let split = assign_splits(&ds, 3).unwrap();
        let total_test = split.split.iter().filter(|&&s| s == Split::Test).count();
        assert_eq!(total_test, 14);
        for k in 0..3 {
            let class_n = ds.labels.iter().filter(|&&l| l == k).count();
            let class_test = (0..ds.n())
                .filter(|&r| ds.labels[r] == k && split.split[r] == Split::Test)
                .count();
            let ideal = class_n as f64 * total_test as f64 / ds.n() as f64;
            assert!(
                (class_test as f64 - ideal).abs() < 1.0 + 1e-9,
                "class {k}: {class_test} test rows vs ideal {ideal}"
            );
        }
    }

    #[test]
    fn tiny_class_falls_back_to_pooled_assignment() {
        let mut ds = balanced_dataset(40);
        ds.class_names.push("rare".into());
        ds.labels[0] = 2;
        ds.labels[1] = 2;
        let split = assign_splits(&ds, 1).unwrap();
        assert_eq!(split.split.len(), 40);
        assert_eq!(split.split.iter().filter(|&&s| s == Split::Test).count(), 4);
    }

    #[test]
    fn too_few_rows_rejected() {
        let ds = balanced_dataset(20);
        let mut small = ds.clone();
        small.x = small.x.slice_cols(0, 4).unwrap();
        // Shrink to 8 rows by rebuilding fields.
        let keep = 8;
        small.x = Matrix::from_rows(
            &(0..keep).map(|r| ds.x.row(r).to_vec()).collect::<Vec<_>>(),
        );
        small.observed = Matrix::filled(keep, 4, 1.0);
        small.observed_baseline = Matrix::filled(keep, 4, 1.0);
        small.labels = ds.labels[..keep].to_vec();
        small.split = vec![Split::Train; keep];
        small.meta[0].values = ds.meta[0].values[..keep].to_vec();
        small.ground_truth_x = None;
        let err = assign_splits(&small, 0).unwrap_err();
        assert_eq!(err.category(), "data");
    }

    #[test]
    fn availability_keeps_exact_fraction_and_nests() {
        let ds = balanced_dataset(100);
        // 100 x 4 fully observed = 400 entries.
        let at75 = apply_availability(&ds, 0.75, 11).unwrap();
        let kept75: f64 = at75.observed.as_slice().iter().sum();
        assert_eq!(kept75, 300.0);
        assert_eq!(at75.held_out_entries().len(), 100);

        let at50 = apply_availability(&ds, 0.5, 11).unwrap();
        let at25 = apply_availability(&ds, 0.25, 11).unwrap();
        for r in 0..100 {
            for c in 0..4 {
                if at25.observed.get(r, c) == 1.0 {
                    assert_eq!(at50.observed.get(r, c), 1.0, "25% not nested in 50%");
                }
                if at50.observed.get(r, c) == 1.0 {
                    assert_eq!(at75.observed.get(r, c), 1.0, "50% not nested in 75%");
                }
            }
        }

        let full = apply_availability(&ds, 1.0, 11).unwrap();
        assert_eq!(full.observed, ds.observed_baseline);
        assert!(full.held_out_entries().is_empty());

        assert!(apply_availability(&ds, 0.0, 11).is_err());
        assert!(apply_availability(&ds, 1.2, 11).is_err());
    }

    #[test]
    fn availability_removal_is_column_uniform() {
        // Chi-squared goodness of fit over 5 columns at the 1% level
        // (critical value for 4 degrees of freedom: 13.2767).
        let spec = SyntheticSpec {
            n: 2000,
            m: 5,
            c: 2,
            rank: 2,
            sigma: 0.0,
            num_meta: 1,
            rho: 1.0,
            seed: 2,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let masked = apply_availability(&ds, 0.5, 3).unwrap();
        let removed = masked.held_out_entries();
        assert_eq!(removed.len(), 5000);
        let mut per_col = [0usize; 5];
        for &(_, c) in &removed {
            per_col[c] += 1;
        }
        let expected = 1000.0;
        let chi2: f64 = per_col
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 13.2767, "chi-squared {chi2} too large for uniform removal");
    }

    #[test]
    fn assembled_masks_and_label_blocks() {
        let ds = balanced_dataset(40);
        let split = assign_splits(&ds, 5).unwrap();
        let masked = apply_availability(&split, 0.5, 6).unwrap();
        let asm = masked.assemble().unwrap();
        let (m, total) = (4, 6);
        assert_eq!(asm.z.shape(), (40, total));
        assert_eq!(asm.label_cols, (m, total));

        for r in 0..40 {
            match masked.split[r] {
                Split::Train => {
                    let row_sum: f64 = asm.z.row(r)[m..].iter().sum();
                    assert_eq!(row_sum, 1.0, "train row {r} must be one-hot");
                    assert_eq!(asm.masks.omega_y.row(r)[m..], [1.0, 1.0]);
                    assert!(!asm.val_rows[r]);
                }
                Split::Val => {
                    assert!(asm.z.row(r)[m..].iter().all(|&v| v == 0.0));
                    assert!(asm.val_rows[r]);
                    assert_eq!(asm.val_targets.row(r)[masked.labels[r]], 1.0);
                }
                Split::Test => {
                    assert!(asm.z.row(r)[m..].iter().all(|&v| v == 0.0));
                    assert!(asm.masks.omega_y.row(r).iter().all(|&v| v == 0.0));
                    assert!(!asm.val_rows[r]);
                }
            }
            for c in 0..m {
                assert_eq!(
                    asm.masks.omega_x.get(r, c),
                    masked.observed.get(r, c),
                    "omega_x must mirror the availability mask"
                );
                if masked.observed.get(r, c) == 0.0 {
                    assert_eq!(asm.z.get(r, c), 0.0, "missing entries must be zero-filled");
                }
            }
        }

        // Standardization statistics come from observed training entries.
        for c in 0..m {
            let (mut sum, mut count) = (0.0, 0usize);
            for r in 0..40 {
                if masked.split[r] == Split::Train && masked.observed.get(r, c) == 1.0 {
                    sum += asm.z.get(r, c);
                    count += 1;
                }
            }
            assert!(count > 0);
            assert!((sum / count as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn synthetic_rank_matches_construction() {
        // Without feature noise the matrix lives in a rank-`rank` subspace.
        let spec = SyntheticSpec {
            n: 60,
            m: 12,
            c: 3,
            rank: 2,
            sigma: 0.0,
            num_meta: 2,
            rho: 1.0,
            seed: 4,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let dm = nalgebra::DMatrix::from_fn(60, 12, |r, c| ds.x.get(r, c));
        let svd = dm.svd(false, false);
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(sv[1] > 1e-6, "construction should use the full rank");
        for (i, &s) in sv.iter().enumerate().skip(spec.rank * spec.c) {
            assert!(s < 1e-9, "singular value {i} = {s} exceeds the rank bound");
        }
        // The shared latent map actually bounds the rank by `rank` alone.
        assert!(sv[spec.rank] < 1e-9);
    }

    #[test]
    fn synthetic_exact_meta_gives_label_cliques() {
        let spec = SyntheticSpec {
            n: 30,
            m: 6,
            c: 3,
            rank: 3,
            sigma: 0.0,
            num_meta: 2,
            rho: 1.0,
            seed: 8,
        };
        let ds = generate_synthetic(&spec).unwrap();
        for g in ds.build_graphs().unwrap() {
            for i in 0..30 {
                for j in 0..30 {
                    let expected = if i != j && ds.labels[i] == ds.labels[j] { 1.0 } else { 0.0 };
                    assert_eq!(g.adjacency.get(i, j), expected);
                }
            }
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            n: 25,
            m: 5,
            c: 2,
            rank: 2,
            sigma: 0.3,
            num_meta: 2,
            rho: 0.8,
            seed: 42,
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.meta[1].values, b.meta[1].values);

        let mut other = spec.clone();
        other.seed = 43;
        let c = generate_synthetic(&other).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn synthetic_spec_validation() {
        let good = SyntheticSpec {
            n: 10,
            m: 5,
            c: 2,
            rank: 2,
            sigma: 0.1,
            num_meta: 1,
            rho: 0.5,
            seed: 0,
        };
        assert!(good.validate().is_ok());
        let mut bad = good.clone();
        bad.rank = 6;
        assert_eq!(bad.validate().unwrap_err().category(), "config");
        let mut bad = good.clone();
        bad.rho = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.sigma = -0.1;
        assert!(bad.validate().is_err());
        let mut bad = good;
        bad.c = 1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn export_round_trips_through_loader() {
        let spec = SyntheticSpec {
            n: 20,
            m: 3,
            c: 2,
            rank: 2,
            sigma: 0.2,
            num_meta: 2,
            rho: 0.9,
            seed: 6,
        };
        let ds = generate_synthetic(&spec).unwrap();
        let masked = apply_availability(&ds, 0.75, 1).unwrap();

        let mut csv_bytes = Vec::new();
        write_dataset_csv(&masked, &mut csv_bytes).unwrap();
        let schema = dataset_schema(&masked);
        let back = load_csv_reader(csv_bytes.as_slice(), &schema).unwrap();

        assert_eq!(back.n(), 20);
        assert_eq!(back.m(), 3);
        assert_eq!(back.labels, masked.labels);
        assert_eq!(back.observed_baseline, masked.observed);
        for r in 0..20 {
            for c in 0..3 {
                if masked.observed.get(r, c) == 1.0 {
                    assert!((back.x.get(r, c) - masked.x.get(r, c)).abs() <= 1e-12);
                }
            }
            for j in 0..2 {
                assert_eq!(back.meta[j].values[r], masked.meta[j].values[r]);
            }
        }

        let mut truth_bytes = Vec::new();
        write_truth_csv(&masked, &mut truth_bytes).unwrap();
        let text = String::from_utf8(truth_bytes).unwrap();
        assert_eq!(text.lines().count(), 21);
    }
}
