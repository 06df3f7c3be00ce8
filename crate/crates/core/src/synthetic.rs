//! Synthetic multi-task data with planted task clusters.
//!
//! All tasks share the inputs `x ~ N(0, I)`. Each cluster has its own
//! teacher: the frozen backbone with a common low-rank weight shift on
//! every stage plus a cluster-specific low-rank shift on the later stages.
//! The cluster shifts are `cos θ_c · D₁ + sin θ_c · D₂` for angles spread
//! evenly over the circle, so with two clusters they are exact opposites.
//! Task `t` in cluster `c` reads
//!
//! ```text
//! y_t = r_c · teacher_c(x) + ε · δ_t · teacher_c(x) + σ · noise
//! ```
//!
//! where `r_c` is the cluster readout and `δ_t` a task-specific readout,
//! each rescaled so its term has unit deviation over the training inputs.
//! Tasks in one cluster therefore need the same backbone adaptation, and
//! tasks in different clusters need conflicting ones.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::artifacts::{decode_f64s, encode_f64s, read_bytes, read_text, sha256_hex, write_bytes, write_json};
use crate::error::{Error, Result};
use crate::network::{BackboneWeights, NetworkConfig};
use crate::rng::{normal_vec, rng_from};
use crate::tensor::Tensor;
use crate::tree::Partition;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    Regression,
    /// Targets discretized into `classes` bins at training-set quantiles.
    Classification { classes: usize },
}

impl TaskKind {
    pub fn outputs(&self) -> usize {
        match self {
            TaskKind::Regression => 1,
            TaskKind::Classification { classes } => *classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskGenerator {
    /// Cluster of each task; its length is the task count.
    pub clusters: Vec<usize>,
    /// Task-specific perturbation weight ε.
    pub epsilon: f64,
    /// Observation noise σ.
    pub sigma: f64,
    /// Norm scale of the shift shared by every cluster.
    pub common_shift: f64,
    /// Norm scale of each cluster's own shift.
    pub cluster_shift: f64,
    pub shift_rank: usize,
    /// First stage receiving cluster shifts.
    pub cluster_shift_from_stage: usize,
    /// Empty means all regression.
    pub kinds: Vec<TaskKind>,
}

impl Default for TaskGenerator {
    fn default() -> Self {
        Self {
            clusters: vec![0, 0, 1, 1],
            epsilon: 0.1,
            sigma: 0.05,
            common_shift: 1.0,
            cluster_shift: 1.5,
            shift_rank: 4,
            cluster_shift_from_stage: 1,
            kinds: Vec::new(),
        }
    }
}

impl TaskGenerator {
    pub fn task_count(&self) -> usize {
        self.clusters.len()
    }

    pub fn kinds(&self) -> Vec<TaskKind> {
        if self.kinds.is_empty() {
            vec![TaskKind::Regression; self.task_count()]
        } else {
            self.kinds.clone()
        }
    }

    /// The planted clusters as a partition of the tasks.
    pub fn cluster_partition(&self) -> Partition {
        Partition::from_labels(&relabel(&self.clusters))
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(Error::Config("generator needs at least one task".into()));
        }
        if !(self.epsilon >= 0.0 && self.sigma >= 0.0 && self.common_shift >= 0.0 && self.cluster_shift >= 0.0) {
            return Err(Error::Config("epsilon, sigma and shift scales must be non-negative".into()));
        }
        if self.shift_rank == 0 {
            return Err(Error::Config("shift rank must be positive".into()));
        }
        if !self.kinds.is_empty() && self.kinds.len() != self.clusters.len() {
            return Err(Error::Config(format!(
                "{} task kinds for {} tasks",
                self.kinds.len(),
                self.clusters.len()
            )));
        }
        if self.kinds.iter().any(|k| matches!(k, TaskKind::Classification { classes } if *classes < 2)) {
            return Err(Error::Config("classification needs at least 2 classes".into()));
        }
        Ok(())
    }

    /// Draws a dataset. The teacher shares the frozen weights selected by
    /// `net.backbone_seed`; `seed` drives inputs, shifts, readouts and noise.
    pub fn generate(&self, net: &NetworkConfig, n_train: usize, n_val: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        net.validate()?;
        if n_train == 0 || n_val == 0 {
            return Err(Error::Config("dataset sizes must be at least 1".into()));
        }
        let t = self.task_count();
        let d = net.hidden_dim;
        let base = BackboneWeights::generate(net, net.backbone_seed);
        let labels = relabel(&self.clusters);
        let cluster_count = labels.iter().max().map_or(0, |m| m + 1);

        let mut common = base.clone();
        add_shifts(&mut common, self.common_shift, self.shift_rank, seed, "common", 0);
        let teachers: Vec<BackboneWeights> = (0..cluster_count)
            .map(|c| {
                // clusters spread evenly over a circle of shifts, so any two
                // pull the shared weights in clearly different directions
                let angle = std::f64::consts::TAU * c as f64 / cluster_count as f64;
                let mut w = common.clone();
                for (label, scale) in [("cluster.cos", angle.cos()), ("cluster.sin", angle.sin())] {
                    add_shifts(
                        &mut w,
                        self.cluster_shift * scale,
                        self.shift_rank,
                        seed,
                        label,
                        self.cluster_shift_from_stage,
                    );
                }
                w
            })
            .collect();
        let readout = |label: String| {
            Tensor::new(vec![1, d], normal_vec(&mut rng_from(seed, &label), d, (1.0 / d as f64).sqrt()))
                .expect("shape")
        };
        let cluster_readouts: Vec<Tensor> = (0..cluster_count).map(|c| readout(format!("readout.c{c}"))).collect();
        let task_readouts: Vec<Tensor> = (0..t).map(|i| readout(format!("readout.t{i}"))).collect();

        let inputs = |label: &str, n: usize| -> Result<Tensor> {
            let mut rng = rng_from(seed, label);
            Tensor::new(vec![n, net.input_dim], normal_vec(&mut rng, n * net.input_dim, 1.0))
        };
        let x_train = inputs("train", n_train)?;
        let x_val = inputs("val", n_val)?;
        let signals = |x: &Tensor| -> Result<(Vec<Tensor>, Vec<Tensor>)> {
            let feats: Vec<Tensor> = teachers.iter().map(|w| w.forward(x)).collect::<Result<_>>()?;
            let clean = labels
                .iter()
                .map(|&c| feats[c].linear(&cluster_readouts[c], None))
                .collect::<Result<_>>()?;
            let pert = labels
                .iter()
                .enumerate()
                .map(|(task, &c)| feats[c].linear(&task_readouts[task], None))
                .collect::<Result<_>>()?;
            Ok((clean, pert))
        };
        // both signal parts are scaled to unit training-set deviation
        let (clean_train, pert_train) = signals(&x_train)?;
        let clean_sd: Vec<f64> = clean_train.iter().map(|c| std_dev(c.data())).collect();
        let pert_sd: Vec<f64> = pert_train.iter().map(|p| std_dev(p.data())).collect();
        let targets = |label: &str, clean: &[Tensor], pert: &[Tensor], n: usize| -> Result<Tensor> {
            let mut noise_rng = rng_from(seed, &format!("{label}.noise"));
            let mut y = vec![0.0; n * t];
            for task in 0..t {
                for i in 0..n {
                    let z: f64 = StandardNormal.sample(&mut noise_rng);
                    y[i * t + task] = clean[task].data()[i] / clean_sd[task]
                        + self.epsilon * pert[task].data()[i] / pert_sd[task]
                        + self.sigma * z;
                }
            }
            Tensor::new(vec![n, t], y)
        };
        let mut y_train = targets("train", &clean_train, &pert_train, n_train)?;
        let (clean_val, pert_val) = signals(&x_val)?;
        let mut y_val = targets("val", &clean_val, &pert_val, n_val)?;

        let kinds = self.kinds();
        for (task, kind) in kinds.iter().enumerate() {
            if let TaskKind::Classification { classes } = *kind {
                let mut col: Vec<f64> = (0..n_train).map(|i| y_train.data()[i * t + task]).collect();
                col.sort_by(f64::total_cmp);
                let cuts: Vec<f64> = (1..classes).map(|q| col[q * n_train / classes]).collect();
                for y in [&mut y_train, &mut y_val] {
                    let rows = y.shape()[0];
                    for i in 0..rows {
                        let v = &mut y.data_mut()[i * t + task];
                        *v = cuts.iter().filter(|&&c| *v >= c).count() as f64;
                    }
                }
            }
        }

        Ok(Dataset {
            task_names: (0..t).map(|i| format!("t{i}")).collect(),
            kinds,
            cluster_truth: labels,
            seed,
            x_train,
            y_train,
            x_val,
            y_val,
        })
    }
}

/// Population standard deviation, or 1 when it is zero.
fn std_dev(v: &[f64]) -> f64 {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        sd
    } else {
        1.0
    }
}

/// Relabels cluster ids to first-appearance order starting at 0.
fn relabel(clusters: &[usize]) -> Vec<usize> {
    let mut map: Vec<(usize, usize)> = Vec::new();
    clusters
        .iter()
        .map(|&c| match map.iter().find(|(k, _)| *k == c) {
            Some(&(_, v)) => v,
            None => {
                map.push((c, map.len()));
                map.len() - 1
            }
        })
        .collect()
}

/// Adds `scale · U Vᵀ / √(d·rank)` to every block weight from `from_stage` on.
fn add_shifts(w: &mut BackboneWeights, scale: f64, rank: usize, seed: u64, label: &str, from_stage: usize) {
    if scale == 0.0 {
        return;
    }
    for (s, block) in w.blocks.iter_mut().enumerate().skip(from_stage) {
        for (l, (weight, _)) in block.iter_mut().enumerate() {
            let (d, k) = weight.dims2().expect("matrix");
            let r = rank.min(d).min(k);
            let mut rng = rng_from(seed, &format!("shift.{label}.s{s}.l{l}"));
            let u = Tensor::new(vec![d, r], normal_vec(&mut rng, d * r, 1.0)).expect("shape");
            let v = Tensor::new(vec![r, k], normal_vec(&mut rng, r * k, 1.0)).expect("shape");
            let delta = u.matmul(&v).expect("shape").scale(scale / ((d * r) as f64).sqrt());
            *weight = weight.add(&delta).expect("shape");
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task_names: Vec<String>,
    pub kinds: Vec<TaskKind>,
    pub cluster_truth: Vec<usize>,
    pub seed: u64,
    pub x_train: Tensor,
    /// `[n_train × T]`; class indices stored as floats for classification.
    pub y_train: Tensor,
    pub x_val: Tensor,
    pub y_val: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub task_names: Vec<String>,
    pub kinds: Vec<TaskKind>,
    pub cluster_truth: Vec<usize>,
    pub seed: u64,
    pub input_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// SHA-256 of the blob.
    pub blob_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub const DATA_BLOB: &str = "data.bin";
pub const DATA_MANIFEST: &str = "manifest.json";

impl Dataset {
    pub fn task_count(&self) -> usize {
        self.task_names.len()
    }

    pub fn n_train(&self) -> usize {
        self.x_train.shape()[0]
    }

    pub fn n_val(&self) -> usize {
        self.x_val.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.x_train.shape()[1]
    }

    /// Target column of `task` for the given split rows.
    pub fn column(y: &Tensor, task: usize) -> Vec<f64> {
        let t = y.shape()[1];
        y.data().iter().skip(task).step_by(t).copied().collect()
    }

    /// The first `n` training examples (inputs and targets).
    pub fn train_subset(&self, n: usize) -> (Tensor, Tensor) {
        let idx: Vec<usize> = (0..n.min(self.n_train())).collect();
        (self.x_train.gather_rows(&idx), self.y_train.gather_rows(&idx))
    }

    /// Blob layout: `x_train`, `y_train`, `x_val`, `y_val`, row-major `f64` LE.
    pub fn to_parts(&self) -> (DatasetManifest, Vec<u8>) {
        let mut values = Vec::new();
        for t in [&self.x_train, &self.y_train, &self.x_val, &self.y_val] {
            values.extend_from_slice(t.data());
        }
        let blob = encode_f64s(&values);
        let manifest = DatasetManifest {
            task_names: self.task_names.clone(),
            kinds: self.kinds.clone(),
            cluster_truth: self.cluster_truth.clone(),
            seed: self.seed,
            input_dim: self.input_dim(),
            n_train: self.n_train(),
            n_val: self.n_val(),
            blob_sha256: sha256_hex(&blob),
            config_hash: None,
        };
        (manifest, blob)
    }

    pub fn from_parts(manifest: &DatasetManifest, blob: &[u8]) -> Result<Self> {
        let t = manifest.task_names.len();
        if manifest.kinds.len() != t || manifest.cluster_truth.len() != t {
            return Err(Error::format("dataset manifest", "per-task lists differ in length"));
        }
        if sha256_hex(blob) != manifest.blob_sha256 {
            return Err(Error::format("dataset blob", "checksum mismatch"));
        }
        let values = decode_f64s(blob)?;
        let sizes = [
            manifest.n_train.checked_mul(manifest.input_dim),
            manifest.n_train.checked_mul(t),
            manifest.n_val.checked_mul(manifest.input_dim),
            manifest.n_val.checked_mul(t),
        ];
        let sizes: Vec<usize> = sizes
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| Error::format("dataset manifest", "sizes overflow"))?;
        let total = sizes.iter().try_fold(0usize, |a, &b| a.checked_add(b));
        if total != Some(values.len()) {
            return Err(Error::format(
                "dataset blob",
                format!("{} values, manifest implies {total:?}", values.len()),
            ));
        }
        let mut off = 0;
        let mut take = |rows: usize, cols: usize| {
            let v = values[off..off + rows * cols].to_vec();
            off += rows * cols;
            Tensor::new(vec![rows, cols], v)
        };
        let data = Self {
            task_names: manifest.task_names.clone(),
            kinds: manifest.kinds.clone(),
            cluster_truth: manifest.cluster_truth.clone(),
            seed: manifest.seed,
            x_train: take(manifest.n_train, manifest.input_dim)?,
            y_train: take(manifest.n_train, t)?,
            x_val: take(manifest.n_val, manifest.input_dim)?,
            y_val: take(manifest.n_val, t)?,
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("dataset blob", "non-finite value"));
        }
        for (task, kind) in data.kinds.iter().enumerate() {
            if let TaskKind::Classification { classes } = *kind {
                let bad = |y: &Tensor| {
                    Self::column(y, task)
                        .iter()
                        .any(|&v| v < 0.0 || v.fract() != 0.0 || v >= classes as f64)
                };
                if classes < 2 || bad(&data.y_train) || bad(&data.y_val) {
                    return Err(Error::format(
                        "dataset blob",
                        format!("task {task} labels are not class indices below {classes}"),
                    ));
                }
            }
        }
        Ok(data)
    }

    pub fn save(&self, dir: &Path, config_hash: Option<&str>) -> Result<()> {
        let (mut manifest, blob) = self.to_parts();
        manifest.config_hash = config_hash.map(str::to_string);
        write_bytes(&dir.join(DATA_BLOB), &blob)?;
        write_json(&dir.join(DATA_MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_str(&read_text(&dir.join(DATA_MANIFEST))?)
            .map_err(|e| Error::format("dataset manifest", e))?;
        let blob = read_bytes(&dir.join(DATA_BLOB))?;
        Self::from_parts(&manifest, &blob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net() -> NetworkConfig {
        NetworkConfig {
            input_dim: 4,
            hidden_dim: 6,
            stage_count: 2,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn same_cluster_without_noise_is_identical() {
        let gen = TaskGenerator {
            clusters: vec![0, 0],
            epsilon: 0.0,
            sigma: 0.0,
            ..TaskGenerator::default()
        };
        let ds = gen.generate(&small_net(), 20, 5, 1).unwrap();
        assert_eq!(Dataset::column(&ds.y_train, 0), Dataset::column(&ds.y_train, 1));
    }

    #[test]
    fn same_seed_same_dataset() {
        let gen = TaskGenerator::default();
        let a = gen.generate(&small_net(), 10, 4, 3).unwrap();
        let b = gen.generate(&small_net(), 10, 4, 3).unwrap();
        assert_eq!(a, b);
        let c = gen.generate(&small_net(), 10, 4, 4).unwrap();
        assert_ne!(a.x_train, c.x_train);
    }

    #[test]
    fn classification_targets_are_class_indices() {
        let gen = TaskGenerator {
            clusters: vec![0, 1],
            kinds: vec![TaskKind::Regression, TaskKind::Classification { classes: 3 }],
            ..TaskGenerator::default()
        };
        let ds = gen.generate(&small_net(), 60, 30, 2).unwrap();
        let col = Dataset::column(&ds.y_train, 1);
        assert!(col.iter().all(|&c| c == 0.0 || c == 1.0 || c == 2.0));
        for k in 0..3 {
            assert_eq!(col.iter().filter(|&&c| c == k as f64).count(), 20);
        }
    }

    #[test]
    fn blob_round_trip_and_corruption() {
        let ds = TaskGenerator::default().generate(&small_net(), 8, 3, 5).unwrap();
        let (m, mut blob) = ds.to_parts();
        assert_eq!(Dataset::from_parts(&m, &blob).unwrap(), ds);
        blob[3] ^= 1;
        assert!(Dataset::from_parts(&m, &blob).is_err());
    }

    #[test]
    fn relabel_first_appearance() {
        assert_eq!(relabel(&[7, 7, 3, 9, 3]), vec![0, 0, 1, 2, 1]);
    }
}
