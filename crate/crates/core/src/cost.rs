//! Trainable parameter and inference MAC counts.
//!
//! One MAC is one scalar multiply-add: a `d×k` matrix-vector product costs
//! `d·k`, a rank-`r` adapter on it `r(d + k)`. Bias adds and nonlinearities
//! cost no MACs. Heads are always task-specific and counted in every mode.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::{compute_tree, SearchMode};
use crate::network::{plan_ranks, BranchedNetwork, NetworkConfig, NetworkShape, RankPolicy, LAYERS_PER_STAGE};
use crate::similarity::SimilarityMatrix;
use crate::tree::{check_schedule, TaskTree};

pub const MAC_CONVENTION: &str =
    "1 MAC = 1 scalar multiply-add; d×k matvec = d·k; rank-r adapter = r(d+k); bias and nonlinearities = 0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    Individual,
    Shared,
    Progressive,
}

impl CostMode {
    pub const ALL: [CostMode; 3] = [CostMode::Individual, CostMode::Shared, CostMode::Progressive];

    pub fn as_str(self) -> &'static str {
        match self {
            CostMode::Individual => "individual",
            CostMode::Shared => "shared",
            CostMode::Progressive => "progressive",
        }
    }
}

/// The layout of `mode`: separate paths per task, one shared path, or the
/// paths of `tree`. Individual mode also runs the stem once per task.
pub fn shape_for_mode(
    config: &NetworkConfig,
    mode: CostMode,
    tree: &TaskTree,
    policy: RankPolicy,
    head_outputs: &[usize],
) -> Result<NetworkShape> {
    let t = head_outputs.len();
    let s = config.stage_count;
    let (tree, stem_streams) = match mode {
        CostMode::Individual => (TaskTree::individual(s, t), t),
        CostMode::Shared => (TaskTree::shared(s, t), 1),
        CostMode::Progressive => (tree.clone(), 1),
    };
    let mut shape = NetworkShape::from_tree(config, &tree, policy, head_outputs)?;
    shape.stem_streams = stem_streams;
    Ok(shape)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub name: String,
    pub streams: usize,
    pub base_macs: usize,
    pub adapter_macs: usize,
    pub macs: usize,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mode: CostMode,
    pub trainable_params: usize,
    /// Per input example.
    pub macs: usize,
    pub breakdown: Vec<StageCost>,
}

impl CostReport {
    /// Totals equal the sums over the breakdown.
    pub fn is_consistent(&self) -> bool {
        self.macs == self.breakdown.iter().map(|s| s.macs).sum::<usize>()
            && self.trainable_params == self.breakdown.iter().map(|s| s.params).sum::<usize>()
            && self.breakdown.iter().all(|s| s.macs == s.base_macs + s.adapter_macs)
    }
}

pub fn adapter_params(shape: &NetworkShape) -> usize {
    let d = shape.hidden_dim;
    shape
        .stage_ranks
        .iter()
        .flatten()
        .map(|r| LAYERS_PER_STAGE * r * 2 * d)
        .sum()
}

pub fn head_params(shape: &NetworkShape) -> usize {
    let (d, h) = (shape.hidden_dim, shape.head_hidden);
    shape.head_outputs.iter().map(|o| h * d + h + o * h + o).sum()
}

/// Breaks the cost of one forward pass down by stem, stage and heads.
pub fn cost_of_shape(mode: CostMode, shape: &NetworkShape) -> CostReport {
    let (k, d, h) = (shape.input_dim, shape.hidden_dim, shape.head_hidden);
    let mut breakdown = Vec::with_capacity(shape.stage_ranks.len() + 2);
    let stem = shape.stem_streams * k * d;
    breakdown.push(StageCost {
        name: "stem".into(),
        streams: shape.stem_streams,
        base_macs: stem,
        adapter_macs: 0,
        macs: stem,
        params: 0,
    });
    for (s, ranks) in shape.stage_ranks.iter().enumerate() {
        let base = LAYERS_PER_STAGE * ranks.len() * d * d;
        let adapter: usize = ranks.iter().map(|r| LAYERS_PER_STAGE * r * 2 * d).sum();
        breakdown.push(StageCost {
            name: format!("stage{s}"),
            streams: ranks.len(),
            base_macs: base,
            adapter_macs: adapter,
            macs: base + adapter,
            params: adapter,
        });
    }
    let heads: usize = shape.head_outputs.iter().map(|o| d * h + h * o).sum();
    breakdown.push(StageCost {
        name: "heads".into(),
        streams: shape.head_outputs.len(),
        base_macs: heads,
        adapter_macs: 0,
        macs: heads,
        params: head_params(shape),
    });
    CostReport {
        mode,
        trainable_params: breakdown.iter().map(|s| s.params).sum(),
        macs: breakdown.iter().map(|s| s.macs).sum(),
        breakdown,
    }
}

/// Trainable parameters of a built network from its layout.
pub fn count_trainable(net: &BranchedNetwork) -> usize {
    let shape = net.shape();
    adapter_params(&shape) + head_params(&shape)
}

/// MACs per example of `net`'s layout run in `mode`.
pub fn count_macs(net: &BranchedNetwork, mode: CostMode) -> Result<usize> {
    let shape = shape_for_mode(&net.config, mode, &net.tree, net.policy, &net.head_outputs)?;
    Ok(cost_of_shape(mode, &shape).macs)
}

/// Reports for all three modes over one tree and rank policy.
pub fn compare_modes(
    config: &NetworkConfig,
    tree: &TaskTree,
    policy: RankPolicy,
    head_outputs: &[usize],
) -> Result<Vec<CostReport>> {
    CostMode::ALL
        .iter()
        .map(|&m| Ok(cost_of_shape(m, &shape_for_mode(config, m, tree, policy, head_outputs)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub schedule: Vec<usize>,
    /// Filled in once the schedule has been trained.
    pub delta_m_percent: Option<f64>,
    pub macs: Option<usize>,
    pub trainable_params: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Progressive costs of each schedule. Trees come from `sim` when given,
/// otherwise from an all-zero similarity (the merge order then only
/// follows tie-breaking, which leaves the counts and costs unchanged under
/// a uniform rank policy). Invalid schedules are kept with a note.
pub fn schedule_cost_scan(
    config: &NetworkConfig,
    policy: RankPolicy,
    head_outputs: &[usize],
    schedules: &[Vec<usize>],
    sim: Option<&SimilarityMatrix>,
) -> Result<Vec<ScanRow>> {
    let t = head_outputs.len();
    let zero;
    let sim = match sim {
        Some(s) => s,
        None => {
            let mut v = vec![vec![0.0; t]; t];
            (0..t).for_each(|i| v[i][i] = 1.0);
            zero = SimilarityMatrix::from_values(v)?;
            &zero
        }
    };
    let mut rows = Vec::with_capacity(schedules.len());
    for sched in schedules {
        let row = (|| -> Result<(usize, usize)> {
            check_schedule(sched, t)?;
            if sched.len() != config.stage_count {
                return Err(Error::Config(format!(
                    "{} stage counts for {} stages",
                    sched.len(),
                    config.stage_count
                )));
            }
            let tree = compute_tree(sim, sched, SearchMode::CountConstrained)?.tree;
            plan_ranks(&tree, policy)?;
            let shape = shape_for_mode(config, CostMode::Progressive, &tree, policy, head_outputs)?;
            let r = cost_of_shape(CostMode::Progressive, &shape);
            Ok((r.macs, r.trainable_params))
        })();
        rows.push(match row {
            Ok((macs, params)) => ScanRow {
                schedule: sched.clone(),
                delta_m_percent: None,
                macs: Some(macs),
                trainable_params: Some(params),
                note: None,
            },
            Err(e) => ScanRow {
                schedule: sched.clone(),
                delta_m_percent: None,
                macs: None,
                trainable_params: None,
                note: Some(format!("skipped: {e}")),
            },
        });
    }
    Ok(rows)
}

/// Shape of `cost.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostFile {
    pub convention: String,
    pub reports: Vec<CostReport>,
    pub scan: Vec<ScanRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl CostFile {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::format("cost.json", e))
    }

    /// Human-readable tables of the reports and the scan.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.convention);
        let _ = writeln!(s, "{:<12} {:>12} {:>12}", "mode", "params", "MACs");
        for r in &self.reports {
            let _ = writeln!(s, "{:<12} {:>12} {:>12}", r.mode.as_str(), r.trainable_params, r.macs);
        }
        if !self.scan.is_empty() {
            let _ = writeln!(s, "\n{:<16} {:>12} {:>12} {:>10}", "schedule", "params", "MACs", "dm%");
            for row in &self.scan {
                let sched = format!("{:?}", row.schedule);
                let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
                let dm = row.delta_m_percent.map_or("-".to_string(), |v| format!("{v:.3}"));
                let _ = write!(s, "{sched:<16} {:>12} {:>12} {dm:>10}", opt(row.trainable_params), opt(row.macs));
                if let Some(n) = &row.note {
                    let _ = write!(s, "  {n}");
                }
                s.push('\n');
            }
        }
        s
    }
}
