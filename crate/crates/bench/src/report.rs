//! Experiment reports: JSON on disk, aligned table on stdout.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub mse: f64,
    pub mae: f64,
    /// Epoch whose weights were kept (validation MSE).
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    /// `None` for the direct text-to-series mapping.
    pub n_lf: Option<usize>,
    pub mse: f64,
    pub mae: f64,
    pub n_opt: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// FNV-1a over the ordered instance ids of all three blocks.
    pub fingerprint: String,
    /// Every method saw exactly these indices.
    pub identical_across_methods: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub command: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comparison: Vec<MethodRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ablation: Vec<AblationRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_opt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitInfo>,
    pub assumptions: Vec<String>,
    pub config_snapshot: RunConfig,
}

impl ExperimentReport {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.into(),
            seed: cfg.seed,
            comparison: Vec::new(),
            ablation: Vec::new(),
            n_opt: None,
            split: None,
            assumptions: Vec::new(),
            config_snapshot: cfg.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn method(&self, name: &str) -> Option<&MethodRow> {
        self.comparison.iter().find(|r| r.method == name)
    }

    pub fn setting(&self, name: &str) -> Option<&AblationRow> {
        self.ablation.iter().find(|r| r.setting == name)
    }

    /// Plain-text tables for the terminal.
    pub fn table(&self) -> String {
        let mut out = String::new();
        if !self.comparison.is_empty() {
            let w = self
                .comparison
                .iter()
                .map(|r| r.method.len())
                .max()
                .unwrap_or(0)
                .max(6);
            let _ = writeln!(
                out,
                "{:<w$}  {:>10}  {:>10}  {:>10}",
                "method", "MSE", "MAE", "best_epoch"
            );
            for r in &self.comparison {
                let _ = writeln!(
                    out,
                    "{:<w$}  {:>10.4}  {:>10.4}  {:>10}",
                    r.method, r.mse, r.mae, r.best_epoch
                );
            }
        }
        if !self.ablation.is_empty() {
            if !out.is_empty() {
                out.push('\n');
            }
            let w = self
                .ablation
                .iter()
                .map(|r| r.setting.len())
                .max()
                .unwrap_or(0)
                .max(7);
            let _ = writeln!(out, "{:<w$}  {:>10}  {:>10}", "setting", "MSE", "MAE");
            for r in &self.ablation {
                let mark = if r.n_opt { "  <- N_opt" } else { "" };
                let _ = writeln!(
                    out,
                    "{:<w$}  {:>10.4}  {:>10.4}{mark}",
                    r.setting, r.mse, r.mae
                );
            }
        }
        out
    }
}

/// Index of the best ablation row: lowest MSE, ties to the smallest `n_lf`,
/// the direct mapping ranked after every truncation level.
pub fn argmin_setting(rows: &[AblationRow]) -> Option<usize> {
    let key = |r: &AblationRow| r.n_lf.unwrap_or(usize::MAX);
    (0..rows.len()).min_by(|&a, &b| {
        rows[a]
            .mse
            .total_cmp(&rows[b].mse)
            .then(key(&rows[a]).cmp(&key(&rows[b])))
    })
}
