//! Controlled training comparisons: conv depth under an equal step budget,
//! and random-shift augmentation on versus off.

use serde::{Deserialize, Serialize};

use crate::data::PreparedDataset;
use crate::error::{Error, Result};
use crate::network::{Model, NetworkConfig};
use crate::train::{train, CheckpointPaths, TrainConfig, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub depth: usize,
    pub conv_widths: Vec<usize>,
    pub params: usize,
    pub steps: usize,
    pub best_accuracy: f64,
    pub final_accuracy: f64,
    pub wall_clock: f64,
}

pub const SWEEP_CSV_HEADER: &str = "label,depth,conv_widths,params,steps,best_accuracy,final_accuracy,wall_clock";

impl SweepRow {
    pub fn csv_line(&self) -> String {
        let widths: Vec<String> = self.conv_widths.iter().map(|w| w.to_string()).collect();
        format!(
            "{},{},{},{},{},{},{},{:.1}",
            self.label,
            self.depth,
            widths.join("-"),
            self.params,
            self.steps,
            self.best_accuracy,
            self.final_accuracy,
            self.wall_clock
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        s += &r.csv_line();
        s.push('\n');
    }
    s
}

fn conv_widths(cfg: &NetworkConfig) -> Vec<usize> {
    cfg.layers
        .iter()
        .filter_map(|l| match l {
            crate::network::LayerSpec::Conv { width, .. } => Some(*width),
            _ => None,
        })
        .collect()
}

/// Trains `net` for exactly `steps` steps (or until `train.epochs`) and
/// summarizes the run.
pub fn run_one(label: &str, net: NetworkConfig, data: &PreparedDataset, train_cfg: &TrainConfig, steps: usize) -> Result<SweepRow> {
    let params = Model::count_params(&net)?;
    let depth = net.conv_depth();
    let widths = conv_widths(&net);
    let mut state = TrainState::new(Model::build(net, train_cfg.seed)?);
    let cfg = TrainConfig { max_steps: Some(steps), time_limit: None, target_accuracy: None, ..train_cfg.clone() };
    let report = train(&mut state, data, &cfg, &CheckpointPaths::default())?;
    Ok(SweepRow {
        label: label.to_string(),
        depth,
        conv_widths: widths,
        params,
        steps: state.step,
        best_accuracy: report.best_accuracy,
        final_accuracy: report.epochs.last().map_or(0.0, |e| e.val_accuracy),
        wall_clock: report.wall_clock,
    })
}

/// Smallest single-conv-layer width whose model has at least `params`
/// parameters.
pub fn shallow_width_for(params: usize, dense_width: usize) -> Result<usize> {
    for w in 1..=4096 {
        if Model::count_params(&NetworkConfig::desk_with_widths(&[w], dense_width))? >= params {
            return Ok(w);
        }
    }
    Err(Error::InvalidArgument(format!("no single-layer width reaches {params} parameters")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub depths: Vec<usize>,
    /// Steps per model; identical for every row.
    pub steps: usize,
    /// Also train a one-conv-layer model at least as large as the deepest.
    pub control: bool,
    /// Conv width of the control; defaults to the smallest width that
    /// matches the deepest model's parameter count.
    pub control_width: Option<usize>,
}

/// One desk model per depth (plus the optional shallow control), each
/// trained with the same step budget, seed and data.
pub fn arch_sweep(data: &PreparedDataset, sweep: &SweepConfig, train_cfg: &TrainConfig) -> Result<Vec<SweepRow>> {
    if sweep.depths.is_empty() || sweep.depths.contains(&0) {
        return Err(Error::InvalidArgument("depths must be a non-empty list of positive integers".into()));
    }
    let mut rows = Vec::new();
    for &d in &sweep.depths {
        rows.push(run_one(&format!("depth-{d}"), NetworkConfig::desk_with_depth(d), data, train_cfg, sweep.steps)?);
    }
    if sweep.control {
        let deepest = *sweep.depths.iter().max().expect("non-empty");
        let target = Model::count_params(&NetworkConfig::desk_with_depth(deepest))?;
        let width = match sweep.control_width {
            Some(w) => w,
            None => shallow_width_for(target, 64)?,
        };
        let net = NetworkConfig::desk_with_widths(&[width], 64);
        rows.push(run_one("shallow-control", net, data, train_cfg, sweep.steps)?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPair {
    pub with_shift: SweepRow,
    pub without_shift: SweepRow,
}

/// Trains the same network twice with identical seeds and step budgets,
/// once with random shift crops and once with the fixed centre crop.
pub fn augmentation_pair(net: &NetworkConfig, data: &PreparedDataset, train_cfg: &TrainConfig, steps: usize) -> Result<AugmentationPair> {
    let on = TrainConfig { augment: true, ..train_cfg.clone() };
    let off = TrainConfig { augment: false, ..train_cfg.clone() };
    Ok(AugmentationPair {
        with_shift: run_one("augment", net.clone(), data, &on, steps)?,
        without_shift: run_one("no-augment", net.clone(), data, &off, steps)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_width_matches_parameter_count() {
        let target = Model::count_params(&NetworkConfig::desk_with_depth(5)).unwrap();
        let w = shallow_width_for(target, 64).unwrap();
        assert!(Model::count_params(&NetworkConfig::desk_with_widths(&[w], 64)).unwrap() >= target);
        if w > 1 {
            assert!(Model::count_params(&NetworkConfig::desk_with_widths(&[w - 1], 64)).unwrap() < target);
        }
    }

    #[test]
    fn csv_row_format() {
        let row = SweepRow {
            label: "depth-3".into(),
            depth: 3,
            conv_widths: vec![8, 16, 32],
            params: 10,
            steps: 5,
            best_accuracy: 0.5,
            final_accuracy: 0.25,
            wall_clock: 1.0,
        };
        assert_eq!(sweep_csv(&[row]), format!("{SWEEP_CSV_HEADER}\ndepth-3,3,8-16-32,10,5,0.5,0.25,1.0\n"));
    }
}
