//! Open-loop prediction benchmark across chain sizes and dataset sizes.

use std::collections::BTreeMap;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ManipulatorModel, Topology};
use crate::error::{Error, Result};
use crate::harness::report::sha256_json;
use crate::koopman::{from_explicit, standardized_error, to_explicit, KoopmanModel, StateConvention, Variant};
use crate::lifting::{Activation, EncoderArchitecture};
use crate::training::{
    generate_dataset_range, train, DatasetKind, ExcitationSpec, GenerationConfig, TrainConfig, TrajectoryDataset,
};

/// Test trajectories are drawn from streams starting here, far from any
/// training stream.
const TEST_STREAM_OFFSET: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictionBenchmarkConfig {
    /// Number of links of each planar test chain.
    pub chains: Vec<usize>,
    pub trajectory_counts: Vec<usize>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Snapshots per training and test trajectory.
    pub snapshots: usize,
    pub dt: f64,
    pub link_mass: f64,
    pub link_length: f64,
    /// The chains move in the x–y plane; the default gravity along +x makes
    /// `q = 0` the hanging rest pose.
    pub gravity: [f64; 3],
    /// Viscous friction at every joint (N·m·s/rad).
    pub joint_friction: f64,
    pub excitation: ExcitationSpec,
    pub train: TrainConfig,
    /// Length of each open-loop prediction window.
    pub rollout_steps: usize,
    pub test_seed: u64,
    /// Held-out trajectories; defaults to a quarter of the largest training set.
    pub test_trajectories: Option<usize>,
}

impl Default for PredictionBenchmarkConfig {
    /// Chains hanging under gravity with light joint friction, excited by
    /// small torques around the downward rest pose, so that 100-step windows
    /// stay in a bounded region instead of spinning freely.
    fn default() -> Self {
        PredictionBenchmarkConfig {
            chains: vec![2, 3, 4, 5, 6],
            trajectory_counts: vec![25, 50, 100, 250],
            seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
            snapshots: 200,
            dt: 0.01,
            link_mass: 0.6,
            link_length: 0.33,
            gravity: [9.81, 0.0, 0.0],
            joint_friction: 0.2,
            excitation: ExcitationSpec {
                q_min: -1.0,
                q_max: 1.0,
                qd_max: 1.0,
                u_max: 1.0,
                ..ExcitationSpec::default()
            },
            train: TrainConfig {
                epochs: 40,
                architecture: EncoderArchitecture {
                    hidden: vec![64, 64],
                    activation: Activation::Tanh,
                    features: 16,
                },
                ..TrainConfig::default()
            },
            rollout_steps: 100,
            test_seed: 1000,
            test_trajectories: None,
        }
    }
}

impl PredictionBenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains.is_empty() || self.chains.contains(&0) {
            return Err(Error::config("chains", "need at least one chain with n ≥ 1"));
        }
        if self.trajectory_counts.is_empty() || self.trajectory_counts.iter().any(|&p| p < 2) {
            return Err(Error::config("trajectory_counts", "every count must be at least 2"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.variants.is_empty() {
            return Err(Error::config("variants", "need at least one variant"));
        }
        if self.rollout_steps == 0 || self.snapshots <= self.rollout_steps {
            return Err(Error::config("rollout_steps", "must be positive and shorter than the trajectories"));
        }
        self.train.validate()
    }

    pub fn manipulator(&self, n: usize) -> Result<ManipulatorModel> {
        let mut m = ManipulatorModel::thin_rod_chain(n, self.link_mass, self.link_length, Topology::Planar)?;
        m.gravity = self.gravity;
        if self.joint_friction != 0.0 {
            m.friction = vec![self.joint_friction; n];
        }
        m.validate()?;
        Ok(m)
    }

    fn test_count(&self) -> usize {
        let max = self.trajectory_counts.iter().copied().max().unwrap_or(4);
        self.test_trajectories.unwrap_or(max.div_ceil(4)).max(1)
    }

    fn generation(&self, trajectories: usize, seed: u64) -> GenerationConfig {
        GenerationConfig {
            kind: DatasetKind::Actuated,
            trajectories: trajectories.max(2),
            snapshots: self.snapshots,
            dt: self.dt,
            excitation: self.excitation.clone(),
            convention: StateConvention::Explicit,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub chain: usize,
    pub trajectories: usize,
    pub variant: Variant,
    pub seed: u64,
    /// Pooled standardized error over all held-out prediction windows, in
    /// explicit coordinates `(q, q̇)`.
    pub error: f64,
    /// The same error in the model's own coordinates (`(q, p)` for the
    /// proposed variant; equal to `error` for the baselines).
    pub native_error: f64,
    pub windows: usize,
    pub diverged_windows: usize,
    pub learnable_params: usize,
    pub best_epoch: usize,
    pub config_hash: String,
    pub model_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMedian {
    pub chain: usize,
    pub trajectories: usize,
    pub variant: Variant,
    pub median_error: f64,
    pub median_native_error: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub config: PredictionBenchmarkConfig,
    pub config_hash: String,
    pub rows: Vec<PredictionRow>,
    pub medians: Vec<PredictionMedian>,
}

impl PredictionReport {
    pub fn median(&self, chain: usize, trajectories: usize, variant: Variant) -> Option<f64> {
        self.medians
            .iter()
            .find(|m| m.chain == chain && m.trajectories == trajectories && m.variant == variant)
            .map(|m| m.median_error)
    }

    pub fn median_native(&self, chain: usize, trajectories: usize, variant: Variant) -> Option<f64> {
        self.medians
            .iter()
            .find(|m| m.chain == chain && m.trajectories == trajectories && m.variant == variant)
            .map(|m| m.median_native_error)
    }
}

/// Result of [`evaluate_rollouts`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutScore {
    /// Standardized error in explicit coordinates.
    pub error: f64,
    /// Standardized error in the model's coordinates.
    pub native_error: f64,
    pub windows: usize,
    pub diverged_windows: usize,
}

/// Scores `model` on `steps`-long windows cut from each held-out trajectory
/// (given in explicit coordinates). Errors are pooled over all windows and
/// measured both in explicit coordinates, whatever the model's state
/// convention, and in the model's own coordinates.
/// Windows whose rollout diverges contribute the steps before divergence.
pub fn evaluate_rollouts(
    model: &KoopmanModel,
    test: &TrajectoryDataset,
    manip: &ManipulatorModel,
    steps: usize,
) -> Result<RolloutScore> {
    if test.convention != StateConvention::Explicit || test.kind != DatasetKind::Actuated {
        return Err(Error::config("test set", "must be actuated data in explicit coordinates"));
    }
    let mut pred_all = Vec::new();
    let mut truth_all = Vec::new();
    let mut native_pred = Vec::new();
    let mut native_truth = Vec::new();
    let mut windows = 0;
    let mut diverged = 0;
    for traj in &test.trajectories {
        let inputs = traj.inputs.as_ref().expect("actuated");
        let mut start = 0;
        while start + steps < traj.states.len() {
            let x0 = &from_explicit(&traj.states[start..=start], model.convention, manip)?[0];
            let rollout = model.rollout(x0, &inputs[start..start + steps])?;
            if rollout.diverged_at.is_some() {
                diverged += 1;
            }
            let predicted = to_explicit(&rollout.states[1..], model.convention, manip)?;
            let truth = &traj.states[start + 1..start + 1 + predicted.len()];
            native_truth.extend(from_explicit(truth, model.convention, manip)?);
            native_pred.extend_from_slice(&rollout.states[1..]);
            truth_all.extend_from_slice(truth);
            pred_all.extend(predicted);
            windows += 1;
            start += steps;
        }
    }
    if pred_all.is_empty() {
        return Err(Error::config("rollout_steps", "test trajectories are too short for one window"));
    }
    Ok(RolloutScore {
        error: standardized_error(&pred_all, &truth_all)?,
        native_error: standardized_error(&native_pred, &native_truth)?,
        windows,
        diverged_windows: diverged,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Trains every variant on identical data for each (chain, trajectory count,
/// seed) cell and scores them on a shared held-out set.
///
/// For each chain and seed one dataset of the largest size is generated; the
/// smaller cells use its leading trajectories. The momentum-coordinate data
/// for the proposed variant is the same trajectories converted exactly.
pub fn run_prediction_benchmark(cfg: &PredictionBenchmarkConfig) -> Result<PredictionReport> {
    cfg.validate()?;
    let config_hash = sha256_json(cfg)?;
    let p_max = *cfg.trajectory_counts.iter().max().expect("validated");

    struct ChainData {
        manip: ManipulatorModel,
        test: TrajectoryDataset,
        train: BTreeMap<u64, (TrajectoryDataset, TrajectoryDataset)>,
    }
    let mut chains = BTreeMap::new();
    for &n in &cfg.chains {
        let manip = cfg.manipulator(n)?;
        let test = generate_dataset_range(&manip, &cfg.generation(cfg.test_count(), cfg.test_seed), TEST_STREAM_OFFSET)?;
        let mut train_sets = BTreeMap::new();
        for &seed in &cfg.seeds {
            let explicit = generate_dataset_range(&manip, &cfg.generation(p_max, seed), 0)?;
            let momentum = explicit.to_convention(StateConvention::Momentum, &manip)?;
            train_sets.insert(seed, (explicit, momentum));
        }
        chains.insert(n, ChainData { manip, test, train: train_sets });
    }

    let mut jobs = Vec::new();
    for &n in &cfg.chains {
        for &p in &cfg.trajectory_counts {
            for &seed in &cfg.seeds {
                for &variant in &cfg.variants {
                    jobs.push((n, p, seed, variant));
                }
            }
        }
    }
    let rows: Vec<Result<PredictionRow>> = jobs
        .par_iter()
        .map(|&(n, p, seed, variant)| {
            let data = &chains[&n];
            let (explicit, momentum) = &data.train[&seed];
            let ds = match variant.convention() {
                StateConvention::Explicit => explicit.truncated(p),
                StateConvention::Momentum => momentum.truncated(p),
            };
            let train_cfg = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let model = train(&ds, &train_cfg, variant)?;
            let score = evaluate_rollouts(&model, &data.test, &data.manip, cfg.rollout_steps)?;
            info!(
                "{n}R p={p} seed={seed} {variant}: {:.4} (native {:.4})",
                score.error, score.native_error
            );
            Ok(PredictionRow {
                chain: n,
                trajectories: p,
                variant,
                seed,
                error: score.error,
                native_error: score.native_error,
                windows: score.windows,
                diverged_windows: score.diverged_windows,
                learnable_params: model.count_learnable_params(),
                best_epoch: model.training.as_ref().map_or(0, |t| t.best_epoch),
                config_hash: config_hash.clone(),
                model_hash: sha256_json(&model)?,
            })
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;

    let mut medians = Vec::new();
    for &n in &cfg.chains {
        for &p in &cfg.trajectory_counts {
            for &variant in &cfg.variants {
                let cell: Vec<&PredictionRow> = rows
                    .iter()
                    .filter(|r| r.chain == n && r.trajectories == p && r.variant == variant)
                    .collect();
                let mut errs: Vec<f64> = cell.iter().map(|r| r.error).collect();
                let mut native: Vec<f64> = cell.iter().map(|r| r.native_error).collect();
                medians.push(PredictionMedian {
                    chain: n,
                    trajectories: p,
                    variant,
                    seeds: errs.len(),
                    median_error: median(&mut errs),
                    median_native_error: median(&mut native),
                });
            }
        }
    }
    Ok(PredictionReport {
        config: cfg.clone(),
        config_hash,
        rows,
        medians,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifting::{Activation, EncoderArchitecture};

    fn tiny() -> PredictionBenchmarkConfig {
        PredictionBenchmarkConfig {
            chains: vec![2],
            trajectory_counts: vec![4, 8],
            seeds: vec![0, 1],
            snapshots: 40,
            rollout_steps: 10,
            train: TrainConfig {
                architecture: EncoderArchitecture {
                    hidden: vec![8],
                    activation: Activation::Tanh,
                    features: 2,
                },
                epochs: 2,
                batch_size: 32,
                ..TrainConfig::default()
            },
            ..PredictionBenchmarkConfig::default()
        }
    }

    #[test]
    fn benchmark_covers_every_cell_and_is_deterministic() {
        let cfg = tiny();
        let a = run_prediction_benchmark(&cfg).unwrap();
        assert_eq!(a.rows.len(), 2 * 2 * 3);
        assert_eq!(a.medians.len(), 2 * 3);
        assert!(a.rows.iter().all(|r| r.error.is_finite() && r.windows == 2 * 3));
        let b = run_prediction_benchmark(&cfg).unwrap();
        assert_eq!(a, b);
        // identical data across variants: the baselines share one model size
        let nlk = a.rows.iter().find(|r| r.variant == Variant::Nlk).unwrap();
        let prop = a.rows.iter().find(|r| r.variant == Variant::Proposed).unwrap();
        assert_eq!(nlk.learnable_params - prop.learnable_params, (4 + 2) * 2);
    }

    #[test]
    fn median_of_odd_and_even_counts() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
