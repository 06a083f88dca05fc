//! Report files: CSV tables, JSON summaries, provenance hashes and plot scripts.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::harness::prediction::PredictionReport;
use crate::harness::tracking::TrackingReport;
use crate::training::fmt_f64;

/// Hex SHA-256 of the compact JSON encoding of `value`.
pub fn sha256_json<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

const PREDICTION_PLOT: &str = r#"# Error versus dataset size for every chain and variant.
# Usage: python plot_prediction.py [prediction_medians.csv]
import csv
import sys
from collections import defaultdict

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "prediction_medians.csv"
series = defaultdict(list)
with open(path) as f:
    for row in csv.DictReader(f):
        key = (int(row["chain"]), row["variant"])
        series[key].append((int(row["trajectories"]), float(row["median_error"])))

chains = sorted({c for c, _ in series})
fig, axes = plt.subplots(1, len(chains), figsize=(4 * len(chains), 3.5), squeeze=False)
for ax, chain in zip(axes[0], chains):
    for (c, variant), points in sorted(series.items()):
        if c != chain:
            continue
        points.sort()
        ax.plot([p for p, _ in points], [e for _, e in points], marker="o", label=variant)
    ax.set_title(f"{chain}R")
    ax.set_xlabel("training trajectories")
    ax.set_yscale("log")
axes[0][0].set_ylabel("standardized error")
axes[0][0].legend()
fig.tight_layout()
fig.savefig("prediction.png", dpi=150)
"#;

const TRACKING_PLOT: &str = r#"# Reference and achieved end-effector paths from path_*.csv logs.
# Usage: python plot_tracking.py path_a.csv [path_b.csv ...]
import csv
import sys

import matplotlib.pyplot as plt

for name in sys.argv[1:]:
    with open(name) as f:
        rows = list(csv.DictReader(f))
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot([float(r["x_ref"]) for r in rows], [float(r["y_ref"]) for r in rows], "k--", label="reference")
    ax.plot([float(r["x"]) for r in rows], [float(r["y"]) for r in rows], label="end effector")
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(name.rsplit(".", 1)[0] + ".png", dpi=150)
"#;

/// Writes `prediction.csv` (one row per trained model),
/// `prediction_medians.csv`, `prediction.json` and `plot_prediction.py`.
pub fn write_prediction_report(dir: &Path, report: &PredictionReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = writer(&dir.join("prediction.csv"))?;
    w.write_record([
        "chain",
        "trajectories",
        "variant",
        "seed",
        "error",
        "native_error",
        "windows",
        "diverged_windows",
        "learnable_params",
        "best_epoch",
        "config_hash",
        "model_hash",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.chain.to_string(),
            r.trajectories.to_string(),
            r.variant.to_string(),
            r.seed.to_string(),
            fmt_f64(r.error),
            fmt_f64(r.native_error),
            r.windows.to_string(),
            r.diverged_windows.to_string(),
            r.learnable_params.to_string(),
            r.best_epoch.to_string(),
            r.config_hash.clone(),
            r.model_hash.clone(),
        ])?;
    }
    w.flush()?;
    let mut w = writer(&dir.join("prediction_medians.csv"))?;
    w.write_record(["chain", "trajectories", "variant", "median_error", "median_native_error", "seeds"])?;
    for m in &report.medians {
        w.write_record([
            m.chain.to_string(),
            m.trajectories.to_string(),
            m.variant.to_string(),
            fmt_f64(m.median_error),
            fmt_f64(m.median_native_error),
            m.seeds.to_string(),
        ])?;
    }
    w.flush()?;
    write_json(&dir.join("prediction.json"), report)?;
    fs::write(dir.join("plot_prediction.py"), PREDICTION_PLOT)?;
    Ok(())
}

/// Writes `tracking.csv`, `tracking.json` and `plot_tracking.py`.
pub fn write_tracking_report(dir: &Path, report: &TrackingReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = writer(&dir.join("tracking.csv"))?;
    w.write_record([
        "label",
        "variant",
        "path",
        "disturbance",
        "geso",
        "rmse_task_m",
        "rmse_joint_rad",
        "max_task_error_m",
        "steps",
        "solver_faults",
        "diverged",
        "config_hash",
        "model_hash",
        "seed",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.label.clone(),
            r.variant.to_string(),
            r.path.to_string(),
            r.disturbance.clone(),
            r.geso.to_string(),
            fmt_f64(r.summary.rmse_task),
            fmt_f64(r.summary.rmse_joint),
            fmt_f64(r.summary.max_task_error),
            r.summary.steps.to_string(),
            r.summary.solver_faults.to_string(),
            r.summary.diverged.to_string(),
            r.config_hash.clone(),
            r.model_hash.clone(),
            r.seed.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    write_json(&dir.join("tracking.json"), report)?;
    fs::write(dir.join("plot_tracking.py"), TRACKING_PLOT)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let a = sha256_json(&[1.0, 2.0]).unwrap();
        assert_eq!(a, sha256_json(&[1.0, 2.0]).unwrap());
        assert_ne!(a, sha256_json(&[1.0, 2.5]).unwrap());
        // printf '[1.0,2.0]' | sha256sum
        assert_eq!(a, "44c32c0bf4f665d42f890db37d9eef40d82f33c1379e1871917625787d164d4b");
    }
}
