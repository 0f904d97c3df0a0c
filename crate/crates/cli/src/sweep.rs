use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sdflora::config::{ConfigError, ExperimentConfig};
use sdflora::federation::{run_experiment, write_outputs};

use crate::{Axis, Failure};

pub const SUMMARY_COLUMNS: &str =
    "axis,value,strategy,final_round,mean_acc,client_std,global_acc,eff_rank,epsilon,status";

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Sigma => "sigma",
            Axis::RankBudget => "rank_budget",
            Axis::NumClients => "num_clients",
            Axis::DirichletAlpha => "dirichlet_alpha",
            Axis::Strategy => "strategy",
        }
    }
}

/// Config for one sweep point; `value` is applied on top of `base`.
fn point_config(base: &ExperimentConfig, axis: Axis, value: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = base.clone();
    let set = |cfg: &mut ExperimentConfig, kv: String| cfg.apply_overrides(&[kv]);
    match axis {
        Axis::Sigma => {
            set(&mut cfg, "dp.enabled=true".into())?;
            set(&mut cfg, format!("dp.noise_multiplier={value}"))?;
        }
        Axis::RankBudget => set(&mut cfg, format!("aggregation.rank_budget={value}"))?,
        Axis::DirichletAlpha => set(&mut cfg, format!("partition.dirichlet_alpha={value}"))?,
        Axis::Strategy => set(&mut cfg, format!("aggregation.strategy={value}"))?,
        Axis::NumClients => {
            let k: usize = value.trim().parse().map_err(|_| ConfigError::Type {
                line: 1,
                key: "partition.num_clients".into(),
                expected: "a non-negative integer",
                value: value.to_string(),
            })?;
            cfg = cfg.with_num_clients(k);
        }
    }
    cfg.output.dir = base.output.dir.join(format!("{}={}", axis.name(), value.trim()));
    cfg.validate()?;
    Ok(cfg)
}

/// Validates every point up front, then runs them in order. A failed point is recorded in the
/// summary and the sweep carries on; the summary is rewritten after every point.
pub fn run(config: &Path, axis: Axis, values: &[String], overrides: &[String]) -> Result<(), Failure> {
    let text = fs::read_to_string(config).map_err(|source| ConfigError::Io {
        path: config.to_path_buf(),
        source,
    })?;
    let mut base = ExperimentConfig::parse_unvalidated(&text)?;
    base.apply_overrides(overrides)?;
    let points = values
        .iter()
        .map(|v| point_config(&base, axis, v).map(|c| (v.trim().to_string(), c)))
        .collect::<Result<Vec<_>, _>>()?;

    fs::create_dir_all(&base.output.dir).map_err(|e| Failure::Runtime(e.to_string()))?;
    let summary_path = base.output.dir.join("summary.csv");
    let mut summary = format!("{SUMMARY_COLUMNS}\n");
    let mut failures = Vec::new();
    for (value, cfg) in &points {
        let outcome = run_experiment(cfg).and_then(|out| {
            write_outputs(cfg, &out)?;
            Ok(out)
        });
        match outcome {
            Ok(out) => {
                let r = out.final_row();
                let _ = writeln!(
                    summary,
                    "{},{},{},{},{},{},{},{},{},ok",
                    axis.name(),
                    value,
                    r.strategy,
                    r.round,
                    r.mean_acc,
                    r.client_std,
                    r.global_acc,
                    r.eff_rank,
                    r.epsilon
                );
                println!("{}={value}: mean_acc={:.4} client_std={:.4}", axis.name(), r.mean_acc, r.client_std);
            }
            Err(e) => {
                let msg = e.to_string().replace([',', '\n'], ";");
                let _ = writeln!(
                    summary,
                    "{},{},{},,,,,,,error: {msg}",
                    axis.name(),
                    value,
                    cfg.aggregation.strategy
                );
                eprintln!("{}={value}: {e}", axis.name());
                failures.push(value.clone());
            }
        }
        fs::write(&summary_path, &summary).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "{} of {} sweep points failed: {}",
            failures.len(),
            points.len(),
            failures.join(", ")
        )))
    }
}
