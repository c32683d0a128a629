//! Run-directory orchestration: training with persisted artifacts and standalone evaluation.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::SnapshotMode;
use crate::constraint::ConstraintModel;
use crate::error::Result;
use crate::io::{
    constraint_snapshot_path, fmt_real, metrics_row, policy_snapshot_path, policy_stats_rows,
    save_constraint, save_memory, save_policy, write_atomic, CsvAppender, METRICS_HEADER,
    POLICY_STATS_HEADER,
};
use crate::pipeline::{mean_std, metric_iou, rollout_episode, run_icrl, violation_rate, DemoSet, IcrlOutcome, IterationView, RunConfig};
use crate::policy::PolicyModel;

pub const METRICS_FILE: &str = "metrics.csv";
pub const POLICY_STATS_FILE: &str = "policy_stats.csv";
pub const MEMORY_FILE: &str = "memory.csv";

pub fn metrics_path(run: &Path) -> PathBuf {
    run.join(METRICS_FILE)
}

/// Runs the learning loop for one seed, writing every artifact under `run_dir`.
///
/// Metrics and policy statistics are appended and flushed per iteration, so an
/// interrupted run keeps the rows of all completed iterations.
pub fn train_run(
    cfg: &RunConfig,
    demos: &DemoSet,
    seed: u64,
    run_dir: &Path,
    snapshots: SnapshotMode,
) -> Result<IcrlOutcome> {
    train_run_with(cfg, demos, seed, run_dir, snapshots, |_| Ok(()))
}

/// [`train_run`] with an extra per-iteration observer, called after the artifacts are written.
pub fn train_run_with<F>(
    cfg: &RunConfig,
    demos: &DemoSet,
    seed: u64,
    run_dir: &Path,
    snapshots: SnapshotMode,
    mut observe: F,
) -> Result<IcrlOutcome>
where
    F: FnMut(&IterationView<'_>) -> Result<()>,
{
    let mut metrics = CsvAppender::create(&metrics_path(run_dir), METRICS_HEADER)?;
    let mut stats = CsvAppender::create(&run_dir.join(POLICY_STATS_FILE), POLICY_STATS_HEADER)?;
    let last = cfg.iterations.saturating_sub(1);
    run_icrl(cfg, demos, seed, |view| {
        let it = view.report.iteration;
        metrics.write_line(&metrics_row(view.report))?;
        for row in policy_stats_rows(it, &view.report.policy_records) {
            stats.write_line(&row)?;
        }
        if snapshots == SnapshotMode::EveryIteration || it == last {
            save_constraint(&constraint_snapshot_path(run_dir, it), view.constraint)?;
            save_policy(&policy_snapshot_path(run_dir, it), view.policy)?;
        }
        save_memory(&run_dir.join(MEMORY_FILE), view.memory)?;
        observe(view)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: f64,
    /// Absent when no policy was supplied.
    pub violation_rate: Option<f64>,
    pub mean_return: Option<f64>,
    pub episodes: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_real).unwrap_or_else(|| "NA".to_string());
        format!(
            "iou={}\nviolation_rate={}\nmean_return={}\nepisodes={}\nseed={}\n",
            fmt_real(self.iou),
            opt(self.violation_rate),
            opt(self.mean_return),
            self.episodes,
            self.seed
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

/// IoU of `constraint` on the configured grid, plus rollout statistics of `policy`
/// over `episodes` stochastic episodes seeded by `seed`.
pub fn evaluate(
    cfg: &RunConfig,
    constraint: &ConstraintModel,
    policy: Option<&PolicyModel>,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let iou = metric_iou(constraint, &cfg.env, &cfg.iou);
    let (violation_rate, mean_return) = match policy {
        Some(p) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let trajs: Vec<_> = (0..episodes)
                .map(|_| rollout_episode(p, &cfg.env, &mut rng))
                .collect();
            let returns: Vec<f64> = trajs.iter().map(|t| t.total_return()).collect();
            (Some(violation_rate(&trajs)), Some(mean_std(&returns).0))
        }
        None => (None, None),
    };
    Ok(EvalReport {
        iou,
        violation_rate,
        mean_return,
        episodes,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::io::{constraint_snapshot_path, load_metrics};
    use crate::pipeline::generate_expert;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::point_circle();
        cfg.iterations = 4;
        cfg.eval_episodes = 1;
        cfg.iou.resolution = 20;
        cfg.ppo.forward_iterations = 1;
        cfg.ppo.forward_timesteps = 300;
        cfg.ppo.epochs = 1;
        cfg.expert.ppo_updates = 1;
        cfg.expert.trajectories = 2;
        cfg
    }

    #[test]
    fn aborted_run_keeps_completed_iterations() {
        let cfg = tiny();
        let (demos, _) = generate_expert(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = train_run_with(&cfg, &demos, 2, dir.path(), SnapshotMode::EveryIteration, |v| {
            if v.report.iteration == 1 {
                Err(Error::Usage("stop".into()))
            } else {
                Ok(())
            }
        })
        .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        let rows = load_metrics(&metrics_path(dir.path())).unwrap();
        assert_eq!(rows.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![0, 1]);
        assert!(constraint_snapshot_path(dir.path(), 1).exists());
        assert!(!constraint_snapshot_path(dir.path(), 2).exists());
    }

    #[test]
    fn report_without_policy() {
        let cfg = tiny();
        let oracle = ConstraintModel::oracle(cfg.env.clone());
        let r = evaluate(&cfg, &oracle, None, 3, 0).unwrap();
        assert_eq!(r.iou, 1.0);
        assert_eq!(r.violation_rate, None);
        let text = r.to_text();
        assert!(text.contains("violation_rate=NA\n"));
        assert!(text.starts_with("iou=1.0000000000000000e0\n"));
    }
}
