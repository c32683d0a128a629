//! Text file formats: trajectory dumps, metrics, policy statistics, constraint
//! grids, memory contents and model snapshots.
//!
//! All delimited files are comma-separated with one header row. Lines starting
//! with `#` are comments. Reals are written with 17 significant digits
//! (`{:.16e}`), which round-trips every `f64` exactly.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::constraint::ConstraintModel;
use crate::envs::{Bounds, EnvSpec, PointAction, PointState};
use crate::error::{Error, Result};
use crate::pipeline::{linspace, DemoSet, IterationReport, MemoryBuffer, Step, Trajectory};
use crate::policy::{PolicyModel, PolicyTrainRecord};

pub const TRAJECTORY_HEADER: &str = "episode,t,x,y,psi,speed,omega,reward,true_violation";
pub const METRICS_HEADER: &str =
    "iteration,timesteps_cumulative,iou,violation_rate,mean_return,n_filtered_trajectories,memory_size,f,d";
pub const POLICY_STATS_HEADER: &str =
    "iteration,update,mean_raw_return,mean_penalized_return,entropy,value_loss,policy_loss";
pub const GRID_HEADER: &str = "x,y,zeta,c";
pub const MEMORY_HEADER: &str = "x,y,psi,zeta,iteration";

const CONSTRAINT_FORMAT: &str = "pucl-constraint-model";
const POLICY_FORMAT: &str = "pucl-policy-model";
const SNAPSHOT_VERSION: u32 = 1;

pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_err(path: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

/// Writes through a temporary file and renames it into place, so readers
/// never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    create_parent(path)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Data rows of a delimited file as `(line number, fields)`, after checking the header.
fn data_rows<'a>(
    text: &'a str,
    path: &Path,
    header: &str,
) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut rows = Vec::new();
    let mut seen_header = false;
    let width = header.split(',').count();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !seen_header {
            if line != header {
                return Err(parse_err(path, n, format!("expected header `{header}`")));
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(parse_err(
                path,
                n,
                format!("expected {width} fields, found {}", fields.len()),
            ));
        }
        rows.push((n, fields));
    }
    if !seen_header {
        return Err(parse_err(path, 1, format!("missing header `{header}`")));
    }
    Ok(rows)
}

fn real(path: &Path, line: usize, name: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("`{name}` is not a number: `{s}`")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(parse_err(path, line, format!("`{name}` is not finite")))
    }
}

fn count(path: &Path, line: usize, name: &str, s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("`{name}` is not a non-negative integer: `{s}`")))
}

fn flag(path: &Path, line: usize, name: &str, s: &str) -> Result<bool> {
    match s.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(parse_err(path, line, format!("`{name}` must be 0 or 1, found `{other}`"))),
    }
}

/// Trajectories plus the optional demonstration statistics from the header.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryFile {
    pub trajectories: Vec<Trajectory>,
    pub return_mean: Option<f64>,
    pub return_std: Option<f64>,
}

/// Row `t = 0` of each episode holds the reset state with empty action and
/// reward fields; row `t ≥ 1` holds the state reached by step `t`, the action
/// that led to it and its reward.
pub fn format_trajectories(trajs: &[Trajectory], stats: Option<(f64, f64)>) -> String {
    let mut out = String::new();
    out.push_str("# pucl trajectories v1\n");
    if let Some((mean, std)) = stats {
        out.push_str(&format!("# r_D={}\n# sigma_D={}\n", fmt_real(mean), fmt_real(std)));
    }
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for (e, tr) in trajs.iter().enumerate() {
        let s = tr.start;
        out.push_str(&format!(
            "{e},0,{},{},{},,,,0\n",
            fmt_real(s.x),
            fmt_real(s.y),
            fmt_real(s.psi)
        ));
        for (k, st) in tr.steps().iter().enumerate() {
            out.push_str(&format!(
                "{e},{},{},{},{},{},{},{},{}\n",
                k + 1,
                fmt_real(st.state.x),
                fmt_real(st.state.y),
                fmt_real(st.state.psi),
                fmt_real(st.action.speed),
                fmt_real(st.action.omega),
                fmt_real(st.reward),
                u8::from(st.true_violation)
            ));
        }
    }
    out
}

pub fn parse_trajectories(text: &str, path: &Path) -> Result<TrajectoryFile> {
    let mut return_mean = None;
    let mut return_std = None;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if let Some(v) = line.strip_prefix("# r_D=") {
            return_mean = Some(real(path, n, "r_D", v)?);
        } else if let Some(v) = line.strip_prefix("# sigma_D=") {
            return_std = Some(real(path, n, "sigma_D", v)?);
        }
    }
    let mut trajectories = Vec::new();
    let mut current: Option<(usize, PointState, Vec<Step>)> = None;
    for (n, f) in data_rows(text, path, TRAJECTORY_HEADER)? {
        let episode = count(path, n, "episode", f[0])?;
        let t = count(path, n, "t", f[1])?;
        let x = real(path, n, "x", f[2])?;
        let y = real(path, n, "y", f[3])?;
        let psi = real(path, n, "psi", f[4])?;
        let violation = flag(path, n, "true_violation", f[8])?;
        if t == 0 {
            let expected = current.as_ref().map_or(0, |c| c.0 + 1);
            if episode != expected {
                return Err(parse_err(path, n, format!("expected episode {expected}, found {episode}")));
            }
            if f[5..8].iter().any(|v| !v.trim().is_empty()) {
                return Err(parse_err(path, n, "the reset row must leave speed, omega and reward empty"));
            }
            if let Some((_, start, steps)) = current.take() {
                trajectories.push(Trajectory::new(start, steps));
            }
            current = Some((episode, PointState { x, y, psi }, Vec::new()));
            continue;
        }
        let Some((ep, _, steps)) = current.as_mut() else {
            return Err(parse_err(path, n, "episode must start with a t = 0 row"));
        };
        if episode != *ep || t != steps.len() + 1 {
            return Err(parse_err(
                path,
                n,
                format!("expected episode {ep}, t = {}", steps.len() + 1),
            ));
        }
        let speed = real(path, n, "speed", f[5])?;
        let omega = real(path, n, "omega", f[6])?;
        let action = PointAction { speed, omega };
        if !action.is_legal() {
            return Err(parse_err(path, n, "action outside [-0.25, 0.25]"));
        }
        steps.push(Step {
            state: PointState { x, y, psi },
            action,
            reward: real(path, n, "reward", f[7])?,
            true_violation: violation,
        });
    }
    if let Some((_, start, steps)) = current {
        trajectories.push(Trajectory::new(start, steps));
    }
    Ok(TrajectoryFile {
        trajectories,
        return_mean,
        return_std,
    })
}

pub fn save_trajectories(path: &Path, trajs: &[Trajectory], stats: Option<(f64, f64)>) -> Result<()> {
    write_atomic(path, format_trajectories(trajs, stats).as_bytes())
}

pub fn load_trajectories(path: &Path) -> Result<TrajectoryFile> {
    parse_trajectories(&read_text(path)?, path)
}

pub fn save_demos(path: &Path, demos: &DemoSet) -> Result<()> {
    save_trajectories(
        path,
        demos.trajectories(),
        Some((demos.return_mean(), demos.return_std())),
    )
}

/// Loads a demonstration file, checking feasibility under `spec` and that
/// the header statistics agree with the trajectories.
pub fn load_demos(path: &Path, spec: &EnvSpec) -> Result<DemoSet> {
    let file = load_trajectories(path)?;
    let demos = DemoSet::new(file.trajectories, spec).map_err(|e| match e {
        Error::Usage(reason) => parse_err(path, 1, reason),
        other => other,
    })?;
    for (name, stated, actual) in [
        ("r_D", file.return_mean, demos.return_mean()),
        ("sigma_D", file.return_std, demos.return_std()),
    ] {
        if let Some(v) = stated {
            if (v - actual).abs() > 1e-9 * actual.abs().max(1.0) {
                return Err(parse_err(
                    path,
                    1,
                    format!("header {name} = {v} but the trajectories give {actual}"),
                ));
            }
        }
    }
    Ok(demos)
}

/// Appends rows to a delimited file, flushing after each one.
#[derive(Debug)]
pub struct CsvAppender {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvAppender {
    /// Creates (truncating) `path` and writes the header.
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        create_parent(path)?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = CsvAppender {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        w.write_line(header)?;
        Ok(w)
    }

    /// Opens `path` for appending; writes the header if the file is new.
    pub fn append(path: &Path, header: &str) -> Result<Self> {
        create_parent(path)?;
        let fresh = !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = CsvAppender {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        if fresh {
            w.write_line(header)?;
        }
        Ok(w)
    }

    pub fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn metrics_row(r: &IterationReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.iteration,
        r.timesteps_cumulative,
        fmt_real(r.iou),
        fmt_real(r.violation_rate),
        fmt_real(r.mean_return),
        r.n_filtered_trajectories,
        r.memory_size,
        fmt_real(r.f),
        fmt_real(r.d)
    )
}

pub fn policy_stats_rows(iteration: usize, records: &[PolicyTrainRecord]) -> Vec<String> {
    records
        .iter()
        .map(|p| {
            format!(
                "{iteration},{},{},{},{},{},{}",
                p.iteration,
                fmt_real(p.mean_raw_return),
                fmt_real(p.mean_penalized_return),
                fmt_real(p.entropy),
                fmt_real(p.value_loss),
                fmt_real(p.policy_loss)
            )
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub timesteps_cumulative: u64,
    pub iou: f64,
    pub violation_rate: f64,
    pub mean_return: f64,
    pub n_filtered_trajectories: usize,
    pub memory_size: usize,
    pub f: f64,
    pub d: f64,
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = read_text(path)?;
    data_rows(&text, path, METRICS_HEADER)?
        .into_iter()
        .map(|(n, f)| {
            Ok(MetricsRow {
                iteration: count(path, n, "iteration", f[0])?,
                timesteps_cumulative: count(path, n, "timesteps_cumulative", f[1])? as u64,
                iou: real(path, n, "iou", f[2])?,
                violation_rate: real(path, n, "violation_rate", f[3])?,
                mean_return: f[4].trim().parse().map_err(|_| parse_err(path, n, "bad mean_return"))?,
                n_filtered_trajectories: count(path, n, "n_filtered_trajectories", f[5])?,
                memory_size: count(path, n, "memory_size", f[6])?,
                f: real(path, n, "f", f[7])?,
                d: real(path, n, "d", f[8])?,
            })
        })
        .collect()
}

/// Writes ζ and the classification over a `resolution × resolution` lattice
/// spanning `bounds` (endpoints included, x varying fastest). Returns the row count.
pub fn write_grid(path: &Path, model: &ConstraintModel, bounds: &Bounds, resolution: usize) -> Result<usize> {
    if resolution == 0 {
        return Err(Error::Usage("grid resolution must be positive".into()));
    }
    if !bounds.is_valid() {
        return Err(Error::Usage("grid bounds are empty".into()));
    }
    let xs = linspace(bounds.x_min, bounds.x_max, resolution);
    let ys = linspace(bounds.y_min, bounds.y_max, resolution);
    let states: Vec<PointState> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| PointState::new(x, y, 0.0)))
        .collect();
    let zetas = model.zeta_batch(&states);
    let mut out = String::with_capacity(states.len() * 80);
    out.push_str(GRID_HEADER);
    out.push('\n');
    for (s, z) in states.iter().zip(&zetas) {
        let c = u8::from(*z <= model.decision_threshold);
        out.push_str(&format!("{},{},{},{c}\n", fmt_real(s.x), fmt_real(s.y), fmt_real(*z)));
    }
    write_atomic(path, out.as_bytes())?;
    Ok(states.len())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridRow {
    pub x: f64,
    pub y: f64,
    pub zeta: f64,
    pub c: bool,
}

pub fn load_grid(path: &Path) -> Result<Vec<GridRow>> {
    let text = read_text(path)?;
    data_rows(&text, path, GRID_HEADER)?
        .into_iter()
        .map(|(n, f)| {
            Ok(GridRow {
                x: real(path, n, "x", f[0])?,
                y: real(path, n, "y", f[1])?,
                zeta: real(path, n, "zeta", f[2])?,
                c: flag(path, n, "c", f[3])?,
            })
        })
        .collect()
}

pub fn save_memory(path: &Path, memory: &MemoryBuffer) -> Result<()> {
    let mut out = String::new();
    out.push_str(MEMORY_HEADER);
    out.push('\n');
    for e in memory.entries() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_real(e.state.x),
            fmt_real(e.state.y),
            fmt_real(e.state.psi),
            fmt_real(e.zeta),
            e.iteration
        ));
    }
    write_atomic(path, out.as_bytes())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot<T> {
    format: String,
    version: u32,
    model: T,
}

fn save_snapshot<T: Serialize>(path: &Path, format: &str, model: &T) -> Result<()> {
    let doc = Snapshot {
        format: format.to_string(),
        version: SNAPSHOT_VERSION,
        model,
    };
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Snapshot(format!("{}: {e}", path.display())))?;
    write_atomic(path, text.as_bytes())
}

fn load_snapshot<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T> {
    let text = read_text(path)?;
    let doc: Snapshot<T> = serde_json::from_str(&text)
        .map_err(|e| Error::Snapshot(format!("{}: {e}", path.display())))?;
    if doc.format != format {
        return Err(Error::Snapshot(format!(
            "{}: expected a `{format}` document, found `{}`",
            path.display(),
            doc.format
        )));
    }
    if doc.version != SNAPSHOT_VERSION {
        return Err(Error::Snapshot(format!(
            "{}: unsupported version {}",
            path.display(),
            doc.version
        )));
    }
    Ok(doc.model)
}

pub fn save_constraint(path: &Path, model: &ConstraintModel) -> Result<()> {
    save_snapshot(path, CONSTRAINT_FORMAT, model)
}

pub fn load_constraint(path: &Path) -> Result<ConstraintModel> {
    let model: ConstraintModel = load_snapshot(path, CONSTRAINT_FORMAT)?;
    model.validate().map_err(|e| Error::Snapshot(format!("{}: {e}", path.display())))?;
    Ok(model)
}

pub fn save_policy(path: &Path, model: &PolicyModel) -> Result<()> {
    save_snapshot(path, POLICY_FORMAT, model)
}

pub fn load_policy(path: &Path) -> Result<PolicyModel> {
    let model: PolicyModel = load_snapshot(path, POLICY_FORMAT)?;
    model.validate().map_err(|e| Error::Snapshot(format!("{}: {e}", path.display())))?;
    Ok(model)
}

/// `<run>/<iteration>/`
pub fn snapshot_dir(run: &Path, iteration: usize) -> PathBuf {
    run.join(iteration.to_string())
}

pub fn constraint_snapshot_path(run: &Path, iteration: usize) -> PathBuf {
    snapshot_dir(run, iteration).join("constraint.model")
}

pub fn policy_snapshot_path(run: &Path, iteration: usize) -> PathBuf {
    snapshot_dir(run, iteration).join("policy.model")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::ConstraintTrainConfig;
    use crate::pipeline::rollout_episode;
    use crate::policy::PpoConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_trajs(n: usize) -> Vec<Trajectory> {
        let cfg = PpoConfig::point_circle();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PolicyModel::new(&cfg, &mut rng).unwrap();
        let spec = EnvSpec::point_circle();
        (0..n).map(|_| rollout_episode(&p, &spec, &mut rng)).collect()
    }

    #[test]
    fn trajectory_dump_round_trips_exactly() {
        let trajs = sample_trajs(3);
        let text = format_trajectories(&trajs, Some((1.5, 0.25)));
        let back = parse_trajectories(&text, Path::new("mem")).unwrap();
        assert_eq!(back.trajectories, trajs);
        assert_eq!(back.return_mean, Some(1.5));
        assert_eq!(back.return_std, Some(0.25));
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3 * 151);
    }

    #[test]
    fn dumped_rewards_match_the_environment() {
        let spec = EnvSpec::point_circle();
        let trajs = sample_trajs(1);
        let back = parse_trajectories(&format_trajectories(&trajs, None), Path::new("m")).unwrap();
        for st in back.trajectories[0].steps() {
            assert_eq!(st.reward, spec.reward(&st.state, &st.action));
        }
    }

    #[test]
    fn corrupt_dump_reports_line() {
        let trajs = sample_trajs(1);
        let text = format_trajectories(&trajs, None);
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[5] = lines[5].replacen(',', ",x", 3);
        let err = parse_trajectories(&lines.join("\n"), Path::new("demo.csv")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 6),
            other => panic!("unexpected {other}"),
        }
        let err = parse_trajectories("# nothing\n", Path::new("demo.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn out_of_order_rows_are_rejected() {
        let trajs = sample_trajs(1);
        let text = format_trajectories(&trajs, None);
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(4, 5);
        assert!(parse_trajectories(&lines.join("\n"), Path::new("d")).is_err());
    }

    #[test]
    fn constraint_snapshot_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = ConstraintModel::network(
            &ConstraintTrainConfig::point_obstacle(),
            &mut ChaCha8Rng::seed_from_u64(8),
        )
        .unwrap();
        let path = constraint_snapshot_path(dir.path(), 4);
        save_constraint(&path, &m).unwrap();
        assert!(path.ends_with("4/constraint.model"));
        assert_eq!(load_constraint(&path).unwrap(), m);
        let oracle = ConstraintModel::oracle(EnvSpec::point_circle());
        save_constraint(&path, &oracle).unwrap();
        assert_eq!(load_constraint(&path).unwrap(), oracle);
    }

    #[test]
    fn policy_snapshot_round_trips_and_kind_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = PolicyModel::new(&PpoConfig::point_circle(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let path = policy_snapshot_path(dir.path(), 0);
        save_policy(&path, &p).unwrap();
        assert_eq!(load_policy(&path).unwrap(), p);
        assert!(matches!(load_constraint(&path), Err(Error::Snapshot(_))));
    }

    #[test]
    fn grid_rows_and_consistency() {
        let dir = tempfile::tempdir().unwrap();
        let m = ConstraintModel::network(
            &ConstraintTrainConfig::point_circle(),
            &mut ChaCha8Rng::seed_from_u64(10),
        )
        .unwrap();
        let path = dir.path().join("grid.csv");
        let n = write_grid(&path, &m, &Bounds::square(12.0), 50).unwrap();
        assert_eq!(n, 2500);
        let rows = load_grid(&path).unwrap();
        assert_eq!(rows.len(), 2500);
        for r in &rows {
            assert_eq!(r.c, r.zeta <= m.decision_threshold);
        }
        assert!(write_grid(&path, &m, &Bounds::square(12.0), 0).is_err());
    }
}
