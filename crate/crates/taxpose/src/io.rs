//! Plain-text and JSON persistence.
//!
//! Formats:
//! - point clouds: one point per line, three decimal reals separated by
//!   single spaces, `#` comment lines ignored, UTF-8, LF endings; an
//!   optional fourth column carries symmetry labels;
//! - rigid transforms: 12 reals on one line (row-major rotation, then
//!   translation);
//! - checkpoints / task specs / reports: JSON.
//!
//! Reals are written in shortest round-trip decimal form, so reading back
//! reproduces the bits exactly. Every write is atomic (temp file, rename).

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RigidTransform, RotationMatrix, Vec3};
use crate::model::TaxPoseModel;
use crate::scalar::Scalar;
use crate::symmetry::SymmetryLabels;
use crate::tasks::{make_demo, EvalReport, TaskSpec};
use crate::train::{TraceRow, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Writes via a temporary file in the same directory plus a rename, so a
/// crash never leaves a half-written file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid("path", "missing file name"))?
        .to_string_lossy()
        .into_owned();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Point-cloud text format.
// ---------------------------------------------------------------------------

pub fn format_point_cloud<S: Scalar>(cloud: &PointCloud<S>, labels: Option<&[S]>) -> String {
    let mut out = String::new();
    for (i, p) in cloud.iter().enumerate() {
        match labels {
            Some(l) => writeln!(out, "{} {} {} {}", p.x, p.y, p.z, l[i]),
            None => writeln!(out, "{} {} {}", p.x, p.y, p.z),
        }
        .expect("string write");
    }
    out
}

pub fn parse_point_cloud<S: Scalar>(text: &str) -> Result<(PointCloud<S>, Option<SymmetryLabels<S>>)> {
    let mut points = Vec::new();
    let mut labels: Vec<S> = Vec::new();
    let mut width: Option<usize> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(' ').filter(|f| !f.is_empty()).collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected 3 or 4 fields, found {}", fields.len()),
            });
        }
        match width {
            Some(w) if w != fields.len() => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: "inconsistent column count".into(),
                })
            }
            None => width = Some(fields.len()),
            _ => {}
        }
        let mut vals = [0.0f64; 4];
        for (k, f) in fields.iter().enumerate() {
            vals[k] = f.parse::<f64>().map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: format!("bad real `{f}`: {e}"),
            })?;
        }
        points.push(Vec3::new(S::of(vals[0]), S::of(vals[1]), S::of(vals[2])));
        if fields.len() == 4 {
            labels.push(S::of(vals[3]));
        }
    }
    let cloud = PointCloud::new(points)?;
    let labels = if labels.is_empty() {
        None
    } else {
        Some(SymmetryLabels { labels })
    };
    Ok((cloud, labels))
}

pub fn write_point_cloud<S: Scalar>(
    path: &Path,
    cloud: &PointCloud<S>,
    labels: Option<&SymmetryLabels<S>>,
) -> Result<()> {
    if let Some(l) = labels {
        if l.labels.len() != cloud.len() {
            return Err(Error::LengthMismatch("labels vs cloud".into()));
        }
    }
    write_atomic(
        path,
        format_point_cloud(cloud, labels.map(|l| l.labels.as_slice())).as_bytes(),
    )
}

pub fn read_point_cloud<S: Scalar>(
    path: &Path,
) -> Result<(PointCloud<S>, Option<SymmetryLabels<S>>)> {
    parse_point_cloud(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Rigid-transform text format.
// ---------------------------------------------------------------------------

/// 12 reals on one line: row-major 3x3 rotation, then translation.
pub fn format_transform<S: Scalar>(t: &RigidTransform<S>) -> String {
    let m = t.rotation.matrix();
    let v = t.translation;
    format!(
        "{} {} {} {} {} {} {} {} {} {} {} {}",
        m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2], v.x, v.y,
        v.z
    )
}

pub fn parse_transform<S: Scalar>(line: &str) -> Result<RigidTransform<S>> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 12 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected 12 reals, found {}", fields.len()),
        });
    }
    let mut vals = [0.0f64; 12];
    for (k, f) in fields.iter().enumerate() {
        vals[k] = f.parse::<f64>().map_err(|e| Error::Parse {
            line: 1,
            msg: format!("bad real `{f}`: {e}"),
        })?;
    }
    let m = [
        [S::of(vals[0]), S::of(vals[1]), S::of(vals[2])],
        [S::of(vals[3]), S::of(vals[4]), S::of(vals[5])],
        [S::of(vals[6]), S::of(vals[7]), S::of(vals[8])],
    ];
    Ok(RigidTransform::new(
        RotationMatrix::from_matrix(m)?,
        Vec3::new(S::of(vals[9]), S::of(vals[10]), S::of(vals[11])),
    ))
}

pub fn write_transform<S: Scalar>(path: &Path, t: &RigidTransform<S>) -> Result<()> {
    write_atomic(path, format!("{}\n", format_transform(t)).as_bytes())
}

pub fn read_transform<S: Scalar>(path: &Path) -> Result<RigidTransform<S>> {
    let text = std::fs::read_to_string(path)?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .ok_or(Error::Parse {
            line: 1,
            msg: "empty transform file".into(),
        })?;
    parse_transform(line)
}

// ---------------------------------------------------------------------------
// Model checkpoints.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(bound(
    serialize = "S: Serialize + Clone",
    deserialize = "S: DeserializeOwned"
))]
struct CheckpointDoc<S: Scalar> {
    format_version: u32,
    model: TaxPoseModel<S>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

pub fn save_model<S: Scalar + Serialize>(path: &Path, model: &TaxPoseModel<S>) -> Result<()> {
    let doc = CheckpointDoc {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model: model.clone(),
    };
    write_atomic(path, serde_json::to_string_pretty(&doc)?.as_bytes())
}

/// Loads a checkpoint, rejecting unknown format versions.
pub fn load_model<S: Scalar + DeserializeOwned>(path: &Path) -> Result<TaxPoseModel<S>> {
    let text = std::fs::read_to_string(path)?;
    let probe: VersionProbe = serde_json::from_str(&text)?;
    if probe.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::UnsupportedFormatVersion(probe.format_version));
    }
    let doc: CheckpointDoc<S> = serde_json::from_str(&text)?;
    Ok(doc.model)
}

// ---------------------------------------------------------------------------
// Task specs and datasets.
// ---------------------------------------------------------------------------

pub fn save_task_spec<S: Scalar + Serialize>(path: &Path, spec: &TaskSpec<S>) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(spec)?.as_bytes())
}

pub fn load_task_spec<S: Scalar + DeserializeOwned>(path: &Path) -> Result<TaskSpec<S>> {
    let spec: TaskSpec<S> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    spec.validate()?;
    Ok(spec)
}

/// A dataset directory read back from disk.
#[derive(Clone, Debug)]
pub struct Dataset<S: Scalar> {
    pub spec: TaskSpec<S>,
    /// goal -> demo pairs (action, anchor), in file order.
    pub demos: BTreeMap<String, Vec<(PointCloud<S>, PointCloud<S>)>>,
}

/// Writes `spec.json` plus `demos/<goal>/<k>_a.xyz` / `<k>_b.xyz`.
/// Regeneration with the same arguments is byte-identical.
pub fn write_dataset<S: Scalar + Serialize>(
    dir: &Path,
    spec: &TaskSpec<S>,
    demos_per_goal: usize,
    seed: u64,
) -> Result<()> {
    spec.validate()?;
    save_task_spec(&dir.join("spec.json"), spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for goal in &spec.goal_set {
        let goal_dir = dir.join("demos").join(goal);
        for k in 0..demos_per_goal {
            let demo = make_demo(spec, goal, rng.gen())?;
            write_point_cloud(&goal_dir.join(format!("{k}_a.xyz")), &demo.cloud_a, None)?;
            write_point_cloud(&goal_dir.join(format!("{k}_b.xyz")), &demo.cloud_b, None)?;
        }
    }
    Ok(())
}

pub fn read_dataset<S: Scalar + DeserializeOwned>(dir: &Path) -> Result<Dataset<S>> {
    let spec = load_task_spec(&dir.join("spec.json"))?;
    let mut demos = BTreeMap::new();
    for goal in &spec.goal_set {
        let goal_dir = dir.join("demos").join(goal);
        let mut pairs = Vec::new();
        for k in 0.. {
            let a_path = goal_dir.join(format!("{k}_a.xyz"));
            if !a_path.exists() {
                break;
            }
            let (a, _) = read_point_cloud(&a_path)?;
            let (b, _) = read_point_cloud(&goal_dir.join(format!("{k}_b.xyz")))?;
            pairs.push((a, b));
        }
        if pairs.is_empty() {
            return Err(Error::invalid(
                "dataset",
                format!("no demos for goal `{goal}` in {}", goal_dir.display()),
            ));
        }
        demos.insert(goal.clone(), pairs);
    }
    Ok(Dataset { spec, demos })
}

// ---------------------------------------------------------------------------
// Metric traces and reports.
// ---------------------------------------------------------------------------

/// CSV trace: `step,disp,corr,cons,total,eval_E_R,eval_E_t` with empty eval
/// cells on steps without evaluation.
pub fn format_trace_csv<S: Scalar>(trace: &[TraceRow<S>]) -> String {
    let mut out = String::from("step,disp,corr,cons,total,eval_E_R,eval_E_t\n");
    for row in trace {
        let fmt_opt = |v: &Option<S>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.step,
            row.disp,
            row.corr,
            row.cons,
            row.total,
            fmt_opt(&row.eval_rotation),
            fmt_opt(&row.eval_translation)
        )
        .expect("string write");
    }
    out
}

pub fn write_trace_csv<S: Scalar>(path: &Path, trace: &[TraceRow<S>]) -> Result<()> {
    write_atomic(path, format_trace_csv(trace).as_bytes())
}

pub fn write_eval_report<S: Scalar + Serialize>(path: &Path, report: &EvalReport<S>) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(report)?.as_bytes())
}

pub fn save_train_config<S: Scalar + Serialize>(path: &Path, cfg: &TrainConfig<S>) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(cfg)?.as_bytes())
}

pub fn load_train_config<S: Scalar + DeserializeOwned>(path: &Path) -> Result<TrainConfig<S>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Resolves a task argument: a path to a `TaskSpec` JSON file, or the name
/// of a built-in task.
pub fn resolve_task_spec<S: Scalar + DeserializeOwned>(arg: &str) -> Result<TaskSpec<S>> {
    let path = PathBuf::from(arg);
    if path.exists() {
        load_task_spec(&path)
    } else {
        crate::tasks::builtin_task(arg)
    }
}
