//! Synthetic relative-placement tasks: procedural shapes, demonstrations,
//! training-pair sampling, and evaluation.
//!
//! A demonstration shows the action and anchor clouds already in the goal
//! configuration (the cross-pose there is the identity). Training pairs
//! re-pose both clouds with independent random rigid transforms, which
//! fixes the ground-truth cross-pose to `T_beta * T_alpha^-1`.

use crate::error::{Error, Result};
use crate::geometry::{
    random_rotation, rotation_geodesic_error, translation_error, PointCloud, RigidTransform,
    RotationMatrix, Vec3,
};
use crate::model::TaxPoseModel;
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

// ---------------------------------------------------------------------------
// Procedural shapes.
// ---------------------------------------------------------------------------

/// Parametric surface primitives. All dimensions are half-extents unless
/// stated otherwise; shapes are centered at the origin in canonical pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeKind<S: Scalar> {
    Box { half_extents: [S; 3] },
    /// Box without its top face (an open container).
    OpenBox { half_extents: [S; 3] },
    /// Axis along z.
    Cylinder { radius: S, height: S },
    /// Torus with axis z.
    Ring { major_radius: S, minor_radius: S },
    /// U-shaped bracket in the xz-plane, opening up.
    URack { width: S, height: S, bar: S },
    /// Box with a channel cut along y into the top face.
    NotchedBlock {
        half_extents: [S; 3],
        notch_center_x: S,
        notch_half_width: S,
        notch_depth: S,
    },
    /// Two perpendicular slabs.
    LBracket { leg: S, thickness: S },
    /// A base shape with a box marker attached. The marker breaks the
    /// rotational symmetries of the base, keeping the cross-pose of the
    /// built-in tasks unambiguous (a mug is only a mug because of its
    /// handle).
    Marked {
        base: Box<ShapeKind<S>>,
        marker_center: [S; 3],
        marker_half: S,
    },
}

/// A shape plus how many surface points to sample from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec<S: Scalar> {
    pub kind: ShapeKind<S>,
    pub n_points: usize,
}

/// An axis-aligned rectangle patch used by the samplers.
struct Patch {
    origin: [f64; 3],
    u: [f64; 3],
    v: [f64; 3],
}

impl Patch {
    fn area(&self) -> f64 {
        let cu = (self.u[0] * self.u[0] + self.u[1] * self.u[1] + self.u[2] * self.u[2]).sqrt();
        let cv = (self.v[0] * self.v[0] + self.v[1] * self.v[1] + self.v[2] * self.v[2]).sqrt();
        cu * cv
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let a = rng.gen_range(0.0..1.0);
        let b = rng.gen_range(0.0..1.0);
        [
            self.origin[0] + a * self.u[0] + b * self.v[0],
            self.origin[1] + a * self.u[1] + b * self.v[1],
            self.origin[2] + a * self.u[2] + b * self.v[2],
        ]
    }
}

fn box_patches(c: [f64; 3], h: [f64; 3], top: bool) -> Vec<Patch> {
    let (cx, cy, cz) = (c[0], c[1], c[2]);
    let (hx, hy, hz) = (h[0], h[1], h[2]);
    let mut p = vec![
        // bottom
        Patch {
            origin: [cx - hx, cy - hy, cz - hz],
            u: [2.0 * hx, 0.0, 0.0],
            v: [0.0, 2.0 * hy, 0.0],
        },
        // sides
        Patch {
            origin: [cx - hx, cy - hy, cz - hz],
            u: [2.0 * hx, 0.0, 0.0],
            v: [0.0, 0.0, 2.0 * hz],
        },
        Patch {
            origin: [cx - hx, cy + hy, cz - hz],
            u: [2.0 * hx, 0.0, 0.0],
            v: [0.0, 0.0, 2.0 * hz],
        },
        Patch {
            origin: [cx - hx, cy - hy, cz - hz],
            u: [0.0, 2.0 * hy, 0.0],
            v: [0.0, 0.0, 2.0 * hz],
        },
        Patch {
            origin: [cx + hx, cy - hy, cz - hz],
            u: [0.0, 2.0 * hy, 0.0],
            v: [0.0, 0.0, 2.0 * hz],
        },
    ];
    if top {
        p.push(Patch {
            origin: [cx - hx, cy - hy, cz + hz],
            u: [2.0 * hx, 0.0, 0.0],
            v: [0.0, 2.0 * hy, 0.0],
        });
    }
    p
}

fn sample_patches(patches: &[Patch], n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let total: f64 = patches.iter().map(Patch::area).sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.gen_range(0.0..total);
            for patch in patches {
                let a = patch.area();
                if pick <= a {
                    return patch.sample(rng);
                }
                pick -= a;
            }
            patches.last().unwrap().sample(rng)
        })
        .collect()
}

fn surface_area(kind: &ShapeKind<f64>) -> f64 {
    match kind {
        ShapeKind::Box { half_extents: h } => 8.0 * (h[0] * h[1] + h[0] * h[2] + h[1] * h[2]),
        ShapeKind::OpenBox { half_extents: h } => {
            4.0 * h[0] * h[1] + 8.0 * (h[0] * h[2] + h[1] * h[2])
        }
        ShapeKind::Cylinder { radius, height } => {
            std::f64::consts::TAU * radius * height
                + 2.0 * std::f64::consts::PI * radius * radius
        }
        ShapeKind::Ring {
            major_radius,
            minor_radius,
        } => 4.0 * std::f64::consts::PI * std::f64::consts::PI * major_radius * minor_radius,
        ShapeKind::URack { width, height, bar } => {
            2.0 * (4.0 * bar * height) + 4.0 * bar * width
        }
        ShapeKind::NotchedBlock {
            half_extents: h,
            notch_half_width,
            notch_depth,
            ..
        } => {
            8.0 * (h[0] * h[1] + h[0] * h[2] + h[1] * h[2])
                + 8.0 * notch_half_width * notch_depth
                + 4.0 * h[1] * notch_depth
        }
        ShapeKind::LBracket { leg, thickness } => {
            2.0 * leg * leg + 4.0 * leg * thickness + 2.0 * leg * (leg - thickness)
        }
        ShapeKind::Marked {
            base, marker_half, ..
        } => surface_area(base) + 24.0 * marker_half * marker_half,
    }
}

fn sample_kind(kind: &ShapeKind<f64>, n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    match kind {
        ShapeKind::Box { half_extents } => {
            sample_patches(&box_patches([0.0; 3], *half_extents, true), n, rng)
        }
        ShapeKind::OpenBox { half_extents } => {
            sample_patches(&box_patches([0.0; 3], *half_extents, false), n, rng)
        }
        ShapeKind::Cylinder { radius, height } => {
            let r = *radius;
            let h = *height;
            let lateral = std::f64::consts::TAU * r * h;
            let cap = std::f64::consts::PI * r * r;
            let total = lateral + 2.0 * cap;
            (0..n)
                .map(|_| {
                    let pick = rng.gen_range(0.0..total);
                    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                    if pick < lateral {
                        let z = rng.gen_range(-h / 2.0..h / 2.0);
                        [r * angle.cos(), r * angle.sin(), z]
                    } else {
                        // uniform over a disk cap
                        let rho = r * rng.gen_range(0.0f64..1.0).sqrt();
                        let z = if pick < lateral + cap { h / 2.0 } else { -h / 2.0 };
                        [rho * angle.cos(), rho * angle.sin(), z]
                    }
                })
                .collect()
        }
        ShapeKind::Ring {
            major_radius,
            minor_radius,
        } => {
            let big = *major_radius;
            let small = *minor_radius;
            (0..n)
                .map(|_| loop {
                    let u = rng.gen_range(0.0..std::f64::consts::TAU);
                    let v = rng.gen_range(0.0..std::f64::consts::TAU);
                    // area element on a torus is proportional to R + r cos v
                    let accept = (big + small * v.cos()) / (big + small);
                    if rng.gen_range(0.0..1.0) <= accept {
                        let w = big + small * v.cos();
                        break [w * u.cos(), w * u.sin(), small * v.sin()];
                    }
                })
                .collect()
        }
        ShapeKind::URack { width, height, bar } => {
            let w = *width;
            let h = *height;
            let t = *bar;
            let patches: Vec<Patch> = [
                box_patches([-w / 2.0, 0.0, h / 2.0], [t / 2.0, t / 2.0, h / 2.0], true),
                box_patches([w / 2.0, 0.0, h / 2.0], [t / 2.0, t / 2.0, h / 2.0], true),
                box_patches([0.0, 0.0, t / 4.0], [w / 2.0 - t / 2.0, t / 2.0, t / 4.0], true),
            ]
            .into_iter()
            .flatten()
            .collect();
            sample_patches(&patches, n, rng)
        }
        ShapeKind::NotchedBlock {
            half_extents,
            notch_center_x,
            notch_half_width,
            notch_depth,
        } => {
            let [hx, hy, hz] = *half_extents;
            let cx = *notch_center_x;
            let nw = *notch_half_width;
            let nd = *notch_depth;
            let x0 = cx - nw;
            let x1 = cx + nw;
            let floor_z = hz - nd;
            let mut patches = box_patches([0.0; 3], [hx, hy, hz], false);
            // top face split around the channel
            patches.push(Patch {
                origin: [-hx, -hy, hz],
                u: [x0 + hx, 0.0, 0.0],
                v: [0.0, 2.0 * hy, 0.0],
            });
            patches.push(Patch {
                origin: [x1, -hy, hz],
                u: [hx - x1, 0.0, 0.0],
                v: [0.0, 2.0 * hy, 0.0],
            });
            // channel floor and walls
            patches.push(Patch {
                origin: [x0, -hy, floor_z],
                u: [2.0 * nw, 0.0, 0.0],
                v: [0.0, 2.0 * hy, 0.0],
            });
            patches.push(Patch {
                origin: [x0, -hy, floor_z],
                u: [0.0, 2.0 * hy, 0.0],
                v: [0.0, 0.0, nd],
            });
            patches.push(Patch {
                origin: [x1, -hy, floor_z],
                u: [0.0, 2.0 * hy, 0.0],
                v: [0.0, 0.0, nd],
            });
            sample_patches(&patches, n, rng)
        }
        ShapeKind::LBracket { leg, thickness } => {
            let l = *leg;
            let t = *thickness;
            let patches: Vec<Patch> = [
                box_patches([0.0, 0.0, t / 2.0], [l / 2.0, l / 2.0, t / 2.0], true),
                box_patches(
                    [l / 2.0 - t / 2.0, 0.0, l / 2.0 + t / 2.0],
                    [t / 2.0, l / 2.0, l / 2.0 - t / 2.0],
                    true,
                ),
            ]
            .into_iter()
            .flatten()
            .collect();
            sample_patches(&patches, n, rng)
        }
        ShapeKind::Marked {
            base,
            marker_center,
            marker_half,
        } => {
            let marker_area = 24.0 * marker_half * marker_half;
            let total = surface_area(base) + marker_area;
            let marker = box_patches(*marker_center, [*marker_half; 3], true);
            (0..n)
                .map(|_| {
                    if rng.gen_range(0.0..total) < marker_area {
                        sample_patches(&marker, 1, rng)[0]
                    } else {
                        sample_kind(base, 1, rng)[0]
                    }
                })
                .collect()
        }
    }
}

fn kind_to_f64<S: Scalar>(kind: &ShapeKind<S>) -> ShapeKind<f64> {
    let c = |x: S| x.to_f64_lossy();
    match kind {
        ShapeKind::Box { half_extents: h } => ShapeKind::Box {
            half_extents: [c(h[0]), c(h[1]), c(h[2])],
        },
        ShapeKind::OpenBox { half_extents: h } => ShapeKind::OpenBox {
            half_extents: [c(h[0]), c(h[1]), c(h[2])],
        },
        ShapeKind::Cylinder { radius, height } => ShapeKind::Cylinder {
            radius: c(*radius),
            height: c(*height),
        },
        ShapeKind::Ring {
            major_radius,
            minor_radius,
        } => ShapeKind::Ring {
            major_radius: c(*major_radius),
            minor_radius: c(*minor_radius),
        },
        ShapeKind::URack { width, height, bar } => ShapeKind::URack {
            width: c(*width),
            height: c(*height),
            bar: c(*bar),
        },
        ShapeKind::NotchedBlock {
            half_extents: h,
            notch_center_x,
            notch_half_width,
            notch_depth,
        } => ShapeKind::NotchedBlock {
            half_extents: [c(h[0]), c(h[1]), c(h[2])],
            notch_center_x: c(*notch_center_x),
            notch_half_width: c(*notch_half_width),
            notch_depth: c(*notch_depth),
        },
        ShapeKind::LBracket { leg, thickness } => ShapeKind::LBracket {
            leg: c(*leg),
            thickness: c(*thickness),
        },
        ShapeKind::Marked {
            base,
            marker_center,
            marker_half,
        } => ShapeKind::Marked {
            base: Box::new(kind_to_f64(base)),
            marker_center: [c(marker_center[0]), c(marker_center[1]), c(marker_center[2])],
            marker_half: c(*marker_half),
        },
    }
}

/// Deterministic surface sampling of a parametric primitive. Sampling runs
/// in f64 and is cast, so a seed produces the same cloud for every scalar
/// type.
pub fn generate_shape<S: Scalar>(
    kind: &ShapeKind<S>,
    n_points: usize,
    seed: u64,
) -> Result<PointCloud<S>> {
    if n_points < 8 {
        return Err(Error::invalid("shape", "need at least 8 points"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = sample_kind(&kind_to_f64(kind), n_points, &mut rng);
    PointCloud::new(
        raw.into_iter()
            .map(|p| Vec3::new(S::of(p[0]), S::of(p[1]), S::of(p[2])))
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Task specifications.
// ---------------------------------------------------------------------------

/// A relative-placement task: shapes, semantic goals and their poses.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(
    serialize = "S: Serialize + Clone",
    deserialize = "S: serde::de::DeserializeOwned"
))]
pub struct TaskSpec<S: Scalar> {
    pub name: String,
    pub action_shape: ShapeSpec<S>,
    pub anchor_shape: ShapeSpec<S>,
    pub goal_set: Vec<String>,
    /// Pose placing the action relative to the anchor per goal.
    pub goal_poses: BTreeMap<String, RigidTransform<S>>,
    /// Whether a goal places action points outside the anchor's convex hull.
    pub off_hull: BTreeMap<String, bool>,
    /// Declared lower bound on the hull clearance of off-hull goals.
    pub hull_margins: BTreeMap<String, S>,
}

impl<S: Scalar> TaskSpec<S> {
    pub fn validate(&self) -> Result<()> {
        if self.goal_set.is_empty() {
            return Err(Error::invalid("task spec", "empty goal set"));
        }
        for goal in &self.goal_set {
            if !self.goal_poses.contains_key(goal) {
                return Err(Error::invalid(
                    "task spec",
                    format!("goal `{goal}` missing a pose"),
                ));
            }
        }
        if self.goal_poses.len() != self.goal_set.len() {
            return Err(Error::invalid("task spec", "extra goal poses"));
        }
        if self.action_shape.n_points < 8 || self.anchor_shape.n_points < 8 {
            return Err(Error::invalid("task spec", "shapes need >= 8 points"));
        }
        Ok(())
    }

    pub fn goal_index(&self, goal: &str) -> Result<usize> {
        self.goal_set
            .iter()
            .position(|g| g == goal)
            .ok_or_else(|| Error::UnknownGoal(goal.to_string()))
    }

    /// One-hot goal context over this task's goal set.
    pub fn goal_one_hot(&self, goal: &str) -> Result<Vec<S>> {
        let idx = self.goal_index(goal)?;
        let mut v = vec![S::zero(); self.goal_set.len()];
        v[idx] = S::one();
        Ok(v)
    }
}

/// Names of the built-in task suite.
pub fn builtin_names() -> &'static [&'static str] {
    &["peg-in-ring", "block-in-box", "block-on-box", "block-4way"]
}

fn marked_block<S: Scalar>() -> ShapeKind<S> {
    // a corner knob removes all 24 cube symmetries
    ShapeKind::Marked {
        base: Box::new(ShapeKind::Box {
            half_extents: [S::of(0.08); 3],
        }),
        marker_center: [S::of(0.1), S::of(0.1), S::of(0.1)],
        marker_half: S::of(0.04),
    }
}

/// Built-in desk-scale tasks covering on-hull, off-hull and goal-conditioned
/// regimes.
pub fn builtin_task<S: Scalar>(name: &str) -> Result<TaskSpec<S>> {
    let translate = |x: f64, y: f64, z: f64| {
        RigidTransform::from_translation(Vec3::new(S::of(x), S::of(y), S::of(z)))
    };
    let spec = match name {
        "peg-in-ring" => {
            let mut goal_poses = BTreeMap::new();
            goal_poses.insert("through".to_string(), translate(0.0, 0.0, 0.15));
            TaskSpec {
                name: name.to_string(),
                // a knob on the peg and a tab on the ring break the
                // rotational symmetries, keeping the cross-pose unique
                action_shape: ShapeSpec {
                    kind: ShapeKind::Marked {
                        base: Box::new(ShapeKind::Cylinder {
                            radius: S::of(0.08),
                            height: S::of(1.0),
                        }),
                        marker_center: [S::of(0.14), S::zero(), S::of(0.38)],
                        marker_half: S::of(0.05),
                    },
                    n_points: 48,
                },
                anchor_shape: ShapeSpec {
                    kind: ShapeKind::Marked {
                        base: Box::new(ShapeKind::Ring {
                            major_radius: S::of(0.3),
                            minor_radius: S::of(0.05),
                        }),
                        marker_center: [S::of(0.39), S::zero(), S::of(0.06)],
                        marker_half: S::of(0.05),
                    },
                    n_points: 64,
                },
                goal_set: vec!["through".to_string()],
                goal_poses,
                off_hull: BTreeMap::from([("through".to_string(), true)]),
                hull_margins: BTreeMap::from([("through".to_string(), S::of(0.3))]),
            }
        }
        "block-in-box" => {
            let mut goal_poses = BTreeMap::new();
            goal_poses.insert("in".to_string(), translate(0.0, 0.0, -0.10));
            TaskSpec {
                name: name.to_string(),
                action_shape: ShapeSpec {
                    kind: marked_block(),
                    n_points: 48,
                },
                anchor_shape: ShapeSpec {
                    kind: ShapeKind::Marked {
                        base: Box::new(ShapeKind::OpenBox {
                            half_extents: [S::of(0.3), S::of(0.24), S::of(0.2)],
                        }),
                        marker_center: [S::of(0.36), S::of(0.1), S::of(0.12)],
                        marker_half: S::of(0.06),
                    },
                    n_points: 64,
                },
                goal_set: vec!["in".to_string()],
                goal_poses,
                off_hull: BTreeMap::from([("in".to_string(), false)]),
                hull_margins: BTreeMap::from([("in".to_string(), S::zero())]),
            }
        }
        "block-on-box" => {
            let mut goal_poses = BTreeMap::new();
            goal_poses.insert("on".to_string(), translate(0.0, 0.0, 0.28));
            TaskSpec {
                name: name.to_string(),
                action_shape: ShapeSpec {
                    kind: marked_block(),
                    n_points: 48,
                },
                anchor_shape: ShapeSpec {
                    kind: ShapeKind::Marked {
                        base: Box::new(ShapeKind::Box {
                            half_extents: [S::of(0.3), S::of(0.24), S::of(0.2)],
                        }),
                        marker_center: [S::of(0.36), S::of(0.1), S::of(0.1)],
                        marker_half: S::of(0.06),
                    },
                    n_points: 64,
                },
                goal_set: vec!["on".to_string()],
                goal_poses,
                off_hull: BTreeMap::from([("on".to_string(), true)]),
                hull_margins: BTreeMap::from([("on".to_string(), S::of(0.04))]),
            }
        }
        "block-4way" => {
            let goals = ["in", "on", "left", "right"];
            let mut goal_poses = BTreeMap::new();
            goal_poses.insert("in".to_string(), translate(0.15, 0.0, 0.13));
            goal_poses.insert("on".to_string(), translate(-0.125, 0.0, 0.28));
            goal_poses.insert("left".to_string(), translate(-0.42, 0.0, -0.12));
            goal_poses.insert("right".to_string(), translate(0.42, 0.0, -0.12));
            TaskSpec {
                name: name.to_string(),
                action_shape: ShapeSpec {
                    kind: marked_block(),
                    n_points: 48,
                },
                anchor_shape: ShapeSpec {
                    kind: ShapeKind::NotchedBlock {
                        half_extents: [S::of(0.3), S::of(0.25), S::of(0.2)],
                        notch_center_x: S::of(0.15),
                        notch_half_width: S::of(0.1),
                        notch_depth: S::of(0.16),
                    },
                    n_points: 64,
                },
                goal_set: goals.iter().map(|g| g.to_string()).collect(),
                goal_poses,
                off_hull: BTreeMap::from([
                    ("in".to_string(), false),
                    ("on".to_string(), true),
                    ("left".to_string(), true),
                    ("right".to_string(), true),
                ]),
                hull_margins: BTreeMap::from([
                    ("in".to_string(), S::zero()),
                    ("on".to_string(), S::of(0.04)),
                    ("left".to_string(), S::of(0.02)),
                    ("right".to_string(), S::of(0.02)),
                ]),
            }
        }
        other => return Err(Error::invalid("task", format!("unknown builtin `{other}`"))),
    };
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Demonstrations and training pairs.
// ---------------------------------------------------------------------------

/// One demonstration: both clouds in the goal configuration, so the
/// cross-pose is the identity by construction.
#[derive(Clone, Debug)]
pub struct DemoPair<S: Scalar> {
    pub cloud_a: PointCloud<S>,
    pub cloud_b: PointCloud<S>,
    /// One-hot goal context over the task's goal set.
    pub goal_index: Option<Vec<S>>,
    pub symmetry_labels: Option<(crate::symmetry::SymmetryLabels<S>, crate::symmetry::SymmetryLabels<S>)>,
}

/// Fresh surface samples of both shapes, with the action placed by the
/// goal pose.
pub fn make_demo<S: Scalar>(spec: &TaskSpec<S>, goal: &str, seed: u64) -> Result<DemoPair<S>> {
    let pose = spec
        .goal_poses
        .get(goal)
        .ok_or_else(|| Error::UnknownGoal(goal.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seed_a = rng.gen::<u64>();
    let seed_b = rng.gen::<u64>();
    let canonical = generate_shape(&spec.action_shape.kind, spec.action_shape.n_points, seed_a)?;
    let cloud_b = generate_shape(&spec.anchor_shape.kind, spec.anchor_shape.n_points, seed_b)?;
    Ok(DemoPair {
        cloud_a: pose.apply(&canonical),
        cloud_b,
        goal_index: Some(spec.goal_one_hot(goal)?),
        symmetry_labels: None,
    })
}

/// How rotations are sampled when re-posing demonstrations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// Uniform over SO(3).
    #[default]
    Full,
    /// Rotation about z only.
    YawOnly,
    /// No rotation (degenerate mode for tests).
    Identity,
}

fn sample_pose<S: Scalar>(
    rng: &mut ChaCha8Rng,
    translation_scale: f64,
    mode: RotationMode,
) -> RigidTransform<S> {
    let rotation = match mode {
        RotationMode::Full => random_rotation(rng),
        RotationMode::YawOnly => {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            RotationMatrix::from_axis_angle(Vec3::new(S::zero(), S::zero(), S::one()), S::of(angle))
                .expect("z axis is a unit vector")
        }
        RotationMode::Identity => RotationMatrix::identity(),
    };
    let translation = Vec3::new(
        S::of(rng.gen_range(-translation_scale..=translation_scale)),
        S::of(rng.gen_range(-translation_scale..=translation_scale)),
        S::of(rng.gen_range(-translation_scale..=translation_scale)),
    );
    RigidTransform::new(rotation, translation)
}

/// One supervised example: independently re-posed clouds plus the implied
/// ground-truth cross-pose.
#[derive(Clone, Debug)]
pub struct TrainingSample<S: Scalar> {
    pub posed_a: PointCloud<S>,
    pub posed_b: PointCloud<S>,
    pub t_alpha: RigidTransform<S>,
    pub t_beta: RigidTransform<S>,
    /// `t_beta * t_alpha^-1`, bit-exact by construction.
    pub t_gt: RigidTransform<S>,
}

/// Re-poses a demonstration with independent random transforms.
pub fn sample_training_pair<S: Scalar>(
    demo: &DemoPair<S>,
    translation_scale: f64,
    mode: RotationMode,
    seed: u64,
) -> TrainingSample<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_alpha = sample_pose(&mut rng, translation_scale, mode);
    let t_beta = sample_pose(&mut rng, translation_scale, mode);
    TrainingSample {
        posed_a: t_alpha.apply(&demo.cloud_a),
        posed_b: t_beta.apply(&demo.cloud_b),
        t_gt: t_beta.compose(&t_alpha.invert()),
        t_alpha,
        t_beta,
    }
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

/// Success thresholds: rotation on the halved geodesic metric (radians),
/// translation in world units.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalThresholds<S: Scalar> {
    pub max_rotation: S,
    pub max_translation: S,
}

impl<S: Scalar> EvalThresholds<S> {
    /// Defaults: 5 degrees on the halved metric, 5% of the anchor diameter.
    pub fn for_anchor_diameter(diameter: S) -> Self {
        EvalThresholds {
            max_rotation: S::of(5.0_f64.to_radians()),
            max_translation: S::of(0.05) * diameter,
        }
    }
}

/// One evaluation case: a posed pair plus its goal context.
#[derive(Clone, Debug)]
pub struct EvalCase<S: Scalar> {
    pub sample: TrainingSample<S>,
    pub goal: String,
    pub goal_onehot: Option<Vec<S>>,
}

/// Aggregate evaluation metrics.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EvalReport<S: Scalar> {
    pub cases: usize,
    pub solver_failures: usize,
    pub mean_rotation_error: S,
    pub median_rotation_error: S,
    pub mean_translation_error: S,
    pub median_translation_error: S,
    pub success_rate: S,
    pub per_goal: BTreeMap<String, GoalReport<S>>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GoalReport<S: Scalar> {
    pub cases: usize,
    pub mean_rotation_error: S,
    pub mean_translation_error: S,
    pub success_rate: S,
}

fn median<S: Scalar>(values: &mut [S]) -> S {
    if values.is_empty() {
        return S::zero();
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / S::of(2.0)
    }
}

/// Evaluates an arbitrary predictor; solver failures count as failures and
/// are tallied separately (error statistics cover successful solves).
pub fn evaluate_with<S: Scalar, F>(
    predictor: F,
    cases: &[EvalCase<S>],
    thresholds: &EvalThresholds<S>,
) -> Result<EvalReport<S>>
where
    F: Fn(&EvalCase<S>) -> Result<RigidTransform<S>>,
{
    if cases.is_empty() {
        return Err(Error::invalid("evaluation", "no cases"));
    }
    let mut rot_errors = Vec::new();
    let mut trans_errors = Vec::new();
    let mut per_goal: BTreeMap<String, (usize, usize, S, S)> = BTreeMap::new();
    let mut successes = 0usize;
    let mut failures = 0usize;

    for case in cases {
        let entry = per_goal
            .entry(case.goal.clone())
            .or_insert((0, 0, S::zero(), S::zero()));
        entry.0 += 1;
        match predictor(case) {
            Ok(pred) => {
                let er = rotation_geodesic_error(&pred.rotation, &case.sample.t_gt.rotation);
                let et = translation_error(pred.translation, case.sample.t_gt.translation);
                rot_errors.push(er);
                trans_errors.push(et);
                entry.2 = entry.2 + er;
                entry.3 = entry.3 + et;
                if er <= thresholds.max_rotation && et <= thresholds.max_translation {
                    successes += 1;
                    entry.1 += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }

    let mean = |v: &[S]| -> S {
        if v.is_empty() {
            S::zero()
        } else {
            v.iter().fold(S::zero(), |a, b| a + *b) / S::from_usize(v.len()).unwrap()
        }
    };
    let report = EvalReport {
        cases: cases.len(),
        solver_failures: failures,
        mean_rotation_error: mean(&rot_errors),
        median_rotation_error: median(&mut rot_errors.clone()),
        mean_translation_error: mean(&trans_errors),
        median_translation_error: median(&mut trans_errors.clone()),
        success_rate: S::from_usize(successes).unwrap() / S::from_usize(cases.len()).unwrap(),
        per_goal: per_goal
            .into_iter()
            .map(|(goal, (count, succ, er, et))| {
                let denom = S::from_usize(count.max(1)).unwrap();
                (
                    goal,
                    GoalReport {
                        cases: count,
                        mean_rotation_error: er / denom,
                        mean_translation_error: et / denom,
                        success_rate: S::from_usize(succ).unwrap() / denom,
                    },
                )
            })
            .collect(),
    };
    Ok(report)
}

/// Evaluates a model's forward pass over the cases.
pub fn evaluate<S: Scalar>(
    model: &TaxPoseModel<S>,
    cases: &[EvalCase<S>],
    thresholds: &EvalThresholds<S>,
) -> Result<EvalReport<S>> {
    evaluate_with(
        |case| {
            crate::model::forward(
                model,
                &case.sample.posed_a,
                &case.sample.posed_b,
                case.goal_onehot.as_deref(),
            )
            .map(|est| est.transform)
        },
        cases,
        thresholds,
    )
}

/// Builds a deterministic held-out evaluation set.
pub fn make_eval_cases<S: Scalar>(
    spec: &TaskSpec<S>,
    goal: Option<&str>,
    count: usize,
    translation_scale: f64,
    mode: RotationMode,
    goal_conditioned: bool,
    seed: u64,
) -> Result<Vec<EvalCase<S>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let goals: Vec<String> = match goal {
        Some(g) => {
            spec.goal_index(g)?;
            vec![g.to_string()]
        }
        None => spec.goal_set.clone(),
    };
    let mut cases = Vec::with_capacity(count);
    for k in 0..count {
        let goal = &goals[k % goals.len()];
        let demo = make_demo(spec, goal, rng.gen())?;
        let sample = sample_training_pair(&demo, translation_scale, mode, rng.gen());
        cases.push(EvalCase {
            sample,
            goal: goal.clone(),
            goal_onehot: if goal_conditioned {
                Some(spec.goal_one_hot(goal)?)
            } else {
                None
            },
        });
    }
    Ok(cases)
}

/// Corpus of jittered primitives for encoder pretraining.
pub fn pretrain_corpus<S: Scalar>(count: usize, seed: u64) -> Vec<PointCloud<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.gen_range(32..=128);
            let jitter = rng.gen_range(0.7..1.3);
            let kind: ShapeKind<S> = match rng.gen_range(0..3) {
                0 => ShapeKind::Box {
                    half_extents: [
                        S::of(0.2 * jitter),
                        S::of(0.3 * jitter),
                        S::of(0.15 * jitter),
                    ],
                },
                1 => ShapeKind::Cylinder {
                    radius: S::of(0.15 * jitter),
                    height: S::of(0.6 * jitter),
                },
                _ => ShapeKind::LBracket {
                    leg: S::of(0.5 * jitter),
                    thickness: S::of(0.1 * jitter),
                },
            };
            generate_shape(&kind, n, rng.gen()).expect("valid corpus shape")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_generation_is_deterministic_and_bounded() {
        let kind: ShapeKind<f64> = ShapeKind::Box {
            half_extents: [0.2, 0.3, 0.1],
        };
        let a = generate_shape(&kind, 32, 5).unwrap();
        let b = generate_shape(&kind, 32, 5).unwrap();
        assert_eq!(a, b);
        for p in a.iter() {
            assert!(p.x.abs() <= 0.2 + 1e-12);
            assert!(p.y.abs() <= 0.3 + 1e-12);
            assert!(p.z.abs() <= 0.1 + 1e-12);
        }
        let c = generate_shape(&kind, 32, 6).unwrap();
        assert_ne!(a, c, "different seeds must differ");
        assert!(generate_shape(&kind, 4, 5).is_err());
    }

    #[test]
    fn all_primitives_sample() {
        let kinds: Vec<ShapeKind<f64>> = vec![
            ShapeKind::Box {
                half_extents: [0.2; 3],
            },
            ShapeKind::OpenBox {
                half_extents: [0.3, 0.3, 0.2],
            },
            ShapeKind::Cylinder {
                radius: 0.1,
                height: 0.5,
            },
            ShapeKind::Ring {
                major_radius: 0.3,
                minor_radius: 0.05,
            },
            ShapeKind::URack {
                width: 0.4,
                height: 0.5,
                bar: 0.08,
            },
            ShapeKind::NotchedBlock {
                half_extents: [0.3, 0.25, 0.2],
                notch_center_x: 0.15,
                notch_half_width: 0.1,
                notch_depth: 0.16,
            },
            ShapeKind::LBracket {
                leg: 0.5,
                thickness: 0.1,
            },
        ];
        for kind in kinds {
            let cloud = generate_shape(&kind, 64, 11).unwrap();
            assert_eq!(cloud.len(), 64);
            assert!(cloud.diameter() > 0.0);
        }
    }

    #[test]
    fn builtin_tasks_validate() {
        for name in builtin_names() {
            let spec: TaskSpec<f64> = builtin_task(name).unwrap();
            spec.validate().unwrap();
            for goal in &spec.goal_set {
                assert!(spec.off_hull.contains_key(goal));
                assert!(spec.hull_margins.contains_key(goal));
            }
        }
        assert!(builtin_task::<f64>("no-such-task").is_err());
    }

    #[test]
    fn make_demo_respects_goal_pose_and_relplace() {
        let spec: TaskSpec<f64> = builtin_task("peg-in-ring").unwrap();
        let demo = make_demo(&spec, "through", 3).unwrap();
        assert_eq!(demo.cloud_a.len(), 48);
        assert_eq!(demo.cloud_b.len(), 64);
        assert!(make_demo(&spec, "bogus", 3).is_err());

        // RelPlace: a common rigid transform applied to both clouds keeps
        // the relative configuration. Known correspondences let us re-fit
        // the relative pose exactly: it must equal the identity both times.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let common = RigidTransform::new(
            random_rotation(&mut rng),
            Vec3::new(0.3, -1.0, 0.7),
        );
        let moved_a = common.apply(&demo.cloud_a);
        let moved_b = common.apply(&demo.cloud_b);
        // exact correspondences between moved_a and the action's goal
        // placement relative to moved anchor
        let c = crate::procrustes::CorrespondenceSet::with_uniform_weights(
            moved_a.clone(),
            moved_a.clone(),
            moved_b.clone(),
            moved_b.clone(),
        )
        .unwrap();
        let sol = crate::procrustes::solve_weighted(&c).unwrap();
        assert!(
            sol.transform
                .rotation
                .frobenius_distance(&RotationMatrix::identity())
                < 1e-9
        );
        assert!(sol.transform.translation.norm() < 1e-9);

        // identity goal pose leaves the canonical cloud in place
        let mut spec2 = spec.clone();
        spec2
            .goal_poses
            .insert("through".to_string(), RigidTransform::identity());
        let demo2 = make_demo(&spec2, "through", 3).unwrap();
        // same sampling seed: the action cloud is the canonical shape
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seed_a = rng.gen::<u64>();
        let canonical: PointCloud<f64> =
            generate_shape(&spec.action_shape.kind, 48, seed_a).unwrap();
        assert_eq!(demo2.cloud_a, canonical);
    }

    #[test]
    fn training_pair_invariant_and_modes() {
        let spec: TaskSpec<f64> = builtin_task("block-on-box").unwrap();
        let demo = make_demo(&spec, "on", 1).unwrap();

        // identity mode with zero scale gives the identity ground truth
        let s = sample_training_pair(&demo, 0.0, RotationMode::Identity, 9);
        assert_eq!(s.t_alpha, RigidTransform::identity());
        assert_eq!(s.t_beta, RigidTransform::identity());
        assert_eq!(s.t_gt, RigidTransform::identity());
        assert_eq!(s.posed_a, demo.cloud_a);

        // the invariant holds bit-exactly by construction
        let s = sample_training_pair(&demo, 1.0, RotationMode::Full, 10);
        assert_eq!(s.t_gt, s.t_beta.compose(&s.t_alpha.invert()));

        // construction oracle: t_gt moves posed_a into the demo-relative
        // configuration against posed_b
        let back_a = s.t_gt.apply(&s.posed_a);
        let expect_a = s.t_beta.apply(&demo.cloud_a);
        for (p, q) in back_a.iter().zip(expect_a.iter()) {
            assert!(p.sub(*q).norm() < 1e-10);
        }

        // yaw-only mode keeps z as z
        let s = sample_training_pair(&demo, 1.0, RotationMode::YawOnly, 11);
        let r = s.t_alpha.rotation;
        let z = Vec3::new(0.0, 0.0, 1.0);
        assert!(r.mul_vec(z).sub(z).norm() < 1e-12);
    }

    #[test]
    fn evaluate_oracle_and_identity_predictors() {
        let spec: TaskSpec<f64> = builtin_task("block-on-box").unwrap();
        let cases =
            make_eval_cases(&spec, Some("on"), 20, 1.0, RotationMode::Full, false, 31).unwrap();
        let thresholds = EvalThresholds::for_anchor_diameter(1.0);

        // oracle predictor: zero errors, success 1.0
        let report = evaluate_with(|c| Ok(c.sample.t_gt), &cases, &thresholds).unwrap();
        assert_eq!(report.success_rate, 1.0);
        // identical rotations sit at the arccos noise floor of the metric
        assert!(report.mean_rotation_error < 1e-7);
        assert_eq!(report.mean_translation_error, 0.0);
        assert_eq!(report.solver_failures, 0);

        // identity predictor on identity ground truths
        let id_cases =
            make_eval_cases(&spec, Some("on"), 10, 0.0, RotationMode::Identity, false, 32)
                .unwrap();
        let report =
            evaluate_with(|_| Ok(RigidTransform::identity()), &id_cases, &thresholds).unwrap();
        assert_eq!(report.success_rate, 1.0);

        // identity predictor against a fixed quarter turn about z: the
        // halved metric reports pi/4 per sample
        let quarter = RigidTransform::new(
            RotationMatrix::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), std::f64::consts::FRAC_PI_2)
                .unwrap(),
            Vec3::zero(),
        );
        let mut fixed = id_cases.clone();
        for c in &mut fixed {
            c.sample.t_gt = quarter;
        }
        let report =
            evaluate_with(|_| Ok(RigidTransform::identity()), &fixed, &thresholds).unwrap();
        assert!((report.mean_rotation_error - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        assert_eq!(report.success_rate, 0.0);

        // failures are counted separately
        let report = evaluate_with(
            |c| {
                if c.sample.t_gt.translation.x > 0.0 {
                    Err(Error::DegenerateCorrespondences)
                } else {
                    Ok(c.sample.t_gt)
                }
            },
            &cases,
            &thresholds,
        )
        .unwrap();
        assert!(report.solver_failures > 0);
        assert!(report.success_rate < 1.0);
    }

    #[test]
    fn eval_cases_cycle_goals_for_gc() {
        let spec: TaskSpec<f64> = builtin_task("block-4way").unwrap();
        let cases = make_eval_cases(&spec, None, 8, 0.5, RotationMode::Full, true, 7).unwrap();
        assert_eq!(cases.len(), 8);
        for (k, case) in cases.iter().enumerate() {
            assert_eq!(case.goal, spec.goal_set[k % 4]);
            let onehot = case.goal_onehot.as_ref().unwrap();
            assert_eq!(onehot.len(), 4);
            assert_eq!(onehot.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn pretrain_corpus_is_deterministic() {
        let a: Vec<PointCloud<f64>> = pretrain_corpus(5, 99);
        let b: Vec<PointCloud<f64>> = pretrain_corpus(5, 99);
        assert_eq!(a, b);
        for cloud in &a {
            assert!((32..=128).contains(&cloud.len()));
        }
    }
}
