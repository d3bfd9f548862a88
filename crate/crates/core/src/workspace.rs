//! Workspace model: system states, synthetic demonstration generators and a
//! kinematic simulator for closed-loop execution tests.
//!
//! Two scenarios are built in. `fig3` produces 2-D "pick" demonstrations
//! that share an approach segment and then split into two branches (top /
//! side). `chain` produces a two-skill pick-and-place task on the full pose
//! manifold: `fetch` carries object A to a staging station, `deliver` picks
//! it up again and places it on top of object B.

use crate::error::{Error, Result};
use crate::manifold::{quaternion, BlockSpec, ManifoldPoint, ManifoldSpec};
use crate::tpgmm::{BlockTransform, Demonstration, Frame};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Everything the planner can observe: end-effector state plus the pose of
/// every object of interest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub end_effector: ManifoldPoint,
    pub objects: BTreeMap<String, ManifoldPoint>,
    pub timestamp: f64,
}

impl SystemState {
    pub fn validate(&self) -> Result<()> {
        self.end_effector.validate()?;
        for p in self.objects.values() {
            p.validate()?;
        }
        Ok(())
    }

    pub fn object(&self, id: &str) -> Result<&ManifoldPoint> {
        self.objects
            .get(id)
            .ok_or_else(|| Error::MissingEntry(format!("object '{id}' in system state")))
    }
}

/// Build the frame attached to an object pose, expressed for an arbitrary
/// target manifold.
///
/// Convention: the first Euclidean block of a manifold is its position
/// channel and the first quaternion block its orientation channel; further
/// Euclidean blocks (gripper and similar scalars) are untouched by frames.
pub fn pose_frame(spec: &ManifoldSpec, id: &str, pose: &ManifoldPoint) -> Frame {
    let pose_spec = &pose.spec;
    let offsets = pose_spec.ambient_offsets();
    let mut position: Option<Vec<f64>> = None;
    let mut orientation: Option<[f64; 4]> = None;
    for (block, &o) in pose_spec.blocks.iter().zip(&offsets) {
        match block {
            BlockSpec::Euclidean(n) if position.is_none() => {
                position = Some(pose.coords[o..o + n].to_vec());
            }
            BlockSpec::UnitQuaternion if orientation.is_none() => {
                orientation = Some([
                    pose.coords[o],
                    pose.coords[o + 1],
                    pose.coords[o + 2],
                    pose.coords[o + 3],
                ]);
            }
            _ => {}
        }
    }
    let mut first_euclidean = true;
    let blocks = spec
        .blocks
        .iter()
        .map(|b| match b {
            BlockSpec::Euclidean(n) if first_euclidean => {
                first_euclidean = false;
                let translation = position.clone().unwrap_or_else(|| vec![0.0; *n]);
                let rotation = match (&orientation, *n) {
                    (Some(q), 3) => {
                        let r = quaternion::rotation_matrix(q);
                        DMatrix::from_fn(3, 3, |i, j| r[i][j])
                    }
                    _ => DMatrix::identity(*n, *n),
                };
                BlockTransform::Euclidean {
                    rotation,
                    translation,
                }
            }
            BlockSpec::Euclidean(_) => BlockTransform::Identity,
            BlockSpec::UnitQuaternion => BlockTransform::Quaternion {
                rotation: orientation.unwrap_or_else(quaternion::identity),
            },
        })
        .collect();
    Frame {
        id: id.to_string(),
        object: id.to_string(),
        blocks,
    }
}

/// Frames observable in a system state: one per object plus the global
/// frame, expressed for the given manifold.
pub fn frames_from_state(spec: &ManifoldSpec, state: &SystemState) -> Vec<Frame> {
    let mut frames = vec![Frame::identity(spec, "global", "global")];
    for (id, pose) in &state.objects {
        frames.push(pose_frame(spec, id, pose));
    }
    frames
}

/// Generator and simulator parameters for one scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// "fig3" or "chain".
    pub scenario: String,
    pub seed: u64,
    /// Demonstrations per branch (fig3) or per skill (chain).
    pub demos_per_branch: usize,
    pub branches: usize,
    pub samples_per_demo: usize,
    /// Per-sample position noise while generating demonstrations.
    pub demo_noise: f64,
    /// Std of the object-pose perception noise at run time.
    pub perception_noise: f64,
    /// Std of the end-effector actuation noise at run time.
    pub actuation_noise: f64,
    pub grasp_radius: f64,
    pub gripper_threshold: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: "fig3".into(),
            seed: 0,
            demos_per_branch: 10,
            branches: 2,
            samples_per_demo: 30,
            demo_noise: 0.01,
            perception_noise: 0.0,
            actuation_noise: 0.0,
            grasp_radius: 0.25,
            gripper_threshold: 0.5,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenario != "fig3" && self.scenario != "chain" {
            return Err(Error::invalid_input(format!(
                "unknown scenario '{}'; valid scenarios: fig3, chain",
                self.scenario
            )));
        }
        if self.demo_noise < 0.0 || self.perception_noise < 0.0 || self.actuation_noise < 0.0 {
            return Err(Error::invalid_input("noise scales must be ≥ 0"));
        }
        if self.branches == 0 || self.demos_per_branch == 0 || self.samples_per_demo < 6 {
            return Err(Error::invalid_input(
                "need at least one branch, one demo and six samples per demo",
            ));
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

fn geodesic_interp(a: &ManifoldPoint, b: &ManifoldPoint, u: f64) -> ManifoldPoint {
    let v = a.spec.log(a, b);
    a.spec.exp(a, &(v * u))
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

// ─── fig3: branching 2-D pick ───────────────────────────────────────────

/// Branch offsets relative to the target object, one per branch. The first
/// two reproduce the "from the top" / "from the side" pick instances.
fn branch_offsets(branches: usize) -> Vec<[f64; 2]> {
    let base = [[0.0, 0.25], [0.25, 0.0], [0.0, -0.25], [-0.25, 0.0]];
    (0..branches).map(|b| base[b % 4]).collect()
}

pub const FIG3_BRANCH_NAMES: [&str; 4] = ["top", "side", "bottom", "left"];

/// 2-D demonstrations that share an approach phase and then split into
/// distinct terminal regions. Branch labels are recorded in the metadata.
///
/// Each demo dwells at three anchors (shared approach, branch entry, branch
/// terminal) with short transits in between, mirroring the hover / descend /
/// settle phases of a pick.
pub fn generate_branching_demos(config: &ScenarioConfig) -> Result<Vec<Demonstration>> {
    config.validate()?;
    let spec = ManifoldSpec::euclidean(2);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let offsets = branch_offsets(config.branches);
    let mut demos = Vec::new();
    let steps = config.samples_per_demo;
    // dwell/transit step budget, scaled to the requested demo length
    let plan = [
        (0usize, (steps as f64 * 0.26) as usize),
        (1, (steps as f64 * 0.07).ceil() as usize),
        (1, (steps as f64 * 0.20) as usize),
        (2, (steps as f64 * 0.07).ceil() as usize),
        (2, 0), // remainder goes to the terminal dwell
    ];
    for (b, off) in offsets.iter().enumerate() {
        for d in 0..config.demos_per_branch {
            let target = [
                0.6 + rng.random_range(-0.1..0.1),
                0.5 + rng.random_range(-0.1..0.1),
            ];
            let approach = [
                target[0] - 0.3 + rng.random_range(-0.03..0.03),
                target[1] + rng.random_range(-0.03..0.03),
            ];
            let mid = [
                target[0] + 0.5 * off[0] - 0.08,
                target[1] + 0.5 * off[1],
            ];
            let terminal = [target[0] + off[0], target[1] + off[1]];
            let anchors = [approach, mid, terminal];

            let mut points = Vec::with_capacity(steps);
            let mut prev = approach;
            for (phase, (anchor_idx, len)) in plan.iter().enumerate() {
                let len = if phase + 1 == plan.len() {
                    steps - points.len()
                } else {
                    // demos vary in tempo; phase lengths jitter by ±30%
                    let scaled = *len as f64 * rng.random_range(0.7..1.3);
                    (scaled.round() as usize).max(1).min(steps - points.len())
                };
                let anchor = anchors[*anchor_idx];
                let transit = phase % 2 == 1;
                for t in 0..len {
                    let p = if transit {
                        let u = smoothstep((t + 1) as f64 / len as f64);
                        [
                            prev[0] + u * (anchor[0] - prev[0]),
                            prev[1] + u * (anchor[1] - prev[1]),
                        ]
                    } else {
                        anchor
                    };
                    points.push(spec.point(vec![
                        p[0] + normal(&mut rng, config.demo_noise),
                        p[1] + normal(&mut rng, config.demo_noise),
                    ])?);
                }
                prev = anchor;
            }

            let target_point = spec.point(target.to_vec())?;
            let frames = vec![
                Frame::identity(&spec, "global", "global"),
                pose_frame(&spec, "target", &target_point),
            ];
            let state_at = |p: &ManifoldPoint| SystemState {
                end_effector: p.clone(),
                objects: BTreeMap::from([("target".to_string(), target_point.clone())]),
                timestamp: 0.0,
            };
            let mut metadata = BTreeMap::new();
            metadata.insert(
                "branch".to_string(),
                FIG3_BRANCH_NAMES[b % 4].to_string(),
            );
            demos.push(Demonstration {
                skill: "pick".into(),
                id: format!("pick-{b}-{d}"),
                sample_rate: 50.0,
                initial_state: Some(state_at(&points[0])),
                final_state: Some(state_at(&points[steps - 1])),
                points,
                frames,
                metadata,
            });
        }
    }
    Ok(demos)
}

// ─── chain: fetch + deliver on the pose manifold ────────────────────────

/// Nominal landmarks of the chain scenario, in workspace units (unit cube).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainLayout {
    pub home: [f64; 3],
    pub a_zone: [f64; 3],
    pub b_zone: [f64; 3],
    pub station: [f64; 3],
    pub top_offset: [f64; 3],
    pub retreat: [f64; 3],
}

impl Default for ChainLayout {
    fn default() -> Self {
        ChainLayout {
            home: [0.30, 0.10, 0.40],
            a_zone: [0.20, 0.30, 0.10],
            b_zone: [0.80, 0.40, 0.10],
            station: [0.50, 0.70, 0.15],
            top_offset: [0.0, 0.0, 0.12],
            retreat: [0.0, 0.0, 0.10],
        }
    }
}

/// Demonstrations for one skill of the chain plus bookkeeping for tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkillDemos {
    pub name: String,
    pub demos: Vec<Demonstration>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainDataset {
    pub layout: ChainLayout,
    pub skills: Vec<SkillDemos>,
}

fn pose_point(spec: &ManifoldSpec, pos: [f64; 3], quat: [f64; 4]) -> ManifoldPoint {
    spec.point(vec![pos[0], pos[1], pos[2], quat[0], quat[1], quat[2], quat[3]])
        .expect("unit quaternion")
}

fn ee_point(pos: [f64; 3], quat: [f64; 4], grip: f64) -> ManifoldPoint {
    ManifoldSpec::pose_gripper()
        .point(vec![
            pos[0], pos[1], pos[2], quat[0], quat[1], quat[2], quat[3], grip,
        ])
        .expect("unit quaternion")
}

fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn jitter3(rng: &mut ChaCha8Rng, center: [f64; 3], amp: f64) -> [f64; 3] {
    [
        center[0] + rng.random_range(-amp..amp),
        center[1] + rng.random_range(-amp..amp),
        center[2] + rng.random_range(-amp..amp),
    ]
}

fn small_rotation(rng: &mut ChaCha8Rng, amp: f64) -> [f64; 4] {
    quaternion::exp(&[
        rng.random_range(-amp..amp),
        rng.random_range(-amp..amp),
        rng.random_range(-amp..amp),
    ])
}

/// One kinematic waypoint of a scripted demonstration: where the hand
/// should be at the end of the segment and how wide the gripper is.
struct Segment {
    pose: ManifoldPoint,
    steps: usize,
    gripper: f64,
}

/// Interpolate segments into an end-effector trajectory, tracking object
/// attachment exactly like the simulator does.
fn script_trajectory(
    spec: &ManifoldSpec,
    start: &ManifoldPoint,
    segments: &[Segment],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<ManifoldPoint> {
    let mut points = vec![start.clone()];
    let mut current = start.clone();
    let mut grip_prev = start.coords[7];
    for seg in segments {
        for t in 0..seg.steps {
            let u = smoothstep((t + 1) as f64 / seg.steps as f64);
            let mut p = geodesic_interp(&current, &seg.pose, u);
            p.coords[7] = grip_prev + u * (seg.gripper - grip_prev);
            for c in p.coords.iter_mut().take(3) {
                *c += normal(rng, noise);
            }
            let p = spec.point(p.coords).expect("valid scripted point");
            points.push(p);
        }
        current = seg.pose.clone();
        current.coords[7] = seg.gripper;
        grip_prev = seg.gripper;
    }
    points
}

/// Two-skill chain dataset: `fetch` moves object A to the staging station,
/// `deliver` picks A up again and places it on top of object B. Frames in
/// the `deliver` demonstrations are instantiated from A's post-`fetch` pose.
pub fn generate_skill_chain(config: &ScenarioConfig) -> Result<ChainDataset> {
    config.validate()?;
    if config.scenario != "chain" {
        return Err(Error::invalid_input("generate_skill_chain needs scenario = 'chain'"));
    }
    let layout = ChainLayout::default();
    let ee_spec = ManifoldSpec::pose_gripper();
    let obj_spec = ManifoldSpec::pose();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let id_q = quaternion::identity();

    let mut fetch = Vec::new();
    let mut deliver = Vec::new();
    for d in 0..config.demos_per_branch {
        // ── fetch: home → grasp A → carry to station → release ──
        let a_pos = jitter3(&mut rng, layout.a_zone, 0.08);
        let a_quat = small_rotation(&mut rng, 0.15);
        let b_pos = jitter3(&mut rng, layout.b_zone, 0.08);
        let station = jitter3(&mut rng, layout.station, 0.02);
        let home = jitter3(&mut rng, layout.home, 0.05);

        let a_pose = pose_point(&obj_spec, a_pos, a_quat);
        let b_pose = pose_point(&obj_spec, b_pos, id_q);
        let start = ee_point(home, id_q, 0.0);
        let above_a = ee_point(add3(a_pos, [0.0, 0.0, 0.08]), a_quat, 0.0);
        let at_a = ee_point(a_pos, a_quat, 0.0);
        let grasped = ee_point(a_pos, a_quat, 1.0);
        let at_station = ee_point(station, a_quat, 1.0);
        let released = ee_point(station, a_quat, 0.0);
        let retreat = ee_point(add3(station, layout.retreat), a_quat, 0.0);
        // dwells before the gripper moves let the hand settle first
        let segments = [
            Segment { pose: above_a.clone(), steps: 12, gripper: 0.0 },
            Segment { pose: above_a, steps: 6, gripper: 0.0 },
            Segment { pose: at_a.clone(), steps: 5, gripper: 0.0 },
            Segment { pose: grasped, steps: 6, gripper: 1.0 },
            Segment { pose: at_station.clone(), steps: 14, gripper: 1.0 },
            Segment { pose: at_station, steps: 6, gripper: 1.0 },
            Segment { pose: released, steps: 5, gripper: 0.0 },
            Segment { pose: retreat, steps: 6, gripper: 0.0 },
        ];
        let points = script_trajectory(&ee_spec, &start, &segments, config.demo_noise, &mut rng);
        let a_final = pose_point(&obj_spec, station, a_quat);
        let initial_state = SystemState {
            end_effector: points[0].clone(),
            objects: BTreeMap::from([
                ("A".to_string(), a_pose.clone()),
                ("B".to_string(), b_pose.clone()),
            ]),
            timestamp: 0.0,
        };
        let final_state = SystemState {
            end_effector: points[points.len() - 1].clone(),
            objects: BTreeMap::from([
                ("A".to_string(), a_final.clone()),
                ("B".to_string(), b_pose.clone()),
            ]),
            timestamp: points.len() as f64 / 50.0,
        };
        let frames = vec![
            Frame::identity(&ee_spec, "global", "global"),
            pose_frame(&ee_spec, "A", &a_pose),
        ];
        fetch.push(Demonstration {
            skill: "fetch".into(),
            id: format!("fetch-{d}"),
            sample_rate: 50.0,
            points,
            frames,
            initial_state: Some(initial_state),
            final_state: Some(final_state),
            metadata: BTreeMap::new(),
        });

        // ── deliver: approach A at the station → grasp → place on B ──
        let a2_pos = jitter3(&mut rng, layout.station, 0.02);
        let a2_quat = small_rotation(&mut rng, 0.15);
        let b2_pos = jitter3(&mut rng, layout.b_zone, 0.08);
        let a2_pose = pose_point(&obj_spec, a2_pos, a2_quat);
        let b2_pose = pose_point(&obj_spec, b2_pos, id_q);
        let place = add3(b2_pos, layout.top_offset);

        let start2 = ee_point(add3(a2_pos, layout.retreat), a2_quat, 0.0);
        let above2 = ee_point(add3(a2_pos, [0.0, 0.0, 0.06]), a2_quat, 0.0);
        let at2 = ee_point(a2_pos, a2_quat, 0.0);
        let grasped2 = ee_point(a2_pos, a2_quat, 1.0);
        let at_place = ee_point(place, a2_quat, 1.0);
        let released2 = ee_point(place, a2_quat, 0.0);
        let retreat2 = ee_point(add3(place, layout.retreat), a2_quat, 0.0);
        let segments2 = [
            Segment { pose: above2.clone(), steps: 8, gripper: 0.0 },
            Segment { pose: above2, steps: 5, gripper: 0.0 },
            Segment { pose: at2, steps: 5, gripper: 0.0 },
            Segment { pose: grasped2, steps: 6, gripper: 1.0 },
            Segment { pose: at_place.clone(), steps: 14, gripper: 1.0 },
            Segment { pose: at_place, steps: 7, gripper: 1.0 },
            Segment { pose: released2, steps: 5, gripper: 0.0 },
            Segment { pose: retreat2, steps: 9, gripper: 0.0 },
        ];
        let points2 = script_trajectory(&ee_spec, &start2, &segments2, config.demo_noise, &mut rng);
        let a2_final = pose_point(&obj_spec, place, a2_quat);
        let initial_state2 = SystemState {
            end_effector: points2[0].clone(),
            objects: BTreeMap::from([
                ("A".to_string(), a2_pose.clone()),
                ("B".to_string(), b2_pose.clone()),
            ]),
            timestamp: 0.0,
        };
        let final_state2 = SystemState {
            end_effector: points2[points2.len() - 1].clone(),
            objects: BTreeMap::from([
                ("A".to_string(), a2_final),
                ("B".to_string(), b2_pose.clone()),
            ]),
            timestamp: points2.len() as f64 / 50.0,
        };
        let frames2 = vec![
            Frame::identity(&ee_spec, "global", "global"),
            pose_frame(&ee_spec, "A", &a2_pose),
            pose_frame(&ee_spec, "B", &b2_pose),
        ];
        deliver.push(Demonstration {
            skill: "deliver".into(),
            id: format!("deliver-{d}"),
            sample_rate: 50.0,
            points: points2,
            frames: frames2,
            initial_state: Some(initial_state2),
            final_state: Some(final_state2),
            metadata: BTreeMap::new(),
        });
    }

    Ok(ChainDataset {
        layout,
        skills: vec![
            SkillDemos { name: "fetch".into(), demos: fetch },
            SkillDemos { name: "deliver".into(), demos: deliver },
        ],
    })
}

/// Sample a fresh task instance for the chain scenario: initial system
/// state plus the goal state after both skills.
pub fn sample_chain_task(config: &ScenarioConfig, seed: u64) -> (SystemState, SystemState) {
    let layout = ChainLayout::default();
    let obj_spec = ManifoldSpec::pose();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id_q = quaternion::identity();
    let a_pos = jitter3(&mut rng, layout.a_zone, 0.08);
    let a_quat = small_rotation(&mut rng, 0.15);
    let b_pos = jitter3(&mut rng, layout.b_zone, 0.08);
    let home = jitter3(&mut rng, layout.home, 0.05);
    let _ = config;

    let initial = SystemState {
        end_effector: ee_point(home, id_q, 0.0),
        objects: BTreeMap::from([
            ("A".to_string(), pose_point(&obj_spec, a_pos, a_quat)),
            ("B".to_string(), pose_point(&obj_spec, b_pos, id_q)),
        ]),
        timestamp: 0.0,
    };
    let place = add3(b_pos, layout.top_offset);
    let goal = SystemState {
        end_effector: ee_point(add3(place, layout.retreat), a_quat, 0.0),
        objects: BTreeMap::from([
            ("A".to_string(), pose_point(&obj_spec, place, a_quat)),
            ("B".to_string(), pose_point(&obj_spec, b_pos, id_q)),
        ]),
        timestamp: 0.0,
    };
    (initial, goal)
}

// ─── kinematic simulator ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttachmentRules {
    pub grasp_radius: f64,
    pub gripper_threshold: f64,
}

impl From<&ScenarioConfig> for AttachmentRules {
    fn from(c: &ScenarioConfig) -> Self {
        AttachmentRules {
            grasp_radius: c.grasp_radius,
            gripper_threshold: c.gripper_threshold,
        }
    }
}

fn position_of(p: &ManifoldPoint) -> Vec<f64> {
    let offsets = p.spec.ambient_offsets();
    for (block, &o) in p.spec.blocks.iter().zip(&offsets) {
        if let BlockSpec::Euclidean(n) = block {
            return p.coords[o..o + n].to_vec();
        }
    }
    Vec::new()
}

fn gripper_of(p: &ManifoldPoint) -> Option<f64> {
    // the gripper is the last single-channel Euclidean block, if any
    let offsets = p.spec.ambient_offsets();
    p.spec
        .blocks
        .iter()
        .zip(&offsets)
        .rev()
        .find_map(|(block, &o)| match block {
            BlockSpec::Euclidean(1) if p.spec.blocks.len() > 1 => Some(p.coords[o]),
            _ => None,
        })
}

/// Advance the workspace by one step: the end-effector reaches `ee_next`
/// and any object within the grasp radius of a closed gripper moves rigidly
/// with it. Everything else stays exactly where it was.
pub fn simulate_step(
    state: &SystemState,
    ee_next: &ManifoldPoint,
    rules: &AttachmentRules,
) -> SystemState {
    let closed = gripper_of(ee_next)
        .map(|g| g > rules.gripper_threshold)
        .unwrap_or(false);
    let ee_pos = position_of(&state.end_effector);
    let mut objects = state.objects.clone();
    if closed {
        for pose in objects.values_mut() {
            let obj_pos = position_of(pose);
            let dist: f64 = ee_pos
                .iter()
                .zip(&obj_pos)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dist <= rules.grasp_radius {
                *pose = carry_rigidly(&state.end_effector, ee_next, pose);
            }
        }
    }
    SystemState {
        end_effector: ee_next.clone(),
        objects,
        timestamp: state.timestamp,
    }
}

/// Move `obj` so its pose relative to the end-effector is unchanged.
fn carry_rigidly(
    ee_from: &ManifoldPoint,
    ee_to: &ManifoldPoint,
    obj: &ManifoldPoint,
) -> ManifoldPoint {
    let from = pose_frame(&obj.spec, "ee", ee_from);
    let to = pose_frame(&obj.spec, "ee", ee_to);
    to.apply(&from.apply_inverse(obj))
}

/// Perception: perturb object positions with Gaussian noise and object
/// orientations with random rotation vectors of matching scale. The
/// end-effector state comes from joint encoders and is returned exactly.
pub fn observe(state: &SystemState, noise_scale: f64, seed: u64) -> SystemState {
    if noise_scale == 0.0 {
        return state.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut objects = BTreeMap::new();
    for (id, pose) in &state.objects {
        let spec = pose.spec.clone();
        let mut coords = pose.coords.clone();
        let offsets = spec.ambient_offsets();
        for (block, &o) in spec.blocks.iter().zip(&offsets) {
            match block {
                BlockSpec::Euclidean(n) => {
                    for j in 0..*n {
                        coords[o + j] += normal(&mut rng, noise_scale);
                    }
                }
                BlockSpec::UnitQuaternion => {
                    let q = [coords[o], coords[o + 1], coords[o + 2], coords[o + 3]];
                    let dv = [
                        normal(&mut rng, noise_scale),
                        normal(&mut rng, noise_scale),
                        normal(&mut rng, noise_scale),
                    ];
                    let out = quaternion::exp_at(&q, &dv);
                    coords[o..o + 4].copy_from_slice(&out);
                }
            }
        }
        objects.insert(id.clone(), ManifoldPoint { spec, coords });
    }
    SystemState {
        end_effector: state.end_effector.clone(),
        objects,
        timestamp: state.timestamp,
    }
}

/// Owns a system state, applies actuation noise to commanded poses and logs
/// every step.
pub struct Simulator {
    pub state: SystemState,
    pub rules: AttachmentRules,
    pub actuation_noise: f64,
    rng: ChaCha8Rng,
    pub log: Vec<SystemState>,
}

impl Simulator {
    pub fn new(initial: SystemState, rules: AttachmentRules, actuation_noise: f64, seed: u64) -> Self {
        Simulator {
            log: vec![initial.clone()],
            state: initial,
            rules,
            actuation_noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Command the end-effector to a pose. The pose actually reached has its
    /// position perturbed by the actuation noise.
    pub fn command(&mut self, ee_target: &ManifoldPoint) {
        let mut reached = ee_target.clone();
        if self.actuation_noise > 0.0 {
            let offsets = reached.spec.ambient_offsets();
            if let Some((BlockSpec::Euclidean(n), &o)) =
                reached.spec.blocks.first().zip(offsets.first())
            {
                for j in 0..*n {
                    reached.coords[o + j] += normal(&mut self.rng, self.actuation_noise);
                }
            }
        }
        self.state = simulate_step(&self.state, &reached, &self.rules);
        self.log.push(self.state.clone());
    }

    /// Noisy view of the current state; consumes one seed from the
    /// simulator's deterministic stream.
    pub fn observe(&mut self, noise_scale: f64) -> SystemState {
        let seed = self.rng.random::<u64>();
        observe(&self.state, noise_scale, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig3_config() -> ScenarioConfig {
        ScenarioConfig {
            scenario: "fig3".into(),
            seed: 7,
            ..ScenarioConfig::default()
        }
    }

    fn chain_config() -> ScenarioConfig {
        ScenarioConfig {
            scenario: "chain".into(),
            seed: 3,
            demos_per_branch: 10,
            demo_noise: 0.004,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn branching_demos_are_deterministic() {
        let a = generate_branching_demos(&fig3_config()).unwrap();
        let b = generate_branching_demos(&fig3_config()).unwrap();
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn branching_demos_validate_against_schema() {
        for demo in generate_branching_demos(&fig3_config()).unwrap() {
            demo.validate().unwrap();
            assert!(demo.metadata.contains_key("branch"));
        }
    }

    #[test]
    fn zero_noise_single_branch_demos_share_shape() {
        let config = ScenarioConfig {
            branches: 1,
            demo_noise: 0.0,
            ..fig3_config()
        };
        let demos = generate_branching_demos(&config).unwrap();
        // demos differ only by their sampled frames; re-expressed in the
        // target frame they coincide
        let first = &demos[0];
        let local0 = crate::tpgmm::to_frame(first, first.frame("target").unwrap());
        for demo in &demos[1..] {
            let local = crate::tpgmm::to_frame(demo, demo.frame("target").unwrap());
            // terminal halves line up exactly; approach starts differ by the
            // sampled start position
            let a = &local0[local0.len() - 1];
            let b = &local[local.len() - 1];
            assert!(a.distance(b) < 1e-9);
        }
    }

    #[test]
    fn branch_labels_recoverable_from_terminal_position() {
        let demos = generate_branching_demos(&fig3_config()).unwrap();
        // nearest-centroid on terminal points, relative to the target frame
        let mut centroids: BTreeMap<String, [f64; 2]> = BTreeMap::new();
        let mut counts: BTreeMap<String, f64> = BTreeMap::new();
        for demo in &demos {
            let local = crate::tpgmm::to_frame(demo, demo.frame("target").unwrap());
            let p = &local[local.len() - 1];
            let label = demo.metadata["branch"].clone();
            let c = centroids.entry(label.clone()).or_insert([0.0, 0.0]);
            c[0] += p.coords[0];
            c[1] += p.coords[1];
            *counts.entry(label).or_insert(0.0) += 1.0;
        }
        for (label, c) in centroids.iter_mut() {
            c[0] /= counts[label];
            c[1] /= counts[label];
        }
        for demo in &demos {
            let local = crate::tpgmm::to_frame(demo, demo.frame("target").unwrap());
            let p = &local[local.len() - 1];
            let best = centroids
                .iter()
                .min_by(|a, b| {
                    let da = (a.1[0] - p.coords[0]).powi(2) + (a.1[1] - p.coords[1]).powi(2);
                    let db = (b.1[0] - p.coords[0]).powi(2) + (b.1[1] - p.coords[1]).powi(2);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap()
                .0;
            assert_eq!(best, &demo.metadata["branch"]);
        }
    }

    #[test]
    fn chain_regeneration_is_byte_identical() {
        let a = generate_skill_chain(&chain_config()).unwrap();
        let b = generate_skill_chain(&chain_config()).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn chain_demos_validate_and_record_states() {
        let data = generate_skill_chain(&chain_config()).unwrap();
        assert_eq!(data.skills.len(), 2);
        for skill in &data.skills {
            for demo in &skill.demos {
                demo.validate().unwrap();
                demo.initial_state.as_ref().unwrap().validate().unwrap();
                demo.final_state.as_ref().unwrap().validate().unwrap();
            }
        }
    }

    #[test]
    fn deliver_frames_match_post_fetch_pose_distribution() {
        // skill-2 demos are expressed relative to A's post-skill-1 pose:
        // every deliver A-frame sits in the station region
        let data = generate_skill_chain(&chain_config()).unwrap();
        let station = data.layout.station;
        for demo in &data.skills[1].demos {
            let a = demo.initial_state.as_ref().unwrap().object("A").unwrap();
            for (c, s) in a.coords.iter().take(3).zip(&station) {
                assert!((c - s).abs() <= 0.02 + 1e-12);
            }
        }
    }

    #[test]
    fn gripper_open_leaves_objects_static() {
        let data = generate_skill_chain(&chain_config()).unwrap();
        let demo = &data.skills[0].demos[0];
        let state = demo.initial_state.clone().unwrap();
        let rules = AttachmentRules {
            grasp_radius: 0.25,
            gripper_threshold: 0.5,
        };
        let mut ee = state.objects["A"].clone();
        // move the open hand right onto the object
        let target = ee_point(
            [ee.coords[0], ee.coords[1], ee.coords[2]],
            [ee.coords[3], ee.coords[4], ee.coords[5], ee.coords[6]],
            0.0,
        );
        ee = target.clone();
        let next = simulate_step(&state, &ee, &rules);
        assert_eq!(next.objects, state.objects);
    }

    #[test]
    fn attached_object_keeps_relative_pose() {
        let obj_spec = ManifoldSpec::pose();
        let a = pose_point(&obj_spec, [0.2, 0.2, 0.1], quaternion::exp(&[0.1, 0.2, 0.0]));
        let state = SystemState {
            end_effector: ee_point([0.2, 0.2, 0.15], quaternion::identity(), 1.0),
            objects: BTreeMap::from([("A".to_string(), a)]),
            timestamp: 0.0,
        };
        let rules = AttachmentRules {
            grasp_radius: 0.1,
            gripper_threshold: 0.5,
        };
        let rel_before = {
            let f = pose_frame(&obj_spec, "ee", &state.end_effector);
            f.apply_inverse(&state.objects["A"])
        };
        let mut s = state;
        for step in 0..20 {
            let t = step as f64 / 19.0;
            let target = ee_point(
                [0.2 + 0.4 * t, 0.2 + 0.2 * t, 0.15 + 0.1 * t],
                quaternion::exp(&[0.0, 0.0, 0.8 * t]),
                1.0,
            );
            s = simulate_step(&s, &target, &rules);
            let f = pose_frame(&obj_spec, "ee", &s.end_effector);
            let rel = f.apply_inverse(&s.objects["A"]);
            assert!(rel.distance(&rel_before) < 1e-12);
        }
    }

    #[test]
    fn object_just_outside_grasp_radius_never_attaches() {
        let obj_spec = ManifoldSpec::pose();
        let radius = 0.1;
        let eps = 1e-6;
        let a = pose_point(&obj_spec, [0.0, 0.0, radius + eps], quaternion::identity());
        let state = SystemState {
            end_effector: ee_point([0.0, 0.0, 0.0], quaternion::identity(), 1.0),
            objects: BTreeMap::from([("A".to_string(), a.clone())]),
            timestamp: 0.0,
        };
        let rules = AttachmentRules {
            grasp_radius: radius,
            gripper_threshold: 0.5,
        };
        let next = simulate_step(
            &state,
            &ee_point([0.3, 0.0, 0.0], quaternion::identity(), 1.0),
            &rules,
        );
        assert_eq!(next.objects["A"], a);
    }

    #[test]
    fn observe_zero_noise_is_identity() {
        let data = generate_skill_chain(&chain_config()).unwrap();
        let state = data.skills[0].demos[0].initial_state.clone().unwrap();
        assert_eq!(observe(&state, 0.0, 9), state);
    }

    #[test]
    fn observe_noise_std_matches_scale() {
        let obj_spec = ManifoldSpec::pose();
        let state = SystemState {
            end_effector: ee_point([0.5, 0.5, 0.5], quaternion::identity(), 0.0),
            objects: BTreeMap::from([(
                "A".to_string(),
                pose_point(&obj_spec, [0.5, 0.5, 0.5], quaternion::identity()),
            )]),
            timestamp: 0.0,
        };
        let scale = 0.05;
        let n = 10_000;
        let mut acc = 0.0;
        for seed in 0..n {
            let o = observe(&state, scale, seed);
            let p = &o.objects["A"];
            acc += (p.coords[0] - 0.5).powi(2);
            // quaternions stay unit
            p.validate().unwrap();
        }
        let std = (acc / n as f64).sqrt();
        assert!(
            (std - scale).abs() / scale < 0.05,
            "empirical std {std} vs {scale}"
        );
    }

    #[test]
    fn invalid_scenario_name_is_rejected() {
        let config = ScenarioConfig {
            scenario: "bogus".into(),
            ..ScenarioConfig::default()
        };
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("fig3") && err.contains("chain"));
    }
}
