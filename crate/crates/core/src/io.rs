//! JSON file schemas binding the pipeline into reproducible workflows.
//!
//! All files are versioned, serialize matrices as row-major arrays and
//! quaternions as `[w, x, y, z]`, and round-trip byte-identically
//! (load → save reproduces the exact bytes).

use crate::cascade::{CascadedModel, ComponentProvenance, SequencePlan, Skill};
use crate::conditions::ConditionModels;
use crate::error::{Error, Result};
use crate::lqt::TrackingSolution;
use crate::manifold::BlockSpec;
use crate::tphsmm::TPHSMM;
use crate::workspace::{ScenarioConfig, SkillDemos, SystemState};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

pub fn tool_version() -> String {
    format!("skillseq {}", env!("CARGO_PKG_VERSION"))
}

/// A generated dataset: per-skill demonstrations plus the scenario that
/// produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetFile {
    pub version: u32,
    pub scenario: ScenarioConfig,
    pub skills: Vec<SkillDemos>,
}

impl DatasetFile {
    pub fn validate(&self) -> Result<()> {
        if self.skills.is_empty() {
            return Err(Error::invalid_model("dataset has no skills"));
        }
        for s in &self.skills {
            for d in &s.demos {
                d.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub skill: String,
    pub k: usize,
    pub demo_count: usize,
    pub seed: u64,
    pub tool_version: String,
    /// Frame id → object id bindings of the skill's task parameters.
    pub frame_objects: BTreeMap<String, String>,
    pub final_log_likelihood: Option<f64>,
}

/// Serialized skill: TP-HSMM parameters plus condition models. Composed
/// sequences use the same format with the provenance section filled in.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkillModelFile {
    pub version: u32,
    pub metadata: ModelMetadata,
    pub model: TPHSMM,
    pub conditions: ConditionModels,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<ProvenanceSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProvenanceSection {
    pub skill_names: Vec<String>,
    pub components: Vec<ComponentProvenance>,
}

impl SkillModelFile {
    pub fn from_skill(skill: &Skill, metadata: ModelMetadata) -> Self {
        SkillModelFile {
            version: SCHEMA_VERSION,
            metadata,
            model: skill.model.clone(),
            conditions: skill.conditions.clone(),
            provenance: None,
        }
    }

    pub fn from_cascade(joint: &CascadedModel, metadata: ModelMetadata) -> Self {
        SkillModelFile {
            version: SCHEMA_VERSION,
            metadata,
            model: joint.model.clone(),
            conditions: joint.conditions.clone(),
            provenance: Some(ProvenanceSection {
                skill_names: joint.skill_names.clone(),
                components: joint.provenance.clone(),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.conditions.validate(&self.model)?;
        if let Some(p) = &self.provenance {
            if p.components.len() != self.model.k() {
                return Err(Error::invalid_model(
                    "provenance section does not cover every component",
                ));
            }
        }
        Ok(())
    }

    pub fn into_skill(self) -> Skill {
        Skill {
            name: self.metadata.skill.clone(),
            model: self.model,
            conditions: self.conditions,
        }
    }

    pub fn to_cascaded(&self) -> CascadedModel {
        match &self.provenance {
            Some(p) => CascadedModel {
                model: self.model.clone(),
                conditions: self.conditions.clone(),
                provenance: p.components.clone(),
                skill_names: p.skill_names.clone(),
            },
            None => CascadedModel::from_skill(&Skill {
                name: self.metadata.skill.clone(),
                model: self.model.clone(),
                conditions: self.conditions.clone(),
            }),
        }
    }
}

/// A decoded plan, hash-linked to the model file that produced it. The
/// boundary states are embedded so tracking can re-instantiate the global
/// components without further inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanFile {
    pub version: u32,
    /// FNV-1a fingerprint of the model file bytes.
    pub model_fingerprint: String,
    pub initial_state: SystemState,
    pub goal_state: SystemState,
    pub plan: SequencePlan,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateFile {
    pub version: u32,
    pub state: SystemState,
}

/// One tracked step of a reference trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub time: f64,
    pub position: Vec<f64>,
    pub quaternion: Vec<f64>,
    pub gripper: Option<f64>,
    pub velocity: Vec<f64>,
    pub control: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub version: u32,
    pub dt: f64,
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryFile {
    pub fn from_solution(solution: &TrackingSolution, dt: f64) -> Self {
        let spec = &solution.states[0].spec;
        let offsets = spec.ambient_offsets();
        let mut pos_block: Option<(usize, usize)> = None;
        let mut quat_offset: Option<usize> = None;
        let mut gripper_offset: Option<usize> = None;
        for (block, &o) in spec.blocks.iter().zip(&offsets) {
            match block {
                BlockSpec::Euclidean(n) => {
                    if pos_block.is_none() {
                        pos_block = Some((o, *n));
                    } else if *n == 1 {
                        gripper_offset = Some(o);
                    }
                }
                BlockSpec::UnitQuaternion => {
                    if quat_offset.is_none() {
                        quat_offset = Some(o);
                    }
                }
            }
        }
        let rows = solution
            .states
            .iter()
            .enumerate()
            .map(|(t, x)| TrajectoryRow {
                time: t as f64 * dt,
                position: pos_block
                    .map(|(o, n)| x.coords[o..o + n].to_vec())
                    .unwrap_or_default(),
                quaternion: quat_offset
                    .map(|o| x.coords[o..o + 4].to_vec())
                    .unwrap_or_default(),
                gripper: gripper_offset.map(|o| x.coords[o]),
                velocity: solution.velocities[t].as_slice().to_vec(),
                control: solution
                    .controls
                    .get(t)
                    .map(|u| u.as_slice().to_vec())
                    .unwrap_or_default(),
            })
            .collect();
        TrajectoryFile {
            version: SCHEMA_VERSION,
            dt,
            rows,
        }
    }

    /// CSV rendering; numbers print with the same shortest-roundtrip
    /// formatter as the JSON form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,position,quaternion,gripper,velocity,control\n");
        for r in &self.rows {
            let join = |v: &[f64]| {
                v.iter()
                    .map(|x| format!("{x}"))
                    .collect::<Vec<_>>()
                    .join(";")
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.time,
                join(&r.position),
                join(&r.quaternion),
                r.gripper.map(|g| format!("{g}")).unwrap_or_default(),
                join(&r.velocity),
                join(&r.control),
            ));
        }
        out
    }
}

/// Outcome of one closed-loop trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialReport {
    pub seed: u64,
    pub success: bool,
    /// Final object-pose error against the goal, per object.
    pub object_errors: BTreeMap<String, f64>,
    pub terminal_error: f64,
    pub plan_ms: f64,
    pub track_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub scenario: String,
    pub skill_names: Vec<String>,
    pub trials: Vec<TrialReport>,
    pub success_rate: f64,
    pub mean_terminal_error: f64,
    pub open_loop: bool,
    pub noise: f64,
    pub horizon: usize,
    pub compose_ms: f64,
}

// ─── generic load/save ──────────────────────────────────────────────────

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn save<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(value)?)?;
    Ok(())
}

pub fn load<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// FNV-1a content fingerprint used to link plans to the model they were
/// decoded from.
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

pub fn fingerprint_file(path: &Path) -> Result<String> {
    Ok(fingerprint(&std::fs::read(path)?))
}
