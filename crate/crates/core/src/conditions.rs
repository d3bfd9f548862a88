//! Precondition, final-condition and effect models of a skill.
//!
//! Each model is a set of Gaussians conditioned on the skill's initial or
//! final components and expressed in frames derived from the system state:
//!
//! * the precondition models the robot state before the skill starts,
//!   in frames taken from the initial system state;
//! * the final condition models the robot state after the skill ends,
//!   in frames taken from the final system state;
//! * the effect model predicts the final pose of every object (and of the
//!   end-effector), expressed in frames taken from the *initial* system
//!   state, so outcomes can be predicted before execution.
//!
//! The global frame is always part of the frame sets, so any two skills
//! share at least one frame when composed.

use crate::error::{Error, Result};
use crate::manifold::gaussian::{invert_spd, regularize_covariance};
use crate::manifold::{
    gaussian_product, weighted_karcher_mean, ManifoldPoint, RiemannianGaussian,
};
use crate::tpgmm::{Demonstration, Frame, FrameEntry};
use crate::tphsmm::{label_demos, TPHSMM};
use crate::workspace::{pose_frame, SystemState};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Reserved object key for the end-effector entry of the effect model.
pub const END_EFFECTOR: &str = "ee";

pub const GLOBAL_FRAME: &str = "global";

/// Per-frame Gaussians of one conditioned component.
pub type FrameGaussians = BTreeMap<String, RiemannianGaussian>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionModels {
    /// Γ₁: initial component → frame → Gaussian over the initial robot state.
    pub precondition: BTreeMap<usize, FrameGaussians>,
    /// Γ_T: final component → frame → Gaussian over the final robot state.
    pub final_condition: BTreeMap<usize, FrameGaussians>,
    /// Γ₁T: final component → object → per-frame Gaussians over the
    /// object's final pose. Stored as a list: composed models may carry
    /// several entries for the same frame.
    pub effect: BTreeMap<usize, BTreeMap<String, Vec<FrameEntry>>>,
    /// Frame set derived from the initial system state.
    pub initial_frames: Vec<String>,
    /// Frame set derived from the final system state.
    pub final_frames: Vec<String>,
    /// Objects whose pose changes under this skill.
    pub manipulated: BTreeSet<String>,
    /// Non-fatal notes from learning (single-demo groups and similar).
    pub warnings: Vec<String>,
}

impl ConditionModels {
    /// Check structural completeness against the skill model.
    pub fn validate(&self, model: &TPHSMM) -> Result<()> {
        let initials: BTreeSet<usize> = model.initial_states().into_iter().collect();
        let finals: BTreeSet<usize> = model.final_states().into_iter().collect();
        let pre_keys: BTreeSet<usize> = self.precondition.keys().cloned().collect();
        let fin_keys: BTreeSet<usize> = self.final_condition.keys().cloned().collect();
        let eff_keys: BTreeSet<usize> = self.effect.keys().cloned().collect();
        if pre_keys != initials {
            return Err(Error::invalid_model(format!(
                "precondition components {pre_keys:?} do not match initial states {initials:?}"
            )));
        }
        if fin_keys != finals || eff_keys != finals {
            return Err(Error::invalid_model(format!(
                "final-condition/effect components {fin_keys:?}/{eff_keys:?} do not match final states {finals:?}"
            )));
        }
        for (k, frames) in &self.precondition {
            for f in &self.initial_frames {
                if !frames.contains_key(f) {
                    return Err(Error::invalid_model(format!(
                        "precondition of component {k} misses frame '{f}'"
                    )));
                }
            }
        }
        for (k, frames) in &self.final_condition {
            for f in &self.final_frames {
                if !frames.contains_key(f) {
                    return Err(Error::invalid_model(format!(
                        "final condition of component {k} misses frame '{f}'"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Predicted system state after the skill finishes in final component
    /// `k_f`, given the system state it starts from.
    ///
    /// Manipulated objects are fused from the effect Gaussians; everything
    /// else carries its pose over unchanged.
    pub fn predict_effects(&self, k_f: usize, initial: &SystemState) -> Result<SystemState> {
        let entries = self
            .effect
            .get(&k_f)
            .ok_or_else(|| Error::MissingEntry(format!("effect model for component {k_f}")))?;
        let mut objects = BTreeMap::new();
        for (id, pose) in &initial.objects {
            if !self.manipulated.contains(id) {
                objects.insert(id.clone(), pose.clone());
                continue;
            }
            let per_frame = entries
                .get(id)
                .ok_or_else(|| Error::MissingEntry(format!("effect entry for object '{id}'")))?;
            objects.insert(id.clone(), fuse_in_state_frames(per_frame, initial)?.mean);
        }
        let end_effector = match entries.get(END_EFFECTOR) {
            Some(per_frame) => fuse_in_state_frames(per_frame, initial)?.mean,
            None => initial.end_effector.clone(),
        };
        Ok(SystemState {
            end_effector,
            objects,
            timestamp: initial.timestamp,
        })
    }
}

/// Instantiate the frame `id` from a system state for the manifold of `g`.
pub(crate) fn state_frame(spec: &crate::manifold::ManifoldSpec, id: &str, state: &SystemState) -> Result<Frame> {
    if id == GLOBAL_FRAME {
        Ok(Frame::identity(spec, GLOBAL_FRAME, GLOBAL_FRAME))
    } else {
        Ok(pose_frame(spec, id, state.object(id)?))
    }
}

/// Map every per-frame Gaussian to global coordinates using frames from the
/// given state and fuse them.
pub(crate) fn fuse_in_state_frames(
    entries: &[FrameEntry],
    state: &SystemState,
) -> Result<RiemannianGaussian> {
    let mut transformed = Vec::with_capacity(entries.len());
    for e in entries {
        let frame = state_frame(e.gaussian.spec(), &e.frame, state)?;
        transformed.push(frame.transform_gaussian(&e.gaussian));
    }
    gaussian_product(&transformed)
}

/// Fit a Gaussian to points expressed in one frame per demo.
fn fit_gaussian(points: &[ManifoldPoint]) -> Result<RiemannianGaussian> {
    let weights = vec![1.0; points.len()];
    let mean = weighted_karcher_mean(points, &weights)?;
    let spec = mean.spec.clone();
    let d = spec.tangent_dim();
    let mut cov = DMatrix::zeros(d, d);
    for p in points {
        let v = spec.log(&mean, p);
        cov += &v * v.transpose();
    }
    cov /= points.len() as f64;
    RiemannianGaussian::new(mean, regularize_covariance(cov))
}

/// Learn the condition models of a fitted skill.
///
/// Every demonstration must carry its initial and final system state. Demos
/// are grouped by the component their first sample is assigned to (for the
/// precondition) and by the component of their last sample (for the final
/// condition and the effect model). `perception_noise` sets the threshold
/// that separates manipulated from static objects.
pub fn learn_conditions(
    model: &TPHSMM,
    demos: &[Demonstration],
    perception_noise: f64,
) -> Result<ConditionModels> {
    if demos.is_empty() {
        return Err(Error::invalid_input("no demonstrations"));
    }
    for demo in demos {
        if demo.initial_state.is_none() || demo.final_state.is_none() {
            return Err(Error::invalid_input(format!(
                "demo '{}' carries no initial/final system state",
                demo.id
            )));
        }
    }
    let labels = label_demos(&model.gmm, demos)?;
    let first_labels: Vec<usize> = labels.iter().map(|l| *l.first().unwrap()).collect();
    let last_labels: Vec<usize> = labels.iter().map(|l| *l.last().unwrap()).collect();

    let mut objects: BTreeSet<String> = BTreeSet::new();
    for demo in demos {
        objects.extend(demo.initial_state.as_ref().unwrap().objects.keys().cloned());
    }
    let mut frame_ids: Vec<String> = vec![GLOBAL_FRAME.to_string()];
    frame_ids.extend(objects.iter().cloned());

    let mut warnings = Vec::new();

    // manipulated: mean pose change across demos clears the noise threshold
    let move_threshold = (2.0 * perception_noise).max(1e-6);
    let mut manipulated = BTreeSet::new();
    for o in &objects {
        let mut total = 0.0;
        for demo in demos {
            let before = demo.initial_state.as_ref().unwrap().object(o)?;
            let after = demo.final_state.as_ref().unwrap().object(o)?;
            total += before.distance(after);
        }
        if total / demos.len() as f64 > move_threshold {
            manipulated.insert(o.clone());
        }
    }

    let group_fit = |groups: &BTreeMap<usize, Vec<usize>>,
                     point_of: &dyn Fn(usize) -> ManifoldPoint,
                     state_of: &dyn Fn(usize) -> SystemState,
                     warnings: &mut Vec<String>,
                     what: &str|
     -> Result<BTreeMap<usize, FrameGaussians>> {
        let mut out = BTreeMap::new();
        for (k, demo_idxs) in groups {
            let mut per_frame = BTreeMap::new();
            for frame_id in &frame_ids {
                let mut local = Vec::with_capacity(demo_idxs.len());
                for &d in demo_idxs {
                    let point = point_of(d);
                    let frame = state_frame(&point.spec, frame_id, &state_of(d))?;
                    local.push(frame.apply_inverse(&point));
                }
                let g = if local.len() < 2 {
                    warnings.push(format!(
                        "{what} of component {k}: single demo, covariance at the floor"
                    ));
                    RiemannianGaussian::isotropic(local[0].clone(), crate::config::COV_FLOOR)
                } else {
                    fit_gaussian(&local)?
                };
                per_frame.insert(frame_id.clone(), g);
            }
            out.insert(*k, per_frame);
        }
        Ok(out)
    };

    let mut initial_groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (d, k) in first_labels.iter().enumerate() {
        initial_groups.entry(*k).or_default().push(d);
    }
    let mut final_groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (d, k) in last_labels.iter().enumerate() {
        final_groups.entry(*k).or_default().push(d);
    }

    let precondition = group_fit(
        &initial_groups,
        &|d| demos[d].points[0].clone(),
        &|d| demos[d].initial_state.clone().unwrap(),
        &mut warnings,
        "precondition",
    )?;
    let final_condition = group_fit(
        &final_groups,
        &|d| demos[d].points[demos[d].points.len() - 1].clone(),
        &|d| demos[d].final_state.clone().unwrap(),
        &mut warnings,
        "final condition",
    )?;

    // effect model: final pose of every object (and the end-effector),
    // expressed in frames of the initial system state
    let mut effect: BTreeMap<usize, BTreeMap<String, Vec<FrameEntry>>> = BTreeMap::new();
    let mut effect_subjects: Vec<String> = objects.iter().cloned().collect();
    effect_subjects.push(END_EFFECTOR.to_string());
    for (k, demo_idxs) in &final_groups {
        let mut per_object = BTreeMap::new();
        for subject in &effect_subjects {
            let mut per_frame: Vec<FrameEntry> = Vec::new();
            for frame_id in &frame_ids {
                let mut local = Vec::with_capacity(demo_idxs.len());
                for &d in demo_idxs {
                    let final_state = demos[d].final_state.as_ref().unwrap();
                    let point = if subject == END_EFFECTOR {
                        final_state.end_effector.clone()
                    } else {
                        final_state.object(subject)?.clone()
                    };
                    let frame = state_frame(
                        &point.spec,
                        frame_id,
                        demos[d].initial_state.as_ref().unwrap(),
                    )?;
                    local.push(frame.apply_inverse(&point));
                }
                let g = if local.len() < 2 {
                    warnings.push(format!(
                        "effect of component {k}, object '{subject}': single demo"
                    ));
                    RiemannianGaussian::isotropic(local[0].clone(), crate::config::COV_FLOOR)
                } else {
                    fit_gaussian(&local)?
                };
                per_frame.push(FrameEntry {
                    frame: frame_id.clone(),
                    gaussian: g,
                });
            }
            per_object.insert(subject.clone(), per_frame);
        }
        effect.insert(*k, per_object);
    }

    let models = ConditionModels {
        precondition,
        final_condition,
        effect,
        initial_frames: frame_ids.clone(),
        final_frames: frame_ids,
        manipulated,
        warnings,
    };
    models.validate(model)?;
    Ok(models)
}

/// Closed-form KL divergence between two Gaussians on the same manifold,
/// computed in the tangent space at `g2`'s mean: the mean difference enters
/// through the Log map and `g1`'s covariance is parallel-transported there.
pub fn kl_gaussian(g1: &RiemannianGaussian, g2: &RiemannianGaussian) -> Result<f64> {
    if g1.spec() != g2.spec() {
        return Err(Error::invalid_input(
            "KL divergence of Gaussians on different manifolds",
        ));
    }
    let spec = g2.spec();
    let d = spec.tangent_dim() as f64;
    let sigma1 = spec.transport_covariance(&g1.mean, &g2.mean, &g1.covariance);
    let m = spec.log(&g2.mean, &g1.mean);
    let prec2 = invert_spd(&g2.covariance)?;
    let det1 = nalgebra::Cholesky::new(sigma1.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("KL argument g1".into()))?
        .l()
        .diagonal()
        .map(f64::ln)
        .sum()
        * 2.0;
    let det2 = nalgebra::Cholesky::new(g2.covariance.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("KL argument g2".into()))?
        .l()
        .diagonal()
        .map(f64::ln)
        .sum()
        * 2.0;
    let trace = (&prec2 * &sigma1).trace();
    let maha = m.dot(&(&prec2 * &m));
    Ok(0.5 * (trace + maha - d + det2 - det1))
}
