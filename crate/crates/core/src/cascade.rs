//! Composition of per-skill models into one joint model for a skill
//! sequence, plus the sequence-level planner and executor.
//!
//! Cascading two skills duplicates the second model once per final
//! component of the first: each final component encodes a different
//! predicted outcome, so each duplicate is re-anchored with the task
//! parameters predicted by the first skill's effect model. Entry
//! transitions between the skills are scored by the KL divergence between
//! the first skill's final condition and the second skill's precondition
//! over their common frames. The composed model has
//! `K₁ + K_{1,f} · K₂` components and stays in the standard TP-HSMM
//! format, with a provenance table mapping joint components back to their
//! source skill.

use crate::conditions::{
    fuse_in_state_frames, kl_gaussian, ConditionModels, FrameGaussians, GLOBAL_FRAME,
};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::lqt;
use crate::manifold::ManifoldPoint;
use crate::tpgmm::{Component, FrameEntry, TPGMM};
use crate::tphsmm::{StateSequence, TPHSMM};
use crate::workspace::{frames_from_state, pose_frame, Simulator, SystemState};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A learned skill: the TP-HSMM and its condition models.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Skill {
    pub name: String,
    pub model: TPHSMM,
    pub conditions: ConditionModels,
}

/// Where a joint component came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentProvenance {
    /// Position of the source skill in the sequence.
    pub skill_index: usize,
    pub skill_name: String,
    /// Component id within the source skill.
    pub source_component: usize,
    /// Joint ids of the final components this copy was conditioned on, one
    /// per upstream cascade step.
    pub chain: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadedModel {
    pub model: TPHSMM,
    pub conditions: ConditionModels,
    pub provenance: Vec<ComponentProvenance>,
    pub skill_names: Vec<String>,
}

impl CascadedModel {
    /// Wrap a single skill unchanged.
    pub fn from_skill(skill: &Skill) -> Self {
        let provenance = (0..skill.model.k())
            .map(|c| ComponentProvenance {
                skill_index: 0,
                skill_name: skill.name.clone(),
                source_component: c,
                chain: Vec::new(),
            })
            .collect();
        CascadedModel {
            model: skill.model.clone(),
            conditions: skill.conditions.clone(),
            provenance,
            skill_names: vec![skill.name.clone()],
        }
    }

    pub fn k(&self) -> usize {
        self.model.k()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.provenance.len() != self.model.k() {
            return Err(Error::invalid_model(
                "provenance table does not cover every component",
            ));
        }
        Ok(())
    }
}

/// Entry-transition row from one final component of the first skill to the
/// initial components of the second: softmax of negated KL sums over the
/// common frames, normalized to one.
pub fn entry_transitions(
    final_condition: &FrameGaussians,
    precondition: &BTreeMap<usize, FrameGaussians>,
) -> Result<BTreeMap<usize, f64>> {
    if precondition.is_empty() {
        return Err(Error::invalid_input("second skill has no initial components"));
    }
    let mut log_weights: BTreeMap<usize, f64> = BTreeMap::new();
    for (k_i, pre_frames) in precondition {
        let common: Vec<&String> = final_condition
            .keys()
            .filter(|f| pre_frames.contains_key(*f))
            .collect();
        if common.is_empty() {
            return Err(Error::MissingEntry(
                "no common frame between final condition and precondition".into(),
            ));
        }
        let mut kl_sum = 0.0;
        for f in common {
            kl_sum += kl_gaussian(&final_condition[f], &pre_frames[f])?;
        }
        log_weights.insert(*k_i, -kl_sum);
    }
    let max = log_weights
        .values()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = log_weights.values().map(|w| (w - max).exp()).sum();
    Ok(log_weights
        .into_iter()
        .map(|(k, w)| (k, (w - max).exp() / total))
        .collect())
}

/// Eq.-(1)-style affine map of a component entry into a new frame, using a
/// predicted pose as the task parameter.
fn reanchor_entry(
    entry: &FrameEntry,
    new_frame: &str,
    predicted_pose: &ManifoldPoint,
) -> FrameEntry {
    let frame = pose_frame(&entry.gaussian.mean.spec.clone(), new_frame, predicted_pose);
    FrameEntry {
        frame: new_frame.to_string(),
        gaussian: frame.transform_gaussian(&entry.gaussian),
    }
}

/// Re-anchor all frame entries of the second skill for one final component
/// of the first: entries on the global frame stay put, entries on an object
/// frame are spread over the first skill's initial frames using the means of
/// its effect model as task parameters.
fn reanchor_entries(
    entries: &[FrameEntry],
    effect_at_kf: &BTreeMap<String, Vec<FrameEntry>>,
) -> Result<Vec<FrameEntry>> {
    let mut out = Vec::new();
    for entry in entries {
        if entry.frame == GLOBAL_FRAME {
            out.push(entry.clone());
            continue;
        }
        let predicted = effect_at_kf.get(&entry.frame).ok_or_else(|| {
            Error::MissingEntry(format!(
                "effect model has no entry for object '{0}' needed by frame '{0}'",
                entry.frame
            ))
        })?;
        for pred in predicted {
            out.push(reanchor_entry(entry, &pred.frame, &pred.gaussian.mean));
        }
    }
    Ok(out)
}

/// Cascade a pair: the accumulated left model and one more skill.
pub fn cascade_pair(left: &CascadedModel, right: &Skill) -> Result<CascadedModel> {
    if left.model.gmm.spec != right.model.gmm.spec {
        return Err(Error::invalid_input(
            "cascaded skills must share the manifold spec",
        ));
    }
    let k1 = left.k();
    let k2 = right.model.k();
    let finals1 = left.model.final_states();
    let n_dup = finals1.len();
    let k_hat = k1 + n_dup * k2;
    let skill_index = left.skill_names.len();

    let mut transitions: DMatrix<f64> = DMatrix::zeros(k_hat, k_hat);
    transitions
        .view_mut((0, 0), (k1, k1))
        .copy_from(&left.model.transitions);

    let mut components: Vec<Component> = left.model.gmm.components.clone();
    let mut priors: Vec<f64> = left.model.gmm.priors.clone();
    let mut durations = left.model.durations.clone();
    let mut initial = left.model.initial.clone();
    initial.resize(k_hat, 0.0);
    let mut provenance = left.provenance.clone();
    let mut finals: BTreeMap<usize, f64> = BTreeMap::new();
    let mut effect_hat: BTreeMap<usize, BTreeMap<String, Vec<FrameEntry>>> = BTreeMap::new();
    let mut final_condition_hat: BTreeMap<usize, FrameGaussians> = BTreeMap::new();
    let mut frame_ids = left.model.gmm.frame_ids.clone();

    for (dup, &k_f) in finals1.iter().enumerate() {
        let offset = k1 + dup * k2;
        let exit_weight = left.model.finals[&k_f];
        let effect_at_kf = left
            .conditions
            .effect
            .get(&k_f)
            .ok_or_else(|| Error::MissingEntry(format!("effect model for final {k_f}")))?;

        // entry transitions k_f → duplicated initial components
        let final_cond = left
            .conditions
            .final_condition
            .get(&k_f)
            .ok_or_else(|| Error::MissingEntry(format!("final condition for {k_f}")))?;
        let entry = entry_transitions(final_cond, &right.conditions.precondition)?;
        let mass: f64 = entry.values().sum();
        if mass <= 0.0 {
            return Err(Error::Numerical(format!(
                "no entry-transition mass out of final component {k_f}"
            )));
        }
        for (k_i, p) in &entry {
            transitions[(k_f, offset + k_i)] = exit_weight * p;
        }

        // internal structure of the duplicate
        transitions
            .view_mut((offset, offset), (k2, k2))
            .copy_from(&right.model.transitions);
        durations.extend(right.model.durations.iter().cloned());
        for (f2, w) in &right.model.finals {
            finals.insert(offset + f2, *w);
        }

        // every component re-anchored through the predicted effects
        for (c2, comp) in right.model.gmm.components.iter().enumerate() {
            let entries = reanchor_entries(&comp.entries, effect_at_kf)?;
            for e in &entries {
                if !frame_ids.contains(&e.frame) {
                    frame_ids.push(e.frame.clone());
                }
            }
            components.push(Component { entries });
            priors.push(right.model.gmm.priors[c2]);
            let mut chain = left.provenance[k_f].chain.clone();
            chain.push(k_f);
            provenance.push(ComponentProvenance {
                skill_index,
                skill_name: right.name.clone(),
                source_component: c2,
                chain,
            });
        }

        // the duplicate's final conditions keep their frame-relative form
        for (f2, frames) in &right.conditions.final_condition {
            final_condition_hat.insert(offset + f2, frames.clone());
        }
        // its effect model is re-anchored exactly like the components
        for (f2, per_object) in &right.conditions.effect {
            let mut re_framed = BTreeMap::new();
            for (object, entries) in per_object {
                re_framed.insert(object.clone(), reanchor_entries(entries, effect_at_kf)?);
            }
            effect_hat.insert(offset + f2, re_framed);
        }
    }

    let total_prior: f64 = priors.iter().sum();
    for p in &mut priors {
        *p /= total_prior;
    }
    frame_ids.sort();

    let model = TPHSMM {
        gmm: TPGMM {
            spec: left.model.gmm.spec.clone(),
            frame_ids,
            priors,
            components,
        },
        transitions,
        durations,
        initial,
        finals,
        avg_demo_len: left.model.avg_demo_len + right.model.avg_demo_len,
    };

    let manipulated = left
        .conditions
        .manipulated
        .union(&right.conditions.manipulated)
        .cloned()
        .collect();
    let conditions = ConditionModels {
        precondition: left.conditions.precondition.clone(),
        final_condition: final_condition_hat,
        effect: effect_hat,
        initial_frames: left.conditions.initial_frames.clone(),
        final_frames: right.conditions.final_frames.clone(),
        manipulated,
        warnings: Vec::new(),
    };

    let mut names = left.skill_names.clone();
    names.push(right.name.clone());
    let out = CascadedModel {
        model,
        conditions,
        provenance,
        skill_names: names,
    };
    debug_assert_eq!(out.k(), k_hat);
    out.validate()?;
    Ok(out)
}

/// Left fold of [`cascade_pair`] over an ordered skill sequence.
pub fn cascade_sequence(skills: &[Skill]) -> Result<CascadedModel> {
    let first = skills
        .first()
        .ok_or_else(|| Error::invalid_input("empty skill sequence"))?;
    let mut acc = CascadedModel::from_skill(first);
    for (i, skill) in skills.iter().enumerate().skip(1) {
        acc = cascade_pair(&acc, skill)
            .map_err(|e| Error::invalid_model(format!("cascading step {i} ('{}'): {e}", skill.name)))?;
    }
    Ok(acc)
}

/// One decoded stretch of the joint sequence belonging to a single skill.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanSegment {
    pub skill_index: usize,
    pub skill_name: String,
    /// Step at which this segment starts in the joint sequence.
    pub start: usize,
    /// Decoded states, as component ids of the source skill.
    pub source_states: Vec<usize>,
    /// Final source component of the segment.
    pub final_component: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequencePlan {
    pub joint: StateSequence,
    pub segments: Vec<PlanSegment>,
    pub horizon: usize,
}

/// Decode the jointly most-likely state sequence from the initial system
/// state and the goal, then split it into per-skill sub-sequences along
/// provenance boundaries. The horizon defaults to the accumulated average
/// demonstration length of the composed skills.
pub fn plan_sequence(
    joint: &CascadedModel,
    initial: &SystemState,
    goal: &SystemState,
    horizon: Option<usize>,
) -> Result<SequencePlan> {
    let spec = &joint.model.gmm.spec;
    let frames = frames_from_state(spec, initial);
    let t_max = horizon.unwrap_or(joint.model.avg_demo_len.round() as usize).max(2);
    let seq = joint.model.modified_viterbi(
        &frames,
        &initial.end_effector,
        &goal.end_effector,
        t_max,
    )?;

    let mut segments: Vec<PlanSegment> = Vec::new();
    for (t, &state) in seq.states.iter().enumerate() {
        let prov = &joint.provenance[state];
        match segments.last_mut() {
            Some(seg) if seg.skill_index == prov.skill_index => {
                seg.source_states.push(prov.source_component);
                seg.final_component = prov.source_component;
            }
            _ => segments.push(PlanSegment {
                skill_index: prov.skill_index,
                skill_name: prov.skill_name.clone(),
                start: t,
                source_states: vec![prov.source_component],
                final_component: prov.source_component,
            }),
        }
    }
    if segments.len() != joint.skill_names.len() {
        return Err(Error::Numerical(format!(
            "decoded plan covers {} skills, expected {}",
            segments.len(),
            joint.skill_names.len()
        )));
    }
    Ok(SequencePlan {
        joint: seq,
        segments,
        horizon: t_max,
    })
}

#[derive(Debug, Clone)]
pub struct ExecutionOptions {
    pub perception_noise: f64,
    /// Skip per-skill re-observation and chain predicted effects instead.
    pub open_loop: bool,
    pub config: Config,
}

impl Default for ExecutionOptions {
    fn default() -> Self {
        ExecutionOptions {
            perception_noise: 0.0,
            open_loop: false,
            config: Config::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkillExecution {
    pub skill_index: usize,
    pub skill_name: String,
    /// Commanded end-effector poses, one per tracked step.
    pub commanded: Vec<ManifoldPoint>,
    /// Distance between the tracked terminal pose and its reference mean.
    pub terminal_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutionLog {
    pub segments: Vec<SkillExecution>,
    pub final_state: SystemState,
}

/// Execute a planned sequence on the simulator.
///
/// For every skill the current system state is observed (or, open loop,
/// predicted from the previous skill's effect model), task parameters are
/// recomputed, the global components of the skill's sub-sequence are
/// updated, and the tracking controller drives the simulator through the
/// segment.
pub fn execute_sequence(
    joint: &CascadedModel,
    skills: &[Skill],
    plan: &SequencePlan,
    simulator: &mut Simulator,
    options: &ExecutionOptions,
) -> Result<ExecutionLog> {
    if skills.len() != joint.skill_names.len() {
        return Err(Error::invalid_input(
            "skill list does not match the composed model",
        ));
    }
    let spec = &joint.model.gmm.spec;
    let mut belief: Option<SystemState> = None;
    let mut log = Vec::with_capacity(plan.segments.len());
    for segment in &plan.segments {
        let skill = &skills[segment.skill_index];
        let current = match (&belief, options.open_loop) {
            (Some(predicted), true) => predicted.clone(),
            _ => simulator.observe(options.perception_noise),
        };
        let frames = frames_from_state(spec, &current);
        let globals = skill.model.global_components(&frames)?;
        let seq = StateSequence {
            states: segment.source_states.clone(),
            log_probability: 0.0,
        };
        let start = simulator.state.end_effector.clone();
        let problem = lqt::build_reference(&seq, &globals, &start, &options.config)?;
        let solution = lqt::solve(&problem)?;

        let terminal_ref = &globals[*segment.source_states.last().unwrap()];
        let terminal_residual = solution
            .states
            .last()
            .unwrap()
            .distance(&terminal_ref.mean);
        let sigma_bar = (terminal_ref.covariance.diagonal().max()).sqrt();
        let tolerance = options.config.tracking_sigma_tolerance * sigma_bar + 0.05;
        if !terminal_residual.is_finite() || terminal_residual > tolerance {
            return Err(Error::TrackingDiverged {
                skill: segment.skill_index,
                residual: terminal_residual,
                tolerance,
            });
        }

        for state in solution.states.iter().skip(1) {
            simulator.command(state);
        }
        // open loop chains the effect-model prediction instead of observing
        if options.open_loop {
            belief = Some(
                skill
                    .conditions
                    .predict_effects(segment.final_component, &current)?,
            );
        }

        log.push(SkillExecution {
            skill_index: segment.skill_index,
            skill_name: segment.skill_name.clone(),
            commanded: solution.states.clone(),
            terminal_residual,
        });
    }
    Ok(ExecutionLog {
        segments: log,
        final_state: simulator.state.clone(),
    })
}

/// Fuse the effect entries of a skill in the frames of a concrete state;
/// exposed for effect-prediction diagnostics.
pub fn predicted_pose(
    skill: &Skill,
    k_f: usize,
    object: &str,
    state: &SystemState,
) -> Result<ManifoldPoint> {
    let entries = skill
        .conditions
        .effect
        .get(&k_f)
        .and_then(|m| m.get(object))
        .ok_or_else(|| Error::MissingEntry(format!("effect of '{object}' at {k_f}")))?;
    Ok(fuse_in_state_frames(entries, state)?.mean)
}
