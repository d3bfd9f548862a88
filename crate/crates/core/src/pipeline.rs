//! High-level entry points shared by the CLI and the language bindings:
//! fit a skill from demonstrations, compose sequences, and run closed-loop
//! trials on the kinematic simulator.

use crate::cascade::{
    cascade_sequence, execute_sequence, plan_sequence, CascadedModel, ExecutionOptions, Skill,
};
use crate::conditions::learn_conditions;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::io::{ModelMetadata, RunReport, TrialReport};
use crate::tpgmm::{em_fit, Demonstration};
use crate::tphsmm::fit_hsmm;
use crate::workspace::{sample_chain_task, AttachmentRules, ScenarioConfig, Simulator};
use std::collections::BTreeMap;
use std::time::Instant;

/// Fit the full skill stack (mixture → semi-Markov layer → condition
/// models) and report the final training log-likelihood.
pub fn learn_skill(
    name: &str,
    demos: &[Demonstration],
    k: usize,
    seed: u64,
    perception_noise: f64,
    config: &Config,
) -> Result<(Skill, ModelMetadata)> {
    let fit = em_fit(demos, k, seed, config)?;
    let model = fit_hsmm(&fit.model, demos)?;
    let conditions = learn_conditions(&model, demos, perception_noise)?;
    let frame_objects: BTreeMap<String, String> = demos[0]
        .frames
        .iter()
        .map(|f| (f.id.clone(), f.object.clone()))
        .collect();
    let metadata = ModelMetadata {
        skill: name.to_string(),
        k,
        demo_count: demos.len(),
        seed,
        tool_version: crate::io::tool_version(),
        frame_objects,
        final_log_likelihood: fit.log_likelihoods.last().cloned(),
    };
    Ok((
        Skill {
            name: name.to_string(),
            model,
            conditions,
        },
        metadata,
    ))
}

/// Run seeded closed-loop trials of a composed skill sequence on the chain
/// scenario and aggregate errors and timing.
#[allow(clippy::too_many_arguments)]
pub fn run_chain_trials(
    joint: &CascadedModel,
    skills: &[Skill],
    scenario: &ScenarioConfig,
    trials: usize,
    base_seed: u64,
    noise: f64,
    open_loop: bool,
    success_tolerance: f64,
    config: &Config,
) -> Result<RunReport> {
    let mut reports = Vec::with_capacity(trials);
    let rules = AttachmentRules::from(scenario);
    let actuation = noise * config.actuation_noise_ratio;
    for i in 0..trials {
        let seed = base_seed.wrapping_add(i as u64);
        let (initial, goal) = sample_chain_task(scenario, seed);
        let mut simulator = Simulator::new(initial, rules, actuation, seed ^ 0x5eed);

        let t0 = Instant::now();
        let observed = simulator.observe(noise);
        let plan = plan_sequence(joint, &observed, &goal, None)?;
        let plan_ms = t0.elapsed().as_secs_f64() * 1e3;

        let t1 = Instant::now();
        let options = ExecutionOptions {
            perception_noise: noise,
            open_loop,
            config: config.clone(),
        };
        execute_sequence(joint, skills, &plan, &mut simulator, &options)?;
        let track_ms = t1.elapsed().as_secs_f64() * 1e3;

        let mut object_errors = BTreeMap::new();
        let mut terminal_error = 0.0f64;
        for (id, goal_pose) in &goal.objects {
            let actual = simulator.state.object(id)?;
            // position error in workspace units
            let err: f64 = actual
                .coords
                .iter()
                .take(3)
                .zip(goal_pose.coords.iter().take(3))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if joint.conditions.manipulated.contains(id) {
                terminal_error = terminal_error.max(err);
            }
            object_errors.insert(id.clone(), err);
        }
        reports.push(TrialReport {
            seed,
            success: terminal_error <= success_tolerance,
            object_errors,
            terminal_error,
            plan_ms,
            track_ms,
        });
    }
    let success_rate = reports.iter().filter(|r| r.success).count() as f64 / trials.max(1) as f64;
    let mean_terminal_error =
        reports.iter().map(|r| r.terminal_error).sum::<f64>() / trials.max(1) as f64;
    Ok(RunReport {
        version: crate::io::SCHEMA_VERSION,
        scenario: scenario.scenario.clone(),
        skill_names: joint.skill_names.clone(),
        trials: reports,
        success_rate,
        mean_terminal_error,
        open_loop,
        noise,
        horizon: joint.model.avg_demo_len.round() as usize,
        compose_ms: 0.0,
    })
}

/// Learn every skill of a chain dataset and compose them in order.
pub fn learn_and_compose_chain(
    skills_demos: &[(String, Vec<Demonstration>)],
    k: usize,
    seed: u64,
    perception_noise: f64,
    config: &Config,
) -> Result<(Vec<Skill>, CascadedModel, f64)> {
    if skills_demos.is_empty() {
        return Err(Error::invalid_input("no skills to learn"));
    }
    let mut skills = Vec::with_capacity(skills_demos.len());
    for (name, demos) in skills_demos {
        let (skill, _) = learn_skill(name, demos, k, seed, perception_noise, config)?;
        skills.push(skill);
    }
    let t0 = Instant::now();
    let joint = cascade_sequence(&skills)?;
    let compose_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok((skills, joint, compose_ms))
}
