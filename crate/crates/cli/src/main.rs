//! Command-line surface for the skill-model pipeline.
//!
//! Exit codes: 0 on success, 2 on input or validation errors, 3 on
//! numerical or algorithmic failures.

use clap::{Args, Parser, Subcommand};
use skillseq::cascade::{cascade_sequence, plan_sequence, CascadedModel, Skill};
use skillseq::config::Config;
use skillseq::error::Error;
use skillseq::io::{
    self, DatasetFile, ModelMetadata, PlanFile, SkillModelFile, StateFile, TrajectoryFile,
};
use skillseq::lqt;
use skillseq::pipeline::{learn_skill, run_chain_trials};
use skillseq::tphsmm::StateSequence;
use skillseq::workspace::{
    frames_from_state, generate_branching_demos, generate_skill_chain, sample_chain_task,
    ScenarioConfig, SkillDemos,
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "skillseq", version, about = "Learn, compose and run object-centric manipulation skills")]
struct Cli {
    /// Tolerances and controller settings (JSON); defaults apply if absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for anything stochastic in the invoked command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic demonstration dataset.
    Gen(GenArgs),
    /// Fit one skill (mixture, semi-Markov layer, condition models).
    Learn(LearnArgs),
    /// Compose skill models, in order, into one joint model.
    Compose(ComposeArgs),
    /// Decode the most-likely state sequence between two boundary states.
    Plan(PlanArgs),
    /// Track a plan with the optimal controller and export the trajectory.
    Track(TrackArgs),
    /// Closed-loop trials of a skill sequence on the kinematic simulator.
    Run(RunArgs),
    /// Summarize a dataset, model or plan file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Scenario name: fig3 | chain.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    out: PathBuf,
    /// Demonstrations per branch (fig3) or per skill (chain).
    #[arg(long)]
    demos: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Per-sample position noise while generating.
    #[arg(long)]
    demo_noise: Option<f64>,
    /// Also write a sampled task as PREFIX-initial.json / PREFIX-goal.json.
    #[arg(long)]
    task_out: Option<PathBuf>,
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Skill to fit; defaults to the only skill in the dataset.
    #[arg(long)]
    skill: Option<String>,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    /// Initialize EM with k-means instead of time binning.
    #[arg(long)]
    kmeans: bool,
    /// Perception-noise scale used to separate manipulated objects.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

#[derive(Args)]
struct ComposeArgs {
    /// Skill model files, in execution order.
    models: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    initial: PathBuf,
    #[arg(long)]
    goal: PathBuf,
    /// Horizon in steps; defaults to the accumulated average demo length.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    /// Output stem; writes STEM.json and STEM.csv.
    #[arg(long)]
    out: PathBuf,
    /// Override the diagonal control weight r of the tracking cost.
    #[arg(long)]
    control_weight: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// Skill model files, in execution order.
    models: Vec<PathBuf>,
    /// Scenario providing tasks and the simulator: currently chain.
    #[arg(long, default_value = "chain")]
    scenario: String,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Perception-noise scale; actuation noise follows the config ratio.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Skip per-skill re-observation and chain predicted effects instead.
    #[arg(long)]
    open_loop: bool,
    /// Success threshold on the final object-position error.
    #[arg(long, default_value_t = 0.05)]
    tolerance: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    file: PathBuf,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidInput(_)
        | Error::InvalidModel(_)
        | Error::MissingEntry(_)
        | Error::Io(_)
        | Error::Json(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    // behave like other unix tools when stdout is piped into `head`
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let config = match load_config(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Gen(args) => cmd_gen(args, cli.seed),
        Command::Learn(args) => cmd_learn(args, cli.seed, &config),
        Command::Compose(args) => cmd_compose(args),
        Command::Plan(args) => cmd_plan(args),
        Command::Track(args) => cmd_track(args, &config),
        Command::Run(args) => cmd_run(args, cli.seed, &config),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Config, Error> {
    match path {
        Some(p) => io::load(p),
        None => Ok(Config::default()),
    }
}

fn cmd_gen(args: &GenArgs, seed: u64) -> Result<(), Error> {
    let mut scenario = ScenarioConfig {
        scenario: args.scenario.clone(),
        seed,
        ..ScenarioConfig::default()
    };
    if args.scenario == "chain" {
        scenario.demo_noise = 0.004;
    }
    if let Some(d) = args.demos {
        scenario.demos_per_branch = d;
    }
    if let Some(s) = args.samples {
        scenario.samples_per_demo = s;
    }
    if let Some(n) = args.demo_noise {
        scenario.demo_noise = n;
    }
    scenario.validate()?;

    let skills = match scenario.scenario.as_str() {
        "fig3" => vec![SkillDemos {
            name: "pick".into(),
            demos: generate_branching_demos(&scenario)?,
        }],
        "chain" => generate_skill_chain(&scenario)?.skills,
        _ => unreachable!("validated scenario"),
    };
    let total: usize = skills.iter().map(|s| s.demos.len()).sum();
    let file = DatasetFile {
        version: io::SCHEMA_VERSION,
        scenario: scenario.clone(),
        skills,
    };
    io::save(&file, &args.out)?;
    println!(
        "wrote {} ({} skills, {} demos)",
        args.out.display(),
        file.skills.len(),
        total
    );

    if let Some(prefix) = &args.task_out {
        if scenario.scenario != "chain" {
            return Err(Error::invalid_input(
                "--task-out is only available for the chain scenario",
            ));
        }
        let (initial, goal) = sample_chain_task(&scenario, seed);
        let write = |suffix: &str, state| {
            let mut p = prefix.as_os_str().to_owned();
            p.push(suffix);
            let path = PathBuf::from(p);
            io::save(
                &StateFile {
                    version: io::SCHEMA_VERSION,
                    state,
                },
                &path,
            )
            .map(|_| println!("wrote {}", path.display()))
        };
        write("-initial.json", initial)?;
        write("-goal.json", goal)?;
    }
    Ok(())
}

fn cmd_learn(args: &LearnArgs, seed: u64, config: &Config) -> Result<(), Error> {
    let dataset: DatasetFile = io::load(&args.dataset)?;
    dataset.validate()?;
    let skill_demos = match (&args.skill, dataset.skills.len()) {
        (Some(name), _) => dataset
            .skills
            .iter()
            .find(|s| &s.name == name)
            .ok_or_else(|| {
                Error::invalid_input(format!(
                    "dataset has no skill '{name}'; available: {:?}",
                    dataset.skills.iter().map(|s| &s.name).collect::<Vec<_>>()
                ))
            })?,
        (None, 1) => &dataset.skills[0],
        (None, _) => {
            return Err(Error::invalid_input(format!(
                "dataset has several skills ({:?}); pick one with --skill",
                dataset.skills.iter().map(|s| &s.name).collect::<Vec<_>>()
            )))
        }
    };
    let config = Config {
        em_kmeans_init: args.kmeans || config.em_kmeans_init,
        ..config.clone()
    };
    let (skill, metadata) = learn_skill(
        &skill_demos.name,
        &skill_demos.demos,
        args.k,
        seed,
        args.noise,
        &config,
    )?;
    println!(
        "{}: K={} ({} initial / {} final states), final log-likelihood {:.3}",
        skill.name,
        skill.model.k(),
        skill.model.initial_states().len(),
        skill.model.final_states().len(),
        metadata.final_log_likelihood.unwrap_or(f64::NAN)
    );
    let file = SkillModelFile::from_skill(&skill, metadata);
    file.validate()?;
    io::save(&file, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn load_skills(paths: &[PathBuf]) -> Result<Vec<Skill>, Error> {
    if paths.is_empty() {
        return Err(Error::invalid_input("at least one model file is required"));
    }
    let mut skills = Vec::with_capacity(paths.len());
    for p in paths {
        let file: SkillModelFile = io::load(p)?;
        file.validate()?;
        skills.push(file.into_skill());
    }
    Ok(skills)
}

fn compose_stats(joint: &CascadedModel) -> (usize, usize, usize, usize) {
    let k = joint.k();
    let edges = joint
        .model
        .transitions
        .iter()
        .filter(|a| **a > 0.0)
        .count();
    (
        k,
        edges,
        joint.model.initial_states().len(),
        joint.model.final_states().len(),
    )
}

fn cmd_compose(args: &ComposeArgs) -> Result<(), Error> {
    let skills = load_skills(&args.models)?;
    let joint = cascade_sequence(&skills)?;
    let (k, edges, k_i, k_f) = compose_stats(&joint);
    println!("composed {:?}: K={k} E={edges} Ki|Kf = {k_i}|{k_f}", joint.skill_names);
    let metadata = ModelMetadata {
        skill: joint.skill_names.join("+"),
        k,
        demo_count: 0,
        seed: 0,
        tool_version: io::tool_version(),
        frame_objects: Default::default(),
        final_log_likelihood: None,
    };
    let file = SkillModelFile::from_cascade(&joint, metadata);
    file.validate()?;
    io::save(&file, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_plan(args: &PlanArgs) -> Result<(), Error> {
    let model_file: SkillModelFile = io::load(&args.model)?;
    model_file.validate()?;
    let joint = model_file.to_cascaded();
    let initial: StateFile = io::load(&args.initial)?;
    let goal: StateFile = io::load(&args.goal)?;
    initial.state.validate()?;
    goal.state.validate()?;
    let plan = plan_sequence(&joint, &initial.state, &goal.state, args.horizon)?;
    println!(
        "decoded {} steps over {:?} (log-probability {:.3})",
        plan.horizon, joint.skill_names, plan.joint.log_probability
    );
    let file = PlanFile {
        version: io::SCHEMA_VERSION,
        model_fingerprint: io::fingerprint_file(&args.model)?,
        initial_state: initial.state,
        goal_state: goal.state,
        plan,
    };
    io::save(&file, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_track(args: &TrackArgs, config: &Config) -> Result<(), Error> {
    // the tracking contract: the terminal pose must sit within the
    // configured sigma tolerance of the terminal reference
    let model_file: SkillModelFile = io::load(&args.model)?;
    model_file.validate()?;
    let plan: PlanFile = io::load(&args.plan)?;
    let fingerprint = io::fingerprint_file(&args.model)?;
    if plan.model_fingerprint != fingerprint {
        return Err(Error::invalid_input(
            "plan was decoded from a different model file",
        ));
    }
    let joint = model_file.to_cascaded();
    let config = Config {
        control_weight: args.control_weight.unwrap_or(config.control_weight),
        ..config.clone()
    };
    let frames = frames_from_state(&joint.model.gmm.spec, &plan.initial_state);
    let globals = joint.model.global_components(&frames)?;
    let seq = StateSequence {
        states: plan.plan.joint.states.clone(),
        log_probability: plan.plan.joint.log_probability,
    };
    let problem = lqt::build_reference(&seq, &globals, &plan.initial_state.end_effector, &config)?;
    let solution = lqt::solve(&problem)?;

    let terminal_ref = &globals[*seq.states.last().unwrap()];
    let residual = solution.states.last().unwrap().distance(&terminal_ref.mean);
    let sigma = terminal_ref.covariance.diagonal().max().sqrt();
    let tolerance = config.tracking_sigma_tolerance * sigma;
    println!(
        "tracked {} steps; terminal residual {:.4} ({}σ̂ tolerance {:.4})",
        solution.states.len(),
        residual,
        config.tracking_sigma_tolerance,
        tolerance
    );
    if residual > tolerance {
        return Err(Error::TrackingDiverged {
            skill: plan.plan.segments.len().saturating_sub(1),
            residual,
            tolerance,
        });
    }

    let trajectory = TrajectoryFile::from_solution(&solution, config.dt());
    let json_path = args.out.with_extension("json");
    let csv_path = args.out.with_extension("csv");
    io::save(&trajectory, &json_path)?;
    std::fs::write(&csv_path, trajectory.to_csv())?;
    println!("wrote {} and {}", json_path.display(), csv_path.display());
    Ok(())
}

fn cmd_run(args: &RunArgs, seed: u64, config: &Config) -> Result<(), Error> {
    if args.scenario != "chain" {
        return Err(Error::invalid_input(format!(
            "unknown run scenario '{}'; valid scenarios: chain",
            args.scenario
        )));
    }
    let skills = load_skills(&args.models)?;
    let t0 = std::time::Instant::now();
    let joint = cascade_sequence(&skills)?;
    let compose_ms = t0.elapsed().as_secs_f64() * 1e3;
    let scenario = ScenarioConfig {
        scenario: "chain".into(),
        seed,
        demo_noise: 0.004,
        ..ScenarioConfig::default()
    };
    let mut report = run_chain_trials(
        &joint,
        &skills,
        &scenario,
        args.trials,
        seed,
        args.noise,
        args.open_loop,
        args.tolerance,
        config,
    )?;
    report.compose_ms = compose_ms;
    let mean_plan: f64 =
        report.trials.iter().map(|t| t.plan_ms).sum::<f64>() / report.trials.len().max(1) as f64;
    println!(
        "{} trials ({}): success rate {:.2}, mean terminal error {:.4}",
        args.trials,
        if args.open_loop { "open loop" } else { "closed loop" },
        report.success_rate,
        report.mean_terminal_error
    );
    println!(
        "T={} compose {:.1} ms, mean plan {:.1} ms",
        report.horizon, report.compose_ms, mean_plan
    );
    io::save(&report, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<(), Error> {
    let path: &Path = &args.file;
    if let Ok(model) = io::load::<SkillModelFile>(path) {
        if model.validate().is_ok() {
            println!("skill model '{}' ({})", model.metadata.skill, model.metadata.tool_version);
            println!(
                "  K={} frames={:?}",
                model.model.k(),
                model.model.gmm.frame_ids
            );
            println!(
                "  initial states {:?}, final states {:?}",
                model.model.initial_states(),
                model.model.final_states()
            );
            let durations: Vec<String> = model
                .model
                .durations
                .iter()
                .map(|d| format!("{:.1}±{:.1}", d.mean, d.std))
                .collect();
            println!("  durations [{}]", durations.join(", "));
            if let Some(p) = &model.provenance {
                println!("  composed from {:?}", p.skill_names);
            }
            println!("  manipulated objects {:?}", model.conditions.manipulated);
            return Ok(());
        }
    }
    if let Ok(dataset) = io::load::<DatasetFile>(path) {
        if dataset.validate().is_ok() {
            println!("dataset, scenario '{}'", dataset.scenario.scenario);
            for s in &dataset.skills {
                let lens: Vec<usize> = s.demos.iter().map(|d| d.len()).collect();
                println!("  skill '{}': {} demos, lengths {:?}", s.name, s.demos.len(), lens);
            }
            return Ok(());
        }
    }
    if let Ok(plan) = io::load::<PlanFile>(path) {
        println!("plan over {} steps, model {}", plan.plan.horizon, plan.model_fingerprint);
        for seg in &plan.plan.segments {
            println!(
                "  {} [{}..{}]",
                seg.skill_name,
                seg.start,
                seg.start + seg.source_states.len()
            );
        }
        return Ok(());
    }
    Err(Error::invalid_input(format!(
        "{} is not a recognized dataset, model or plan file",
        path.display()
    )))
}
