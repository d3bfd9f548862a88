//! Python bindings: manifold primitives as a class, the pipeline stages as
//! functions over JSON strings (the same schemas the CLI reads and writes).

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use skillseq::cascade::{cascade_sequence, plan_sequence};
use skillseq::config::Config;
use skillseq::error::Error;
use skillseq::io::{
    DatasetFile, ModelMetadata, PlanFile, SkillModelFile, StateFile, TrajectoryFile,
    SCHEMA_VERSION,
};
use skillseq::lqt;
use skillseq::manifold::{
    gaussian_product, BlockSpec, ManifoldPoint, ManifoldSpec, RiemannianGaussian,
};
use skillseq::pipeline::{learn_skill, run_chain_trials};
use skillseq::tphsmm::StateSequence;
use skillseq::workspace::{
    frames_from_state, generate_branching_demos, generate_skill_chain, sample_chain_task,
    ScenarioConfig, SkillDemos,
};

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidInput(_) | Error::InvalidModel(_) | Error::MissingEntry(_) | Error::Json(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> PyResult<nalgebra::DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("covariance must be square"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(nalgebra::DMatrix::from_row_slice(n, n, &flat))
}

fn matrix_to_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// A product manifold of Euclidean and unit-quaternion blocks.
#[pyclass(frozen)]
struct Manifold {
    spec: ManifoldSpec,
}

impl Manifold {
    fn point(&self, coords: Vec<f64>) -> PyResult<ManifoldPoint> {
        self.spec.point(coords).map_err(to_py_err)
    }

    fn gaussian(&self, mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<RiemannianGaussian> {
        RiemannianGaussian::new(self.point(mean)?, matrix_from_rows(cov)?).map_err(to_py_err)
    }
}

#[pymethods]
impl Manifold {
    /// Flat ℝⁿ.
    #[staticmethod]
    fn euclidean(n: usize) -> Self {
        Manifold {
            spec: ManifoldSpec::euclidean(n),
        }
    }

    /// ℝ³ × S³: a rigid pose (position + quaternion `[w, x, y, z]`).
    #[staticmethod]
    fn pose() -> Self {
        Manifold {
            spec: ManifoldSpec::pose(),
        }
    }

    /// ℝ³ × S³ × ℝ: end-effector pose plus gripper channel.
    #[staticmethod]
    fn pose_gripper() -> Self {
        Manifold {
            spec: ManifoldSpec::pose_gripper(),
        }
    }

    #[getter]
    fn ambient_dim(&self) -> usize {
        self.spec.ambient_dim()
    }

    #[getter]
    fn tangent_dim(&self) -> usize {
        self.spec.tangent_dim()
    }

    fn blocks(&self) -> Vec<String> {
        self.spec
            .blocks
            .iter()
            .map(|b| match b {
                BlockSpec::Euclidean(n) => format!("euclidean({n})"),
                BlockSpec::UnitQuaternion => "unit_quaternion".to_string(),
            })
            .collect()
    }

    /// Exponential map: follow the tangent vector `v` from `base`.
    fn exp(&self, base: Vec<f64>, v: Vec<f64>) -> PyResult<Vec<f64>> {
        if v.len() != self.spec.tangent_dim() {
            return Err(PyValueError::new_err("tangent vector length mismatch"));
        }
        let base = self.point(base)?;
        Ok(self
            .spec
            .exp(&base, &nalgebra::DVector::from_vec(v))
            .coords)
    }

    /// Logarithmic map: tangent coordinates of `y` at `base`.
    fn log(&self, base: Vec<f64>, y: Vec<f64>) -> PyResult<Vec<f64>> {
        let base = self.point(base)?;
        let y = self.point(y)?;
        Ok(self.spec.log(&base, &y).as_slice().to_vec())
    }

    fn distance(&self, a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
        Ok(self.point(a)?.distance(&self.point(b)?))
    }

    /// Parallel transport of tangent coordinates between base points.
    fn transport(&self, from: Vec<f64>, to: Vec<f64>, v: Vec<f64>) -> PyResult<Vec<f64>> {
        let from = self.point(from)?;
        let to = self.point(to)?;
        Ok(self
            .spec
            .transport(&from, &to, &nalgebra::DVector::from_vec(v))
            .as_slice()
            .to_vec())
    }

    /// Precision-weighted product of Gaussians `(mean, covariance)`.
    fn gaussian_product(
        &self,
        gaussians: Vec<(Vec<f64>, Vec<Vec<f64>>)>,
    ) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let gs: Vec<RiemannianGaussian> = gaussians
            .into_iter()
            .map(|(m, c)| self.gaussian(m, c))
            .collect::<PyResult<_>>()?;
        let fused = gaussian_product(&gs).map_err(to_py_err)?;
        Ok((fused.mean.coords.clone(), matrix_to_rows(&fused.covariance)))
    }

    /// Closed-form KL divergence between two Gaussians on this manifold.
    fn kl_divergence(
        &self,
        mean1: Vec<f64>,
        cov1: Vec<Vec<f64>>,
        mean2: Vec<f64>,
        cov2: Vec<Vec<f64>>,
    ) -> PyResult<f64> {
        let g1 = self.gaussian(mean1, cov1)?;
        let g2 = self.gaussian(mean2, cov2)?;
        skillseq::conditions::kl_gaussian(&g1, &g2).map_err(to_py_err)
    }

    fn __repr__(&self) -> String {
        format!("Manifold({})", self.blocks().join(" x "))
    }
}

/// Generate a synthetic dataset (`fig3` or `chain`) as dataset JSON.
#[pyfunction]
#[pyo3(signature = (scenario, seed=0, demos=10))]
fn generate_dataset(scenario: &str, seed: u64, demos: usize) -> PyResult<String> {
    let config = ScenarioConfig {
        scenario: scenario.to_string(),
        seed,
        demos_per_branch: demos,
        demo_noise: if scenario == "chain" { 0.004 } else { 0.01 },
        ..ScenarioConfig::default()
    };
    config.validate().map_err(to_py_err)?;
    let skills = match scenario {
        "fig3" => vec![SkillDemos {
            name: "pick".into(),
            demos: generate_branching_demos(&config).map_err(to_py_err)?,
        }],
        _ => generate_skill_chain(&config).map_err(to_py_err)?.skills,
    };
    let file = DatasetFile {
        version: SCHEMA_VERSION,
        scenario: config,
        skills,
    };
    skillseq::io::to_json(&file).map_err(to_py_err)
}

/// Sample a fresh chain task; returns (initial, goal) state JSON.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn sample_task(seed: u64) -> PyResult<(String, String)> {
    let scenario = ScenarioConfig {
        scenario: "chain".into(),
        ..ScenarioConfig::default()
    };
    let (initial, goal) = sample_chain_task(&scenario, seed);
    let wrap = |state| StateFile {
        version: SCHEMA_VERSION,
        state,
    };
    Ok((
        skillseq::io::to_json(&wrap(initial)).map_err(to_py_err)?,
        skillseq::io::to_json(&wrap(goal)).map_err(to_py_err)?,
    ))
}

/// Fit one skill from dataset JSON and return skill-model JSON.
#[pyfunction]
#[pyo3(signature = (dataset_json, skill=None, k=5, seed=0, kmeans=false))]
fn learn(
    dataset_json: &str,
    skill: Option<&str>,
    k: usize,
    seed: u64,
    kmeans: bool,
) -> PyResult<String> {
    let dataset: DatasetFile = serde_json::from_str(dataset_json).map_err(json_err)?;
    dataset.validate().map_err(to_py_err)?;
    let entry = match skill {
        Some(name) => dataset
            .skills
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| PyValueError::new_err(format!("dataset has no skill '{name}'")))?,
        None if dataset.skills.len() == 1 => &dataset.skills[0],
        None => {
            return Err(PyValueError::new_err(
                "dataset has several skills; pass skill=...",
            ))
        }
    };
    let config = Config {
        em_kmeans_init: kmeans,
        ..Config::default()
    };
    let (fitted, metadata) = learn_skill(&entry.name, &entry.demos, k, seed, 0.0, &config)
        .map_err(to_py_err)?;
    let file = SkillModelFile::from_skill(&fitted, metadata);
    skillseq::io::to_json(&file).map_err(to_py_err)
}

fn load_model(json: &str) -> PyResult<SkillModelFile> {
    let file: SkillModelFile = serde_json::from_str(json).map_err(json_err)?;
    file.validate().map_err(to_py_err)?;
    Ok(file)
}

/// Compose skill models (JSON, in order) into one joint model JSON.
#[pyfunction]
fn compose(models: Vec<String>) -> PyResult<String> {
    let skills: Vec<_> = models
        .iter()
        .map(|m| load_model(m).map(SkillModelFile::into_skill))
        .collect::<PyResult<_>>()?;
    let joint = cascade_sequence(&skills).map_err(to_py_err)?;
    let metadata = ModelMetadata {
        skill: joint.skill_names.join("+"),
        k: joint.k(),
        demo_count: 0,
        seed: 0,
        tool_version: skillseq::io::tool_version(),
        frame_objects: Default::default(),
        final_log_likelihood: None,
    };
    skillseq::io::to_json(&SkillModelFile::from_cascade(&joint, metadata)).map_err(to_py_err)
}

/// Decode the most-likely state sequence between two boundary states.
#[pyfunction]
#[pyo3(signature = (model_json, initial_json, goal_json, horizon=None))]
fn plan(
    model_json: &str,
    initial_json: &str,
    goal_json: &str,
    horizon: Option<usize>,
) -> PyResult<String> {
    let model = load_model(model_json)?;
    let joint = model.to_cascaded();
    let initial: StateFile = serde_json::from_str(initial_json).map_err(json_err)?;
    let goal: StateFile = serde_json::from_str(goal_json).map_err(json_err)?;
    let decoded = plan_sequence(&joint, &initial.state, &goal.state, horizon).map_err(to_py_err)?;
    let file = PlanFile {
        version: SCHEMA_VERSION,
        model_fingerprint: skillseq::io::fingerprint(model_json.as_bytes()),
        initial_state: initial.state,
        goal_state: goal.state,
        plan: decoded,
    };
    skillseq::io::to_json(&file).map_err(to_py_err)
}

/// Track a plan with the optimal controller; returns trajectory JSON.
#[pyfunction]
fn track(model_json: &str, plan_json: &str) -> PyResult<String> {
    let model = load_model(model_json)?;
    let joint = model.to_cascaded();
    let plan: PlanFile = serde_json::from_str(plan_json).map_err(json_err)?;
    let config = Config::default();
    let frames = frames_from_state(&joint.model.gmm.spec, &plan.initial_state);
    let globals = joint.model.global_components(&frames).map_err(to_py_err)?;
    let seq = StateSequence {
        states: plan.plan.joint.states.clone(),
        log_probability: plan.plan.joint.log_probability,
    };
    let problem = lqt::build_reference(&seq, &globals, &plan.initial_state.end_effector, &config)
        .map_err(to_py_err)?;
    let solution = lqt::solve(&problem).map_err(to_py_err)?;
    skillseq::io::to_json(&TrajectoryFile::from_solution(&solution, config.dt()))
        .map_err(to_py_err)
}

/// Closed-loop trials of a skill sequence on the chain simulator; returns
/// run-report JSON.
#[pyfunction]
#[pyo3(signature = (models, trials=20, seed=0, noise=0.0, open_loop=false, tolerance=0.05))]
fn run_trials(
    models: Vec<String>,
    trials: usize,
    seed: u64,
    noise: f64,
    open_loop: bool,
    tolerance: f64,
) -> PyResult<String> {
    let skills: Vec<_> = models
        .iter()
        .map(|m| load_model(m).map(SkillModelFile::into_skill))
        .collect::<PyResult<_>>()?;
    let joint = cascade_sequence(&skills).map_err(to_py_err)?;
    let scenario = ScenarioConfig {
        scenario: "chain".into(),
        seed,
        demo_noise: 0.004,
        ..ScenarioConfig::default()
    };
    let report = run_chain_trials(
        &joint,
        &skills,
        &scenario,
        trials,
        seed,
        noise,
        open_loop,
        tolerance,
        &Config::default(),
    )
    .map_err(to_py_err)?;
    skillseq::io::to_json(&report).map_err(to_py_err)
}

#[pymodule]
fn skillseq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Manifold>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(sample_task, m)?)?;
    m.add_function(wrap_pyfunction!(learn, m)?)?;
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(track, m)?)?;
    m.add_function(wrap_pyfunction!(run_trials, m)?)?;
    Ok(())
}
