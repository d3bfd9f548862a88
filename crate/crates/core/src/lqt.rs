//! Linear-quadratic tracking of a decoded state sequence on the manifold.
//!
//! The controller assumes double-integrator dynamics in the tangent space of
//! the current robot state,
//!
//! ```text
//! A = | I  IΔt |     B = |  0  |
//!     | 0   I  |         | IΔt |
//! ```
//!
//! and minimizes the quadratic state-error cost `Σ_t Log_{x_t}(μ̂_{k_t})ᵀ
//! Ŵ_t Log_{x_t}(μ̂_{k_t}) + u_tᵀ R u_t`, where `(μ̂_{k_t}, Σ̂_{k_t})` is the
//! fused global Gaussian of the decoded component at step `t` and `Ŵ_t` its
//! parallel-transported precision. A backward Riccati-style recursion
//! produces time-varying feedback gains and feedforward terms; every
//! quantity is parallel-transported between the tangent spaces it is used
//! in, both during the recursion and when the gains are replayed along the
//! rollout. Integration goes through the Exp map, so rolled-out
//! orientations stay on S³ by construction.
//!
//! The recursion linearizes about the rollout of the previous pass (the
//! constant start pose on the first pass). One pass is exact on Euclidean
//! manifolds; more passes tighten large orientation excursions.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::manifold::gaussian::invert_spd;
use crate::manifold::{ManifoldPoint, RiemannianGaussian};
use crate::tphsmm::StateSequence;
use nalgebra::{DMatrix, DVector};

/// Tracking task: per-step reference Gaussians (by component index), the
/// control weight and the initial pose. The initial velocity is zero.
#[derive(Debug, Clone)]
pub struct TrackingProblem {
    /// Distinct reference Gaussians; precisions are cached per component.
    pub components: Vec<RiemannianGaussian>,
    /// Component index per time step; length is the horizon T.
    pub reference: Vec<usize>,
    /// Control weight R (SPD, tangent dim × tangent dim).
    pub control_weight: DMatrix<f64>,
    pub dt: f64,
    pub start: ManifoldPoint,
    /// Multiplier on the state-error weight of the final step.
    pub terminal_weight: f64,
    /// Linearization passes; the first pass anchors at the start pose.
    pub passes: usize,
}

impl TrackingProblem {
    pub fn horizon(&self) -> usize {
        self.reference.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.start.spec.tangent_dim();
        if self.control_weight.nrows() != d || self.control_weight.ncols() != d {
            return Err(Error::invalid_input(format!(
                "control weight is {}x{}, tangent dimension is {d}",
                self.control_weight.nrows(),
                self.control_weight.ncols()
            )));
        }
        if nalgebra::Cholesky::new(self.control_weight.clone()).is_none() {
            return Err(Error::NotPositiveDefinite("control weight R".into()));
        }
        if self.dt <= 0.0 {
            return Err(Error::invalid_input("time step must be positive"));
        }
        if self.reference.is_empty() {
            return Err(Error::invalid_input("empty reference"));
        }
        for &k in &self.reference {
            if k >= self.components.len() {
                return Err(Error::MissingEntry(format!("reference component {k}")));
            }
        }
        for c in &self.components {
            if c.spec() != &self.start.spec {
                return Err(Error::invalid_input(
                    "reference component on a different manifold",
                ));
            }
        }
        Ok(())
    }
}

/// Per-step controller: `u = feedforward + feedback · [Log_x̄(x); v]`,
/// everything expressed in the tangent space at `anchor`.
#[derive(Debug, Clone)]
pub struct Gain {
    pub anchor: ManifoldPoint,
    pub feedback: DMatrix<f64>,
    pub feedforward: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct TrackingSolution {
    pub states: Vec<ManifoldPoint>,
    /// Velocities in the tangent space of the matching state.
    pub velocities: Vec<DVector<f64>>,
    /// Controls in the tangent space of the matching state; length T−1.
    pub controls: Vec<DVector<f64>>,
    pub gains: Vec<Gain>,
    pub step_costs: Vec<f64>,
    pub total_cost: f64,
}

/// Per-step reference list from a decoded state sequence and the fused
/// global components. References change exactly where the decoded state
/// changes; the reference velocity is zero.
pub fn build_reference(
    seq: &StateSequence,
    globals: &[RiemannianGaussian],
    start: &ManifoldPoint,
    config: &Config,
) -> Result<TrackingProblem> {
    for &k in &seq.states {
        if k >= globals.len() {
            return Err(Error::MissingEntry(format!(
                "decoded state {k} has no global component"
            )));
        }
    }
    let d = start.spec.tangent_dim();
    let problem = TrackingProblem {
        components: globals.to_vec(),
        reference: seq.states.clone(),
        control_weight: DMatrix::identity(d, d) * config.control_weight,
        dt: config.dt(),
        start: start.clone(),
        terminal_weight: config.terminal_weight,
        passes: config.lqt_passes.max(1),
    };
    problem.validate()?;
    Ok(problem)
}

/// Solve the tracking problem: backward recursion for the gains, forward
/// rollout through the Exp map.
pub fn solve(problem: &TrackingProblem) -> Result<TrackingSolution> {
    problem.validate()?;
    let spec = problem.start.spec.clone();
    let d = spec.tangent_dim();
    let n = 2 * d;
    let t_max = problem.horizon();
    let dt = problem.dt;

    // dynamics in any single tangent space
    let mut a = DMatrix::identity(n, n);
    let mut b = DMatrix::zeros(n, d);
    for i in 0..d {
        a[(i, d + i)] = dt;
        b[(d + i, i)] = dt;
    }

    let precisions: Vec<DMatrix<f64>> = problem
        .components
        .iter()
        .map(|g| invert_spd(&g.covariance))
        .collect::<Result<_>>()?;

    let mut anchors: Vec<ManifoldPoint> = vec![problem.start.clone(); t_max];
    let mut solution = None;
    for _pass in 0..problem.passes {
        let gains = backward_pass(problem, &anchors, &precisions, &a, &b)?;
        let rolled = rollout_gains(problem, &gains)?;
        anchors = rolled.0.clone();
        solution = Some((rolled, gains));
    }
    let ((states, velocities, controls), gains) = solution.expect("at least one pass");

    let (step_costs, total_cost) = cost_along(problem, &states, &controls)?;
    if !total_cost.is_finite() {
        let bad = step_costs
            .iter()
            .position(|c| !c.is_finite())
            .unwrap_or(t_max - 1);
        return Err(Error::Numerical(format!(
            "tracking cost diverged at step {bad}"
        )));
    }
    Ok(TrackingSolution {
        states,
        velocities,
        controls,
        gains,
        step_costs,
        total_cost,
    })
}

/// State-error weight of step `t` expressed in the tangent space at `at`.
fn weight_at(
    problem: &TrackingProblem,
    precisions: &[DMatrix<f64>],
    t: usize,
    at: &ManifoldPoint,
) -> DMatrix<f64> {
    let spec = &problem.start.spec;
    let k = problem.reference[t];
    let mu = &problem.components[k].mean;
    let mut w = spec.transport_covariance(mu, at, &precisions[k]);
    if t + 1 == problem.horizon() {
        w *= problem.terminal_weight;
    }
    w
}

fn backward_pass(
    problem: &TrackingProblem,
    anchors: &[ManifoldPoint],
    precisions: &[DMatrix<f64>],
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<Vec<Gain>> {
    let spec = problem.start.spec.clone();
    let d = spec.tangent_dim();
    let n = 2 * d;
    let t_max = problem.horizon();

    let q_block = |t: usize| -> (DMatrix<f64>, DVector<f64>) {
        // state-error weight on the position part only; zero reference velocity
        let w = weight_at(problem, precisions, t, &anchors[t]);
        let mut q = DMatrix::zeros(n, n);
        q.view_mut((0, 0), (d, d)).copy_from(&w);
        let mu = &problem.components[problem.reference[t]].mean;
        let log_mu = spec.log(&anchors[t], mu);
        let mut target = DVector::zeros(n);
        target.rows_mut(0, d).copy_from(&log_mu);
        let lin = &q * target;
        (q, lin)
    };

    let (mut p_next, mut q_next) = q_block(t_max - 1);
    let mut gains: Vec<Gain> = Vec::with_capacity(t_max.saturating_sub(1));
    for t in (0..t_max - 1).rev() {
        // pull the value function back through the transport to step t's space
        let tr = spec.transport_matrix(&anchors[t], &anchors[t + 1]);
        let mut big_t = DMatrix::zeros(n, n);
        big_t.view_mut((0, 0), (d, d)).copy_from(&tr);
        big_t.view_mut((d, d), (d, d)).copy_from(&tr);
        let p_here = big_t.transpose() * &p_next * &big_t;
        let q_here = big_t.transpose() * &q_next;

        let h = &problem.control_weight + b.transpose() * &p_here * b;
        let h_inv = invert_spd(&h)?;
        let feedback = -(&h_inv * b.transpose() * &p_here * a);
        let feedforward = &h_inv * b.transpose() * &q_here;

        let (q_t, lin_t) = q_block(t);
        let closed = a + b * &feedback;
        let mut p_t = &q_t + a.transpose() * &p_here * &closed;
        p_t = 0.5 * (&p_t + p_t.transpose());
        let q_vec = lin_t + closed.transpose() * q_here;

        gains.push(Gain {
            anchor: anchors[t].clone(),
            feedback,
            feedforward,
        });
        p_next = p_t;
        q_next = q_vec;
    }
    gains.reverse();
    Ok(gains)
}

type Rollout = (Vec<ManifoldPoint>, Vec<DVector<f64>>, Vec<DVector<f64>>);

fn rollout_gains(problem: &TrackingProblem, gains: &[Gain]) -> Result<Rollout> {
    let spec = problem.start.spec.clone();
    let d = spec.tangent_dim();
    let t_max = problem.horizon();
    let dt = problem.dt;

    let mut states = Vec::with_capacity(t_max);
    let mut velocities = Vec::with_capacity(t_max);
    let mut controls = Vec::with_capacity(t_max - 1);
    let mut x = problem.start.clone();
    let mut v: DVector<f64> = DVector::zeros(d);
    states.push(x.clone());
    velocities.push(v.clone());
    for gain in gains.iter().take(t_max - 1) {
        // local state in the gain's anchor space
        let mut z = DVector::zeros(2 * d);
        z.rows_mut(0, d).copy_from(&spec.log(&gain.anchor, &x));
        z.rows_mut(d, d)
            .copy_from(&spec.transport(&x, &gain.anchor, &v));
        let u_anchor = &gain.feedforward + &gain.feedback * z;
        let u = spec.transport(&gain.anchor, &x, &u_anchor);

        // dynamics in the tangent space of the current state
        let next = spec.exp(&x, &(&v * dt));
        let v_next = spec.transport(&x, &next, &(&v + &u * dt));
        controls.push(u);
        x = next;
        v = v_next;
        states.push(x.clone());
        velocities.push(v.clone());
    }
    Ok((states, velocities, controls))
}

/// Replay a fixed open-loop control sequence through the dynamics.
pub fn rollout_controls(
    problem: &TrackingProblem,
    controls: &[DVector<f64>],
) -> Result<Vec<ManifoldPoint>> {
    let spec = problem.start.spec.clone();
    let d = spec.tangent_dim();
    let dt = problem.dt;
    let mut states = vec![problem.start.clone()];
    let mut x = problem.start.clone();
    let mut v: DVector<f64> = DVector::zeros(d);
    for u in controls {
        let next = spec.exp(&x, &(&v * dt));
        let v_next = spec.transport(&x, &next, &(&v + u * dt));
        x = next;
        v = v_next;
        states.push(x.clone());
    }
    Ok(states)
}

fn cost_along(
    problem: &TrackingProblem,
    states: &[ManifoldPoint],
    controls: &[DVector<f64>],
) -> Result<(Vec<f64>, f64)> {
    let spec = problem.start.spec.clone();
    let precisions: Vec<DMatrix<f64>> = problem
        .components
        .iter()
        .map(|g| invert_spd(&g.covariance))
        .collect::<Result<_>>()?;
    let mut step_costs = Vec::with_capacity(states.len());
    for (t, x) in states.iter().enumerate() {
        let w = weight_at(problem, &precisions, t, x);
        let e = spec.log(x, &problem.components[problem.reference[t]].mean);
        let mut c = e.dot(&(&w * &e));
        if let Some(u) = controls.get(t) {
            c += u.dot(&(&problem.control_weight * u));
        }
        step_costs.push(c);
    }
    let total = step_costs.iter().sum();
    Ok((step_costs, total))
}

/// Evaluate the tracking cost of a solution rolled out open loop.
pub fn rollout_cost(problem: &TrackingProblem, solution: &TrackingSolution) -> Result<f64> {
    Ok(cost_along(problem, &solution.states, &solution.controls)?.1)
}

/// Cost of an arbitrary open-loop control sequence, for perturbation probes.
pub fn open_loop_cost(problem: &TrackingProblem, controls: &[DVector<f64>]) -> Result<f64> {
    let states = rollout_controls(problem, controls)?;
    Ok(cost_along(problem, &states, controls)?.1)
}
