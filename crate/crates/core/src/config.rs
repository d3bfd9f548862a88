//! Numerical tolerances and controller defaults, shared by the CLI and the
//! library entry points. All values live in one place so runs are
//! reproducible from a single config file.

use serde::{Deserialize, Serialize};

/// Eigenvalue floor added to covariance diagonals (see
/// [`crate::manifold::RiemannianGaussian::regularized`]).
pub const COV_FLOOR: f64 = 1e-8;

/// Lower bound on duration standard deviations, in time steps.
pub const DURATION_SIGMA_FLOOR: f64 = 0.5;

/// Convergence tolerance for manifold fixed-point iterations.
pub const FIXED_POINT_TOL: f64 = 1e-9;

/// Iteration budget for manifold fixed-point iterations.
pub const FIXED_POINT_MAX_ITER: usize = 100;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Diagonal control weight r in R = r·I for the tracking controller.
    pub control_weight: f64,
    /// Number of linearization passes for the tracking controller.
    pub lqt_passes: usize,
    /// Multiplier on the state-error weight at the final step.
    pub terminal_weight: f64,
    /// EM stops when the log-likelihood improves by less than this.
    pub em_tolerance: f64,
    pub em_max_iterations: usize,
    /// Use k-means instead of time-binned EM initialization.
    pub em_kmeans_init: bool,
    /// Demonstration sample rate in Hz; sets the controller time step.
    pub sample_rate: f64,
    /// Objects within this distance of a closed gripper move rigidly with it.
    pub grasp_radius: f64,
    /// Gripper channel values above this count as closed.
    pub gripper_threshold: f64,
    /// Actuation noise, as a fraction of the perception noise scale.
    pub actuation_noise_ratio: f64,
    /// Terminal pose residual (in units of reference σ) accepted by tracking.
    pub tracking_sigma_tolerance: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            control_weight: 1e-2,
            lqt_passes: 1,
            terminal_weight: 1.0,
            em_tolerance: 1e-6,
            em_max_iterations: 200,
            em_kmeans_init: false,
            sample_rate: 50.0,
            grasp_radius: 0.05,
            gripper_threshold: 0.5,
            actuation_noise_ratio: 1.0,
            tracking_sigma_tolerance: 3.0,
        }
    }
}

impl Config {
    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }
}
