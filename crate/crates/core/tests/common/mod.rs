//! Shared fixtures and independent oracles for the integration suites.
//!
//! The oracles here deliberately avoid the library's inference code paths:
//! emissions, duration densities and path scores are recomputed from
//! scratch so that dynamic-programming results can be checked against
//! exhaustive enumeration.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skillseq::conditions::{ConditionModels, GLOBAL_FRAME};
use skillseq::manifold::{ManifoldPoint, ManifoldSpec, RiemannianGaussian};
use skillseq::cascade::Skill;
use skillseq::tpgmm::{Component, Frame, FrameEntry, TPGMM};
use skillseq::tphsmm::{DurationModel, TPHSMM};
use std::collections::{BTreeMap, BTreeSet};

// ─── hand-rolled densities (independent of the library) ─────────────────

pub fn manual_log_gauss(x: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> f64 {
    let d = x.len();
    let diff = DVector::from_iterator(d, x.iter().zip(mean).map(|(a, b)| a - b));
    let inv = cov.clone().try_inverse().expect("invertible");
    let det = cov.determinant();
    let maha = diff.dot(&(&inv * &diff));
    -0.5 * (maha + (d as f64) * (2.0 * std::f64::consts::PI).ln() + det.ln())
}

pub fn manual_log_duration(d: usize, mean: f64, std: f64) -> f64 {
    let z = (d as f64 - mean) / std;
    -0.5 * z * z - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

// ─── duration-explicit path enumeration ─────────────────────────────────

#[derive(Debug, Clone)]
pub struct OracleModel {
    pub k: usize,
    pub initial: Vec<f64>,
    pub transitions: Vec<Vec<f64>>,
    pub durations: Vec<(f64, f64)>,
    pub finals: BTreeSet<usize>,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl OracleModel {
    pub fn caps(&self) -> Vec<usize> {
        self.durations
            .iter()
            .map(|(m, s)| (m + 3.0 * s).ceil().max(1.0) as usize)
            .collect()
    }
}

/// Enumerate every duration-explicit segmentation of length `t_max`.
/// The first segment may take any duration; later segments respect the
/// model's duration cap when `capped` is set.
pub fn enumerate_paths(
    model: &OracleModel,
    t_max: usize,
    capped: bool,
    visit: &mut impl FnMut(&[(usize, usize)]),
) {
    let caps = model.caps();
    let mut stack: Vec<(usize, usize)> = Vec::new();
    fn recurse(
        model: &OracleModel,
        caps: &[usize],
        t_max: usize,
        capped: bool,
        used: usize,
        stack: &mut Vec<(usize, usize)>,
        visit: &mut impl FnMut(&[(usize, usize)]),
    ) {
        if used == t_max {
            visit(stack);
            return;
        }
        let remaining = t_max - used;
        if stack.is_empty() {
            for s in 0..model.k {
                if model.initial[s] <= 0.0 {
                    continue;
                }
                for d in 1..=remaining {
                    stack.push((s, d));
                    recurse(model, caps, t_max, capped, used + d, stack, visit);
                    stack.pop();
                }
            }
        } else {
            let prev = stack.last().unwrap().0;
            for s in 0..model.k {
                if s == prev || model.transitions[prev][s] <= 0.0 {
                    continue;
                }
                let d_hi = if capped { remaining.min(caps[s]) } else { remaining };
                for d in 1..=d_hi {
                    stack.push((s, d));
                    recurse(model, caps, t_max, capped, used + d, stack, visit);
                    stack.pop();
                }
            }
        }
    }
    recurse(model, &caps, t_max, capped, 0, &mut stack, visit);
}

/// Joint log-score of a segmentation given boundary observations.
pub fn path_score(model: &OracleModel, path: &[(usize, usize)], first_obs: &[f64], last_obs: &[f64]) -> f64 {
    let (s0, d0) = path[0];
    let mut score = model.initial[s0].ln()
        + manual_log_duration(d0, model.durations[s0].0, model.durations[s0].1)
        + manual_log_gauss(first_obs, &model.means[s0], &model.covs[s0]);
    for w in path.windows(2) {
        let (prev, _) = w[0];
        let (s, d) = w[1];
        score += model.transitions[prev][s].ln()
            + manual_log_duration(d, model.durations[s].0, model.durations[s].1);
    }
    let last = path.last().unwrap().0;
    score + manual_log_gauss(last_obs, &model.means[last], &model.covs[last])
}

/// Result of the exhaustive search: the maximal score and every path whose
/// score sits within `1e-9` of it.
pub struct BruteForceViterbi {
    pub score: f64,
    pub optimal_paths: Vec<Vec<(usize, usize)>>,
}

impl BruteForceViterbi {
    pub fn states(&self, idx: usize) -> Vec<usize> {
        expand(&self.optimal_paths[idx])
    }
}

/// Exhaustive max over all duration-explicit paths ending in a final state.
pub fn brute_force_viterbi(
    model: &OracleModel,
    first_obs: &[f64],
    last_obs: &[f64],
    t_max: usize,
    capped: bool,
) -> Option<BruteForceViterbi> {
    let mut max = f64::NEG_INFINITY;
    enumerate_paths(model, t_max, capped, &mut |path| {
        if !model.finals.contains(&path.last().unwrap().0) {
            return;
        }
        let score = path_score(model, path, first_obs, last_obs);
        if score > max {
            max = score;
        }
    });
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut optimal_paths = Vec::new();
    enumerate_paths(model, t_max, capped, &mut |path| {
        if !model.finals.contains(&path.last().unwrap().0) {
            return;
        }
        if path_score(model, path, first_obs, last_obs) >= max - 1e-9 {
            optimal_paths.push(path.to_vec());
        }
    });
    Some(BruteForceViterbi {
        score: max,
        optimal_paths,
    })
}

/// Log path-sum mass of runs of state `k` ending exactly at each step, with
/// emissions from an observed prefix; mirrors the forward variable.
pub fn brute_force_forward(
    model: &OracleModel,
    observations: &[Vec<f64>],
    t_max: usize,
) -> DMatrix<f64> {
    let mut sums: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); model.k]; t_max];
    // enumerate prefixes: any path whose last run ends at t
    for t in 1..=t_max {
        enumerate_paths(model, t, false, &mut |path| {
            let mut log_mass = {
                let (s0, d0) = path[0];
                model.initial[s0].ln()
                    + manual_log_duration(d0, model.durations[s0].0, model.durations[s0].1)
            };
            for w in path.windows(2) {
                let (prev, _) = w[0];
                let (s, d) = w[1];
                log_mass += model.transitions[prev][s].ln()
                    + manual_log_duration(d, model.durations[s].0, model.durations[s].1);
            }
            // emissions along the whole prefix
            let mut step = 0usize;
            for &(s, d) in path.iter() {
                for _ in 0..d {
                    if step < observations.len() {
                        log_mass +=
                            manual_log_gauss(&observations[step], &model.means[s], &model.covs[s]);
                    }
                    step += 1;
                }
            }
            let last = path.last().unwrap().0;
            sums[t - 1][last].push(log_mass);
        });
    }
    let mut alpha = DMatrix::from_element(t_max, model.k, f64::NEG_INFINITY);
    for t in 0..t_max {
        for k in 0..model.k {
            let terms = &sums[t][k];
            if terms.is_empty() {
                continue;
            }
            let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            alpha[(t, k)] = m + terms.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        }
    }
    alpha
}

fn expand(path: &[(usize, usize)]) -> Vec<usize> {
    let mut out = Vec::new();
    for &(s, d) in path {
        out.extend(std::iter::repeat_n(s, d));
    }
    out
}

// ─── random models over the oracle structure ────────────────────────────

pub struct RandomModel {
    pub oracle: OracleModel,
    pub hsmm: TPHSMM,
    pub frames: Vec<Frame>,
    pub first_obs: Vec<f64>,
    pub last_obs: Vec<f64>,
}

pub fn random_model(seed: u64) -> RandomModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=4usize);
    let dim = rng.random_range(1..=2usize);
    let spec = ManifoldSpec::euclidean(dim);

    let n_finals = rng.random_range(1..=k);
    let mut final_set: BTreeSet<usize> = BTreeSet::new();
    while final_set.len() < n_finals {
        final_set.insert(rng.random_range(0..k));
    }

    let mut transitions = vec![vec![0.0; k]; k];
    #[allow(clippy::needless_range_loop)]
    for h in 0..k {
        let exit = if final_set.contains(&h) {
            rng.random_range(0.2..0.5)
        } else {
            0.0
        };
        if k > 1 {
            let weights: Vec<f64> = (0..k)
                .map(|j| if j == h { 0.0 } else { rng.random_range(0.1..1.0) })
                .collect();
            let total: f64 = weights.iter().sum();
            for j in 0..k {
                transitions[h][j] = weights[j] / total * (1.0 - exit);
            }
        }
    }

    let mut initial = vec![0.0; k];
    let n_init = rng.random_range(1..=k);
    for _ in 0..n_init {
        initial[rng.random_range(0..k)] += rng.random_range(0.2..1.0);
    }
    let total: f64 = initial.iter().sum();
    for p in &mut initial {
        *p /= total;
    }

    let durations: Vec<(f64, f64)> = (0..k)
        .map(|_| (rng.random_range(1.5..4.5), rng.random_range(0.6..1.5)))
        .collect();

    let mut means = Vec::new();
    let mut covs = Vec::new();
    for _ in 0..k {
        means.push((0..dim).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>());
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.4..0.4));
        covs.push(&a * a.transpose() + DMatrix::identity(dim, dim) * rng.random_range(0.1..0.4));
    }

    let oracle = OracleModel {
        k,
        initial: initial.clone(),
        transitions: transitions.clone(),
        durations: durations.clone(),
        finals: final_set.clone(),
        means: means.clone(),
        covs: covs.clone(),
    };

    let components = (0..k)
        .map(|j| Component {
            entries: vec![FrameEntry {
                frame: GLOBAL_FRAME.into(),
                gaussian: RiemannianGaussian::new(
                    spec.point(means[j].clone()).unwrap(),
                    covs[j].clone(),
                )
                .unwrap(),
            }],
        })
        .collect();
    let mut trans = DMatrix::zeros(k, k);
    for h in 0..k {
        for j in 0..k {
            trans[(h, j)] = transitions[h][j];
        }
    }
    let hsmm = TPHSMM {
        gmm: TPGMM {
            spec: spec.clone(),
            frame_ids: vec![GLOBAL_FRAME.into()],
            priors: vec![1.0 / k as f64; k],
            components,
        },
        transitions: trans,
        durations: durations
            .iter()
            .map(|(m, s)| DurationModel { mean: *m, std: *s })
            .collect(),
        initial,
        finals: final_set.iter().map(|f| (*f, 0.3)).collect(),
        avg_demo_len: 8.0,
    };
    hsmm.validate().expect("random model valid");

    let frames = vec![Frame::identity(&spec, GLOBAL_FRAME, GLOBAL_FRAME)];
    let first_obs: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let last_obs: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    RandomModel {
        oracle,
        hsmm,
        frames,
        first_obs,
        last_obs,
    }
}

pub fn point(spec: &ManifoldSpec, coords: &[f64]) -> ManifoldPoint {
    spec.point(coords.to_vec()).unwrap()
}

// ─── mock skills with prescribed sizes ───────────────────────────────────

/// Synthetic skill on a 1-D manifold with `k` components, a transition
/// spine and `n_finals` terminal branches; used for sizing checks.
pub fn mock_skill(name: &str, k: usize, n_finals: usize) -> Skill {
    assert!(n_finals < k);
    let spec = ManifoldSpec::euclidean(1);
    let components = (0..k)
        .map(|j| Component {
            entries: vec![FrameEntry {
                frame: GLOBAL_FRAME.into(),
                gaussian: RiemannianGaussian::isotropic(spec.point(vec![j as f64]).unwrap(), 0.05),
            }],
        })
        .collect();
    let spine_end = k - n_finals - 1;
    let mut transitions: DMatrix<f64> = DMatrix::zeros(k, k);
    for j in 0..spine_end {
        transitions[(j, j + 1)] = 1.0;
    }
    for f in 0..n_finals {
        transitions[(spine_end, k - n_finals + f)] = 1.0 / n_finals as f64;
    }
    let mut initial = vec![0.0; k];
    initial[0] = 1.0;
    let mut finals = BTreeMap::new();
    let mut final_condition = BTreeMap::new();
    let mut effect = BTreeMap::new();
    for f in 0..n_finals {
        let idx = k - n_finals + f;
        finals.insert(idx, 1.0);
        final_condition.insert(
            idx,
            BTreeMap::from([(
                GLOBAL_FRAME.to_string(),
                RiemannianGaussian::isotropic(
                    spec.point(vec![idx as f64]).unwrap(),
                    0.02 + 0.01 * f as f64,
                ),
            )]),
        );
        effect.insert(
            idx,
            BTreeMap::from([(
                skillseq::conditions::END_EFFECTOR.to_string(),
                vec![FrameEntry {
                    frame: GLOBAL_FRAME.to_string(),
                    gaussian: RiemannianGaussian::isotropic(
                        spec.point(vec![idx as f64]).unwrap(),
                        0.02,
                    ),
                }],
            )]),
        );
    }
    let precondition = BTreeMap::from([(
        0usize,
        BTreeMap::from([(
            GLOBAL_FRAME.to_string(),
            RiemannianGaussian::isotropic(spec.point(vec![0.0]).unwrap(), 0.02),
        )]),
    )]);
    Skill {
        name: name.into(),
        model: TPHSMM {
            gmm: TPGMM {
                spec,
                frame_ids: vec![GLOBAL_FRAME.into()],
                priors: vec![1.0 / k as f64; k],
                components,
            },
            transitions,
            durations: vec![DurationModel { mean: 5.0, std: 1.0 }; k],
            initial,
            finals,
            avg_demo_len: 5.0 * k as f64,
        },
        conditions: ConditionModels {
            precondition,
            final_condition,
            effect,
            initial_frames: vec![GLOBAL_FRAME.into()],
            final_frames: vec![GLOBAL_FRAME.into()],
            manipulated: BTreeSet::new(),
            warnings: Vec::new(),
        },
    }
}
