//! Task-parameterized Gaussian mixture models.
//!
//! Demonstrations are observed from several object-attached coordinate
//! frames. One mixture is fitted jointly over all frames: the mixing
//! coefficients and the responsibility matrix are shared, so component `k`
//! in frame `p` corresponds to component `k` in every other frame. Given a
//! concrete frame instantiation the per-frame components are mapped to
//! global coordinates and fused by a precision-weighted Gaussian product.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::manifold::gaussian::{regularize_covariance, square_matrix};
use crate::manifold::{
    gaussian_product, weighted_karcher_mean, BlockSpec, ManifoldPoint, ManifoldSpec,
    RiemannianGaussian,
};
use crate::workspace::SystemState;
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Action of a frame on one manifold block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BlockTransform {
    /// `x ↦ R x + t` on a Euclidean block.
    Euclidean {
        #[serde(with = "square_matrix")]
        rotation: DMatrix<f64>,
        translation: Vec<f64>,
    },
    /// `q ↦ f ⊗ q` on a quaternion block.
    Quaternion { rotation: [f64; 4] },
    /// Block untouched (scalar channels such as the gripper).
    Identity,
}

/// A task parameter: a rigid transform attaching a coordinate system to an
/// object of interest. Frames are static within one demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// Frame id, unique within a skill (by convention the object id).
    pub id: String,
    /// Object the frame is attached to ("global" for the world frame).
    pub object: String,
    pub blocks: Vec<BlockTransform>,
}

impl Frame {
    pub fn identity(spec: &ManifoldSpec, id: impl Into<String>, object: impl Into<String>) -> Self {
        Frame {
            id: id.into(),
            object: object.into(),
            blocks: spec
                .blocks
                .iter()
                .map(|b| match b {
                    BlockSpec::Euclidean(n) => BlockTransform::Euclidean {
                        rotation: DMatrix::identity(*n, *n),
                        translation: vec![0.0; *n],
                    },
                    BlockSpec::UnitQuaternion => BlockTransform::Quaternion {
                        rotation: crate::manifold::quaternion::identity(),
                    },
                })
                .collect(),
        }
    }

    pub fn validate(&self, spec: &ManifoldSpec) -> Result<()> {
        if self.blocks.len() != spec.blocks.len() {
            return Err(Error::invalid_model(format!(
                "frame '{}' has {} block transforms, manifold has {} blocks",
                self.id,
                self.blocks.len(),
                spec.blocks.len()
            )));
        }
        for (bt, bs) in self.blocks.iter().zip(&spec.blocks) {
            match (bt, bs) {
                (BlockTransform::Euclidean { rotation, translation }, BlockSpec::Euclidean(n)) => {
                    if rotation.nrows() != *n || translation.len() != *n {
                        return Err(Error::invalid_model(format!(
                            "frame '{}': transform size does not match Euclidean({n})",
                            self.id
                        )));
                    }
                    let ortho = (rotation * rotation.transpose() - DMatrix::identity(*n, *n))
                        .abs()
                        .max();
                    if ortho > 1e-9 {
                        return Err(Error::invalid_model(format!(
                            "frame '{}': rotation not orthonormal (residual {ortho:.2e})",
                            self.id
                        )));
                    }
                }
                (BlockTransform::Quaternion { rotation }, BlockSpec::UnitQuaternion) => {
                    let n = crate::manifold::quaternion::norm(rotation);
                    if (n - 1.0).abs() > 1e-9 {
                        return Err(Error::invalid_model(format!(
                            "frame '{}': quaternion norm {n}",
                            self.id
                        )));
                    }
                }
                (BlockTransform::Identity, _) => {}
                _ => {
                    return Err(Error::invalid_model(format!(
                        "frame '{}': block transform kind does not match manifold block",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Map a frame-local point to global coordinates.
    pub fn apply(&self, p: &ManifoldPoint) -> ManifoldPoint {
        self.map_point(p, false)
    }

    /// Map a global point into this frame.
    pub fn apply_inverse(&self, p: &ManifoldPoint) -> ManifoldPoint {
        self.map_point(p, true)
    }

    fn map_point(&self, p: &ManifoldPoint, inverse: bool) -> ManifoldPoint {
        let spec = &p.spec;
        let mut coords = p.coords.clone();
        let offsets = spec.ambient_offsets();
        for ((bt, bs), &o) in self.blocks.iter().zip(&spec.blocks).zip(&offsets) {
            match (bt, bs) {
                (BlockTransform::Euclidean { rotation, translation }, BlockSpec::Euclidean(n)) => {
                    let x = DVector::from_column_slice(&p.coords[o..o + n]);
                    let t = DVector::from_column_slice(translation);
                    let y = if inverse {
                        rotation.transpose() * (x - t)
                    } else {
                        rotation * x + t
                    };
                    coords[o..o + n].copy_from_slice(y.as_slice());
                }
                (BlockTransform::Quaternion { rotation }, BlockSpec::UnitQuaternion) => {
                    use crate::manifold::quaternion as quat;
                    let q = [p.coords[o], p.coords[o + 1], p.coords[o + 2], p.coords[o + 3]];
                    let out = if inverse {
                        quat::mul(&quat::conjugate(rotation), &q)
                    } else {
                        quat::mul(rotation, &q)
                    };
                    let out = quat::canonicalize(&quat::normalize(&out));
                    coords[o..o + 4].copy_from_slice(&out);
                }
                (BlockTransform::Identity, _) => {}
                _ => unreachable!("validated frame"),
            }
        }
        ManifoldPoint {
            spec: spec.clone(),
            coords,
        }
    }

    /// The linear action of this frame on tangent coordinates: the rotation
    /// on Euclidean blocks, identity on quaternion blocks (body-frame
    /// rotation coordinates are untouched by a left composition).
    pub fn tangent_matrix(&self, spec: &ManifoldSpec) -> DMatrix<f64> {
        let d = spec.tangent_dim();
        let mut a = DMatrix::identity(d, d);
        let offsets = spec.tangent_offsets();
        for ((bt, bs), &o) in self.blocks.iter().zip(&spec.blocks).zip(&offsets) {
            if let (BlockTransform::Euclidean { rotation, .. }, BlockSpec::Euclidean(n)) = (bt, bs)
            {
                for i in 0..*n {
                    for j in 0..*n {
                        a[(o + i, o + j)] = rotation[(i, j)];
                    }
                }
            }
        }
        a
    }

    /// Affine-map a local Gaussian to global coordinates:
    /// mean via [`Frame::apply`], covariance via `A Σ Aᵀ`.
    pub fn transform_gaussian(&self, g: &RiemannianGaussian) -> RiemannianGaussian {
        let a = self.tangent_matrix(g.spec());
        RiemannianGaussian {
            mean: self.apply(&g.mean),
            covariance: &a * &g.covariance * a.transpose(),
        }
    }
}

/// One recorded demonstration of a skill.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Demonstration {
    pub skill: String,
    pub id: String,
    /// Samples per second at recording time.
    pub sample_rate: f64,
    pub points: Vec<ManifoldPoint>,
    /// Task parameters, static for the whole demonstration.
    pub frames: Vec<Frame>,
    /// System state (objects + end-effector) when the demonstration started.
    pub initial_state: Option<SystemState>,
    /// System state when the demonstration ended.
    pub final_state: Option<SystemState>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn spec(&self) -> &ManifoldSpec {
        &self.points[0].spec
    }

    pub fn frame(&self, id: &str) -> Result<&Frame> {
        self.frames
            .iter()
            .find(|f| f.id == id)
            .ok_or_else(|| Error::MissingEntry(format!("frame '{id}' in demo '{}'", self.id)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::invalid_model(format!(
                "demo '{}' has {} samples, need at least 2",
                self.id,
                self.points.len()
            )));
        }
        let spec = self.spec().clone();
        for p in &self.points {
            if p.spec != spec {
                return Err(Error::invalid_model(format!(
                    "demo '{}' mixes manifolds",
                    self.id
                )));
            }
            p.validate()?;
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.frames {
            f.validate(&spec)?;
            if !seen.insert(f.id.clone()) {
                return Err(Error::invalid_model(format!(
                    "demo '{}' has duplicate frame id '{}'",
                    self.id, f.id
                )));
            }
        }
        if self.sample_rate <= 0.0 {
            return Err(Error::invalid_model("sample rate must be positive"));
        }
        Ok(())
    }
}

/// Transform a demonstration into one of its frames.
pub fn to_frame(demo: &Demonstration, frame: &Frame) -> Vec<ManifoldPoint> {
    demo.points.iter().map(|p| frame.apply_inverse(p)).collect()
}

/// Inverse of [`to_frame`].
pub fn from_frame(local: &[ManifoldPoint], frame: &Frame) -> Vec<ManifoldPoint> {
    local.iter().map(|p| frame.apply(p)).collect()
}

/// One per-frame Gaussian of a mixture component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame: String,
    pub gaussian: RiemannianGaussian,
}

/// One mixture component: its Gaussian as seen from every frame.
///
/// Fitted models carry exactly one entry per frame. Composed models may
/// carry several entries for the same frame (one per re-anchored source
/// frame); the global fusion multiplies all of them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Component {
    pub entries: Vec<FrameEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TPGMM {
    pub spec: ManifoldSpec,
    /// The frame set P, sorted for determinism.
    pub frame_ids: Vec<String>,
    /// Mixing coefficients, shared by all frames.
    pub priors: Vec<f64>,
    pub components: Vec<Component>,
}

impl TPGMM {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.priors.len() != self.components.len() {
            return Err(Error::invalid_model(
                "priors/components length mismatch".to_string(),
            ));
        }
        let s: f64 = self.priors.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::invalid_model(format!("priors sum to {s}")));
        }
        for (k, c) in self.components.iter().enumerate() {
            if c.entries.is_empty() {
                return Err(Error::invalid_model(format!("component {k} has no entries")));
            }
            for e in &c.entries {
                if !self.frame_ids.contains(&e.frame) {
                    return Err(Error::invalid_model(format!(
                        "component {k} references unknown frame '{}'",
                        e.frame
                    )));
                }
                if e.gaussian.spec() != &self.spec {
                    return Err(Error::invalid_model(format!(
                        "component {k} frame '{}' on wrong manifold",
                        e.frame
                    )));
                }
            }
        }
        Ok(())
    }

    /// Map every per-frame Gaussian to global coordinates using the given
    /// frame instantiation and fuse per component. Priors are unchanged.
    pub fn global_gmm(&self, frames: &[Frame]) -> Result<Vec<(f64, RiemannianGaussian)>> {
        let lookup: BTreeMap<&str, &Frame> = frames.iter().map(|f| (f.id.as_str(), f)).collect();
        let mut out = Vec::with_capacity(self.k());
        for (k, comp) in self.components.iter().enumerate() {
            let mut transformed = Vec::with_capacity(comp.entries.len());
            for e in &comp.entries {
                let frame = lookup.get(e.frame.as_str()).ok_or_else(|| {
                    Error::MissingEntry(format!("frame '{}' needed by component {k}", e.frame))
                })?;
                transformed.push(frame.transform_gaussian(&e.gaussian));
            }
            out.push((self.priors[k], gaussian_product(&transformed)?));
        }
        Ok(out)
    }

    /// Shared responsibility matrix (N × K) of all samples in `demos` under
    /// the product-of-frames emission, rows normalized. Second return is the
    /// total log-likelihood.
    pub fn responsibilities(&self, demos: &[Demonstration]) -> Result<(DMatrix<f64>, f64)> {
        let locals = local_datasets(demos, &self.frame_ids)?;
        let n = locals.n;
        let k = self.k();
        let mut log_resp = DMatrix::zeros(n, k);
        for (ki, comp) in self.components.iter().enumerate() {
            let lp = self.priors[ki].max(f64::MIN_POSITIVE).ln();
            for t in 0..n {
                let mut acc = lp;
                for e in &comp.entries {
                    let x = &locals.by_frame[&e.frame][t];
                    acc += e.gaussian.log_pdf(x)?;
                }
                log_resp[(t, ki)] = acc;
            }
        }
        let mut ll = 0.0;
        for t in 0..n {
            let row: Vec<f64> = (0..k).map(|ki| log_resp[(t, ki)]).collect();
            let lse = log_sum_exp(&row);
            ll += lse;
            for ki in 0..k {
                log_resp[(t, ki)] = (log_resp[(t, ki)] - lse).exp();
            }
        }
        Ok((log_resp, ll))
    }
}

/// Result of an EM fit: the model plus the per-iteration log-likelihood
/// trace (non-decreasing).
#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: TPGMM,
    pub log_likelihoods: Vec<f64>,
}

pub(crate) struct LocalDatasets {
    pub n: usize,
    /// Per frame id: all samples of all demos, expressed in that demo's
    /// instance of the frame.
    pub by_frame: BTreeMap<String, Vec<ManifoldPoint>>,
    /// (demo index, step, demo length) per flattened sample.
    pub index: Vec<(usize, usize, usize)>,
}

pub(crate) fn local_datasets(demos: &[Demonstration], frame_ids: &[String]) -> Result<LocalDatasets> {
    let mut by_frame: BTreeMap<String, Vec<ManifoldPoint>> = BTreeMap::new();
    let mut index = Vec::new();
    for (d, demo) in demos.iter().enumerate() {
        for id in frame_ids {
            let frame = demo.frame(id)?;
            by_frame
                .entry(id.clone())
                .or_default()
                .extend(to_frame(demo, frame));
        }
        for t in 0..demo.len() {
            index.push((d, t, demo.len()));
        }
    }
    Ok(LocalDatasets {
        n: index.len(),
        by_frame,
        index,
    })
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Fit a TP-GMM with `k` components by expectation-maximization.
///
/// Initialization is time-binned by default: each demonstration is split
/// into `k` equal temporal segments and component `k` starts from segment
/// `k` pooled over demos, which matches the sequential structure of
/// manipulation skills. A seeded k-means init is available through
/// [`Config::em_kmeans_init`].
pub fn em_fit(demos: &[Demonstration], k: usize, seed: u64, config: &Config) -> Result<EmFit> {
    if k == 0 {
        return Err(Error::invalid_input("K must be at least 1"));
    }
    if demos.is_empty() {
        return Err(Error::invalid_input("no demonstrations"));
    }
    for d in demos {
        d.validate()?;
    }
    let spec = demos[0].spec().clone();
    let mut frame_ids: Vec<String> = demos[0].frames.iter().map(|f| f.id.clone()).collect();
    frame_ids.sort();
    for d in demos {
        let mut ids: Vec<String> = d.frames.iter().map(|f| f.id.clone()).collect();
        ids.sort();
        if ids != frame_ids {
            return Err(Error::invalid_input(format!(
                "demo '{}' has frame set {ids:?}, expected {frame_ids:?}",
                d.id
            )));
        }
    }
    let locals = local_datasets(demos, &frame_ids)?;
    let n = locals.n;
    if k > n {
        return Err(Error::invalid_input(format!(
            "K = {k} exceeds the {n} available samples"
        )));
    }

    // initial hard assignment of samples to components
    let assignment: Vec<usize> = if config.em_kmeans_init {
        kmeans_assignment(&locals, k, seed)?
    } else {
        locals
            .index
            .iter()
            .map(|&(_, t, len)| ((t * k) / len).min(k - 1))
            .collect()
    };

    let mut weights = DMatrix::zeros(n, k);
    for (t, &a) in assignment.iter().enumerate() {
        weights[(t, a)] = 1.0;
    }
    let mut model = m_step(&spec, &frame_ids, &locals, &weights, None)?;

    let mut trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..config.em_max_iterations {
        let (resp, ll) = model.responsibilities(demos)?;
        trace.push(ll);
        model = m_step(&spec, &frame_ids, &locals, &resp, Some(&assignment))?;
        if (ll - prev_ll).abs() < config.em_tolerance {
            break;
        }
        prev_ll = ll;
    }
    Ok(EmFit {
        model,
        log_likelihoods: trace,
    })
}

/// Weighted M-step. `reseed` provides the initial hard assignment used to
/// re-seed a component that lost all responsibility mass; a component can be
/// re-seeded once, a second collapse is an error.
fn m_step(
    spec: &ManifoldSpec,
    frame_ids: &[String],
    locals: &LocalDatasets,
    weights: &DMatrix<f64>,
    reseed: Option<&Vec<usize>>,
) -> Result<TPGMM> {
    let n = locals.n;
    let k = weights.ncols();
    let mut priors = Vec::with_capacity(k);
    let mut components = Vec::with_capacity(k);
    for ki in 0..k {
        let mut w: Vec<f64> = (0..n).map(|t| weights[(t, ki)]).collect();
        let mut sum_w: f64 = w.iter().sum();
        if sum_w < 1e-12 {
            match reseed {
                Some(assignment) => {
                    // fall back to the samples of this component's initial bin
                    w = assignment
                        .iter()
                        .map(|&a| if a == ki { 1.0 } else { 0.0 })
                        .collect();
                    sum_w = w.iter().sum();
                    if sum_w < 1.0 {
                        return Err(Error::EmptyComponent { component: ki });
                    }
                }
                None => return Err(Error::EmptyComponent { component: ki }),
            }
        }
        priors.push(sum_w);
        let mut entries = Vec::with_capacity(frame_ids.len());
        for id in frame_ids {
            let xs = &locals.by_frame[id];
            let mean = weighted_karcher_mean(xs, &w)?;
            let d = spec.tangent_dim();
            let mut cov = DMatrix::zeros(d, d);
            for (x, wt) in xs.iter().zip(&w) {
                if *wt == 0.0 {
                    continue;
                }
                let v = spec.log(&mean, x);
                cov += (&v * v.transpose()) * *wt;
            }
            cov /= sum_w;
            entries.push(FrameEntry {
                frame: id.clone(),
                gaussian: RiemannianGaussian::new(mean, regularize_covariance(cov))?,
            });
        }
        components.push(Component { entries });
    }
    let total: f64 = priors.iter().sum();
    for p in &mut priors {
        *p /= total;
    }
    Ok(TPGMM {
        spec: spec.clone(),
        frame_ids: frame_ids.to_vec(),
        priors,
        components,
    })
}

/// Plain Lloyd k-means on pooled local tangent coordinates, used only as the
/// optional EM initializer.
fn kmeans_assignment(locals: &LocalDatasets, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = locals.n;
    let dims: usize = locals.by_frame.len();
    let spec = locals.by_frame.values().next().unwrap()[0].spec.clone();
    let d = spec.tangent_dim();
    let mut data = DMatrix::zeros(n, dims * d);
    for (fi, xs) in locals.by_frame.values().enumerate() {
        let anchor = xs[0].clone();
        for (t, x) in xs.iter().enumerate() {
            let v = spec.log(&anchor, x);
            for j in 0..d {
                data[(t, fi * d + j)] = v[j];
            }
        }
    }
    // farthest-point seeding spreads the initial centers across clusters
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = index_sample(&mut rng, n, 1).index(0);
    let mut centers: Vec<DVector<f64>> = vec![data.row(first).transpose()];
    while centers.len() < k {
        let far = (0..n)
            .max_by(|&a, &b| {
                let da = centers
                    .iter()
                    .map(|c| (data.row(a).transpose() - c).norm_squared())
                    .fold(f64::INFINITY, f64::min);
                let db = centers
                    .iter()
                    .map(|c| (data.row(b).transpose() - c).norm_squared())
                    .fold(f64::INFINITY, f64::min);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        centers.push(data.row(far).transpose());
    }
    let mut assignment = vec![0usize; n];
    for _ in 0..50 {
        let mut changed = false;
        #[allow(clippy::needless_range_loop)]
        for t in 0..n {
            let row = data.row(t).transpose();
            let best = centers
                .iter()
                .enumerate()
                .map(|(ci, c)| (ci, (&row - c).norm_squared()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0;
            if assignment[t] != best {
                assignment[t] = best;
                changed = true;
            }
        }
        #[allow(clippy::needless_range_loop)]
        for ci in 0..k {
            let members: Vec<usize> = (0..n).filter(|t| assignment[*t] == ci).collect();
            if members.is_empty() {
                continue;
            }
            let mut c = DVector::zeros(dims * d);
            for &t in &members {
                c += data.row(t).transpose();
            }
            centers[ci] = c / members.len() as f64;
        }
        if !changed {
            break;
        }
    }
    // hand every empty cluster the point farthest from its own center
    #[allow(clippy::needless_range_loop)]
    for ci in 0..k {
        if assignment.contains(&ci) {
            continue;
        }
        let far = (0..n)
            .max_by(|&a, &b| {
                let da = (data.row(a).transpose() - &centers[ci]).norm_squared();
                let db = (data.row(b).transpose() - &centers[ci]).norm_squared();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        assignment[far] = ci;
    }
    Ok(assignment)
}
