//! Riemannian primitives on product manifolds of Euclidean and
//! unit-quaternion blocks.
//!
//! Points live in ambient coordinates (quaternion blocks take 4 slots),
//! tangent vectors in tangent coordinates (quaternion blocks take 3 slots,
//! as rotation vectors). All operations are pure; types are immutable after
//! construction.

pub mod gaussian;
pub mod quaternion;

pub use gaussian::{gaussian_product, weighted_karcher_mean, RiemannianGaussian};

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// One block of a product manifold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockSpec {
    /// Flat ℝⁿ block; tangent and ambient dimension are both `n`.
    Euclidean(usize),
    /// Unit quaternions on S³ with antipodes identified; ambient dimension 4,
    /// tangent dimension 3 (rotation vectors).
    UnitQuaternion,
}

impl BlockSpec {
    pub fn ambient_dim(&self) -> usize {
        match self {
            BlockSpec::Euclidean(n) => *n,
            BlockSpec::UnitQuaternion => 4,
        }
    }

    pub fn tangent_dim(&self) -> usize {
        match self {
            BlockSpec::Euclidean(n) => *n,
            BlockSpec::UnitQuaternion => 3,
        }
    }
}

/// An ordered list of blocks describing a product manifold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    pub blocks: Vec<BlockSpec>,
}

impl ManifoldSpec {
    pub fn new(blocks: Vec<BlockSpec>) -> Self {
        ManifoldSpec { blocks }
    }

    /// ℝⁿ.
    pub fn euclidean(n: usize) -> Self {
        ManifoldSpec::new(vec![BlockSpec::Euclidean(n)])
    }

    /// ℝ³ × S³: a rigid pose.
    pub fn pose() -> Self {
        ManifoldSpec::new(vec![BlockSpec::Euclidean(3), BlockSpec::UnitQuaternion])
    }

    /// ℝ³ × S³ × ℝ¹: end-effector pose plus gripper channel.
    pub fn pose_gripper() -> Self {
        ManifoldSpec::new(vec![
            BlockSpec::Euclidean(3),
            BlockSpec::UnitQuaternion,
            BlockSpec::Euclidean(1),
        ])
    }

    pub fn ambient_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.ambient_dim()).sum()
    }

    pub fn tangent_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.tangent_dim()).sum()
    }

    pub fn is_euclidean(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| matches!(b, BlockSpec::Euclidean(_)))
    }

    /// Ambient-coordinate offset of each block.
    pub(crate) fn ambient_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut o = 0;
        for b in &self.blocks {
            out.push(o);
            o += b.ambient_dim();
        }
        out
    }

    /// Tangent-coordinate offset of each block.
    pub(crate) fn tangent_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut o = 0;
        for b in &self.blocks {
            out.push(o);
            o += b.tangent_dim();
        }
        out
    }

    /// Build a point from ambient coordinates, normalizing and sign-resolving
    /// quaternion blocks.
    pub fn point(&self, coords: Vec<f64>) -> Result<ManifoldPoint> {
        if coords.len() != self.ambient_dim() {
            return Err(Error::invalid_input(format!(
                "expected {} ambient coordinates, got {}",
                self.ambient_dim(),
                coords.len()
            )));
        }
        let mut coords = coords;
        let offsets = self.ambient_offsets();
        for (block, &o) in self.blocks.iter().zip(&offsets) {
            if let BlockSpec::UnitQuaternion = block {
                let q = [coords[o], coords[o + 1], coords[o + 2], coords[o + 3]];
                let n = quaternion::norm(&q);
                if (n - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid_input(format!(
                        "quaternion block at offset {o} has norm {n:.6}, expected 1"
                    )));
                }
                let q = quaternion::canonicalize(&quaternion::normalize(&q));
                coords[o..o + 4].copy_from_slice(&q);
            }
        }
        Ok(ManifoldPoint {
            spec: self.clone(),
            coords,
        })
    }

    /// The origin: zeros on Euclidean blocks, identity quaternions on S³.
    pub fn origin(&self) -> ManifoldPoint {
        let mut coords = vec![0.0; self.ambient_dim()];
        let offsets = self.ambient_offsets();
        for (block, &o) in self.blocks.iter().zip(&offsets) {
            if let BlockSpec::UnitQuaternion = block {
                coords[o] = 1.0;
            }
        }
        ManifoldPoint {
            spec: self.clone(),
            coords,
        }
    }

    pub fn exp(&self, base: &ManifoldPoint, v: &DVector<f64>) -> ManifoldPoint {
        debug_assert_eq!(v.len(), self.tangent_dim());
        let mut coords = base.coords.clone();
        let ao = self.ambient_offsets();
        let to = self.tangent_offsets();
        for (i, block) in self.blocks.iter().enumerate() {
            match block {
                BlockSpec::Euclidean(n) => {
                    for j in 0..*n {
                        coords[ao[i] + j] += v[to[i] + j];
                    }
                }
                BlockSpec::UnitQuaternion => {
                    let q = [
                        base.coords[ao[i]],
                        base.coords[ao[i] + 1],
                        base.coords[ao[i] + 2],
                        base.coords[ao[i] + 3],
                    ];
                    let w = [v[to[i]], v[to[i] + 1], v[to[i] + 2]];
                    let out = quaternion::exp_at(&q, &w);
                    coords[ao[i]..ao[i] + 4].copy_from_slice(&out);
                }
            }
        }
        ManifoldPoint {
            spec: self.clone(),
            coords,
        }
    }

    pub fn log(&self, base: &ManifoldPoint, y: &ManifoldPoint) -> DVector<f64> {
        let mut v = DVector::zeros(self.tangent_dim());
        let ao = self.ambient_offsets();
        let to = self.tangent_offsets();
        for (i, block) in self.blocks.iter().enumerate() {
            match block {
                BlockSpec::Euclidean(n) => {
                    for j in 0..*n {
                        v[to[i] + j] = y.coords[ao[i] + j] - base.coords[ao[i] + j];
                    }
                }
                BlockSpec::UnitQuaternion => {
                    let qb = base.quat_block(ao[i]);
                    let qy = y.quat_block(ao[i]);
                    let w = quaternion::log_at(&qb, &qy);
                    v[to[i]] = w[0];
                    v[to[i] + 1] = w[1];
                    v[to[i] + 2] = w[2];
                }
            }
        }
        v
    }

    /// Geodesic distance; equals `‖log(base, y)‖`.
    pub fn distance(&self, a: &ManifoldPoint, b: &ManifoldPoint) -> f64 {
        self.log(a, b).norm()
    }

    /// Parallel transport of tangent coordinates from `from` to `to`.
    ///
    /// Identity on Euclidean blocks; quaternion blocks rotate by half the
    /// relative rotation, which keeps inner products unchanged.
    pub fn transport(
        &self,
        from: &ManifoldPoint,
        to: &ManifoldPoint,
        v: &DVector<f64>,
    ) -> DVector<f64> {
        let mut out = v.clone();
        let ao = self.ambient_offsets();
        let to_off = self.tangent_offsets();
        for (i, block) in self.blocks.iter().enumerate() {
            if let BlockSpec::UnitQuaternion = block {
                let qf = from.quat_block(ao[i]);
                let qt = to.quat_block(ao[i]);
                let w = [v[to_off[i]], v[to_off[i] + 1], v[to_off[i] + 2]];
                let t = quaternion::transport(&qf, &qt, &w);
                out[to_off[i]] = t[0];
                out[to_off[i] + 1] = t[1];
                out[to_off[i] + 2] = t[2];
            }
        }
        out
    }

    /// The transport operator of [`ManifoldSpec::transport`] as a matrix.
    pub fn transport_matrix(&self, from: &ManifoldPoint, to: &ManifoldPoint) -> DMatrix<f64> {
        let d = self.tangent_dim();
        let mut m = DMatrix::identity(d, d);
        let ao = self.ambient_offsets();
        let to_off = self.tangent_offsets();
        for (i, block) in self.blocks.iter().enumerate() {
            if let BlockSpec::UnitQuaternion = block {
                let r = quaternion::transport_matrix(&from.quat_block(ao[i]), &to.quat_block(ao[i]));
                for row in 0..3 {
                    for col in 0..3 {
                        m[(to_off[i] + row, to_off[i] + col)] = r[row][col];
                    }
                }
            }
        }
        m
    }

    /// Transport a covariance between tangent spaces: `T Σ Tᵀ`.
    ///
    /// The transport operator is orthogonal, so the spectrum is preserved.
    pub fn transport_covariance(
        &self,
        from: &ManifoldPoint,
        to: &ManifoldPoint,
        cov: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        if self.is_euclidean() {
            return cov.clone();
        }
        let t = self.transport_matrix(from, to);
        &t * cov * t.transpose()
    }
}

/// A point on a [`ManifoldSpec`], stored in ambient coordinates with
/// quaternion blocks unit-normalized and sign-canonicalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldPoint {
    pub spec: ManifoldSpec,
    pub coords: Vec<f64>,
}

impl ManifoldPoint {
    fn quat_block(&self, offset: usize) -> [f64; 4] {
        [
            self.coords[offset],
            self.coords[offset + 1],
            self.coords[offset + 2],
            self.coords[offset + 3],
        ]
    }

    pub fn exp(&self, v: &TangentVector) -> ManifoldPoint {
        self.spec.exp(self, &v.coords)
    }

    pub fn log(&self, y: &ManifoldPoint) -> TangentVector {
        TangentVector {
            base: self.clone(),
            coords: self.spec.log(self, y),
        }
    }

    pub fn distance(&self, y: &ManifoldPoint) -> f64 {
        self.spec.distance(self, y)
    }

    /// Check invariants after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.spec.ambient_dim() {
            return Err(Error::invalid_model(format!(
                "point has {} coordinates, manifold needs {}",
                self.coords.len(),
                self.spec.ambient_dim()
            )));
        }
        let ao = self.spec.ambient_offsets();
        for (block, &o) in self.spec.blocks.iter().zip(&ao) {
            if let BlockSpec::UnitQuaternion = block {
                let n = quaternion::norm(&self.quat_block(o));
                if (n - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid_model(format!(
                        "quaternion block at offset {o} has norm {n}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A tangent vector anchored at a base point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub base: ManifoldPoint,
    pub coords: DVector<f64>,
}

impl TangentVector {
    pub fn zero(base: ManifoldPoint) -> Self {
        let d = base.spec.tangent_dim();
        TangentVector {
            base,
            coords: DVector::zeros(d),
        }
    }

    pub fn new(base: ManifoldPoint, coords: DVector<f64>) -> Result<Self> {
        if coords.len() != base.spec.tangent_dim() {
            return Err(Error::invalid_input(format!(
                "tangent vector length {} does not match tangent dimension {}",
                coords.len(),
                base.spec.tangent_dim()
            )));
        }
        Ok(TangentVector { base, coords })
    }

    pub fn norm(&self) -> f64 {
        self.coords.norm()
    }
}

/// Parallel transport of a [`TangentVector`] to a new anchor.
pub fn parallel_transport(v: &TangentVector, to: &ManifoldPoint) -> TangentVector {
    TangentVector {
        coords: v.base.spec.transport(&v.base, to, &v.coords),
        base: to.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn pose_point(rng: &mut ChaCha8Rng) -> ManifoldPoint {
        let spec = ManifoldSpec::pose();
        let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = [
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(-1.5..1.5),
        ];
        let q = quaternion::exp(&w);
        spec.point(vec![v[0], v[1], v[2], q[0], q[1], q[2], q[3]])
            .unwrap()
    }

    fn random_tangent(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> DVector<f64> {
        DVector::from_iterator(dim, (0..dim).map(|_| rng.random_range(-scale..scale)))
    }

    #[test]
    fn euclidean_exp_is_addition() {
        let spec = ManifoldSpec::euclidean(2);
        let x = spec.point(vec![1.0, 2.0]).unwrap();
        let v = DVector::from_vec(vec![3.0, -1.0]);
        let y = spec.exp(&x, &v);
        assert_eq!(y.coords, vec![4.0, 1.0]);
    }

    #[test]
    fn euclidean_log_is_subtraction() {
        let spec = ManifoldSpec::euclidean(2);
        let a = spec.point(vec![1.0, 1.0]).unwrap();
        let b = spec.point(vec![4.0, 5.0]).unwrap();
        let v = spec.log(&a, &b);
        assert_eq!(v.as_slice(), &[3.0, 4.0]);
        assert!((v.norm() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = pose_point(&mut rng);
            let z = DVector::zeros(x.spec.tangent_dim());
            let y = x.spec.exp(&x, &z);
            assert!(x.spec.distance(&x, &y) < 1e-12);
        }
    }

    #[test]
    fn quaternion_exp_matches_axis_angle_oracle() {
        let spec = ManifoldSpec::new(vec![BlockSpec::UnitQuaternion]);
        let id = spec.origin();
        let v = DVector::from_vec(vec![PI, 0.0, 0.0]);
        let y = spec.exp(&id, &v);
        // π about x: q = [cos(π/2), sin(π/2), 0, 0] = [0, 1, 0, 0]
        assert!((y.coords[0]).abs() < 1e-12);
        assert!((y.coords[1] - 1.0).abs() < 1e-12);
        assert!((spec.distance(&id, &y) - PI).abs() < 1e-9);
    }

    #[test]
    fn exp_log_roundtrip_within_injectivity_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x = pose_point(&mut rng);
            let mut v = random_tangent(&mut rng, 6, 1.0);
            // keep the rotation part strictly inside the injectivity radius
            let rot_norm = (v[3] * v[3] + v[4] * v[4] + v[5] * v[5]).sqrt();
            if rot_norm >= PI - 1e-3 {
                let s = (PI - 1e-3) / rot_norm * 0.99;
                for j in 3..6 {
                    v[j] *= s;
                }
            }
            let y = x.spec.exp(&x, &v);
            let back = x.spec.log(&x, &y);
            assert!(
                (&back - &v).norm() < 1e-9,
                "roundtrip residual {}",
                (&back - &v).norm()
            );
        }
    }

    #[test]
    fn transport_preserves_inner_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x = pose_point(&mut rng);
            let y = pose_point(&mut rng);
            let u = random_tangent(&mut rng, 6, 2.0);
            let v = random_tangent(&mut rng, 6, 2.0);
            let tu = x.spec.transport(&x, &y, &u);
            let tv = x.spec.transport(&x, &y, &v);
            assert!((tu.dot(&tv) - u.dot(&v)).abs() < 1e-9);
        }
    }

    #[test]
    fn transport_from_point_to_itself_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = pose_point(&mut rng);
        let v = random_tangent(&mut rng, 6, 1.0);
        let t = x.spec.transport(&x, &x, &v);
        assert!((&t - &v).norm() < 1e-12);
    }

    #[test]
    fn transport_covariance_preserves_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = pose_point(&mut rng);
            let y = pose_point(&mut rng);
            let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
            let cov = &a * a.transpose() + DMatrix::identity(6, 6) * 0.1;
            let out = x.spec.transport_covariance(&x, &y, &cov);
            let mut s0 = cov.clone().symmetric_eigen().eigenvalues.as_slice().to_vec();
            let mut s1 = out.symmetric_eigen().eigenvalues.as_slice().to_vec();
            s0.sort_by(|a, b| a.partial_cmp(b).unwrap());
            s1.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (e0, e1) in s0.iter().zip(&s1) {
                assert!((e0 - e1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn euclidean_transport_is_identity() {
        let spec = ManifoldSpec::euclidean(3);
        let a = spec.point(vec![0.0, 1.0, 2.0]).unwrap();
        let b = spec.point(vec![5.0, -1.0, 0.5]).unwrap();
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(spec.transport(&a, &b, &v), v);
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        assert_eq!(spec.transport_covariance(&a, &b, &cov), cov);
    }

    #[test]
    fn point_rejects_non_unit_quaternion() {
        let spec = ManifoldSpec::pose();
        let bad = spec.point(vec![0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        assert!(bad.is_err());
    }

    #[test]
    fn quaternion_sign_is_canonicalized_on_ingest() {
        let spec = ManifoldSpec::new(vec![BlockSpec::UnitQuaternion]);
        let q = quaternion::exp(&[0.4, 0.0, 0.3]);
        let p1 = spec.point(q.to_vec()).unwrap();
        let p2 = spec.point(vec![-q[0], -q[1], -q[2], -q[3]]).unwrap();
        assert_eq!(p1, p2);
    }
}
