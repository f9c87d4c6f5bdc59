//! Cubic lattice orientations.
//!
//! An orientation `G` maps specimen coordinates to crystal coordinates, so
//! `G * d` is a specimen direction expressed in the lattice frame. Two
//! orientations are equivalent when `G1 = R * G2` for some `R` in the proper
//! cubic point group.

use std::sync::OnceLock;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::polytope::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrientationError {
    #[error("direction vector has zero length")]
    ZeroVector,
    #[error("texture strength must be nonnegative, got {0}")]
    NegativeKappa(f64),
    #[error("cell {0} has no neighbours")]
    IsolatedCell(usize),
    #[error("neighbour quaternion sum of cell {0} is degenerate")]
    DegenerateSum(usize),
    #[error("adjacency is not symmetric between cells {0} and {1}")]
    AsymmetricAdjacency(usize, usize),
    #[error("neighbour index {0} out of range")]
    BadNeighbour(usize),
    #[error("rejection sampler exceeded {0} proposals")]
    ProposalBudget(usize),
}

/// A proper rotation, kept both as a matrix and as a unit quaternion with
/// nonnegative scalar part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orientation {
    matrix: Matrix3<f64>,
    quaternion: UnitQuaternion<f64>,
}

impl Orientation {
    pub fn identity() -> Self {
        Self::from_quaternion(UnitQuaternion::identity())
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>) -> Self {
        let q = canonical(q);
        Self { matrix: *q.to_rotation_matrix().matrix(), quaternion: q }
    }

    /// Quaternion from raw components `(w, x, y, z)`; normalised here.
    pub fn from_components(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::from_quaternion(UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)))
    }

    /// Components already of unit norm, as read back from an export; `None`
    /// when the norm is off by more than `1e-12`.
    pub fn from_unit_components(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let q = Quaternion::new(w, x, y, z);
        if (q.norm() - 1.0).abs() > 1e-12 {
            return None;
        }
        Some(Self::from_quaternion(UnitQuaternion::new_unchecked(q)))
    }

    /// From a matrix assumed to be a proper rotation (re-orthonormalised).
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let r = Rotation3::from_matrix(m);
        Self::from_quaternion(UnitQuaternion::from_rotation_matrix(&r))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.quaternion
    }

    /// `(w, x, y, z)`.
    pub fn components(&self) -> [f64; 4] {
        let q = self.quaternion.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn inverse(&self) -> Self {
        Self::from_quaternion(self.quaternion.inverse())
    }

    /// `self * other` (apply `other` first).
    pub fn compose(&self, other: &Orientation) -> Self {
        Self::from_quaternion(self.quaternion * other.quaternion)
    }

    /// `R * self` for a group element given as a matrix.
    pub fn premultiply(&self, r: &Matrix3<f64>) -> Self {
        Self::from_matrix(&(r * self.matrix))
    }

    /// Rotation angle of `self^-1 * other` without symmetry reduction.
    pub fn angle_to(&self, other: &Orientation) -> f64 {
        self.quaternion.angle_to(&other.quaternion)
    }
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.quaternion().w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// The 24 proper rotations of the cube: identity first, the rest in
/// lexicographic order of their row-major entries.
#[derive(Debug, Clone)]
pub struct SymmetryGroup {
    elements: Vec<Matrix3<f64>>,
    quaternions: Vec<UnitQuaternion<f64>>,
}

impl SymmetryGroup {
    pub fn elements(&self) -> &[Matrix3<f64>] {
        &self.elements
    }

    pub fn quaternions(&self) -> &[UnitQuaternion<f64>] {
        &self.quaternions
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn get(&self, i: usize) -> &Matrix3<f64> {
        &self.elements[i]
    }

    /// Index of the element equal to `m` within `tol`.
    pub fn index_of(&self, m: &Matrix3<f64>, tol: f64) -> Option<usize> {
        self.elements.iter().position(|e| (e - m).abs().max() <= tol)
    }
}

pub fn cubic_group() -> &'static SymmetryGroup {
    static GROUP: OnceLock<SymmetryGroup> = OnceLock::new();
    GROUP.get_or_init(build_cubic_group)
}

fn build_cubic_group() -> SymmetryGroup {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut elements = Vec::with_capacity(24);
    for p in PERMS {
        for signs in 0..8u8 {
            let mut m = Matrix3::zeros();
            for (row, &col) in p.iter().enumerate() {
                m[(row, col)] = if signs & (1 << row) == 0 { 1.0 } else { -1.0 };
            }
            if m.determinant() > 0.0 {
                elements.push(m);
            }
        }
    }
    let key = |m: &Matrix3<f64>| -> [i8; 9] {
        let mut k = [0i8; 9];
        for r in 0..3 {
            for c in 0..3 {
                k[3 * r + c] = m[(r, c)] as i8;
            }
        }
        k
    };
    let identity = Matrix3::identity();
    elements.sort_by(|a, b| {
        (*a != identity).cmp(&(*b != identity)).then_with(|| key(a).cmp(&key(b)))
    });
    let quaternions = elements
        .iter()
        .map(|m| canonical(UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m))))
        .collect();
    SymmetryGroup { elements, quaternions }
}

/// Smallest rotation angle between the classes of `g1` and `g2`.
pub fn disorientation(g1: &Orientation, g2: &Orientation) -> f64 {
    let g1t = g1.matrix.transpose();
    cubic_group()
        .elements()
        .iter()
        .map(|r| {
            let tr = (g1t * r * g2.matrix).trace();
            ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Largest cosine between `v` and the symmetry orbit of `G u`.
pub fn tilt(g: &Orientation, v: &Vec3, u: &Vec3) -> Result<f64, OrientationError> {
    let (nv, nu) = (v.norm(), u.norm());
    if !(nv > 0.0) || !(nu > 0.0) {
        return Err(OrientationError::ZeroVector);
    }
    Ok(tilt_unit(g, &(v / nv), &(u / nu)))
}

fn tilt_unit(g: &Orientation, v: &Vec3, u: &Vec3) -> f64 {
    let gu = g.matrix * u;
    cubic_group()
        .elements()
        .iter()
        .map(|r| v.dot(&(r * gu)))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Haar-uniform rotation from a uniform point on the unit 3-sphere.
pub fn sample_uniform<R: Rng + ?Sized>(rng: &mut R) -> Orientation {
    loop {
        let c: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return Orientation::from_components(c[0] / n, c[1] / n, c[2] / n, c[3] / n);
        }
    }
}

/// Parameters of the tilt-exponential orientation density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdfParams {
    pub kappa: f64,
    pub u: Vec3,
    pub v: Vec3,
}

impl OdfParams {
    pub fn new(kappa: f64, u: Vec3, v: Vec3) -> Result<Self, OrientationError> {
        if !(kappa >= 0.0) {
            return Err(OrientationError::NegativeKappa(kappa));
        }
        if !(u.norm() > 0.0) || !(v.norm() > 0.0) {
            return Err(OrientationError::ZeroVector);
        }
        Ok(Self { kappa, u, v })
    }

    /// `u = (0,0,1)`, `v = (1,1,1)`.
    pub fn loading_111(kappa: f64) -> Result<Self, OrientationError> {
        Self::new(kappa, Vec3::z(), Vec3::new(1.0, 1.0, 1.0))
    }
}

pub const ODF_PROPOSAL_BUDGET: usize = 10_000_000;

/// Exact draw from `f(G) ∝ exp(κ t(G, v, u))` by rejection from Haar measure.
pub fn sample_odf<R: Rng + ?Sized>(p: &OdfParams, rng: &mut R) -> Result<Orientation, OrientationError> {
    let (v, u) = (p.v.normalize(), p.u.normalize());
    for _ in 0..ODF_PROPOSAL_BUDGET {
        let g = sample_uniform(rng);
        if p.kappa == 0.0 {
            return Ok(g);
        }
        let accept = (p.kappa * (tilt_unit(&g, &v, &u) - 1.0)).exp();
        if rng.random::<f64>() < accept {
            return Ok(g);
        }
    }
    Err(OrientationError::ProposalBudget(ODF_PROPOSAL_BUDGET))
}

/// Representative of the class of `g` with maximal scalar part among the 48
/// quaternions `±r·q`; ties go to the lexicographically largest `(w,x,y,z)`.
pub fn fundamental_quaternion(g: &Orientation) -> [f64; 4] {
    let q = g.quaternion;
    let mut best: Option<[f64; 4]> = None;
    for r in cubic_group().quaternions() {
        let c = canonical(r * q);
        let c = [c.w, c.i, c.j, c.k];
        best = Some(match best {
            None => c,
            Some(b) => {
                if lex_greater(&c, &b, 1e-12) {
                    c
                } else {
                    b
                }
            }
        });
    }
    best.expect("group is nonempty")
}

fn lex_greater(a: &[f64; 4], b: &[f64; 4], tol: f64) -> bool {
    for k in 0..4 {
        if a[k] > b[k] + tol {
            return true;
        }
        if a[k] < b[k] - tol {
            return false;
        }
    }
    false
}

/// Moving-average marks: each cell gets the normalised sum of its neighbours'
/// fundamental-zone quaternions.
pub fn moving_average_marks(
    adjacency: &[Vec<usize>],
    marks: &[Orientation],
) -> Result<Vec<Orientation>, OrientationError> {
    let n = marks.len();
    for (i, nb) in adjacency.iter().enumerate() {
        for &j in nb {
            if j >= n || j >= adjacency.len() {
                return Err(OrientationError::BadNeighbour(j));
            }
            if !adjacency[j].contains(&i) {
                return Err(OrientationError::AsymmetricAdjacency(i, j));
            }
        }
    }
    let reps: Vec<[f64; 4]> = marks.iter().map(fundamental_quaternion).collect();
    (0..n)
        .map(|i| {
            let nb = adjacency.get(i).map(Vec::as_slice).unwrap_or(&[]);
            if nb.is_empty() {
                return Err(OrientationError::IsolatedCell(i));
            }
            let mut s = [0.0; 4];
            for &j in nb {
                for k in 0..4 {
                    s[k] += reps[j][k];
                }
            }
            let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-9 {
                return Err(OrientationError::DegenerateSum(i));
            }
            Ok(Orientation::from_components(s[0] / norm, s[1] / norm, s[2] / norm, s[3] / norm))
        })
        .collect()
}

/// Stereographic inverse-pole-figure coordinates of the specimen `direction`
/// in the standard triangle `[001]-[011]-[111]`.
pub fn ipf_coordinates(g: &Orientation, direction: &Vec3) -> [f64; 2] {
    let c = g.matrix * direction;
    let mut a = [c.x.abs(), c.y.abs(), c.z.abs()];
    a.sort_by(f64::total_cmp);
    let (y, x, z) = (a[0], a[1], a[2]);
    [x / (1.0 + z), y / (1.0 + z)]
}

/// Standard-triangle corners `[001]`, `[011]`, `[111]` in IPF coordinates.
pub fn ipf_triangle_vertices() -> [[f64; 2]; 3] {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let t = 1.0 / 3f64.sqrt();
    [[0.0, 0.0], [h / (1.0 + h), 0.0], [t / (1.0 + t), t / (1.0 + t)]]
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn quat() -> impl Strategy<Value = (f64, f64, f64, f64)> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("nonzero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
    }

    proptest! {
        #[test]
        fn rotation_invariants((w, x, y, z) in quat()) {
            let g = Orientation::from_components(w, x, y, z);
            let m = g.matrix();
            prop_assert!((m * m.transpose() - Matrix3::identity()).abs().max() < 1e-10);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-10);
            prop_assert!(Orientation::from_matrix(m).angle_to(&g) < 1e-7);
        }

        #[test]
        fn fundamental_representative_ignores_symmetry((w, x, y, z) in quat(), k in 0usize..24) {
            let g = Orientation::from_components(w, x, y, z);
            let a = fundamental_quaternion(&g);
            let b = fundamental_quaternion(&g.premultiply(cubic_group().get(k)));
            prop_assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-9), "{a:?} {b:?}");
            prop_assert!(a[0] >= (31.4f64.to_radians()).cos() - 1e-9);
        }
    }
}
