//! Deformation twinning of a single cell: Schmid factors, twin selection,
//! lattice reorientation and the strain carried by a twin.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orientation::{cubic_group, Orientation};
use crate::polytope::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TwinningError {
    #[error("twinning vector {0} is not a unit vector")]
    NotUnit(&'static str),
    #[error("shear direction is not in the twinning plane (<n1, a1> = {0})")]
    NonOrthogonal(f64),
    #[error("twinning shear must be positive and finite, got {0}")]
    InvalidShear(f64),
    #[error("macroscopic strain {epsilon_m} is not below the twin strain {e_scalar}")]
    FractionOverflow { epsilon_m: f64, e_scalar: f64 },
    #[error("macroscopic strain must lie in (0, 1), got {0}")]
    InvalidStrain(f64),
    #[error("cell volume {v} outside [{v_min}, {v_max}]")]
    OutOfRange { v: f64, v_min: f64, v_max: f64 },
    #[error("invalid decision parameters: {0}")]
    InvalidDecisionParams(String),
}

/// Twinning elements in crystal coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwinningSystem {
    pub n1: Vec3,
    pub a1: Vec3,
    pub n2: Vec3,
    pub a2: Vec3,
    pub shear_s: f64,
    pub beta_tw: f64,
}

impl TwinningSystem {
    /// Builds a system; the shear defaults to `2 tan(beta_tw)` with
    /// `beta_tw = arccos |<a2, n1>|`.
    pub fn new(n1: Vec3, a1: Vec3, n2: Vec3, a2: Vec3, shear: Option<f64>) -> Result<Self, TwinningError> {
        for (name, v) in [("n1", &n1), ("a1", &a1), ("n2", &n2), ("a2", &a2)] {
            if (v.norm() - 1.0).abs() > 1e-12 {
                return Err(TwinningError::NotUnit(name));
            }
        }
        let dot = n1.dot(&a1);
        if dot.abs() > 1e-12 {
            return Err(TwinningError::NonOrthogonal(dot));
        }
        let beta_tw = a2.dot(&n1).abs().min(1.0).acos();
        let shear_s = shear.unwrap_or(2.0 * beta_tw.tan());
        if !(shear_s > 0.0) || !shear_s.is_finite() {
            return Err(TwinningError::InvalidShear(shear_s));
        }
        Ok(Self { n1, a1, n2, a2, shear_s, beta_tw })
    }

    /// `K1 = (-4 1 1)`, `K2 = (0 1 1)`, `eta1 = [1 2 2]`, `eta2 = [1 0 0]`.
    pub fn bcc_114() -> Self {
        Self::new(
            Vec3::new(-4.0, 1.0, 1.0) / 18f64.sqrt(),
            Vec3::new(1.0, 2.0, 2.0) / 3.0,
            Vec3::new(0.0, 1.0, 1.0) / 2f64.sqrt(),
            Vec3::x(),
            None,
        )
        .expect("the {114} system is well formed")
    }

    pub fn with_shear(mut self, s: f64) -> Result<Self, TwinningError> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(TwinningError::InvalidShear(s));
        }
        self.shear_s = s;
        Ok(self)
    }
}

pub fn schmid_factor(g: &Orientation, a1: &Vec3, n1: &Vec3, d_l: &Vec3) -> f64 {
    let d = g.matrix() * d_l;
    n1.dot(&d) * a1.dot(&d)
}

/// Largest Schmid factor over the symmetry images of the system, with the
/// index of the maximising group element (smallest index on ties). Images
/// that differ only by reversing both `n1` and `a1` are the same variant and
/// do not count as ties.
pub fn propensity(g: &Orientation, sys: &TwinningSystem, d_l: &Vec3) -> (f64, usize) {
    let group = cubic_group();
    let mut best = (f64::NEG_INFINITY, 0);
    let mut tie = false;
    for (i, r) in group.elements().iter().enumerate() {
        let chi = schmid_factor(g, &(r * sys.a1), &(r * sys.n1), d_l);
        if chi > best.0 + 1e-12 {
            best = (chi, i);
            tie = false;
        } else if (chi - best.0).abs() <= 1e-12 && !same_variant(sys, best.1, i) {
            tie = true;
        }
    }
    if tie {
        log::warn!("propensity maximiser is not unique; using group element {}", best.1);
    }
    best
}

fn same_variant(sys: &TwinningSystem, i: usize, j: usize) -> bool {
    let (ri, rj) = (cubic_group().get(i), cubic_group().get(j));
    let (ni, nj) = (ri * sys.n1, rj * sys.n1);
    let (ai, aj) = (ri * sys.a1, rj * sys.a1);
    ((ni - nj).norm() < 1e-9 && (ai - aj).norm() < 1e-9) || ((ni + nj).norm() < 1e-9 && (ai + aj).norm() < 1e-9)
}

/// Twin plane normal in the specimen frame, `G^-1 R n1`.
pub fn twin_normal(g: &Orientation, sys: &TwinningSystem, r_bar: usize) -> Vec3 {
    let n = g.matrix().transpose() * (cubic_group().get(r_bar) * sys.n1);
    n.normalize()
}

/// The 180 degree rotation about `R a1`.
pub fn twin_rotation(sys: &TwinningSystem, r_bar: usize) -> Matrix3<f64> {
    let a = cubic_group().get(r_bar) * sys.a1;
    2.0 * a * a.transpose() - Matrix3::identity()
}

/// Lattice orientation inside a twin lamella.
pub fn reorientation(sys: &TwinningSystem, r_bar: usize, g: &Orientation) -> Orientation {
    g.premultiply(&twin_rotation(sys, r_bar))
}

/// Green-Lagrange strain of the twinning shear and its normal component
/// along the loading direction.
pub fn twin_strain(g: &Orientation, sys: &TwinningSystem, r_bar: usize, d_l: &Vec3) -> (Matrix3<f64>, f64) {
    let r = cubic_group().get(r_bar);
    let (a, n) = (r * sys.a1, r * sys.n1);
    let f = Matrix3::identity() + sys.shear_s * a * n.transpose();
    let e = 0.5 * (f.transpose() * f - Matrix3::identity());
    let d = g.matrix() * d_l;
    let e_scalar = d.dot(&(e * d));
    (e, e_scalar)
}

pub fn twin_volume_fraction(epsilon_m: f64, e_scalar: f64) -> Result<f64, TwinningError> {
    if !(epsilon_m > 0.0 && epsilon_m < 1.0) {
        return Err(TwinningError::InvalidStrain(epsilon_m));
    }
    if !(e_scalar > epsilon_m) {
        return Err(TwinningError::FractionOverflow { epsilon_m, e_scalar });
    }
    Ok(epsilon_m / e_scalar)
}

/// Which end of the volume range receives `psi1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HallPetchOrientation {
    /// `psi(V_min) = psi1`, `psi(V_max) = psi2`.
    #[default]
    Literal,
    /// `psi(V_min) = psi2`, `psi(V_max) = psi1`.
    Swapped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwinDecisionParams {
    pub psi1: f64,
    pub psi2: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub d_l: Vec3,
    pub orientation: HallPetchOrientation,
}

impl TwinDecisionParams {
    pub fn new(psi1: f64, psi2: f64, v_min: f64, v_max: f64, d_l: Vec3) -> Result<Self, TwinningError> {
        if !(0.0 < psi1 && psi1 < psi2 && psi2 < 1.0) {
            return Err(TwinningError::InvalidDecisionParams(format!("psi1={psi1}, psi2={psi2}")));
        }
        if !(0.0 < v_min && v_min < v_max) {
            return Err(TwinningError::InvalidDecisionParams(format!("v_min={v_min}, v_max={v_max}")));
        }
        if (d_l.norm() - 1.0).abs() > 1e-12 {
            return Err(TwinningError::NotUnit("d_l"));
        }
        Ok(Self { psi1, psi2, v_min, v_max, d_l, orientation: HallPetchOrientation::Literal })
    }

    pub fn with_orientation(mut self, orientation: HallPetchOrientation) -> Self {
        self.orientation = orientation;
        self
    }
}

/// Equivalent-sphere size term `(6V/pi)^(-1/6)`.
pub fn hall_petch_h(v: f64) -> f64 {
    (6.0 * v / std::f64::consts::PI).powf(-1.0 / 6.0)
}

pub fn critical_propensity(v: f64, p: &TwinDecisionParams) -> Result<f64, TwinningError> {
    let slack = 1e-12 * p.v_max;
    if !(v >= p.v_min - slack && v <= p.v_max + slack) {
        return Err(TwinningError::OutOfRange { v, v_min: p.v_min, v_max: p.v_max });
    }
    let v = v.clamp(p.v_min, p.v_max);
    let (h_min, h_max) = (hall_petch_h(p.v_min), hall_petch_h(p.v_max));
    let ratio = ((hall_petch_h(v) - h_min) / (h_max - h_min)).clamp(0.0, 1.0);
    Ok(match p.orientation {
        HallPetchOrientation::Literal => p.psi1 + ratio * (p.psi2 - p.psi1),
        HallPetchOrientation::Swapped => p.psi2 - ratio * (p.psi2 - p.psi1),
    })
}

pub fn twin_decision(psi: f64, psi_crit: f64) -> bool {
    psi >= psi_crit
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwinState {
    pub propensity: f64,
    pub r_bar: usize,
    pub psi_crit: f64,
    pub n_vec: Vec3,
    pub e_scalar: f64,
    /// `epsilon_m / e_scalar`; only meaningful when `decision` holds.
    pub v_t: f64,
    pub reorientation: Orientation,
    pub decision: bool,
    /// The cell passed the propensity test but cannot carry the strain.
    pub fraction_overflow: bool,
}

/// Full twin evaluation of a cell of volume `v` and orientation `g`.
pub fn twin_state(
    g: &Orientation,
    v: f64,
    sys: &TwinningSystem,
    p: &TwinDecisionParams,
    epsilon_m: f64,
) -> Result<TwinState, TwinningError> {
    if !(epsilon_m > 0.0 && epsilon_m < 1.0) {
        return Err(TwinningError::InvalidStrain(epsilon_m));
    }
    let (psi, r_bar) = propensity(g, sys, &p.d_l);
    let psi_crit = critical_propensity(v, p)?;
    let (_, e_scalar) = twin_strain(g, sys, r_bar, &p.d_l);
    let mut decision = twin_decision(psi, psi_crit);
    let (v_t, fraction_overflow) = match twin_volume_fraction(epsilon_m, e_scalar) {
        Ok(v_t) => (v_t, false),
        Err(_) => (if e_scalar > 0.0 { epsilon_m / e_scalar } else { f64::INFINITY }, decision),
    };
    if fraction_overflow {
        decision = false;
    }
    Ok(TwinState {
        propensity: psi,
        r_bar,
        psi_crit,
        n_vec: twin_normal(g, sys, r_bar),
        e_scalar,
        v_t,
        reorientation: reorientation(sys, r_bar, g),
        decision,
        fraction_overflow,
    })
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn state_invariants(
            w in -1.0..1.0f64, x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64,
            v in 1e-4..0.05f64, eps in 0.01..0.3f64, swapped: bool,
        ) {
            prop_assume!(w * w + x * x + y * y + z * z > 1e-3);
            let g = Orientation::from_components(w, x, y, z);
            let o = if swapped { HallPetchOrientation::Swapped } else { HallPetchOrientation::Literal };
            let p = TwinDecisionParams::new(0.2, 0.4, 1e-4, 0.05, Vec3::z()).unwrap().with_orientation(o);
            let s = twin_state(&g, v, &TwinningSystem::bcc_114(), &p, eps).unwrap();
            prop_assert!((-0.5..=0.5).contains(&s.propensity));
            prop_assert!((s.n_vec.norm() - 1.0).abs() < 1e-10);
            prop_assert!((0.2..=0.4 + 1e-12).contains(&s.psi_crit));
            if s.decision {
                prop_assert!(s.v_t > 0.0 && s.v_t < 1.0);
            }
        }
    }
}
