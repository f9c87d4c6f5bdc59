//! Twin lamellae inside a cell and the nested tessellation they produce.
//!
//! Positions along the twin normal are Feret levels: `level(x) = <x - anchor, n>`
//! with the anchor at the cell centroid, so the cell spans `[alpha, beta]`.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orientation::Orientation;
use crate::polytope::{clip_slab, feret_interval, Aabb, ConvexPolytope, FaceSource, FeretInterval, Vec3, VolumeProfile};
use crate::tessellation::LaguerreTessellation;
use crate::twinning::TwinState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LamellaError {
    #[error("invalid lamella parameters: {0}")]
    InvalidParams(String),
    #[error("cannot place {m} centers in the admissible interval")]
    Infeasible { m: usize },
    #[error("cell {cell}: no lamellar system found after {retries} attempts")]
    Unresolvable { cell: usize, retries: usize },
    #[error("cell {0} is empty")]
    EmptyCell(usize),
    #[error("twin volume fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("cell {cell}: subcells sum to {got}, cell volume is {expected}")]
    VolumeMismatch { cell: usize, expected: f64, got: f64 },
    #[error("cell {0} has a lamellar system but no twin")]
    NotTwinned(usize),
    #[error("cell {0} has no mark")]
    MissingMark(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LamellaParams {
    pub l_max: usize,
    pub xi: f64,
    pub gamma: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    pub theta: Vec<f64>,
    pub poisson_lambda: f64,
    pub grid_points: usize,
    pub max_retries: usize,
    /// Relative tolerance on the total lamella volume.
    pub volume_tol: f64,
}

impl Default for LamellaParams {
    fn default() -> Self {
        Self {
            l_max: 3,
            xi: 0.05,
            gamma: 0.05,
            zeta1: 0.05,
            zeta2: 0.5,
            theta: vec![1.0, 1.2, 1.2],
            poisson_lambda: 1.0,
            grid_points: 200,
            max_retries: 50,
            volume_tol: 1e-3,
        }
    }
}

impl LamellaParams {
    pub fn validate(&self) -> Result<(), LamellaError> {
        let bad = |msg: String| Err(LamellaError::InvalidParams(msg));
        if self.l_max < 1 {
            return bad("l_max must be at least 1".into());
        }
        for (name, v) in [("xi", self.xi), ("gamma", self.gamma)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} = {v} outside (0, 1)"));
            }
        }
        if !(0.0 < self.zeta1 && self.zeta1 < self.zeta2 && self.zeta2 <= 0.5) {
            return bad(format!("need 0 < zeta1 < zeta2 <= 0.5, got {} and {}", self.zeta1, self.zeta2));
        }
        if self.theta.len() < self.l_max {
            return bad(format!("{} growth rates for l_max = {}", self.theta.len(), self.l_max));
        }
        if let Some(t) = self.theta.iter().find(|t| !(**t >= 1.0 && **t < 2.0)) {
            return bad(format!("growth rate {t} outside [1, 2)"));
        }
        if !(self.poisson_lambda >= 0.0) || !self.poisson_lambda.is_finite() {
            return bad(format!("poisson_lambda = {}", self.poisson_lambda));
        }
        if self.grid_points < 2 {
            return bad("grid_points must be at least 2".into());
        }
        if self.max_retries < 1 {
            return bad("max_retries must be at least 1".into());
        }
        if !(self.volume_tol > 0.0 && self.volume_tol < 1.0) {
            return bad(format!("volume_tol = {}", self.volume_tol));
        }
        Ok(())
    }

    fn theta_max(&self, m: usize) -> f64 {
        self.theta[..m].iter().copied().fold(1.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct Lamella {
    pub d: f64,
    pub w: f64,
    pub polytope: ConvexPolytope,
}

#[derive(Debug, Clone)]
pub struct LamellarSystem {
    pub cell_id: usize,
    pub direction: Vec3,
    pub feret: FeretInterval,
    pub lamellae: Vec<Lamella>,
    pub cell_volume: f64,
    pub target_fraction: f64,
    pub achieved_fraction: f64,
}

impl LamellarSystem {
    pub fn len(&self) -> usize {
        self.lamellae.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lamellae.is_empty()
    }

    /// `((d - alpha) / rho, w / rho)` per lamella.
    pub fn normalized(&self) -> Vec<(f64, f64)> {
        let f = &self.feret;
        self.lamellae.iter().map(|l| ((l.d - f.alpha) / f.rho, l.w / f.rho)).collect()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.lamellae.iter().map(|l| l.d).collect()
    }

    pub fn semi_widths(&self) -> Vec<f64> {
        self.lamellae.iter().map(|l| l.w).collect()
    }
}

/// `m = M + 1` with `M` Poisson conditioned on `M <= l_max - 1`.
pub fn sample_count<R: Rng + ?Sized>(p: &LamellaParams, rng: &mut R) -> usize {
    if p.l_max == 1 || p.poisson_lambda == 0.0 {
        return 1;
    }
    let mut weights = Vec::with_capacity(p.l_max);
    let mut term = 1.0;
    for k in 0..p.l_max {
        if k > 0 {
            term *= p.poisson_lambda / k as f64;
        }
        weights.push(term);
    }
    let dist = WeightedIndex::new(&weights).expect("positive Poisson weights");
    dist.sample(rng) + 1
}

pub const RSA_MAX_ATTEMPTS: usize = 1000;

/// Random sequential adsorption of `m` centers with hard-core distance
/// `(gamma + 2 zeta1) rho`; returned in increasing order.
pub fn rsa_centers<R: Rng + ?Sized>(
    m: usize,
    f: &FeretInterval,
    p: &LamellaParams,
    rng: &mut R,
) -> Result<Vec<f64>, LamellaError> {
    let rho = f.rho;
    let lo = f.alpha + (p.xi + p.zeta1) * rho;
    let hi = f.beta - (p.xi + p.zeta1) * rho;
    if m == 0 || !(lo < hi) {
        return Err(LamellaError::Infeasible { m });
    }
    let exclusion = (p.gamma + 2.0 * p.zeta1) * rho;
    let mut centers: Vec<f64> = Vec::with_capacity(m);
    for _ in 0..RSA_MAX_ATTEMPTS {
        if centers.len() == m {
            break;
        }
        let x = rng.random_range(lo..hi);
        if centers.iter().all(|c| (x - c).abs() >= exclusion) {
            centers.push(x);
        }
    }
    if centers.len() < m {
        return Err(LamellaError::Infeasible { m });
    }
    centers.sort_by(f64::total_cmp);
    Ok(centers)
}

/// Largest common growth parameter keeping the end margins and the
/// separations when lamella `j` has semi-width `theta_j w`.
pub fn delta_w(centers: &[f64], theta: &[f64], f: &FeretInterval, p: &LamellaParams) -> f64 {
    let m = centers.len();
    let rho = f.rho;
    let mut dw = ((centers[0] - f.alpha - p.xi * rho) / theta[0]).min((f.beta - p.xi * rho - centers[m - 1]) / theta[m - 1]);
    for j in 0..m.saturating_sub(1) {
        dw = dw.min((centers[j + 1] - centers[j] - p.gamma * rho) / (theta[j] + theta[j + 1]));
    }
    dw
}

/// Total volume of the lamellae `L(d_j, theta_j w)`.
pub fn upsilon(profile: &VolumeProfile, centers: &[f64], theta: &[f64], w: f64) -> f64 {
    centers.iter().zip(theta).map(|(&d, &t)| profile.slab(d - t * w, d + t * w)).sum()
}

/// Admissible range of the growth parameter: semi-widths `theta_j w` must
/// stay inside `(zeta1 rho, zeta2 rho)` and `w <= delta_w`. Endpoints are
/// moved inward by `1e-9 rho`.
pub fn growth_interval(centers: &[f64], f: &FeretInterval, p: &LamellaParams) -> Option<(f64, f64)> {
    let m = centers.len();
    let nudge = 1e-9 * f.rho;
    let lo = p.zeta1 * f.rho + nudge;
    let hi = delta_w(centers, &p.theta[..m], f, p).min(p.zeta2 * f.rho / p.theta_max(m)) - nudge;
    (lo < hi).then_some((lo, hi))
}

/// Solves `upsilon(w) = target` on `[lo, hi]` by a grid scan followed by
/// bisection; `None` when the target is outside the attainable range.
fn solve_growth(
    profile: &VolumeProfile,
    centers: &[f64],
    theta: &[f64],
    (lo, hi): (f64, f64),
    target: f64,
    grid_points: usize,
) -> Option<f64> {
    let ups = |w: f64| upsilon(profile, centers, theta, w);
    if ups(lo) > target || ups(hi) < target {
        return None;
    }
    let step = (hi - lo) / (grid_points - 1) as f64;
    let mut a = lo;
    let mut b = hi;
    for k in 1..grid_points {
        let w = if k == grid_points - 1 { hi } else { lo + step * k as f64 };
        if ups(w) >= target {
            a = w - step;
            b = w;
            break;
        }
    }
    let a0 = a.max(lo);
    let (mut a, mut b) = (a0, b);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if ups(mid) < target {
            a = mid;
        } else {
            b = mid;
        }
        if b - a <= 1e-15 * f64::max(1.0, b.abs()) {
            break;
        }
    }
    let (va, vb) = (ups(a), ups(b));
    Some(if (va - target).abs() <= (vb - target).abs() { a } else { b })
}

fn check_fraction(cell_id: usize, cell: &ConvexPolytope, v_t: f64) -> Result<(), LamellaError> {
    if cell.is_empty() {
        return Err(LamellaError::EmptyCell(cell_id));
    }
    if !(v_t > 0.0 && v_t < 1.0) {
        return Err(LamellaError::InvalidFraction(v_t));
    }
    Ok(())
}

/// Rebuilds a system from normalised centers and semi-widths (as exported),
/// recomputing the Feret interval of `cell` along `n_vec`.
pub fn system_from_normalized(
    cell_id: usize,
    cell: &ConvexPolytope,
    n_vec: &Vec3,
    geometry: &[(f64, f64)],
    v_t: f64,
) -> Result<LamellarSystem, LamellaError> {
    check_fraction(cell_id, cell, v_t)?;
    let f = feret_interval(cell, n_vec);
    let ds: Vec<f64> = geometry.iter().map(|&(d, _)| f.alpha + d * f.rho).collect();
    let ws: Vec<f64> = geometry.iter().map(|&(_, w)| w * f.rho).collect();
    assemble_system(cell_id, cell, &f, &ds, &ws, v_t).ok_or(LamellaError::EmptyCell(cell_id))
}

fn assemble_system(
    cell_id: usize,
    cell: &ConvexPolytope,
    f: &FeretInterval,
    ds: &[f64],
    ws: &[f64],
    v_t: f64,
) -> Option<LamellarSystem> {
    let cell_volume = cell.volume();
    let mut lamellae = Vec::with_capacity(ds.len());
    for (&d, &w) in ds.iter().zip(ws) {
        let polytope = clip_slab(cell, f, d - w, d + w).ok()?;
        if !(polytope.volume() > 0.0) {
            return None;
        }
        lamellae.push(Lamella { d, w, polytope });
    }
    let achieved = lamellae.iter().map(|l| l.polytope.volume()).sum::<f64>() / cell_volume;
    Some(LamellarSystem {
        cell_id,
        direction: f.direction,
        feret: *f,
        lamellae,
        cell_volume,
        target_fraction: v_t,
        achieved_fraction: achieved,
    })
}

/// Lamellar growth: sample a count and centers, then grow all lamellae with
/// a common parameter until they hold the twin volume.
pub fn grow_lamellae<R: Rng + ?Sized>(
    cell_id: usize,
    cell: &ConvexPolytope,
    n_vec: &Vec3,
    v_t: f64,
    p: &LamellaParams,
    rng: &mut R,
) -> Result<LamellarSystem, LamellaError> {
    p.validate()?;
    check_fraction(cell_id, cell, v_t)?;
    let f = feret_interval(cell, n_vec);
    let profile = VolumeProfile::new(cell, &f);
    let target = v_t * profile.total();
    for _ in 0..p.max_retries {
        let m = sample_count(p, rng);
        let Ok(centers) = rsa_centers(m, &f, p, rng) else { continue };
        let Some(range) = growth_interval(&centers, &f, p) else { continue };
        let theta = &p.theta[..m];
        let Some(w0) = solve_growth(&profile, &centers, theta, range, target, p.grid_points) else { continue };
        let ws: Vec<f64> = theta.iter().map(|t| t * w0).collect();
        if let Some(sys) = assemble_system(cell_id, cell, &f, &centers, &ws, v_t) {
            if (sys.achieved_fraction - v_t).abs() <= p.volume_tol * v_t {
                return Ok(sys);
            }
        }
    }
    Err(LamellaError::Unresolvable { cell: cell_id, retries: p.max_retries })
}

pub const ANNEAL_ITERATIONS: usize = 10_000;
pub const ANNEAL_COOLING: f64 = 0.995;

/// Whether `(d_j, w_j)` satisfies the spacing, margin and width conditions.
pub fn in_state_space(ds: &[f64], ws: &[f64], f: &FeretInterval, p: &LamellaParams) -> bool {
    let rho = f.rho;
    let m = ds.len();
    if m == 0 || ws.len() != m {
        return false;
    }
    if ws.iter().any(|&w| !(w > p.zeta1 * rho && w < p.zeta2 * rho)) {
        return false;
    }
    if ds[0] - ws[0] - f.alpha < p.xi * rho || f.beta - ds[m - 1] - ws[m - 1] < p.xi * rho {
        return false;
    }
    (1..m).all(|j| ds[j] - ws[j] - (ds[j - 1] + ws[j - 1]) >= p.gamma * rho)
}

/// Simulated annealing on `H = | sum |L(d_j, w_j)| - V_t |C| |` over the
/// admissible states. `init` seeds the chain with an existing system.
pub fn anneal_lamellae<R: Rng + ?Sized>(
    cell_id: usize,
    cell: &ConvexPolytope,
    n_vec: &Vec3,
    v_t: f64,
    p: &LamellaParams,
    init: Option<&LamellarSystem>,
    rng: &mut R,
) -> Result<LamellarSystem, LamellaError> {
    p.validate()?;
    check_fraction(cell_id, cell, v_t)?;
    let f = feret_interval(cell, n_vec);
    let profile = VolumeProfile::new(cell, &f);
    let target = v_t * profile.total();
    let tol = p.volume_tol * target;
    let energy = |ds: &[f64], ws: &[f64]| -> f64 {
        (ds.iter().zip(ws).map(|(&d, &w)| profile.slab(d - w, d + w)).sum::<f64>() - target).abs()
    };

    let attempts = if init.is_some() { 1 } else { p.max_retries };
    for attempt in 0..attempts {
        let (mut ds, mut ws) = match (attempt, init) {
            (0, Some(s)) => (s.centers(), s.semi_widths()),
            _ => {
                let m = sample_count(p, rng);
                let Ok(centers) = rsa_centers(m, &f, p, rng) else { continue };
                let Some((lo, _)) = growth_interval(&centers, &f, p) else { continue };
                let ws = p.theta[..m].iter().map(|t| t * lo).collect();
                (centers, ws)
            }
        };
        if !in_state_space(&ds, &ws, &f, p) {
            continue;
        }
        let m = ds.len();
        let mut h = energy(&ds, &ws);
        let (mut best_h, mut best) = (h, (ds.clone(), ws.clone()));
        let t0 = target;
        for k in 0..ANNEAL_ITERATIONS {
            if best_h <= tol {
                break;
            }
            let temp = t0 * ANNEAL_COOLING.powi(k as i32);
            let scale = 0.05 * f.rho * (temp / t0).max(1e-4);
            let j = rng.random_range(0..m);
            let (old_d, old_w) = (ds[j], ws[j]);
            let zd: f64 = rng.sample(StandardNormal);
            let zw: f64 = rng.sample(StandardNormal);
            ds[j] += scale * zd;
            ws[j] += scale * zw;
            if !in_state_space(&ds, &ws, &f, p) {
                ds[j] = old_d;
                ws[j] = old_w;
                continue;
            }
            let h_new = energy(&ds, &ws);
            if h_new <= h || rng.random::<f64>() < (-(h_new - h) / temp).exp() {
                h = h_new;
                if h < best_h {
                    best_h = h;
                    best = (ds.clone(), ws.clone());
                }
            } else {
                ds[j] = old_d;
                ws[j] = old_w;
            }
        }
        if best_h <= tol {
            if let Some(sys) = assemble_system(cell_id, cell, &f, &best.0, &best.1, v_t) {
                if (sys.achieved_fraction - v_t).abs() <= p.volume_tol * v_t {
                    return Ok(sys);
                }
            }
        }
    }
    Err(LamellaError::Unresolvable { cell: cell_id, retries: attempts })
}

/// Violations found by [`audit_system`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AuditReport {
    pub spacing: usize,
    pub margins: usize,
    pub widths: usize,
    pub volume_error: f64,
}

impl AuditReport {
    pub fn passes(&self, volume_tol: f64) -> bool {
        self.spacing == 0 && self.margins == 0 && self.widths == 0 && self.volume_error <= volume_tol
    }
}

/// Re-derives the Feret interval from the cell and checks every condition
/// on an emitted system; the volume error is relative to `V_t |C|`.
pub fn audit_system(sys: &LamellarSystem, cell: &ConvexPolytope, v_t: f64, p: &LamellaParams) -> AuditReport {
    let f = feret_interval(cell, &sys.direction);
    let rho = f.rho;
    // Levels relative to the freshly computed anchor.
    let shift = (sys.feret.anchor - f.anchor).dot(&f.direction);
    let ds: Vec<f64> = sys.lamellae.iter().map(|l| l.d + shift).collect();
    let ws: Vec<f64> = sys.lamellae.iter().map(|l| l.w).collect();
    let mut r = AuditReport::default();
    for j in 1..ds.len() {
        if ds[j] - ws[j] - (ds[j - 1] + ws[j - 1]) < p.gamma * rho * (1.0 - 1e-12) {
            r.spacing += 1;
        }
    }
    if let (Some(first), Some(last)) = (ds.first(), ds.last()) {
        if first - ws[0] - f.alpha < p.xi * rho * (1.0 - 1e-12) {
            r.margins += 1;
        }
        if f.beta - last - ws[ws.len() - 1] < p.xi * rho * (1.0 - 1e-12) {
            r.margins += 1;
        }
    }
    r.widths = ws.iter().filter(|&&w| !(w > p.zeta1 * rho && w < p.zeta2 * rho)).count();
    let target = v_t * cell.volume();
    let total: f64 = ds
        .iter()
        .zip(&ws)
        .map(|(&d, &w)| clip_slab(cell, &f, d - w, d + w).map(|s| s.volume()).unwrap_or(f64::NAN))
        .sum();
    r.volume_error = (total - target).abs() / target;
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Matrix,
    Lamella,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Matrix => "matrix",
            Phase::Lamella => "lamella",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Subcell {
    pub cell_id: usize,
    pub phase: Phase,
    pub polytope: ConvexPolytope,
    pub mark: Orientation,
}

#[derive(Debug, Clone)]
pub struct NestedTessellation {
    pub mother: LaguerreTessellation,
    pub systems: BTreeMap<usize, LamellarSystem>,
    pub subcells: Vec<Subcell>,
}

impl NestedTessellation {
    pub fn total_volume(&self) -> f64 {
        self.subcells.iter().map(|s| s.polytope.volume()).sum()
    }

    pub fn phase_volume(&self, phase: Phase) -> f64 {
        self.subcells.iter().filter(|s| s.phase == phase).map(|s| s.polytope.volume()).sum()
    }
}

/// Splits `cell` into lamellae and the gaps between them, in level order.
fn split_cell(cell: &ConvexPolytope, sys: &LamellarSystem) -> Vec<(Phase, ConvexPolytope)> {
    let f = &sys.feret;
    let mut out = Vec::new();
    let mut rest = cell.clone();
    for l in &sys.lamellae {
        let gap = rest.clip(&f.below(l.d - l.w), FaceSource::Cut);
        rest = rest.clip(&f.above(l.d - l.w), FaceSource::Cut);
        let lam = rest.clip(&f.below(l.d + l.w), FaceSource::Cut);
        rest = rest.clip(&f.above(l.d + l.w), FaceSource::Cut);
        out.push((Phase::Matrix, gap));
        out.push((Phase::Lamella, lam));
    }
    out.push((Phase::Matrix, rest));
    out.retain(|(_, p)| !p.is_empty() && p.volume() > 0.0);
    out
}

pub fn build_nested(
    t: &LaguerreTessellation,
    marks: &[Orientation],
    twin_states: &BTreeMap<usize, TwinState>,
    systems: BTreeMap<usize, LamellarSystem>,
) -> Result<NestedTessellation, LamellaError> {
    let mut subcells = Vec::new();
    for i in t.nonempty() {
        let mark = *marks.get(i).ok_or(LamellaError::MissingMark(i))?;
        let cell = t.cell(i);
        let Some(sys) = systems.get(&i) else {
            subcells.push(Subcell { cell_id: i, phase: Phase::Matrix, polytope: cell.clone(), mark });
            continue;
        };
        let state = twin_states.get(&i).filter(|s| s.decision).ok_or(LamellaError::NotTwinned(i))?;
        let parts = split_cell(cell, sys);
        let got: f64 = parts.iter().map(|(_, p)| p.volume()).sum();
        let expected = t.volumes()[i];
        if (got - expected).abs() > 1e-6 * expected {
            return Err(LamellaError::VolumeMismatch { cell: i, expected, got });
        }
        for (phase, polytope) in parts {
            let mark = if phase == Phase::Lamella { state.reorientation } else { mark };
            subcells.push(Subcell { cell_id: i, phase, polytope, mark });
        }
    }
    Ok(NestedTessellation { mother: t.clone(), systems, subcells })
}

pub fn clip_to_window(n: &NestedTessellation, window: &Aabb) -> NestedTessellation {
    let subcells = n
        .subcells
        .iter()
        .filter_map(|s| {
            let bb = s.polytope.bounding_box()?;
            if (0..3).any(|k| bb.min[k] >= window.max[k] || bb.max[k] <= window.min[k]) {
                return None;
            }
            let polytope = if window.contains_box(&bb, 0.0) { s.polytope.clone() } else { s.polytope.clip_to_box(window) };
            (!polytope.is_empty() && polytope.volume() > 0.0).then(|| Subcell { polytope, ..s.clone() })
        })
        .collect();
    NestedTessellation { mother: n.mother.clone(), systems: n.systems.clone(), subcells }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polytope::Halfspace;
    use crate::tessellation::{build_laguerre, WeightedGenerator};
    use crate::twinning::{twin_state, TwinDecisionParams, TwinningSystem};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn unit_cube() -> ConvexPolytope {
        ConvexPolytope::from_box(&Aabb::unit())
    }

    fn random_cell(r: &mut ChaCha8Rng) -> ConvexPolytope {
        let mut c = unit_cube();
        for _ in 0..8 {
            let n = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
            let p = Vec3::repeat(0.5) + 0.3 * n.normalize();
            let h = Halfspace::through(&p, n).unwrap();
            let next = c.clip(&h, FaceSource::Cut);
            if next.volume() > 0.2 {
                c = next;
            }
        }
        c
    }

    fn random_direction(r: &mut ChaCha8Rng) -> Vec3 {
        Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)).normalize()
    }

    fn single(l_max: usize) -> LamellaParams {
        LamellaParams { l_max, ..LamellaParams::default() }
    }

    #[test]
    fn params_validation() {
        assert!(LamellaParams::default().validate().is_ok());
        assert!(LamellaParams { zeta1: 0.6, ..LamellaParams::default() }.validate().is_err());
        assert!(LamellaParams { theta: vec![1.0, 2.5, 1.0], ..LamellaParams::default() }.validate().is_err());
        assert!(LamellaParams { l_max: 4, ..LamellaParams::default() }.validate().is_err());
        assert!(LamellaParams { l_max: 0, ..LamellaParams::default() }.validate().is_err());
    }

    #[test]
    fn count_distribution() {
        let mut r = rng(1);
        assert!((0..1000).all(|_| sample_count(&single(1), &mut r) == 1));
        let tiny = LamellaParams { poisson_lambda: 1e-12, ..LamellaParams::default() };
        assert!((0..1000).all(|_| sample_count(&tiny, &mut r) == 1));
        let p = LamellaParams::default();
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample_count(&p, &mut r) - 1] += 1;
        }
        // e^-1 / k! normalised over k = 0, 1, 2.
        let raw = [1.0, 1.0, 0.5];
        let z: f64 = raw.iter().sum();
        for k in 0..3 {
            let q = raw[k] / z;
            let se = (q * (1.0 - q) / n as f64).sqrt();
            assert!((counts[k] as f64 / n as f64 - q).abs() <= 3.0 * se, "k={k}");
        }
    }

    #[test]
    fn rsa_spacing_and_range() {
        let mut r = rng(2);
        let f = feret_interval(&unit_cube(), &Vec3::x());
        let p = LamellaParams::default();
        let ex = (p.gamma + 2.0 * p.zeta1) * f.rho;
        for m in 1..=3 {
            for _ in 0..200 {
                let c = rsa_centers(m, &f, &p, &mut r).unwrap();
                assert_eq!(c.len(), m);
                assert!(c.windows(2).all(|w| w[1] - w[0] >= ex));
                assert!(c.iter().all(|&d| d > f.alpha + 0.1 && d < f.beta - 0.1));
            }
        }
        let narrow = LamellaParams { xi: 0.4, ..LamellaParams::default() };
        assert_eq!(rsa_centers(3, &f, &narrow, &mut r).unwrap_err(), LamellaError::Infeasible { m: 3 });
    }

    #[test]
    fn delta_w_hand_values() {
        let f = feret_interval(&unit_cube(), &Vec3::x());
        let p = LamellaParams::default();
        assert!((delta_w(&[0.0], &[1.0], &f, &p) - (0.5 - 0.05)).abs() < 1e-12);
        // Unit interval with xi = gamma = 0 and centers at its thirds.
        let f0 = FeretInterval { alpha: 0.0, beta: 1.0, rho: 1.0, direction: Vec3::x(), anchor: Vec3::zeros() };
        let p0 = LamellaParams { xi: 1e-300, gamma: 1e-300, ..LamellaParams::default() };
        assert!((delta_w(&[1.0 / 3.0, 2.0 / 3.0], &[1.0, 1.0], &f0, &p0) - 1.0 / 6.0).abs() < 1e-12);
        let mut r = rng(3);
        for _ in 0..100 {
            let c = rsa_centers(3, &f, &p, &mut r).unwrap();
            let dw = delta_w(&c, &p.theta, &f, &p);
            let ws: Vec<f64> = p.theta.iter().map(|t| t * dw).collect();
            let slack = [
                c[0] - ws[0] - f.alpha - p.xi,
                f.beta - c[2] - ws[2] - p.xi,
                c[1] - ws[1] - c[0] - ws[0] - p.gamma,
                c[2] - ws[2] - c[1] - ws[1] - p.gamma,
            ];
            assert!(slack.iter().all(|&s| s >= -1e-12));
            assert!(slack.iter().any(|&s| s.abs() < 1e-12));
        }
    }

    #[test]
    fn upsilon_prism_and_monotone() {
        let cube = unit_cube();
        let f = feret_interval(&cube, &Vec3::x());
        let prof = VolumeProfile::new(&cube, &f);
        assert_eq!(upsilon(&prof, &[0.0], &[1.0], 0.0), 0.0);
        for w in [0.01, 0.1, 0.3] {
            assert!((upsilon(&prof, &[0.0], &[1.0], w) - 2.0 * w).abs() < 1e-12);
        }
        let mut r = rng(4);
        let p = LamellaParams::default();
        let mut checked = 0;
        while checked < 100 {
            let cell = random_cell(&mut r);
            let f = feret_interval(&cell, &random_direction(&mut r));
            let prof = VolumeProfile::new(&cell, &f);
            let m = 1 + checked % 3;
            let Ok(c) = rsa_centers(m, &f, &p, &mut r) else { continue };
            let Some((lo, hi)) = growth_interval(&c, &f, &p) else { continue };
            let vals: Vec<f64> =
                (0..50).map(|k| upsilon(&prof, &c, &p.theta[..m], lo + (hi - lo) * k as f64 / 49.0)).collect();
            assert!(vals.windows(2).all(|w| w[1] > w[0]));
            checked += 1;
        }
    }

    #[test]
    fn grow_in_prism() {
        let mut r = rng(5);
        let cube = unit_cube();
        let p = single(1);
        for _ in 0..20 {
            let sys = grow_lamellae(7, &cube, &Vec3::x(), 0.2, &p, &mut r).unwrap();
            assert_eq!(sys.len(), 1);
            assert!((2.0 * sys.lamellae[0].w - 0.2).abs() <= 1e-3 * 0.2);
            assert!((sys.achieved_fraction - 0.2).abs() <= 1e-3 * 0.2);
            assert_eq!(sys.cell_id, 7);
            assert!(audit_system(&sys, &cube, 0.2, &p).passes(1e-3));
        }
    }

    #[test]
    fn grow_in_random_cells_passes_audit() {
        let mut r = rng(6);
        let p = LamellaParams::default();
        let mut ok = 0;
        for k in 0..60 {
            let cell = random_cell(&mut r);
            let v_t = 0.05 + 0.4 * r.random::<f64>();
            match grow_lamellae(k, &cell, &random_direction(&mut r), v_t, &p, &mut r) {
                Ok(sys) => {
                    let audit = audit_system(&sys, &cell, v_t, &p);
                    assert!(audit.passes(p.volume_tol), "{audit:?}");
                    let s = sys.centers();
                    assert!(s.windows(2).all(|w| w[0] < w[1]));
                    ok += 1;
                }
                Err(e) => assert!(matches!(e, LamellaError::Unresolvable { .. })),
            }
        }
        assert!(ok > 50);
    }

    #[test]
    fn grow_unresolvable_when_fraction_too_large() {
        let p = LamellaParams { l_max: 1, zeta2: 0.1, ..LamellaParams::default() };
        let err = grow_lamellae(3, &unit_cube(), &Vec3::x(), 0.9, &p, &mut rng(7)).unwrap_err();
        assert_eq!(err, LamellaError::Unresolvable { cell: 3, retries: 50 });
        assert!(grow_lamellae(0, &unit_cube(), &Vec3::x(), 1.2, &p, &mut rng(7)).is_err());
    }

    #[test]
    fn anneal_from_growth_solution_is_immediate() {
        let mut r = rng(8);
        let cube = unit_cube();
        let p = LamellaParams::default();
        let grown = grow_lamellae(0, &cube, &Vec3::x(), 0.2, &p, &mut r).unwrap();
        let annealed = anneal_lamellae(0, &cube, &Vec3::x(), 0.2, &p, Some(&grown), &mut r).unwrap();
        assert_eq!(annealed.centers(), grown.centers());
        assert_eq!(annealed.semi_widths(), grown.semi_widths());
    }

    #[test]
    fn anneal_reaches_target() {
        let mut r = rng(9);
        let cube = unit_cube();
        let sys = anneal_lamellae(0, &cube, &Vec3::x(), 0.2, &single(1), None, &mut r).unwrap();
        assert!((sys.achieved_fraction - 0.2).abs() <= 1e-3 * 0.2);
        let p = LamellaParams::default();
        for k in 0..20 {
            let cell = random_cell(&mut r);
            let v_t = 0.05 + 0.3 * r.random::<f64>();
            if let Ok(sys) = anneal_lamellae(k, &cell, &random_direction(&mut r), v_t, &p, None, &mut r) {
                assert!(audit_system(&sys, &cell, v_t, &p).passes(p.volume_tol));
            }
        }
    }

    #[test]
    fn state_space_membership() {
        let f = FeretInterval { alpha: 0.0, beta: 1.0, rho: 1.0, direction: Vec3::x(), anchor: Vec3::zeros() };
        let p = LamellaParams::default();
        assert!(in_state_space(&[0.3, 0.7], &[0.1, 0.1], &f, &p));
        assert!(!in_state_space(&[0.3, 0.45], &[0.1, 0.1], &f, &p));
        assert!(!in_state_space(&[0.1], &[0.06], &f, &p));
        assert!(!in_state_space(&[0.5], &[0.05], &f, &p));
        assert!(!in_state_space(&[], &[], &f, &p));
    }

    fn small_tessellation() -> LaguerreTessellation {
        let pts = [Vec3::new(0.25, 0.5, 0.5), Vec3::new(0.75, 0.5, 0.5)];
        let g: Vec<WeightedGenerator> = pts.iter().map(|&x| WeightedGenerator::new(x, 0.0)).collect();
        build_laguerre(&g, &Aabb::unit()).unwrap()
    }

    #[test]
    fn nested_without_twins_is_the_mother() {
        let t = small_tessellation();
        let marks = vec![Orientation::identity(); 2];
        let n = build_nested(&t, &marks, &BTreeMap::new(), BTreeMap::new()).unwrap();
        assert_eq!(n.subcells.len(), 2);
        assert!(n.subcells.iter().all(|s| s.phase == Phase::Matrix && s.mark == Orientation::identity()));
        assert!((n.total_volume() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nested_with_one_lamella() {
        let t = small_tessellation();
        let mut r = rng(10);
        let sys_tw = TwinningSystem::bcc_114();
        let g = crate::orientation::sample_uniform(&mut r);
        let params = TwinDecisionParams::new(0.01, 0.02, 0.4, 0.6, Vec3::z()).unwrap();
        let mut st = twin_state(&g, 0.5, &sys_tw, &params, 0.01).unwrap();
        st.decision = true;
        let p = single(1);
        let sys = grow_lamellae(0, t.cell(0), &Vec3::x(), 0.2, &p, &mut r).unwrap();
        let w0 = sys.lamellae[0].w;
        let marks = vec![g, Orientation::identity()];
        let n = build_nested(&t, &marks, &BTreeMap::from([(0, st)]), BTreeMap::from([(0, sys)])).unwrap();
        let cell0: Vec<&Subcell> = n.subcells.iter().filter(|s| s.cell_id == 0).collect();
        assert_eq!(cell0.len(), 3);
        assert_eq!(cell0.iter().map(|s| s.phase).collect::<Vec<_>>(), [Phase::Matrix, Phase::Lamella, Phase::Matrix]);
        // Cell 0 is the prism [0, 0.5] x [0, 1]^2 with unit cross-section.
        assert!((cell0[1].polytope.volume() - 2.0 * w0).abs() < 1e-12);
        assert_eq!(cell0[1].mark, st.reorientation);
        assert_eq!(cell0[0].mark, g);
        assert!((n.total_volume() - 1.0).abs() < 1e-6);

        let clipped = clip_to_window(&n, &Aabb::unit());
        assert!((clipped.total_volume() - 1.0).abs() < 1e-9);
        let inside = Aabb::new(Vec3::new(0.8, 0.4, 0.4), Vec3::new(0.9, 0.5, 0.5));
        let c = clip_to_window(&n, &inside);
        assert_eq!(c.subcells.len(), 1);
        assert!((c.total_volume() - inside.volume()).abs() < 1e-15);

        let err = build_nested(&t, &marks, &BTreeMap::new(), n.systems.clone()).unwrap_err();
        assert_eq!(err, LamellaError::NotTwinned(0));
    }
}
