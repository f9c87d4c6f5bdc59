//! Random Laguerre (power) tessellations inside a box.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use thiserror::Error;

use crate::polytope::{Aabb, ConvexPolytope, FaceSource, Halfspace, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TessellationError {
    #[error("generators {0} and {1} coincide")]
    DuplicateGenerators(usize, usize),
    #[error("at least two generators are required, got {0}")]
    TooFewGenerators(usize),
    #[error("invalid volume targets: {0}")]
    InvalidTargets(String),
    #[error("weight fitting did not converge after {iterations} iterations (worst relative error {worst})")]
    NonConvergence { iterations: usize, worst: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Minimum shared-face area for two cells to count as neighbours.
pub const NEIGHBOUR_FACE_AREA: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedGenerator {
    pub x: Vec3,
    pub w: f64,
}

impl WeightedGenerator {
    pub fn new(x: Vec3, w: f64) -> Self {
        Self { x, w }
    }

    pub fn power(&self, p: &Vec3) -> f64 {
        (p - self.x).norm_squared() - self.w
    }
}

/// Power cells indexed by generator; empty cells stay in place as empty
/// polytopes so cell ids equal generator ids.
#[derive(Debug, Clone)]
pub struct LaguerreTessellation {
    domain: Aabb,
    generators: Vec<WeightedGenerator>,
    cells: Vec<ConvexPolytope>,
    volumes: Vec<f64>,
    adjacency: Vec<Vec<usize>>,
}

impl LaguerreTessellation {
    /// Reassembles a tessellation from stored parts, recomputing volumes.
    pub fn from_parts(
        domain: Aabb,
        generators: Vec<WeightedGenerator>,
        cells: Vec<ConvexPolytope>,
        adjacency: Vec<Vec<usize>>,
    ) -> Self {
        let volumes = cells.iter().map(ConvexPolytope::volume).collect();
        Self { domain, generators, cells, volumes, adjacency }
    }

    pub fn domain(&self) -> &Aabb {
        &self.domain
    }

    pub fn generators(&self) -> &[WeightedGenerator] {
        &self.generators
    }

    pub fn cells(&self) -> &[ConvexPolytope] {
        &self.cells
    }

    pub fn cell(&self, i: usize) -> &ConvexPolytope {
        &self.cells[i]
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn nonempty(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.cells.len()).filter(|&i| !self.cells[i].is_empty())
    }

    pub fn total_volume(&self) -> f64 {
        self.volumes.iter().sum()
    }

    /// Whether any vertex of cell `i` lies on the domain boundary.
    pub fn touches_boundary(&self, i: usize) -> bool {
        let tol = 1e-9 * self.domain.diagonal().max(1.0);
        self.cells[i].vertices().iter().any(|v| self.domain.boundary_distance(v) <= tol)
    }
}

/// Prescribed cell volumes, positive and summing to the domain volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeTargets {
    values: Vec<f64>,
}

impl VolumeTargets {
    pub fn new(values: Vec<f64>, domain_volume: f64) -> Result<Self, TessellationError> {
        if values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(TessellationError::InvalidTargets("targets must be positive".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - domain_volume).abs() > 1e-9 * domain_volume {
            return Err(TessellationError::InvalidTargets(format!(
                "targets sum to {sum}, domain volume is {domain_volume}"
            )));
        }
        Ok(Self { values })
    }

    /// Normalises arbitrary positive sizes `X_i` to `|Q_e| X_i / sum X_j`.
    pub fn from_sizes(sizes: &[f64], domain_volume: f64) -> Result<Self, TessellationError> {
        let sum: f64 = sizes.iter().sum();
        if !(sum > 0.0) {
            return Err(TessellationError::InvalidTargets("sizes must be positive".into()));
        }
        Self::new(sizes.iter().map(|x| domain_volume * x / sum).collect(), domain_volume)
    }

    /// Targets from equivalent-sphere diameters, `V = pi d^3 / 6`, normalised.
    pub fn from_diameters(diameters: &[f64], domain_volume: f64) -> Result<Self, TessellationError> {
        let sizes: Vec<f64> = diameters.iter().map(|d| std::f64::consts::PI * d.powi(3) / 6.0).collect();
        Self::from_sizes(&sizes, domain_volume)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Homogeneous Poisson points in `domain`; `intensity` is the mean count per
/// unit volume (the unit observation window has volume 1).
pub fn poisson_generators<R: Rng + ?Sized>(
    intensity: f64,
    domain: &Aabb,
    rng: &mut R,
) -> Result<Vec<Vec3>, TessellationError> {
    if !(intensity > 0.0) {
        return Err(TessellationError::InvalidParameter(format!("intensity {intensity}")));
    }
    let mean = intensity * domain.volume();
    let n = Poisson::new(mean)
        .map_err(|e| TessellationError::InvalidParameter(e.to_string()))?
        .sample(rng) as usize;
    Ok(uniform_generators(n, domain, rng))
}

/// `n` independent uniform points in `domain`.
pub fn uniform_generators<R: Rng + ?Sized>(n: usize, domain: &Aabb, rng: &mut R) -> Vec<Vec3> {
    let e = domain.extent();
    (0..n)
        .map(|_| {
            domain.min
                + Vec3::new(rng.random::<f64>() * e.x, rng.random::<f64>() * e.y, rng.random::<f64>() * e.z)
        })
        .collect()
}

/// Equivalent diameters from a Gaussian truncated to `(0, inf)` (negative
/// draws are resampled), turned into normalised volume targets.
pub fn gaussian_volume_targets<R: Rng + ?Sized>(
    n: usize,
    mu: f64,
    sigma: f64,
    domain_volume: f64,
    rng: &mut R,
) -> Result<(VolumeTargets, Vec<f64>), TessellationError> {
    if n < 2 || !(mu > 0.0) || !(sigma > 0.0) {
        return Err(TessellationError::InvalidParameter(format!("n={n}, mu={mu}, sigma={sigma}")));
    }
    let normal = Normal::new(mu, sigma).map_err(|e| TessellationError::InvalidParameter(e.to_string()))?;
    let diameters: Vec<f64> = (0..n)
        .map(|_| loop {
            let d = normal.sample(rng);
            if d > 0.0 {
                break d;
            }
        })
        .collect();
    Ok((VolumeTargets::from_diameters(&diameters, domain_volume)?, diameters))
}

/// For each generator, the others sorted by distance.
struct NeighbourOrder {
    order: Vec<Vec<(f64, usize)>>,
}

impl NeighbourOrder {
    fn new(points: &[Vec3]) -> Result<Self, TessellationError> {
        let order: Vec<Vec<(f64, usize)>> = (0..points.len())
            .into_par_iter()
            .map(|i| {
                let mut row: Vec<(f64, usize)> = (0..points.len())
                    .filter(|&j| j != i)
                    .map(|j| ((points[j] - points[i]).norm(), j))
                    .collect();
                row.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                row
            })
            .collect();
        for (i, row) in order.iter().enumerate() {
            if let Some(&(d, j)) = row.first() {
                if d <= 1e-12 {
                    return Err(TessellationError::DuplicateGenerators(i.min(j), i.max(j)));
                }
            }
        }
        Ok(Self { order })
    }
}

fn radical_halfspace(xi: &Vec3, wi: f64, xj: &Vec3, wj: f64, dist: f64) -> (Halfspace, f64) {
    let n = (xj - xi) / dist;
    // Signed distance of the radical plane from x_i along n.
    let h = (dist * dist + wi - wj) / (2.0 * dist);
    let hs = Halfspace::new(n, n.dot(xi) + h).expect("distinct generators give a unit normal");
    (hs, h)
}

fn build_cell(
    i: usize,
    points: &[Vec3],
    weights: &[f64],
    w_max: f64,
    seed: &ConvexPolytope,
    order: &[(f64, usize)],
) -> ConvexPolytope {
    let xi = points[i];
    let wi = weights[i];
    let radius = |p: &ConvexPolytope| p.vertices().iter().map(|v| (v - xi).norm()).fold(0.0, f64::max);
    let mut cell = seed.clone();
    let mut r = radius(&cell);
    let slack = wi - w_max;
    for &(d, j) in order {
        // Lower bound on the plane distance for every remaining generator.
        if d * d >= slack && d / 2.0 + slack / (2.0 * d) > r {
            break;
        }
        let (hs, h) = radical_halfspace(&xi, wi, &points[j], weights[j], d);
        if h >= r {
            continue;
        }
        cell = cell.clip(&hs, FaceSource::Plane(j));
        if cell.is_empty() {
            break;
        }
        r = radius(&cell);
    }
    cell
}

fn assemble(
    domain: &Aabb,
    points: &[Vec3],
    weights: &[f64],
    order: &NeighbourOrder,
) -> LaguerreTessellation {
    let seed = ConvexPolytope::from_box(domain);
    let w_max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cells: Vec<ConvexPolytope> = (0..points.len())
        .into_par_iter()
        .map(|i| build_cell(i, points, weights, w_max, &seed, &order.order[i]))
        .collect();
    let mut adjacency = vec![Vec::new(); cells.len()];
    for (i, cell) in cells.iter().enumerate() {
        for f in cell.faces() {
            if let FaceSource::Plane(j) = f.source {
                if cell.face_area(f) > NEIGHBOUR_FACE_AREA {
                    adjacency[i].push(j);
                    adjacency[j].push(i);
                }
            }
        }
    }
    for row in &mut adjacency {
        row.sort_unstable();
        row.dedup();
    }
    let generators = points.iter().zip(weights).map(|(x, &w)| WeightedGenerator::new(*x, w)).collect();
    LaguerreTessellation::from_parts(*domain, generators, cells, adjacency)
}

pub fn build_laguerre(
    generators: &[WeightedGenerator],
    domain: &Aabb,
) -> Result<LaguerreTessellation, TessellationError> {
    if generators.len() < 2 {
        return Err(TessellationError::TooFewGenerators(generators.len()));
    }
    let points: Vec<Vec3> = generators.iter().map(|g| g.x).collect();
    let weights: Vec<f64> = generators.iter().map(|g| g.w).collect();
    let order = NeighbourOrder::new(&points)?;
    Ok(assemble(domain, &points, &weights, &order))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Maximum relative volume error per cell.
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { tol: 1e-2, max_iterations: 500 }
    }
}

#[derive(Debug, Clone)]
pub struct WeightFit {
    /// Normalised so the smallest weight is 0.
    pub weights: Vec<f64>,
    pub tessellation: LaguerreTessellation,
    pub iterations: usize,
    pub worst_relative_error: f64,
}

fn worst_relative_error(volumes: &[f64], targets: &[f64]) -> f64 {
    volumes.iter().zip(targets).map(|(v, t)| (v - t).abs() / t).fold(0.0, f64::max)
}

/// Off-diagonal couplings `area_ij / (2 |x_i - x_j|)` of the volume Jacobian.
fn couplings(t: &LaguerreTessellation) -> Vec<Vec<(usize, f64)>> {
    let mut acc: Vec<BTreeMap<usize, (f64, u8)>> = vec![BTreeMap::new(); t.len()];
    for (i, cell) in t.cells().iter().enumerate() {
        for f in cell.faces() {
            if let FaceSource::Plane(j) = f.source {
                let a = cell.face_area(f);
                let d = (t.generators[j].x - t.generators[i].x).norm();
                let c = a / (2.0 * d);
                for (p, q) in [(i, j), (j, i)] {
                    let e = acc[p].entry(q).or_insert((0.0, 0));
                    e.0 += c;
                    e.1 += 1;
                }
            }
        }
    }
    acc.into_iter()
        .map(|row| row.into_iter().map(|(j, (s, k))| (j, s / k as f64)).collect())
        .collect()
}

/// Solves `L x = b` for the weighted graph Laplacian by Jacobi-preconditioned
/// conjugate gradients on the mean-zero subspace.
fn solve_laplacian(rows: &[Vec<(usize, f64)>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let diag: Vec<f64> = rows.iter().map(|r| r.iter().map(|&(_, c)| c).sum::<f64>()).collect();
    let apply = |x: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| diag[i] * x[i] - rows[i].iter().map(|&(j, c)| c * x[j]).sum::<f64>())
            .collect()
    };
    let precond = |r: &[f64]| -> Vec<f64> {
        r.iter().zip(&diag).map(|(ri, &d)| if d > 0.0 { ri / d } else { 0.0 }).collect()
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mean = b.iter().sum::<f64>() / n as f64;
    let mut r: Vec<f64> = b.iter().map(|x| x - mean).collect();
    let mut x = vec![0.0; n];
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let target = 1e-12 * dot(&r, &r).sqrt().max(f64::MIN_POSITIVE);
    for _ in 0..(4 * n).max(50) {
        if dot(&r, &r).sqrt() <= target {
            break;
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    x
}

/// Weights realising prescribed cell volumes, by damped Newton ascent on the
/// concave dual of the semi-discrete transport problem.
pub fn fit_weights(
    points: &[Vec3],
    targets: &VolumeTargets,
    domain: &Aabb,
    options: FitOptions,
) -> Result<WeightFit, TessellationError> {
    if points.len() < 2 {
        return Err(TessellationError::TooFewGenerators(points.len()));
    }
    if targets.len() != points.len() {
        return Err(TessellationError::InvalidTargets(format!(
            "{} targets for {} generators",
            targets.len(),
            points.len()
        )));
    }
    if !(options.tol > 0.0 && options.tol <= 0.1) {
        return Err(TessellationError::InvalidParameter(format!("tol {}", options.tol)));
    }
    VolumeTargets::new(targets.values().to_vec(), domain.volume())?;
    let target = targets.values();
    let order = NeighbourOrder::new(points)?;
    let n = points.len();

    let mut weights = vec![0.0; n];
    let mut tess = assemble(domain, points, &weights, &order);
    let min_target = target.iter().copied().fold(f64::INFINITY, f64::min);
    let min_start = tess.volumes().iter().copied().fold(f64::INFINITY, f64::min);
    // Cells are kept at least this large along the damped path.
    let floor = 0.5 * min_target.min(min_start);
    let residual = |t: &LaguerreTessellation| -> Vec<f64> {
        target.iter().zip(t.volumes()).map(|(a, b)| a - b).collect()
    };
    let norm = |g: &[f64]| g.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut worst = worst_relative_error(tess.volumes(), target);
    let mut iterations = 0;
    while worst > options.tol {
        if iterations >= options.max_iterations {
            return Err(TessellationError::NonConvergence { iterations, worst });
        }
        iterations += 1;
        let g = residual(&tess);
        let g_norm = norm(&g);
        let step = solve_laplacian(&couplings(&tess), &g);
        let mut tau = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = weights.iter().zip(&step).map(|(w, s)| w + tau * s).collect();
            let t = assemble(domain, points, &trial, &order);
            let min_vol = t.volumes().iter().copied().fold(f64::INFINITY, f64::min);
            if min_vol >= floor && norm(&residual(&t)) <= (1.0 - tau / 2.0) * g_norm {
                accepted = Some((trial, t));
                break;
            }
            tau /= 2.0;
        }
        let Some((w, t)) = accepted else {
            return Err(TessellationError::NonConvergence { iterations, worst });
        };
        weights = w;
        tess = t;
        worst = worst_relative_error(tess.volumes(), target);
        log::debug!("weight fit iteration {iterations}: step {tau}, worst relative error {worst:.3e}");
    }

    let w_min = weights.iter().copied().fold(f64::INFINITY, f64::min);
    for w in &mut weights {
        *w -= w_min;
    }
    for (g, &w) in tess.generators.iter_mut().zip(&weights) {
        g.w = w;
    }
    Ok(WeightFit { weights, tessellation: tess, iterations, worst_relative_error: worst })
}

/// Cells hitting an observation window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlusSample {
    pub cells: Vec<usize>,
    /// Selected cells that touch the boundary of the simulation domain.
    pub boundary_violations: Vec<usize>,
}

pub fn plus_sample(t: &LaguerreTessellation, window: &Aabb) -> PlusSample {
    let min_volume = 1e-14 * window.volume();
    let cells: Vec<usize> = t
        .nonempty()
        .filter(|&i| {
            let cell = t.cell(i);
            let Some(bb) = cell.bounding_box() else { return false };
            let overlaps = (0..3).all(|k| bb.min[k] < window.max[k] && bb.max[k] > window.min[k]);
            overlaps && cell.clip_to_box(window).volume() > min_volume
        })
        .collect();
    let boundary_violations = cells.iter().copied().filter(|&i| t.touches_boundary(i)).collect();
    PlusSample { cells, boundary_violations }
}

/// Nonempty cells with no vertex on the domain boundary.
pub fn inner_cells(t: &LaguerreTessellation) -> Vec<usize> {
    t.nonempty().filter(|&i| !t.touches_boundary(i)).collect()
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cells_partition_the_domain(seed in 0u64..100_000, n in 3usize..40, spread in 0.0..0.02f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let domain = Aabb::unit();
            let gens: Vec<WeightedGenerator> = uniform_generators(n, &domain, &mut rng)
                .into_iter()
                .map(|x| WeightedGenerator::new(x, rng.random::<f64>() * spread))
                .collect();
            let t = build_laguerre(&gens, &domain).unwrap();
            prop_assert!((t.total_volume() - 1.0).abs() < 1e-6);
            for (i, nb) in t.adjacency().iter().enumerate() {
                for &j in nb {
                    prop_assert!(t.adjacency()[j].contains(&i));
                }
            }
            for i in t.nonempty() {
                let c = t.cell(i).centroid();
                let best = (0..n).min_by(|&a, &b| gens[a].power(&c).total_cmp(&gens[b].power(&c))).unwrap();
                prop_assert!((gens[best].power(&c) - gens[i].power(&c)).abs() < 1e-9);
            }
        }
    }
}
