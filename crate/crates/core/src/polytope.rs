//! Convex polytopes in 3D built by incremental halfspace clipping.
//!
//! A polytope is stored as a vertex list plus planar faces given as vertex
//! index cycles. Every face remembers the plane that supports it and where that
//! plane came from ([`FaceSource`]), which is how the tessellation recovers
//! cell adjacency from shared faces.

use std::collections::HashMap;

use nalgebra::Vector3;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Relative merge tolerance, scaled by the seed box diagonal.
pub const MERGE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolytopeError {
    #[error("halfspace normal has zero length")]
    ZeroNormal,
    #[error("invalid slab [{lo}, {hi}] for Feret interval [{alpha}, {beta}]")]
    InvalidSlab { lo: f64, hi: f64, alpha: f64, beta: f64 },
    #[error("level {t} outside Feret interval [{alpha}, {beta}]")]
    OutOfRange { t: f64, alpha: f64, beta: f64 },
    #[error("bounding box is empty")]
    EmptyBox,
}

/// Axis-aligned box `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    /// The cube `[lo, hi]^3`.
    pub fn cube(lo: f64, hi: f64) -> Self {
        Self::new(Vec3::repeat(lo), Vec3::repeat(hi))
    }

    pub fn unit() -> Self {
        Self::cube(0.0, 1.0)
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|k| self.max[k] <= self.min[k])
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn center(&self) -> Vec3 {
        0.5 * (self.min + self.max)
    }

    pub fn contains(&self, p: &Vec3, slack: f64) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - slack && p[k] <= self.max[k] + slack)
    }

    /// `other ⊆ self` up to `slack`.
    pub fn contains_box(&self, other: &Aabb, slack: f64) -> bool {
        self.contains(&other.min, slack) && self.contains(&other.max, slack)
    }

    /// Distance from `p` to the nearest box face, for points inside the box.
    pub fn boundary_distance(&self, p: &Vec3) -> f64 {
        (0..3)
            .map(|k| (p[k] - self.min[k]).min(self.max[k] - p[k]))
            .fold(f64::INFINITY, f64::min)
    }

    /// The six bounding halfspaces, ordered `-x, +x, -y, +y, -z, +z`.
    pub fn halfspaces(&self) -> [Halfspace; 6] {
        let mut out = [Halfspace::unchecked(Vec3::x(), 0.0); 6];
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = 1.0;
            out[2 * k] = Halfspace::unchecked(-e, -self.min[k]);
            out[2 * k + 1] = Halfspace::unchecked(e, self.max[k]);
        }
        out
    }
}

/// Closed halfspace `{x : <normal, x> <= offset}` with a unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Halfspace {
    normal: Vec3,
    offset: f64,
}

impl Halfspace {
    /// Builds a halfspace from any nonzero normal; both sides are rescaled so
    /// the stored normal has unit length.
    pub fn new(normal: Vec3, offset: f64) -> Result<Self, PolytopeError> {
        let len = normal.norm();
        if !(len > 0.0) || !len.is_finite() {
            return Err(PolytopeError::ZeroNormal);
        }
        Ok(Self { normal: normal / len, offset: offset / len })
    }

    fn unchecked(normal: Vec3, offset: f64) -> Self {
        Self { normal, offset }
    }

    /// Halfspace bounded by the plane through `point` with outward `normal`.
    pub fn through(point: &Vec3, normal: Vec3) -> Result<Self, PolytopeError> {
        let n = normal.try_normalize(0.0).ok_or(PolytopeError::ZeroNormal)?;
        Ok(Self { normal: n, offset: n.dot(point) })
    }

    pub fn normal(&self) -> &Vec3 {
        &self.normal
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// Positive outside, negative inside.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// Origin of a face's supporting plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaceSource {
    /// One of the seed box sides, indexed as in [`Aabb::halfspaces`].
    Box(u8),
    /// A caller-labelled plane, e.g. the radical plane against generator `j`.
    Plane(usize),
    /// An unlabelled cut.
    Cut,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    pub plane: Halfspace,
    pub source: FaceSource,
    /// Vertex indices, counter-clockwise when seen from outside.
    pub vertices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolytope {
    vertices: Vec<Vec3>,
    faces: Vec<Face>,
    eps: f64,
}

impl ConvexPolytope {
    pub fn empty(eps: f64) -> Self {
        Self { vertices: Vec::new(), faces: Vec::new(), eps }
    }

    pub fn from_box(b: &Aabb) -> Self {
        let eps = MERGE_TOLERANCE * b.diagonal();
        let (lo, hi) = (b.min, b.max);
        let vertices = (0..8)
            .map(|i| {
                Vec3::new(
                    if i & 1 == 0 { lo.x } else { hi.x },
                    if i & 2 == 0 { lo.y } else { hi.y },
                    if i & 4 == 0 { lo.z } else { hi.z },
                )
            })
            .collect();
        let cycles: [[usize; 4]; 6] = [
            [0, 4, 6, 2], // -x
            [1, 3, 7, 5], // +x
            [0, 1, 5, 4], // -y
            [2, 6, 7, 3], // +y
            [0, 2, 3, 1], // -z
            [4, 5, 7, 6], // +z
        ];
        let planes = b.halfspaces();
        let faces = cycles
            .iter()
            .enumerate()
            .map(|(k, c)| Face {
                plane: planes[k],
                source: FaceSource::Box(k as u8),
                vertices: c.to_vec(),
            })
            .collect();
        Self { vertices, faces, eps }
    }

    /// Reassembles a polytope from stored parts (used when re-ingesting exports).
    pub fn from_parts(vertices: Vec<Vec3>, faces: Vec<Face>, eps: f64) -> Self {
        Self { vertices, faces, eps }
    }

    pub fn is_empty(&self) -> bool {
        self.faces.len() < 4
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn tolerance(&self) -> f64 {
        self.eps
    }

    pub fn halfspaces(&self) -> impl Iterator<Item = &Halfspace> {
        self.faces.iter().map(|f| &f.plane)
    }

    /// Intersection with one more halfspace.
    pub fn clip(&self, h: &Halfspace, source: FaceSource) -> ConvexPolytope {
        if self.is_empty() {
            return self.clone();
        }
        let eps = self.eps;
        let dist: Vec<f64> = self.vertices.iter().map(|v| h.signed_distance(v)).collect();
        if dist.iter().all(|&d| d <= eps) {
            return self.clone();
        }
        if dist.iter().all(|&d| d >= -eps) {
            return Self::empty(eps);
        }

        let mut vertices = self.vertices.clone();
        let mut cut_points: HashMap<(usize, usize), usize> = HashMap::new();
        let mut cap: Vec<usize> = Vec::new();
        let mut faces = Vec::with_capacity(self.faces.len() + 1);
        let mut cap_covered = false;

        for (i, &d) in dist.iter().enumerate() {
            if d.abs() <= eps {
                cap.push(i);
            }
        }

        for face in &self.faces {
            let n = face.vertices.len();
            if face.vertices.iter().all(|&v| dist[v].abs() <= eps) {
                // Face lies in the cutting plane: it is the cap itself.
                if face.plane.normal.dot(&h.normal) > 0.0 {
                    cap_covered = true;
                    faces.push(face.clone());
                }
                continue;
            }
            let mut cycle = Vec::with_capacity(n + 2);
            for k in 0..n {
                let a = face.vertices[k];
                let b = face.vertices[(k + 1) % n];
                if dist[a] <= eps {
                    cycle.push(a);
                }
                let crosses = (dist[a] < -eps && dist[b] > eps) || (dist[a] > eps && dist[b] < -eps);
                if crosses {
                    let key = (a.min(b), a.max(b));
                    let idx = *cut_points.entry(key).or_insert_with(|| {
                        let (va, vb) = (self.vertices[a], self.vertices[b]);
                        let t = dist[a] / (dist[a] - dist[b]);
                        let p = va + (vb - va) * t;
                        // Reuse a nearby cap point instead of creating a sliver.
                        if let Some(&q) = cap.iter().find(|&&q| (vertices[q] - p).norm() <= eps) {
                            q
                        } else {
                            vertices.push(p);
                            cap.push(vertices.len() - 1);
                            vertices.len() - 1
                        }
                    });
                    cycle.push(idx);
                }
            }
            cycle.dedup();
            while cycle.len() > 1 && cycle.first() == cycle.last() {
                cycle.pop();
            }
            if cycle.len() >= 3 {
                faces.push(Face { plane: face.plane, source: face.source, vertices: cycle });
            }
        }

        if !cap_covered {
            cap.sort_unstable();
            cap.dedup();
            if cap.len() >= 3 {
                let ordered = order_ccw(&vertices, &cap, &h.normal);
                faces.push(Face { plane: *h, source, vertices: ordered });
            }
        }

        let mut out = Self { vertices, faces, eps };
        out.compact();
        if out.is_empty() {
            return Self::empty(eps);
        }
        out
    }

    /// Intersection with a sequence of halfspaces, each labelled with its source.
    pub fn clip_all<'a, I>(&self, planes: I) -> ConvexPolytope
    where
        I: IntoIterator<Item = (&'a Halfspace, FaceSource)>,
    {
        let mut p = self.clone();
        for (h, s) in planes {
            p = p.clip(h, s);
            if p.is_empty() {
                break;
            }
        }
        p
    }

    fn compact(&mut self) {
        let mut remap = vec![usize::MAX; self.vertices.len()];
        let mut kept = Vec::new();
        for face in &mut self.faces {
            for v in &mut face.vertices {
                if remap[*v] == usize::MAX {
                    remap[*v] = kept.len();
                    kept.push(self.vertices[*v]);
                }
                *v = remap[*v];
            }
        }
        self.vertices = kept;
    }

    fn interior_reference(&self) -> Vec3 {
        let sum: Vec3 = self.vertices.iter().sum();
        sum / self.vertices.len() as f64
    }

    /// Fan tetrahedra from an interior point: (volume, centroid) pairs.
    fn tetrahedra(&self) -> impl Iterator<Item = (f64, Vec3)> + '_ {
        let r = self.interior_reference();
        self.faces.iter().flat_map(move |f| {
            let v0 = self.vertices[f.vertices[0]];
            f.vertices.windows(2).skip(1).map(move |w| {
                let (v1, v2) = (self.vertices[w[0]], self.vertices[w[1]]);
                let vol = (v0 - r).dot(&(v1 - r).cross(&(v2 - r))).abs() / 6.0;
                (vol, (r + v0 + v1 + v2) / 4.0)
            })
        })
    }

    pub fn volume(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.tetrahedra().map(|(v, _)| v).sum()
    }

    /// Volume centroid.
    pub fn centroid(&self) -> Vec3 {
        if self.is_empty() {
            return Vec3::zeros();
        }
        let (mut vol, mut acc) = (0.0, Vec3::zeros());
        for (v, c) in self.tetrahedra() {
            vol += v;
            acc += c * v;
        }
        if vol > 0.0 {
            acc / vol
        } else {
            self.interior_reference()
        }
    }

    pub fn face_area(&self, face: &Face) -> f64 {
        let v0 = self.vertices[face.vertices[0]];
        face.vertices
            .windows(2)
            .skip(1)
            .map(|w| (self.vertices[w[0]] - v0).cross(&(self.vertices[w[1]] - v0)).norm() / 2.0)
            .sum()
    }

    pub fn contains(&self, p: &Vec3, slack: f64) -> bool {
        !self.is_empty() && self.faces.iter().all(|f| f.plane.signed_distance(p) <= slack)
    }

    pub fn bounding_box(&self) -> Option<Aabb> {
        let first = self.vertices.first()?;
        let (mut lo, mut hi) = (*first, *first);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        Some(Aabb::new(lo, hi))
    }

    pub fn clip_to_box(&self, b: &Aabb) -> ConvexPolytope {
        let planes = b.halfspaces();
        self.clip_all(planes.iter().enumerate().map(|(k, h)| (h, FaceSource::Box(k as u8))))
    }

    /// Smallest distance from `p` to any face plane (negative if outside).
    pub fn depth(&self, p: &Vec3) -> f64 {
        self.faces
            .iter()
            .map(|f| -f.plane.signed_distance(p))
            .fold(f64::INFINITY, f64::min)
    }
}

fn order_ccw(vertices: &[Vec3], ids: &[usize], normal: &Vec3) -> Vec<usize> {
    let center: Vec3 = ids.iter().map(|&i| vertices[i]).sum::<Vec3>() / ids.len() as f64;
    let helper = if normal.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = normal.cross(&helper).normalize();
    let e2 = normal.cross(&e1);
    let mut keyed: Vec<(f64, usize)> = ids
        .iter()
        .map(|&i| {
            let d = vertices[i] - center;
            (d.dot(&e2).atan2(d.dot(&e1)), i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Intersection of `halfspaces` with `bounding_box`. An empty result is a
/// polytope with `is_empty() == true`.
pub fn intersect_halfspaces(
    halfspaces: &[Halfspace],
    bounding_box: &Aabb,
) -> Result<ConvexPolytope, PolytopeError> {
    if bounding_box.is_empty() {
        return Err(PolytopeError::EmptyBox);
    }
    let seed = ConvexPolytope::from_box(bounding_box);
    Ok(seed.clip_all(halfspaces.iter().enumerate().map(|(i, h)| (h, FaceSource::Plane(i)))))
}

pub fn volume(p: &ConvexPolytope) -> f64 {
    p.volume()
}

/// Orthogonal projection of a polytope onto the line through its centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeretInterval {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub direction: Vec3,
    pub anchor: Vec3,
}

impl FeretInterval {
    /// Level of `x` along the direction, relative to the anchor.
    pub fn level(&self, x: &Vec3) -> f64 {
        (x - self.anchor).dot(&self.direction)
    }

    /// Halfspace `{x : level(x) <= t}`.
    pub fn below(&self, t: f64) -> Halfspace {
        Halfspace::unchecked(self.direction, self.direction.dot(&self.anchor) + t)
    }

    /// Halfspace `{x : level(x) >= t}`.
    pub fn above(&self, t: f64) -> Halfspace {
        Halfspace::unchecked(-self.direction, -(self.direction.dot(&self.anchor) + t))
    }

    pub fn slack(&self) -> f64 {
        1e-9 * self.rho.max(1.0)
    }
}

pub fn feret_interval(p: &ConvexPolytope, direction: &Vec3) -> FeretInterval {
    let direction = direction.normalize();
    let anchor = p.centroid();
    let (mut alpha, mut beta) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in p.vertices() {
        let s = (v - anchor).dot(&direction);
        alpha = alpha.min(s);
        beta = beta.max(s);
    }
    FeretInterval { alpha, beta, rho: beta - alpha, direction, anchor }
}

/// Part of `p` with `lo <= level <= hi`.
pub fn clip_slab(
    p: &ConvexPolytope,
    f: &FeretInterval,
    lo: f64,
    hi: f64,
) -> Result<ConvexPolytope, PolytopeError> {
    let slack = f.slack();
    if !(lo < hi) || lo < f.alpha - slack || hi > f.beta + slack {
        return Err(PolytopeError::InvalidSlab { lo, hi, alpha: f.alpha, beta: f.beta });
    }
    Ok(p.clip(&f.below(hi), FaceSource::Cut).clip(&f.above(lo), FaceSource::Cut))
}

/// `V(t)`: volume of the part of `p` below level `t`.
pub fn volume_function(p: &ConvexPolytope, f: &FeretInterval, t: f64) -> Result<f64, PolytopeError> {
    let slack = f.slack();
    if t < f.alpha - slack || t > f.beta + slack {
        return Err(PolytopeError::OutOfRange { t, alpha: f.alpha, beta: f.beta });
    }
    if t <= f.alpha {
        return Ok(0.0);
    }
    if t >= f.beta {
        return Ok(p.volume());
    }
    Ok(p.clip(&f.below(t), FaceSource::Cut).volume())
}

/// Cached form of [`volume_function`].
///
/// Between consecutive vertex levels the cross-section is a polygon whose
/// vertices move linearly, so its area is quadratic and `V` is cubic. Each
/// segment is stored by four samples and evaluated by Lagrange interpolation.
#[derive(Debug, Clone)]
pub struct VolumeProfile {
    feret: FeretInterval,
    knots: Vec<f64>,
    samples: Vec<[f64; 4]>,
    total: f64,
}

impl VolumeProfile {
    pub fn new(p: &ConvexPolytope, f: &FeretInterval) -> Self {
        let mut levels: Vec<f64> = p.vertices().iter().map(|v| f.level(v)).collect();
        levels.sort_by(f64::total_cmp);
        let min_gap = 1e-12 * f.rho.max(f64::MIN_POSITIVE);
        let mut knots: Vec<f64> = Vec::with_capacity(levels.len());
        for t in levels {
            match knots.last() {
                Some(&last) if t - last <= min_gap => {}
                _ => knots.push(t),
            }
        }
        if let Some(last) = knots.last_mut() {
            *last = f.beta;
        }
        if let Some(first) = knots.first_mut() {
            *first = f.alpha;
        }
        let total = p.volume();
        let below = |t: f64| -> f64 {
            if t <= f.alpha {
                0.0
            } else if t >= f.beta {
                total
            } else {
                p.clip(&f.below(t), FaceSource::Cut).volume()
            }
        };
        let at_knots: Vec<f64> = knots.iter().map(|&t| below(t)).collect();
        let samples = knots
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let len = w[1] - w[0];
                [at_knots[k], below(w[0] + len / 3.0), below(w[0] + 2.0 * len / 3.0), at_knots[k + 1]]
            })
            .collect();
        Self { feret: *f, knots, samples, total }
    }

    pub fn feret(&self) -> &FeretInterval {
        &self.feret
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// `V(t)`, clamped to `[0, |p|]` outside the Feret interval.
    pub fn eval(&self, t: f64) -> f64 {
        if t <= self.feret.alpha || self.samples.is_empty() {
            return 0.0;
        }
        if t >= self.feret.beta {
            return self.total;
        }
        let k = match self.knots.partition_point(|&x| x <= t) {
            0 => 0,
            i => (i - 1).min(self.samples.len() - 1),
        };
        let (a, b) = (self.knots[k], self.knots[k + 1]);
        let u = (t - a) / (b - a);
        let s = &self.samples[k];
        // Lagrange basis on nodes 0, 1/3, 2/3, 1.
        let (u0, u1, u2, u3) = (u, u - 1.0 / 3.0, u - 2.0 / 3.0, u - 1.0);
        let l0 = u1 * u2 * u3 / (-1.0 / 3.0 * -2.0 / 3.0 * -1.0);
        let l1 = u0 * u2 * u3 / (1.0 / 3.0 * -1.0 / 3.0 * -2.0 / 3.0);
        let l2 = u0 * u1 * u3 / (2.0 / 3.0 * 1.0 / 3.0 * -1.0 / 3.0);
        let l3 = u0 * u1 * u2 / (1.0 * 2.0 / 3.0 * 1.0 / 3.0);
        (s[0] * l0 + s[1] * l1 + s[2] * l2 + s[3] * l3).clamp(0.0, self.total)
    }

    /// Volume of the slab `lo <= level <= hi`.
    pub fn slab(&self, lo: f64, hi: f64) -> f64 {
        (self.eval(hi) - self.eval(lo)).max(0.0)
    }
}
