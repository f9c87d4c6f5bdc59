//! Strain energy density from per-element stress and strain, split by phase.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use nalgebra::Matrix3;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::lamellae::{NestedTessellation, Phase};
use crate::polytope::{Aabb, ConvexPolytope, Vec3};
use crate::schema::{csv_header_line, strip_csv_schema, SchemaError, ELEM_SCHEMA};

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error("element {0}: centroid outside the observation window")]
    OutsideDomain(usize),
    #[error("phase {0} has zero volume")]
    EmptyPhase(&'static str),
    #[error("no element records")]
    NoRecords,
    #[error("element {id}: {reason}")]
    InvalidRecord { id: usize, reason: String },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ElementPhase {
    Lamella,
    Matrix,
    Straddling,
    Unclassified,
}

impl ElementPhase {
    pub fn as_str(&self) -> &'static str {
        match self {
            ElementPhase::Lamella => "lamella",
            ElementPhase::Matrix => "matrix",
            ElementPhase::Straddling => "straddling",
            ElementPhase::Unclassified => "unclassified",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "lamella" => ElementPhase::Lamella,
            "matrix" => ElementPhase::Matrix,
            "straddling" => ElementPhase::Straddling,
            "unclassified" | "" => ElementPhase::Unclassified,
            _ => return None,
        })
    }
}

impl From<Phase> for ElementPhase {
    fn from(p: Phase) -> Self {
        match p {
            Phase::Lamella => ElementPhase::Lamella,
            Phase::Matrix => ElementPhase::Matrix,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElementRecord {
    pub element_id: usize,
    pub centroid: Vec3,
    pub volume: f64,
    /// MPa.
    pub stress: Matrix3<f64>,
    pub strain: Matrix3<f64>,
    pub phase: ElementPhase,
}

impl ElementRecord {
    pub fn validate(&self) -> Result<(), EnergyError> {
        let bad = |reason: &str| Err(EnergyError::InvalidRecord { id: self.element_id, reason: reason.into() });
        if !(self.volume > 0.0) || !self.volume.is_finite() {
            return bad("volume must be positive");
        }
        let scale = |m: &Matrix3<f64>| m.abs().max().max(1.0);
        if (self.stress - self.stress.transpose()).abs().max() > 1e-9 * scale(&self.stress) {
            return bad("stress is not symmetric");
        }
        if (self.strain - self.strain.transpose()).abs().max() > 1e-9 * scale(&self.strain) {
            return bad("strain is not symmetric");
        }
        Ok(())
    }
}

/// Deterministic pairwise summation.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// `1/2 sigma : epsilon`, all nine terms.
pub fn element_energy(r: &ElementRecord) -> f64 {
    0.5 * r.stress.component_mul(&r.strain).sum()
}

pub fn tsed(records: &[ElementRecord]) -> Result<f64, EnergyError> {
    if records.is_empty() {
        return Err(EnergyError::NoRecords);
    }
    let terms: Vec<f64> = records.iter().map(|r| element_energy(r) * r.volume).collect();
    Ok(pairwise_sum(&terms))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsedResult {
    pub w_total: f64,
    pub w_lamella: Option<f64>,
    pub w_matrix: Option<f64>,
    pub v_l: f64,
    pub v_m: f64,
    pub straddling_count: usize,
    pub straddling_volume: f64,
}

impl TsedResult {
    pub fn lamella(&self) -> Result<f64, EnergyError> {
        self.w_lamella.ok_or(EnergyError::EmptyPhase("lamella"))
    }

    pub fn matrix(&self) -> Result<f64, EnergyError> {
        self.w_matrix.ok_or(EnergyError::EmptyPhase("matrix"))
    }
}

/// Total and per-phase energy densities; straddling and unclassified
/// elements enter only the total.
pub fn phase_tsed(records: &[ElementRecord]) -> Result<TsedResult, EnergyError> {
    let w_total = tsed(records)?;
    let part = |phase: ElementPhase| -> (f64, f64) {
        let sel: Vec<&ElementRecord> = records.iter().filter(|r| r.phase == phase).collect();
        let vol: Vec<f64> = sel.iter().map(|r| r.volume).collect();
        let e: Vec<f64> = sel.iter().map(|r| element_energy(r) * r.volume).collect();
        (pairwise_sum(&vol), pairwise_sum(&e))
    };
    let (v_l, e_l) = part(ElementPhase::Lamella);
    let (v_m, e_m) = part(ElementPhase::Matrix);
    let (straddling_volume, _) = part(ElementPhase::Straddling);
    let straddling_count = records.iter().filter(|r| r.phase == ElementPhase::Straddling).count();
    Ok(TsedResult {
        w_total,
        w_lamella: (v_l > 0.0).then(|| e_l / v_l),
        w_matrix: (v_m > 0.0).then(|| e_m / v_m),
        v_l,
        v_m,
        straddling_count,
        straddling_volume,
    })
}

/// Locates the mother cell by minimal power distance.
fn mother_cell(n: &NestedTessellation, x: &Vec3) -> Option<usize> {
    let g = n.mother.generators();
    n.mother.nonempty().min_by(|&a, &b| g[a].power(x).total_cmp(&g[b].power(x)))
}

/// Phase of the subcell holding the element centroid. Elements whose
/// bounding sphere, of radius twice the equal-volume radius, may reach a
/// lamella boundary are straddling.
pub fn classify_phase(r: &ElementRecord, n: &NestedTessellation, window: &Aabb) -> Result<ElementPhase, EnergyError> {
    let c = r.centroid;
    if !window.contains(&c, 1e-9) {
        return Err(EnergyError::OutsideDomain(r.element_id));
    }
    let Some(cell) = mother_cell(n, &c) else { return Ok(ElementPhase::Matrix) };
    let radius = 2.0 * (3.0 * r.volume / (4.0 * std::f64::consts::PI)).cbrt();
    let own_lamella_depth = n.systems.get(&cell).and_then(|s| {
        s.lamellae.iter().map(|l| l.polytope.depth(&c)).find(|&d| d >= 0.0)
    });
    if let Some(depth) = own_lamella_depth {
        return Ok(if depth >= radius { ElementPhase::Lamella } else { ElementPhase::Straddling });
    }
    let mut nearby: BTreeSet<usize> = BTreeSet::from([cell]);
    if n.mother.cell(cell).depth(&c) < radius {
        nearby.extend(n.mother.adjacency()[cell].iter().copied());
    }
    let close = nearby
        .iter()
        .filter_map(|id| n.systems.get(id))
        .flat_map(|s| s.lamellae.iter())
        .any(|l| l.polytope.depth(&c) > -radius);
    Ok(if close { ElementPhase::Straddling } else { ElementPhase::Matrix })
}

pub fn classify_all(records: &mut [ElementRecord], n: &NestedTessellation, window: &Aabb) -> Result<(), EnergyError> {
    for r in records.iter_mut() {
        r.phase = classify_phase(r, n, window)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    /// Elements per unit volume.
    pub density: f64,
    /// Mean energy densities in MPa.
    pub lamella_energy: f64,
    pub matrix_energy: f64,
    /// Relative standard deviation of per-element energy.
    pub noise: f64,
    /// Axial strain carried by every element.
    pub strain_amplitude: f64,
    /// Loading direction of the uniaxial field.
    pub direction: Vec3,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            density: 50_000.0,
            lamella_energy: 200.0,
            matrix_energy: 100.0,
            noise: 0.05,
            strain_amplitude: 0.01,
            direction: Vec3::z(),
        }
    }
}

/// Uniform point in a convex polytope via a volume-weighted tetrahedral fan.
fn tetra_fan(p: &ConvexPolytope) -> Vec<[Vec3; 4]> {
    let c = p.centroid();
    let v = p.vertices();
    let mut out = Vec::new();
    for f in p.faces() {
        for k in 1..f.vertices.len().saturating_sub(1) {
            out.push([c, v[f.vertices[0]], v[f.vertices[k]], v[f.vertices[k + 1]]]);
        }
    }
    out
}

fn tetra_volume(t: &[Vec3; 4]) -> f64 {
    ((t[1] - t[0]).cross(&(t[2] - t[0])).dot(&(t[3] - t[0])) / 6.0).abs()
}

fn sample_in_tetra<R: Rng + ?Sized>(t: &[Vec3; 4], rng: &mut R) -> Vec3 {
    let (mut s, mut u, mut v): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    if s + u > 1.0 {
        s = 1.0 - s;
        u = 1.0 - u;
    }
    if u + v > 1.0 {
        let tmp = v;
        v = 1.0 - s - u;
        u = 1.0 - tmp;
    } else if s + u + v > 1.0 {
        let tmp = v;
        v = s + u + v - 1.0;
        s = 1.0 - u - tmp;
    }
    t[0] + s * (t[1] - t[0]) + u * (t[2] - t[0]) + v * (t[3] - t[0])
}

/// Synthetic stand-in for finite-element output: each subcell gets
/// `round(density * volume)` elements (at least one) sharing its volume
/// equally, with a uniaxial field whose energy density is the phase mean
/// times `1 + noise * N(0, 1)`. Phases are known by construction.
pub fn synthesize_elements<R: Rng + ?Sized>(
    n: &NestedTessellation,
    params: &SynthParams,
    rng: &mut R,
) -> Vec<ElementRecord> {
    let d = params.direction.normalize();
    let dd = d * d.transpose();
    let mut out = Vec::new();
    for sub in &n.subcells {
        let vol = sub.polytope.volume();
        if !(vol > 0.0) {
            continue;
        }
        let k = ((params.density * vol).round() as usize).max(1);
        let tets = tetra_fan(&sub.polytope);
        let weights: Vec<f64> = tets.iter().map(tetra_volume).collect();
        let Ok(pick) = WeightedIndex::new(&weights) else { continue };
        let mean = match sub.phase {
            Phase::Lamella => params.lamella_energy,
            Phase::Matrix => params.matrix_energy,
        };
        for _ in 0..k {
            let centroid = sample_in_tetra(&tets[pick.sample(rng)], rng);
            let z: f64 = rng.sample(StandardNormal);
            let energy = mean * (1.0 + params.noise * z);
            let strain = params.strain_amplitude * dd;
            let stress = (2.0 * energy / params.strain_amplitude) * dd;
            out.push(ElementRecord {
                element_id: out.len(),
                centroid,
                volume: vol / k as f64,
                stress,
                strain,
                phase: sub.phase.into(),
            });
        }
    }
    out
}

const ELEM_COLUMNS: [&str; 18] = [
    "element_id", "cx", "cy", "cz", "volume", "s11", "s22", "s33", "s12", "s13", "s23", "e11", "e22", "e33", "e12",
    "e13", "e23", "phase",
];

fn sym_components(m: &Matrix3<f64>) -> [f64; 6] {
    [m[(0, 0)], m[(1, 1)], m[(2, 2)], m[(0, 1)], m[(0, 2)], m[(1, 2)]]
}

fn from_sym(c: &[f64]) -> Matrix3<f64> {
    Matrix3::new(c[0], c[3], c[4], c[3], c[1], c[5], c[4], c[5], c[2])
}

/// Writes records with the schema line; `phase` is an optional trailing column.
pub fn write_elements<W: Write>(records: &[ElementRecord], mut out: W) -> Result<(), EnergyError> {
    out.write_all(csv_header_line(ELEM_SCHEMA).as_bytes())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ELEM_COLUMNS)?;
    for r in records {
        let mut row: Vec<String> = vec![r.element_id.to_string()];
        row.extend([r.centroid.x, r.centroid.y, r.centroid.z, r.volume].iter().map(f64::to_string));
        row.extend(sym_components(&r.stress).iter().map(f64::to_string));
        row.extend(sym_components(&r.strain).iter().map(f64::to_string));
        row.push(r.phase.as_str().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_elements<R: Read>(mut input: R) -> Result<Vec<ElementRecord>, EnergyError> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let body = strip_csv_schema(&text, ELEM_SCHEMA)?;
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(body.as_bytes());
    let headers = rdr.headers()?.clone();
    let expected = &ELEM_COLUMNS[..17];
    if headers.len() < 17 || headers.iter().take(17).ne(expected.iter().copied()) {
        return Err(SchemaError::Parse(format!("unexpected element columns: {headers:?}")).into());
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let parse = |i: usize| -> Result<f64, EnergyError> {
            row.get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| SchemaError::Parse(format!("bad value in column {}", ELEM_COLUMNS[i])).into())
        };
        let element_id = row
            .get(0)
            .and_then(|s| s.trim().parse::<usize>().ok())
            .ok_or_else(|| SchemaError::Parse("bad element_id".into()))?;
        let v: Vec<f64> = (1..17).map(parse).collect::<Result<_, _>>()?;
        let phase = match row.get(17) {
            Some(s) => ElementPhase::parse(s.trim()).ok_or_else(|| SchemaError::Parse(format!("unknown phase {s}")))?,
            None => ElementPhase::Unclassified,
        };
        let rec = ElementRecord {
            element_id,
            centroid: Vec3::new(v[0], v[1], v[2]),
            volume: v[3],
            stress: from_sym(&v[4..10]),
            strain: from_sym(&v[10..16]),
            phase,
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lamellae::{build_nested, clip_to_window, grow_lamellae, LamellaParams};
    use crate::orientation::Orientation;
    use crate::tessellation::{build_laguerre, WeightedGenerator};
    use crate::twinning::{twin_state, TwinDecisionParams, TwinningSystem};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rec(stress: Matrix3<f64>, strain: Matrix3<f64>, volume: f64, phase: ElementPhase) -> ElementRecord {
        ElementRecord { element_id: 0, centroid: Vec3::repeat(0.5), volume, stress, strain, phase }
    }

    fn uniaxial(s: f64) -> Matrix3<f64> {
        let mut m = Matrix3::zeros();
        m[(2, 2)] = s;
        m
    }

    #[test]
    fn element_energy_cases() {
        let zero = rec(uniaxial(100.0), Matrix3::zeros(), 1.0, ElementPhase::Matrix);
        assert_eq!(element_energy(&zero), 0.0);
        let ax = rec(uniaxial(100.0), uniaxial(0.01), 1.0, ElementPhase::Matrix);
        assert!((element_energy(&ax) - 0.5).abs() < 1e-15);
        let mut s = Matrix3::zeros();
        s[(0, 1)] = 50.0;
        s[(1, 0)] = 50.0;
        let mut e = Matrix3::zeros();
        e[(0, 1)] = 0.002;
        e[(1, 0)] = 0.002;
        assert!((element_energy(&rec(s, e, 1.0, ElementPhase::Matrix)) - 0.1).abs() < 1e-15);
        for c in [0.0, 2.0, -1.0] {
            let scaled = rec(uniaxial(100.0 * c), uniaxial(0.01), 1.0, ElementPhase::Matrix);
            assert!((element_energy(&scaled) - c * 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn tsed_cases() {
        let one = rec(uniaxial(400.0), uniaxial(0.01), 1.0, ElementPhase::Matrix);
        assert!((tsed(&[one.clone()]).unwrap() - 2.0).abs() < 1e-15);
        let half = rec(uniaxial(400.0), uniaxial(0.01), 0.5, ElementPhase::Matrix);
        assert!((tsed(&[half.clone(), half]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(tsed(&[]), Err(EnergyError::NoRecords)));
        let mut r = rng(1);
        let mut many: Vec<ElementRecord> = (0..500)
            .map(|_| rec(uniaxial(r.random::<f64>() * 100.0), uniaxial(0.01), 0.002, ElementPhase::Matrix))
            .collect();
        let a = tsed(&many).unwrap();
        many.reverse();
        assert!((tsed(&many).unwrap() - a).abs() < 1e-12 * a);
    }

    #[test]
    fn phase_decomposition() {
        // Uniform E = 2 in lamellae and 1 in the matrix.
        let lam = rec(uniaxial(400.0), uniaxial(0.01), 0.3, ElementPhase::Lamella);
        let mat = rec(uniaxial(200.0), uniaxial(0.01), 0.7, ElementPhase::Matrix);
        let res = phase_tsed(&[lam.clone(), mat.clone()]).unwrap();
        assert!((res.lamella().unwrap() - 2.0).abs() < 1e-12);
        assert!((res.matrix().unwrap() - 1.0).abs() < 1e-12);
        assert!((res.w_total - (res.v_l * 2.0 + res.v_m * 1.0)).abs() < 1e-12);
        let only_matrix = phase_tsed(&[mat]).unwrap();
        assert!((only_matrix.matrix().unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(only_matrix.lamella(), Err(EnergyError::EmptyPhase("lamella"))));
    }

    fn nested_with_lamella() -> NestedTessellation {
        let pts = [Vec3::new(0.25, 0.5, 0.5), Vec3::new(0.75, 0.5, 0.5)];
        let g: Vec<WeightedGenerator> = pts.iter().map(|&x| WeightedGenerator::new(x, 0.0)).collect();
        let t = build_laguerre(&g, &Aabb::unit()).unwrap();
        let mut r = rng(2);
        let p = LamellaParams { l_max: 1, ..LamellaParams::default() };
        let sys = grow_lamellae(0, t.cell(0), &Vec3::x(), 0.3, &p, &mut r).unwrap();
        let params = TwinDecisionParams::new(0.01, 0.02, 0.4, 0.6, Vec3::z()).unwrap();
        let mut st = twin_state(&Orientation::identity(), 0.5, &TwinningSystem::bcc_114(), &params, 0.01).unwrap();
        st.decision = true;
        let marks = vec![Orientation::identity(); 2];
        build_nested(&t, &marks, &BTreeMap::from([(0, st)]), BTreeMap::from([(0, sys)])).unwrap()
    }

    #[test]
    fn classification() {
        let n = nested_with_lamella();
        let l = &n.systems[&0].lamellae[0];
        let f = &n.systems[&0].feret;
        let center = f.anchor + f.direction * l.d;
        let at = |x: f64, vol: f64| ElementRecord {
            element_id: 1,
            centroid: Vec3::new(x, 0.5, 0.5),
            volume: vol,
            stress: Matrix3::zeros(),
            strain: Matrix3::zeros(),
            phase: ElementPhase::Unclassified,
        };
        let w = Aabb::unit();
        assert_eq!(classify_phase(&at(center.x, 1e-9), &n, &w).unwrap(), ElementPhase::Lamella);
        assert_eq!(classify_phase(&at(0.9, 1e-9), &n, &w).unwrap(), ElementPhase::Matrix);
        assert_eq!(classify_phase(&at(center.x + l.w, 1e-9), &n, &w).unwrap(), ElementPhase::Straddling);
        assert!(matches!(classify_phase(&at(1.5, 1e-9), &n, &w), Err(EnergyError::OutsideDomain(1))));
    }

    #[test]
    fn synthetic_elements_recover_constants() {
        let n = clip_to_window(&nested_with_lamella(), &Aabb::unit());
        let p = SynthParams { noise: 0.0, density: 5000.0, lamella_energy: 2.0, matrix_energy: 1.0, ..Default::default() };
        let recs = synthesize_elements(&n, &p, &mut rng(3));
        let total_volume: f64 = recs.iter().map(|r| r.volume).sum();
        assert!((total_volume - 1.0).abs() < 1e-6);
        let res = phase_tsed(&recs).unwrap();
        assert!((res.lamella().unwrap() - 2.0).abs() < 1e-9);
        assert!((res.matrix().unwrap() - 1.0).abs() < 1e-9);
        assert!((res.w_total - (res.v_l * 2.0 + res.v_m)).abs() < 1e-9 * res.w_total);
        assert!(recs.iter().all(|r| Aabb::unit().contains(&r.centroid, 1e-12)));
        // Sampled centroids land in a subcell of the stated phase.
        let mut lam = recs.iter().filter(|r| r.phase == ElementPhase::Lamella);
        let l = &n.systems[&0].lamellae[0];
        assert!(lam.all(|r| l.polytope.contains(&r.centroid, 1e-12)));
    }

    #[test]
    fn synthetic_resolution_stability() {
        let n = clip_to_window(&nested_with_lamella(), &Aabb::unit());
        let p = SynthParams { density: 20_000.0, ..Default::default() };
        let a = tsed(&synthesize_elements(&n, &p, &mut rng(4))).unwrap();
        let b = tsed(&synthesize_elements(&n, &SynthParams { density: 40_000.0, ..p }, &mut rng(5))).unwrap();
        assert!((a - b).abs() / a < 0.01);
    }

    #[test]
    fn csv_roundtrip() {
        let n = clip_to_window(&nested_with_lamella(), &Aabb::unit());
        let recs = synthesize_elements(&n, &SynthParams { density: 200.0, ..Default::default() }, &mut rng(6));
        let mut buf = Vec::new();
        write_elements(&recs, &mut buf).unwrap();
        let back = read_elements(buf.as_slice()).unwrap();
        assert_eq!(back, recs);
        let mut again = Vec::new();
        write_elements(&back, &mut again).unwrap();
        assert_eq!(buf, again);
        let wrong = String::from_utf8(buf).unwrap().replacen("twinlab-elem/1", "twinlab-elem/2", 1);
        assert!(matches!(read_elements(wrong.as_bytes()), Err(EnergyError::Schema(_))));
    }

    #[test]
    fn rejects_asymmetric_tensors() {
        let mut s = Matrix3::zeros();
        s[(0, 1)] = 1.0;
        assert!(rec(s, Matrix3::zeros(), 1.0, ElementPhase::Matrix).validate().is_err());
        assert!(rec(Matrix3::zeros(), Matrix3::zeros(), 0.0, ElementPhase::Matrix).validate().is_err());
    }
}
