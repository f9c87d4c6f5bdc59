//! File formats through which the stages compose.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lamellae::{system_from_normalized, LamellarSystem, NestedTessellation};
use crate::orientation::Orientation;
use crate::polytope::{Aabb, Vec3};
use crate::schema::{
    check, csv_header_line, strip_csv_schema, SchemaError, LAMELLA_SCHEMA, MARKS_SCHEMA, SUBCELL_SCHEMA,
    TESS_SCHEMA, TWIN_SCHEMA,
};
use crate::stats::{Histogram, IpfRecord, Kde2D};
use crate::tessellation::{build_laguerre, LaguerreTessellation, WeightedGenerator};
use crate::twinning::TwinState;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

fn parse_err(what: &str, value: &str) -> ExportError {
    SchemaError::Parse(format!("bad {what}: {value:?}")).into()
}

fn read_all<R: Read>(mut input: R) -> Result<String, ExportError> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    Ok(text)
}

struct Table<'a> {
    rows: Vec<csv::StringRecord>,
    columns: &'a [&'a str],
}

impl<'a> Table<'a> {
    fn parse(text: &str, schema: &str, columns: &'a [&'a str]) -> Result<Self, ExportError> {
        let body = strip_csv_schema(text, schema)?;
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        if rdr.headers()?.iter().ne(columns.iter().copied()) {
            return Err(SchemaError::Parse(format!("unexpected columns {:?}", rdr.headers()?)).into());
        }
        let rows = rdr.records().collect::<Result<_, _>>()?;
        Ok(Self { rows, columns })
    }

    fn f64(&self, row: &csv::StringRecord, i: usize) -> Result<f64, ExportError> {
        row[i].parse().map_err(|_| parse_err(self.columns[i], &row[i]))
    }

    fn usize(&self, row: &csv::StringRecord, i: usize) -> Result<usize, ExportError> {
        row[i].parse().map_err(|_| parse_err(self.columns[i], &row[i]))
    }

    fn bool(&self, row: &csv::StringRecord, i: usize) -> Result<bool, ExportError> {
        row[i].parse().map_err(|_| parse_err(self.columns[i], &row[i]))
    }

    fn quaternion(&self, row: &csv::StringRecord, from: usize) -> Result<Orientation, ExportError> {
        let q: Vec<f64> = (from..from + 4).map(|i| self.f64(row, i)).collect::<Result<_, _>>()?;
        Orientation::from_unit_components(q[0], q[1], q[2], q[3])
            .ok_or_else(|| parse_err("unit quaternion", &format!("{q:?}")))
    }
}

fn write_table<W: Write>(
    out: W,
    schema: Option<&str>,
    columns: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<(), ExportError> {
    let mut out = out;
    if let Some(s) = schema {
        out.write_all(csv_header_line(s).as_bytes())?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(columns)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn s(x: f64) -> String {
    x.to_string()
}

fn quat(g: &Orientation) -> [String; 4] {
    g.components().map(s)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TessDoc {
    schema: String,
    domain_min: [f64; 3],
    domain_max: [f64; 3],
    generators: Vec<GeneratorDoc>,
    volumes: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorDoc {
    x: [f64; 3],
    w: f64,
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Generators, weights and cell volumes; the cells themselves are rebuilt
/// on import.
pub fn write_tess<W: Write>(t: &LaguerreTessellation, out: W) -> Result<(), ExportError> {
    let doc = TessDoc {
        schema: TESS_SCHEMA.to_string(),
        domain_min: arr(&t.domain().min),
        domain_max: arr(&t.domain().max),
        generators: t.generators().iter().map(|g| GeneratorDoc { x: arr(&g.x), w: g.w }).collect(),
        volumes: t.volumes().to_vec(),
    };
    let mut out = out;
    serde_json::to_writer_pretty(&mut out, &doc)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn read_tess<R: Read>(input: R) -> Result<LaguerreTessellation, ExportError> {
    let doc: TessDoc = serde_json::from_str(&read_all(input)?)?;
    check(&doc.schema, TESS_SCHEMA)?;
    let v = |a: [f64; 3]| Vec3::new(a[0], a[1], a[2]);
    let domain = Aabb::new(v(doc.domain_min), v(doc.domain_max));
    let gens: Vec<WeightedGenerator> = doc.generators.iter().map(|g| WeightedGenerator::new(v(g.x), g.w)).collect();
    let t = build_laguerre(&gens, &domain).map_err(|e| ExportError::Invalid(e.to_string()))?;
    if doc.volumes.len() != t.len() {
        return Err(ExportError::Invalid(format!("{} volumes for {} generators", doc.volumes.len(), t.len())));
    }
    let tol = 1e-9 * domain.volume();
    for (i, (&a, &b)) in doc.volumes.iter().zip(t.volumes()).enumerate() {
        if (a - b).abs() > tol {
            return Err(ExportError::Invalid(format!("cell {i}: stored volume {a}, rebuilt {b}")));
        }
    }
    Ok(t)
}

const MARK_COLUMNS: [&str; 5] = ["cell_id", "q0", "q1", "q2", "q3"];

pub fn write_marks<W: Write>(marks: &[Orientation], out: W) -> Result<(), ExportError> {
    let rows = marks.iter().enumerate().map(|(i, g)| {
        let mut r = vec![i.to_string()];
        r.extend(quat(g));
        r
    });
    write_table(out, Some(MARKS_SCHEMA), &MARK_COLUMNS, rows)
}

/// Marks indexed by cell; ids must run `0..n` in order.
pub fn read_marks<R: Read>(input: R) -> Result<Vec<Orientation>, ExportError> {
    let text = read_all(input)?;
    let t = Table::parse(&text, MARKS_SCHEMA, &MARK_COLUMNS)?;
    let mut out = Vec::with_capacity(t.rows.len());
    for (k, row) in t.rows.iter().enumerate() {
        if t.usize(row, 0)? != k {
            return Err(ExportError::Invalid(format!("mark rows out of order at {k}")));
        }
        out.push(t.quaternion(row, 1)?);
    }
    Ok(out)
}

const TWIN_COLUMNS: [&str; 16] = [
    "cell_id",
    "volume",
    "propensity",
    "r_bar",
    "psi_crit",
    "n_x",
    "n_y",
    "n_z",
    "e_scalar",
    "v_t",
    "decision",
    "fraction_overflow",
    "t_q0",
    "t_q1",
    "t_q2",
    "t_q3",
];

/// Twin states with the cell volumes they were decided on.
pub fn write_twin_states<W: Write>(
    states: &BTreeMap<usize, TwinState>,
    volumes: &[f64],
    out: W,
) -> Result<(), ExportError> {
    let rows = states.iter().map(|(&i, t)| {
        let mut r = vec![
            i.to_string(),
            s(volumes[i]),
            s(t.propensity),
            t.r_bar.to_string(),
            s(t.psi_crit),
            s(t.n_vec.x),
            s(t.n_vec.y),
            s(t.n_vec.z),
            s(t.e_scalar),
            s(t.v_t),
            t.decision.to_string(),
            t.fraction_overflow.to_string(),
        ];
        r.extend(quat(&t.reorientation));
        r
    });
    write_table(out, Some(TWIN_SCHEMA), &TWIN_COLUMNS, rows)
}

pub fn read_twin_states<R: Read>(input: R) -> Result<BTreeMap<usize, TwinState>, ExportError> {
    let text = read_all(input)?;
    let t = Table::parse(&text, TWIN_SCHEMA, &TWIN_COLUMNS)?;
    let mut out = BTreeMap::new();
    for row in &t.rows {
        let state = TwinState {
            propensity: t.f64(row, 2)?,
            r_bar: t.usize(row, 3)?,
            psi_crit: t.f64(row, 4)?,
            n_vec: Vec3::new(t.f64(row, 5)?, t.f64(row, 6)?, t.f64(row, 7)?),
            e_scalar: t.f64(row, 8)?,
            v_t: t.f64(row, 9)?,
            decision: t.bool(row, 10)?,
            fraction_overflow: t.bool(row, 11)?,
            reorientation: t.quaternion(row, 12)?,
        };
        out.insert(t.usize(row, 0)?, state);
    }
    Ok(out)
}

const LAMELLA_COLUMNS: [&str; 5] = ["cell_id", "lamella_index", "d_normalized", "w_normalized", "volume"];

pub fn write_lamellae<W: Write>(systems: &BTreeMap<usize, LamellarSystem>, out: W) -> Result<(), ExportError> {
    let rows = systems.iter().flat_map(|(&i, sys)| {
        sys.normalized()
            .into_iter()
            .zip(&sys.lamellae)
            .enumerate()
            .map(move |(k, ((d, w), l))| vec![i.to_string(), (k + 1).to_string(), s(d), s(w), s(l.polytope.volume())])
    });
    write_table(out, Some(LAMELLA_SCHEMA), &LAMELLA_COLUMNS, rows)
}

/// Normalised `(d, w)` per lamella, grouped by cell.
pub fn read_lamellae<R: Read>(input: R) -> Result<BTreeMap<usize, Vec<(f64, f64)>>, ExportError> {
    let text = read_all(input)?;
    let t = Table::parse(&text, LAMELLA_SCHEMA, &LAMELLA_COLUMNS)?;
    let mut out: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for row in &t.rows {
        let cell = t.usize(row, 0)?;
        let entry = out.entry(cell).or_default();
        if t.usize(row, 1)? != entry.len() + 1 {
            return Err(ExportError::Invalid(format!("cell {cell}: lamella indices out of order")));
        }
        entry.push((t.f64(row, 2)?, t.f64(row, 3)?));
    }
    Ok(out)
}

/// Lamellar systems of `t` rebuilt from exported geometry and twin states.
pub fn rebuild_systems(
    t: &LaguerreTessellation,
    states: &BTreeMap<usize, TwinState>,
    geometry: &BTreeMap<usize, Vec<(f64, f64)>>,
) -> Result<BTreeMap<usize, LamellarSystem>, ExportError> {
    geometry
        .iter()
        .map(|(&i, g)| {
            let st = states.get(&i).ok_or_else(|| ExportError::Invalid(format!("cell {i}: no twin state")))?;
            if i >= t.len() {
                return Err(ExportError::Invalid(format!("cell {i} not in tessellation")));
            }
            let sys = system_from_normalized(i, t.cell(i), &st.n_vec, g, st.v_t)
                .map_err(|e| ExportError::Invalid(e.to_string()))?;
            Ok((i, sys))
        })
        .collect()
}

const SUBCELL_COLUMNS: [&str; 11] = ["subcell_id", "cell_id", "phase", "volume", "cx", "cy", "cz", "q0", "q1", "q2", "q3"];

pub fn write_subcells<W: Write>(n: &NestedTessellation, out: W) -> Result<(), ExportError> {
    let rows = n.subcells.iter().enumerate().map(|(k, sc)| {
        let c = sc.polytope.centroid();
        let mut r = vec![k.to_string(), sc.cell_id.to_string(), sc.phase.as_str().to_string(), s(sc.polytope.volume())];
        r.extend([c.x, c.y, c.z].map(s));
        r.extend(quat(&sc.mark));
        r
    });
    write_table(out, Some(SUBCELL_SCHEMA), &SUBCELL_COLUMNS, rows)
}

pub fn write_histogram<W: Write>(h: &Histogram, out: W) -> Result<(), ExportError> {
    let rows = h.bins().map(|(a, b, c)| vec![s(a), s(b), c.to_string()]);
    write_table(out, None, &["bin_left", "bin_right", "count"], rows)
}

pub fn write_kde<W: Write>(k: &Kde2D, out: W) -> Result<(), ExportError> {
    let rows = k.grid_x.iter().enumerate().flat_map(|(i, &x)| {
        k.grid_y.iter().enumerate().map(move |(j, &y)| vec![s(x), s(y), s(k.density[i][j])])
    });
    write_table(out, None, &["x", "y", "density"], rows)
}

pub fn write_ipf<W: Write>(records: &[IpfRecord], out: W) -> Result<(), ExportError> {
    let rows = records.iter().map(|r| vec![r.id.to_string(), s(r.x), s(r.y), r.phase.as_str().to_string()]);
    write_table(out, None, &["id", "x", "y", "phase"], rows)
}

pub fn write_counts<W: Write>(freq: &[f64], out: W) -> Result<(), ExportError> {
    let rows = freq.iter().enumerate().map(|(k, &p)| vec![(k + 1).to_string(), s(p)]);
    write_table(out, None, &["k", "frequency"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lamellae::{grow_lamellae, LamellaParams};
    use crate::orientation::sample_uniform;
    use crate::tessellation::poisson_generators;
    use crate::twinning::{twin_state, TwinDecisionParams, TwinningSystem};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (LaguerreTessellation, Vec<Orientation>, BTreeMap<usize, TwinState>, BTreeMap<usize, LamellarSystem>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let domain = Aabb::unit();
        let pts = poisson_generators(30.0, &domain, &mut rng).unwrap();
        let gens: Vec<_> = pts.iter().enumerate().map(|(i, &x)| WeightedGenerator::new(x, 1e-3 * (i % 3) as f64)).collect();
        let t = build_laguerre(&gens, &domain).unwrap();
        let marks: Vec<Orientation> = (0..t.len()).map(|_| sample_uniform(&mut rng)).collect();
        let sys = TwinningSystem::bcc_114();
        let p = TwinDecisionParams::new(0.01, 0.02, 1e-6, 1.0, Vec3::z()).unwrap();
        let mut states = BTreeMap::new();
        let mut systems = BTreeMap::new();
        for i in t.nonempty() {
            let st = twin_state(&marks[i], t.volumes()[i], &sys, &p, 0.1).unwrap();
            if st.decision {
                if let Ok(s) = grow_lamellae(i, t.cell(i), &st.n_vec, st.v_t, &LamellaParams::default(), &mut rng) {
                    systems.insert(i, s);
                }
            }
            states.insert(i, st);
        }
        (t, marks, states, systems)
    }

    fn bytes(f: impl FnOnce(&mut Vec<u8>)) -> Vec<u8> {
        let mut b = Vec::new();
        f(&mut b);
        b
    }

    #[test]
    fn round_trips() {
        let (t, marks, states, systems) = sample();
        assert!(!systems.is_empty());

        let a = bytes(|b| write_tess(&t, b).unwrap());
        let t2 = read_tess(a.as_slice()).unwrap();
        assert_eq!(bytes(|b| write_tess(&t2, b).unwrap()), a);

        let a = bytes(|b| write_marks(&marks, b).unwrap());
        let m2 = read_marks(a.as_slice()).unwrap();
        assert_eq!(m2, marks);
        assert_eq!(bytes(|b| write_marks(&m2, b).unwrap()), a);

        let a = bytes(|b| write_twin_states(&states, t.volumes(), b).unwrap());
        let s2 = read_twin_states(a.as_slice()).unwrap();
        assert_eq!(s2, states);
        assert_eq!(bytes(|b| write_twin_states(&s2, t.volumes(), b).unwrap()), a);

        let a = bytes(|b| write_lamellae(&systems, b).unwrap());
        let g = read_lamellae(a.as_slice()).unwrap();
        let rebuilt = rebuild_systems(&t, &s2, &g).unwrap();
        for (i, sys) in &systems {
            let r = &rebuilt[i];
            assert_eq!(r.len(), sys.len());
            assert!((r.achieved_fraction - sys.achieved_fraction).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_wrong_schema() {
        let (t, marks, _, _) = sample();
        let a = bytes(|b| write_marks(&marks, b).unwrap());
        assert!(matches!(read_twin_states(a.as_slice()), Err(ExportError::Schema(_))));
        let text = String::from_utf8(bytes(|b| write_tess(&t, b).unwrap())).unwrap().replace(TESS_SCHEMA, "twinlab-tess/2");
        assert!(matches!(read_tess(text.as_bytes()), Err(ExportError::Schema(_))));
    }
}
