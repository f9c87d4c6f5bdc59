//! Descriptive summaries of simulated microstructures.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::lamellae::{LamellarSystem, NestedTessellation, Phase};
use crate::orientation::{ipf_coordinates, ipf_triangle_vertices, Orientation};
use crate::polytope::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("invalid grid or bin specification: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub n: usize,
    /// Inputs outside the binned range (or NaN).
    pub dropped: usize,
}

impl Histogram {
    pub fn bins(&self) -> impl Iterator<Item = (f64, f64, usize)> + '_ {
        self.bin_edges.windows(2).zip(&self.counts).map(|(e, &c)| (e[0], e[1], c))
    }
}

/// Equal-width bins on `[lo, hi]`; bins are left-closed, the last one also
/// right-closed.
pub fn histogram_range(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Histogram, StatsError> {
    if bins == 0 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(StatsError::InvalidSpec(format!("{bins} bins on [{lo}, {hi}]")));
    }
    let width = (hi - lo) / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|k| if k == bins { hi } else { lo + width * k as f64 }).collect();
    let mut counts = vec![0usize; bins];
    let mut dropped = 0;
    for &v in values {
        if !(v >= lo && v <= hi) {
            dropped += 1;
            continue;
        }
        let k = (((v - lo) / width) as usize).min(bins - 1);
        // Guard against rounding at interior edges.
        let k = if v < bin_edges[k] { k - 1 } else if k + 1 < bins && v >= bin_edges[k + 1] { k + 1 } else { k };
        counts[k] += 1;
    }
    Ok(Histogram { bin_edges, counts, n: values.len() - dropped, dropped })
}

/// Histogram over the data range (`[0, 1]` for empty input).
pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram, StatsError> {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo > hi {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };
    histogram_range(values, bins, lo, hi)
}

/// `p_k = #{inner cells with k lamellae} / #inner` for `k = 1..=l_max`.
pub fn count_frequencies(counts: &BTreeMap<usize, usize>, inner_ids: &[usize], l_max: usize) -> Vec<f64> {
    let mut freq = vec![0.0; l_max];
    if inner_ids.is_empty() {
        return freq;
    }
    for id in inner_ids {
        if let Some(&m) = counts.get(id) {
            if (1..=l_max).contains(&m) {
                freq[m - 1] += 1.0;
            }
        }
    }
    let n = inner_ids.len() as f64;
    freq.iter_mut().for_each(|f| *f /= n);
    freq
}

pub fn lamella_count_frequencies(
    systems: &BTreeMap<usize, LamellarSystem>,
    inner_ids: &[usize],
    l_max: usize,
) -> Vec<f64> {
    let counts = systems.iter().map(|(&id, s)| (id, s.len())).collect();
    count_frequencies(&counts, inner_ids, l_max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryRecord {
    pub cell_id: usize,
    /// Lamella index within its cell, from 1.
    pub k: usize,
    pub d: f64,
    pub w: f64,
    /// The cell holds exactly two lamellae.
    pub pair: bool,
}

pub fn normalized_geometry(systems: &BTreeMap<usize, LamellarSystem>) -> Vec<GeometryRecord> {
    systems
        .iter()
        .flat_map(|(&cell_id, s)| {
            let pair = s.len() == 2;
            s.normalized()
                .into_iter()
                .enumerate()
                .map(move |(k, (d, w))| GeometryRecord { cell_id, k: k + 1, d, w, pair })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        Self { lo, hi, n }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.lo + (self.hi - self.lo) * k as f64 / (self.n - 1) as f64).collect()
    }

    fn validate(&self) -> Result<(), StatsError> {
        if self.n < 2 || !(self.lo < self.hi) {
            return Err(StatsError::InvalidSpec(format!("grid [{}, {}] with {} nodes", self.lo, self.hi, self.n)));
        }
        Ok(())
    }
}

pub const MIN_BANDWIDTH: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Kde2D {
    pub grid_x: Vec<f64>,
    pub grid_y: Vec<f64>,
    /// `density[i][j]` at `(grid_x[i], grid_y[j])`.
    pub density: Vec<Vec<f64>>,
    pub bandwidths: (f64, f64),
}

impl Kde2D {
    /// Trapezoidal integral over the grid.
    pub fn integral(&self) -> f64 {
        let trap = |g: &[f64], f: &dyn Fn(usize) -> f64| -> f64 {
            g.windows(2).enumerate().map(|(k, w)| 0.5 * (w[1] - w[0]) * (f(k) + f(k + 1))).sum()
        };
        let row = |i: usize| trap(&self.grid_y, &|j| self.density[i][j]);
        trap(&self.grid_x, &row)
    }

    pub fn argmax(&self) -> (f64, f64) {
        let mut best = (0, 0);
        for (i, row) in self.density.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > self.density[best.0][best.1] {
                    best = (i, j);
                }
            }
        }
        (self.grid_x[best.0], self.grid_y[best.1])
    }

    /// Interior grid nodes strictly above their eight neighbours.
    pub fn local_maxima(&self) -> Vec<(f64, f64)> {
        let (nx, ny) = (self.grid_x.len(), self.grid_y.len());
        let mut out = Vec::new();
        for i in 1..nx.saturating_sub(1) {
            for j in 1..ny.saturating_sub(1) {
                let v = self.density[i][j];
                let peak = (i - 1..=i + 1)
                    .flat_map(|a| (j - 1..=j + 1).map(move |b| (a, b)))
                    .filter(|&(a, b)| (a, b) != (i, j))
                    .all(|(a, b)| self.density[a][b] < v);
                if peak {
                    out.push((self.grid_x[i], self.grid_y[j]));
                }
            }
        }
        out
    }
}

/// Silverman's rule `1.06 sd n^(-1/5)`, floored at [`MIN_BANDWIDTH`].
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let h = 1.06 * var.sqrt() * n.powf(-0.2);
    if !(h >= MIN_BANDWIDTH) {
        log::warn!("degenerate KDE axis (bandwidth {h:e}); using {MIN_BANDWIDTH}");
        return MIN_BANDWIDTH;
    }
    h
}

/// Product-Gaussian kernel density estimate on a rectangular grid.
pub fn kde2(points: &[(f64, f64)], gx: GridSpec, gy: GridSpec) -> Result<Kde2D, StatsError> {
    if points.len() < 2 {
        return Err(StatsError::TooFewPoints { needed: 2, got: points.len() });
    }
    gx.validate()?;
    gy.validate()?;
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (hx, hy) = (silverman_bandwidth(&xs), silverman_bandwidth(&ys));
    let (grid_x, grid_y) = (gx.points(), gy.points());
    let norm = 1.0 / (2.0 * std::f64::consts::PI * hx * hy * points.len() as f64);
    let density = grid_x
        .iter()
        .map(|&x| {
            grid_y
                .iter()
                .map(|&y| {
                    norm * points
                        .iter()
                        .map(|&(px, py)| (-0.5 * (((x - px) / hx).powi(2) + ((y - py) / hy).powi(2))).exp())
                        .sum::<f64>()
                })
                .collect()
        })
        .collect();
    Ok(Kde2D { grid_x, grid_y, density, bandwidths: (hx, hy) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpfRecord {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub phase: Phase,
}

/// Inverse-pole-figure points of mother cells, all tagged as matrix.
pub fn ipf_mothers(marks: &[Orientation], cells: &[usize], direction: &Vec3) -> Vec<IpfRecord> {
    cells
        .iter()
        .map(|&id| {
            let [x, y] = ipf_coordinates(&marks[id], direction);
            IpfRecord { id, x, y, phase: Phase::Matrix }
        })
        .collect()
}

/// Inverse-pole-figure points of every subcell; `id` is the subcell index.
pub fn ipf_subcells(n: &NestedTessellation, direction: &Vec3) -> Vec<IpfRecord> {
    n.subcells
        .iter()
        .enumerate()
        .map(|(id, s)| {
            let [x, y] = ipf_coordinates(&s.mark, direction);
            IpfRecord { id, x, y, phase: s.phase }
        })
        .collect()
}

/// Mean IPF distance to the `[111]` corner.
pub fn mean_distance_to_111(records: &[IpfRecord]) -> f64 {
    let c = ipf_triangle_vertices()[2];
    records.iter().map(|r| ((r.x - c[0]).powi(2) + (r.y - c[1]).powi(2)).sqrt()).sum::<f64>()
        / records.len().max(1) as f64
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn histogram_invariants(values in proptest::collection::vec(-10.0..10.0f64, 0..200), bins in 1usize..40) {
            let h = histogram(&values, bins).unwrap();
            prop_assert_eq!(h.counts.iter().sum::<usize>(), values.len());
            prop_assert!(h.bin_edges.windows(2).all(|e| e[0] < e[1]));
        }
    }
}
