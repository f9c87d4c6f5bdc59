//! End-to-end runs over the texture/marking/strain grid: one tessellation,
//! then marks, twin decisions, lamellae, nesting, statistics and synthetic
//! energy per grid point, written under a single output directory.

pub mod config;
pub mod export;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::energy::{phase_tsed, synthesize_elements, write_elements};
use crate::lamellae::{
    anneal_lamellae, audit_system, build_nested, clip_to_window, grow_lamellae, LamellaError, LamellaParams,
    LamellarSystem, NestedTessellation, Phase,
};
use crate::orientation::{moving_average_marks, sample_odf, sample_uniform, Orientation};
use crate::polytope::Aabb;
use crate::regression::{study_model_suite, write_coefficients, write_tsed, DesignSpec, Marking, TsedRecord};
use crate::schema::SUMMARY_SCHEMA;
use crate::stats::{
    histogram_range, ipf_mothers, ipf_subcells, kde2, lamella_count_frequencies, normalized_geometry, GridSpec,
};
use crate::tessellation::{
    fit_weights, gaussian_volume_targets, inner_cells, plus_sample, poisson_generators, uniform_generators,
    LaguerreTessellation, WeightFit,
};
use crate::twinning::{twin_state, TwinDecisionParams, TwinState, TwinningSystem};

pub use config::{epsilon_label, LamellaMethod, MarkingKind, RunConfig, Variant, STUDY_TOML};
use export::ExportError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Tessellation,
    Marking,
    Twinning,
    Lamellae,
    Nesting,
    Stats,
    Energy,
    Regression,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Tessellation => "tessellation",
            Stage::Marking => "marking",
            Stage::Twinning => "twinning",
            Stage::Lamellae => "lamellae",
            Stage::Nesting => "nesting",
            Stage::Stats => "stats",
            Stage::Energy => "energy",
            Stage::Regression => "regression",
            Stage::Output => "output",
        };
        f.write_str(s)
    }
}

fn at_cell(cell: &Option<usize>) -> String {
    cell.map(|c| format!(" (cell {c})")).unwrap_or_default()
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{stage} stage failed{}: {message}", at_cell(cell))]
    Stage { stage: Stage, cell: Option<usize>, message: String },
}

impl PipelineError {
    pub fn config(message: impl Into<String>) -> Self {
        PipelineError::Config(message.into())
    }

    pub fn stage(stage: Stage, cell: Option<usize>, e: impl fmt::Display) -> Self {
        PipelineError::Stage { stage, cell, message: e.to_string() }
    }

    /// 2 for configuration errors, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { .. } => 3,
        }
    }
}

fn output_err(path: &Path) -> impl Fn(ExportError) -> PipelineError + '_ {
    move |e| PipelineError::stage(Stage::Output, None, format!("{}: {e}", path.display()))
}

/// Independent generator for `(seed, stage, id)`.
pub fn substream(seed: u64, stage: &str, id: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    h.update([0u8]);
    h.update(id.to_le_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Poisson generators in the simulation domain with Gaussian-diameter
/// volume targets realised by weight fitting.
pub fn generate_tessellation(c: &RunConfig) -> Result<WeightFit, PipelineError> {
    generate_tessellation_with(c, None)
}

/// As [`generate_tessellation`], with exactly `count` uniform generators
/// when given.
pub fn generate_tessellation_with(c: &RunConfig, count: Option<usize>) -> Result<WeightFit, PipelineError> {
    let domain = c.domain();
    let mut rng = substream(c.seed, "tessellation", 0);
    let err = |e| PipelineError::stage(Stage::Tessellation, None, e);
    let points = match count {
        Some(n) => uniform_generators(n, &domain, &mut rng),
        None => poisson_generators(c.lambda0, &domain, &mut rng).map_err(err)?,
    };
    let (targets, _) =
        gaussian_volume_targets(points.len(), c.diameter_mu, c.diameter_sigma, domain.volume(), &mut rng).map_err(err)?;
    fit_weights(&points, &targets, &domain, c.fit_options()).map_err(err)
}

/// Cells of the tessellation as seen from the observation window.
#[derive(Debug, Clone)]
pub struct WindowView {
    pub q_cells: Vec<usize>,
    pub inner: Vec<usize>,
    pub boundary_violations: Vec<usize>,
    pub v_min: f64,
    pub v_max: f64,
}

pub fn window_view(t: &LaguerreTessellation, window: &Aabb) -> Result<WindowView, PipelineError> {
    let ps = plus_sample(t, window);
    if ps.cells.is_empty() {
        return Err(PipelineError::stage(Stage::Tessellation, None, "no cell hits the observation window"));
    }
    let vols = ps.cells.iter().map(|&i| t.volumes()[i]);
    let v_min = vols.clone().fold(f64::INFINITY, f64::min);
    let v_max = vols.fold(0.0, f64::max);
    Ok(WindowView { q_cells: ps.cells, inner: inner_cells(t), boundary_violations: ps.boundary_violations, v_min, v_max })
}

/// One mark per generator. Moving-average marks smooth uniform marks over
/// the neighbourhood; empty cells keep their own mark.
pub fn sample_marks(t: &LaguerreTessellation, variant: &Variant, c: &RunConfig) -> Result<Vec<Orientation>, PipelineError> {
    let n = t.len() as u64;
    match variant.marking {
        Marking::Independent => {
            let odf = c.odf(variant.kappa)?;
            let stage = format!("marks/im/{}", variant.kappa);
            (0..n)
                .into_par_iter()
                .map(|i| {
                    sample_odf(&odf, &mut substream(c.seed, &stage, i))
                        .map_err(|e| PipelineError::stage(Stage::Marking, Some(i as usize), e))
                })
                .collect()
        }
        Marking::MovingAverage => {
            let base: Vec<Orientation> =
                (0..n).map(|i| sample_uniform(&mut substream(c.seed, "marks/ma", i))).collect();
            let adjacency: Vec<Vec<usize>> = t
                .adjacency()
                .iter()
                .enumerate()
                .map(|(i, nb)| if nb.is_empty() { vec![i] } else { nb.clone() })
                .collect();
            moving_average_marks(&adjacency, &base).map_err(|e| PipelineError::stage(Stage::Marking, None, e))
        }
    }
}

/// Twin states of `cells` at strain `epsilon_m`; volumes are clamped into
/// the window's `[v_min, v_max]`.
pub fn twin_cells(
    t: &LaguerreTessellation,
    marks: &[Orientation],
    cells: &[usize],
    sys: &TwinningSystem,
    params: &TwinDecisionParams,
    epsilon_m: f64,
) -> Result<BTreeMap<usize, TwinState>, PipelineError> {
    cells
        .iter()
        .map(|&i| {
            let v = t.volumes()[i].clamp(params.v_min, params.v_max);
            twin_state(&marks[i], v, sys, params, epsilon_m)
                .map(|s| (i, s))
                .map_err(|e| PipelineError::stage(Stage::Twinning, Some(i), e))
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct LamellaOutcome {
    pub systems: BTreeMap<usize, LamellarSystem>,
    /// Twinned cells left without lamellae after exhausting the retries.
    pub unresolvable: Vec<usize>,
}

/// Lamellar systems for every twinned cell, each from its own substream.
pub fn simulate_lamellae(
    t: &LaguerreTessellation,
    states: &BTreeMap<usize, TwinState>,
    p: &LamellaParams,
    method: LamellaMethod,
    seed: u64,
) -> Result<LamellaOutcome, PipelineError> {
    let twinned: Vec<(usize, &TwinState)> = states.iter().filter(|(_, s)| s.decision).map(|(&i, s)| (i, s)).collect();
    let results: Vec<(usize, Result<LamellarSystem, LamellaError>)> = twinned
        .par_iter()
        .map(|&(i, s)| {
            let mut rng = substream(seed, "lamellae", i as u64);
            let r = match method {
                LamellaMethod::Growth => grow_lamellae(i, t.cell(i), &s.n_vec, s.v_t, p, &mut rng),
                LamellaMethod::Anneal => anneal_lamellae(i, t.cell(i), &s.n_vec, s.v_t, p, None, &mut rng),
            };
            (i, r)
        })
        .collect();
    let mut out = LamellaOutcome::default();
    for (i, r) in results {
        match r {
            Ok(sys) => {
                out.systems.insert(i, sys);
            }
            Err(LamellaError::Unresolvable { .. }) => {
                warn!("cell {i}: no lamellar system found, left untwinned");
                out.unresolvable.push(i);
            }
            Err(e) => return Err(PipelineError::stage(Stage::Lamellae, Some(i), e)),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TsedSummary {
    pub w_total: f64,
    pub w_lamella: Option<f64>,
    pub w_matrix: Option<f64>,
    pub v_l: f64,
    pub v_m: f64,
    pub elements: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct PointSummary {
    pub variant: String,
    pub marking: String,
    pub kappa: f64,
    pub epsilon_m: f64,
    pub directory: String,
    pub q_twinned: usize,
    pub q_twin_fraction: f64,
    pub inner_twinned: usize,
    pub fraction_overflow: usize,
    pub systems: usize,
    pub unresolvable: Vec<usize>,
    pub audit_failures: Vec<usize>,
    /// `p_k` for `k = 1..=l_max` over inner cells.
    pub count_frequencies: Vec<f64>,
    /// Mean `|d - 0.5|` of normalised centers in two-lamella cells.
    pub pair_center_offset: Option<f64>,
    pub lamella_fraction_q: f64,
    pub tsed: Option<TsedSummary>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RegressionSummary {
    pub models: Vec<String>,
    pub interaction_f: f64,
    pub interaction_p: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunSummary {
    pub schema: String,
    pub seed: u64,
    pub lambda0: f64,
    pub generators: usize,
    pub nonempty_cells: usize,
    pub inner_cells: usize,
    pub q_cells: usize,
    pub boundary_violations: Vec<usize>,
    pub fit_iterations: Option<usize>,
    pub fit_worst_relative_error: Option<f64>,
    pub v_min: f64,
    pub v_max: f64,
    pub points: Vec<PointSummary>,
    pub regression: Option<RegressionSummary>,
    pub warnings: Vec<String>,
}

/// Wall-clock seconds per phase; kept apart from the deterministic outputs.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub tessellation: f64,
    pub marking: f64,
    pub grid: f64,
    pub regression: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Validate and report the plan without computing or writing anything.
    pub dry_run: bool,
    /// Use this exported tessellation instead of generating one.
    pub reuse_tess: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct Plan {
    pub output: PathBuf,
    pub variants: Vec<Variant>,
    pub directories: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub plan: Plan,
    pub summary: Option<RunSummary>,
    pub timings: Timings,
}

pub fn plan(c: &RunConfig) -> Plan {
    let variants = c.variants();
    let directories = variants
        .iter()
        .flat_map(|v| c.epsilon_m.iter().map(move |&e| c.output.join(v.label()).join(epsilon_label(e))))
        .collect();
    Plan { output: c.output.clone(), variants, directories }
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| PipelineError::stage(Stage::Output, None, format!("{}: {e}", path.display())))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), ExportError>) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    f(&mut w).map_err(output_err(path))?;
    w.flush().map_err(|e| PipelineError::stage(Stage::Output, None, format!("{}: {e}", path.display())))
}

fn mkdir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(|e| PipelineError::stage(Stage::Output, None, format!("{}: {e}", path.display())))
}

struct Context<'a> {
    c: &'a RunConfig,
    t: &'a LaguerreTessellation,
    view: &'a WindowView,
    sys: TwinningSystem,
    params: TwinDecisionParams,
}

struct PointOutput {
    summary: PointSummary,
    tsed: Option<TsedRecord>,
    warnings: Vec<String>,
}

fn run_point(
    ctx: &Context,
    variant: &Variant,
    marks: &[Orientation],
    eps: f64,
    dir: &Path,
) -> Result<PointOutput, PipelineError> {
    let Context { c, t, view, sys, params } = ctx;
    let window = c.window();
    let mut warnings = Vec::new();
    let label = format!("{}/{}", variant.label(), epsilon_label(eps));
    mkdir(dir)?;

    let states = twin_cells(t, marks, &view.inner, sys, params, eps)?;
    let lam = simulate_lamellae(t, &states, &c.lamellae, c.lamella_method, c.seed)?;
    let audit_failures: Vec<usize> = lam
        .systems
        .iter()
        .filter(|(&i, s)| !audit_system(s, t.cell(i), states[&i].v_t, &c.lamellae).passes(c.lamellae.volume_tol))
        .map(|(&i, _)| i)
        .collect();
    if !audit_failures.is_empty() {
        warnings.push(format!("{label}: {} lamellar systems fail the audit", audit_failures.len()));
    }
    if !lam.unresolvable.is_empty() {
        warnings.push(format!("{label}: {} twinned cells without lamellae", lam.unresolvable.len()));
    }
    let overflow = states.values().filter(|s| s.fraction_overflow).count();
    if overflow > 0 {
        warnings.push(format!("{label}: {overflow} cells cannot carry the strain and stay untwinned"));
    }

    let nested: NestedTessellation =
        build_nested(t, marks, &states, lam.systems).map_err(|e| PipelineError::stage(Stage::Nesting, None, e))?;
    let clipped = clip_to_window(&nested, &window);
    let systems = &nested.systems;

    let q_states: Vec<&TwinState> = view.q_cells.iter().filter_map(|i| states.get(i)).collect();
    let q_twinned = q_states.iter().filter(|s| s.decision).count();
    let freq = lamella_count_frequencies(systems, &view.inner, c.lamellae.l_max);
    let geometry = normalized_geometry(systems);
    let pairs: Vec<(f64, f64)> = geometry.iter().filter(|g| g.pair).map(|g| (g.d, g.w)).collect();
    let pair_center_offset =
        (!pairs.is_empty()).then(|| pairs.iter().map(|p| (p.0 - 0.5).abs()).sum::<f64>() / pairs.len() as f64);

    let stats_err = |e| PipelineError::stage(Stage::Stats, None, e);
    let propensity = histogram_range(&q_states.iter().map(|s| s.propensity).collect::<Vec<_>>(), 25, 0.0, 0.5)
        .map_err(stats_err)?;
    let fractions: Vec<f64> = q_states.iter().filter(|s| s.decision).map(|s| s.v_t).collect();
    let vt_hist = histogram_range(&fractions, 25, 0.0, 1.0).map_err(stats_err)?;
    write_with(&dir.join("twin.csv"), |w| export::write_twin_states(&states, t.volumes(), w))?;
    write_with(&dir.join("lamellae.csv"), |w| export::write_lamellae(systems, w))?;
    write_with(&dir.join("subcells.csv"), |w| export::write_subcells(&clipped, w))?;
    write_with(&dir.join("counts.csv"), |w| export::write_counts(&freq, w))?;
    write_with(&dir.join("propensity_hist.csv"), |w| export::write_histogram(&propensity, w))?;
    write_with(&dir.join("volume_fraction_hist.csv"), |w| export::write_histogram(&vt_hist, w))?;
    let d_l = c.twinning.loading();
    write_with(&dir.join("ipf_before.csv"), |w| export::write_ipf(&ipf_mothers(marks, &view.q_cells, &d_l), w))?;
    write_with(&dir.join("ipf_after.csv"), |w| export::write_ipf(&ipf_subcells(&clipped, &d_l), w))?;
    if pairs.len() >= 2 {
        let grid = (GridSpec::new(0.0, 1.0, 101), GridSpec::new(0.0, c.lamellae.zeta2, 51));
        match kde2(&pairs, grid.0, grid.1) {
            Ok(k) => write_with(&dir.join("kde_pairs.csv"), |w| export::write_kde(&k, w))?,
            Err(e) => warnings.push(format!("{label}: kde skipped ({e})")),
        }
    }

    let lamella_fraction_q = clipped.phase_volume(Phase::Lamella) / window.volume();
    let mut tsed = None;
    let mut tsed_summary = None;
    if c.energy.enabled {
        let mut rng = substream(c.seed, &format!("energy/{label}"), 0);
        let elements = synthesize_elements(&clipped, &c.energy.synth_params(d_l), &mut rng);
        let r = phase_tsed(&elements).map_err(|e| PipelineError::stage(Stage::Energy, None, e))?;
        if c.energy.write_elements {
            write_with(&dir.join("elements.csv"), |w| write_elements(&elements, w).map_err(|e| ExportError::Invalid(e.to_string())))?;
        }
        tsed = Some(TsedRecord {
            epsilon_m: eps,
            kappa: variant.kappa,
            marking: variant.marking,
            w_total: r.w_total,
            w_lamella: r.w_lamella,
            w_matrix: r.w_matrix,
        });
        tsed_summary = Some(TsedSummary {
            w_total: r.w_total,
            w_lamella: r.w_lamella,
            w_matrix: r.w_matrix,
            v_l: r.v_l,
            v_m: r.v_m,
            elements: elements.len(),
        });
    }

    let rel = dir.strip_prefix(&c.output).unwrap_or(dir).to_string_lossy().replace('\\', "/");
    let summary = PointSummary {
        variant: variant.label(),
        marking: variant.marking.as_str().to_string(),
        kappa: variant.kappa,
        epsilon_m: eps,
        directory: rel,
        q_twinned,
        q_twin_fraction: q_twinned as f64 / view.q_cells.len() as f64,
        inner_twinned: states.values().filter(|s| s.decision).count(),
        fraction_overflow: overflow,
        systems: systems.len(),
        unresolvable: lam.unresolvable,
        audit_failures,
        count_frequencies: freq,
        pair_center_offset,
        lamella_fraction_q,
        tsed: tsed_summary,
    };
    Ok(PointOutput { summary, tsed, warnings })
}

/// Fits the model family to the grid's TSED values and writes one
/// coefficient table per fitted model.
fn regress_grid(records: &[TsedRecord], out: &Path) -> Result<Option<RegressionSummary>, String> {
    let suite = study_model_suite(records).map_err(|e| e.to_string())?;
    let dir = out.join("regression");
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let mut models = Vec::new();
    let fits = [
        (DesignSpec::m1(), Some(&suite.m1)),
        (DesignSpec::m1p(), Some(&suite.m1p)),
        (DesignSpec::lamella(), suite.lamella.as_ref()),
        (DesignSpec::matrix(), suite.matrix.as_ref()),
        (DesignSpec::cubic_pair(), suite.cubic_pair.as_ref()),
    ];
    for (spec, fit) in fits {
        let Some(fit) = fit else { continue };
        let path = dir.join(format!("{}.csv", spec.name));
        let mut w = File::create(&path).map(BufWriter::new).map_err(|e| e.to_string())?;
        write_coefficients(&spec, fit, &mut w).map_err(|e| e.to_string())?;
        w.flush().map_err(|e| e.to_string())?;
        models.push(spec.name.to_string());
    }
    Ok(Some(RegressionSummary {
        models,
        interaction_f: suite.interaction_test.f,
        interaction_p: suite.interaction_test.p,
    }))
}

/// Runs the whole grid. Outputs depend only on the configuration (seed
/// included); `timings.json` is the one file that varies between runs.
pub fn run_pipeline(c: &RunConfig, opts: &RunOptions) -> Result<RunReport, PipelineError> {
    c.validate()?;
    let plan = plan(c);
    if opts.dry_run {
        return Ok(RunReport { plan, summary: None, timings: Timings::default() });
    }
    let start = Instant::now();
    let mut timings = Timings::default();
    mkdir(&c.output)?;

    let (t, fit_iterations, fit_worst) = match &opts.reuse_tess {
        Some(path) => {
            let f = File::open(path).map_err(|e| PipelineError::config(format!("{}: {e}", path.display())))?;
            let t = export::read_tess(std::io::BufReader::new(f))
                .map_err(|e| PipelineError::config(format!("{}: {e}", path.display())))?;
            if *t.domain() != c.domain() {
                return Err(PipelineError::config("reused tessellation does not match the configured domain"));
            }
            (t, None, None)
        }
        None => {
            let fit = generate_tessellation(c)?;
            (fit.tessellation, Some(fit.iterations), Some(fit.worst_relative_error))
        }
    };
    write_with(&c.output.join("tessellation.json"), |w| export::write_tess(&t, w))?;
    fs::write(c.output.join("config.toml"), c.to_toml())
        .map_err(|e| PipelineError::stage(Stage::Output, None, e))?;
    timings.tessellation = start.elapsed().as_secs_f64();
    info!("tessellation: {} generators", t.len());

    let view = window_view(&t, &c.window())?;
    let mut warnings = Vec::new();
    if !view.boundary_violations.is_empty() {
        warnings.push(format!(
            "{} cells hitting the window touch the domain boundary",
            view.boundary_violations.len()
        ));
    }
    let ctx = Context {
        c,
        t: &t,
        view: &view,
        sys: c.twinning.system()?,
        params: c.twinning.decision_params(view.v_min, view.v_max)?,
    };

    let t0 = Instant::now();
    let marks: Vec<Vec<Orientation>> =
        plan.variants.iter().map(|v| sample_marks(&t, v, c)).collect::<Result<_, _>>()?;
    for (v, m) in plan.variants.iter().zip(&marks) {
        let dir = c.output.join(v.label());
        mkdir(&dir)?;
        write_with(&dir.join("marks.csv"), |w| export::write_marks(m, w))?;
    }
    timings.marking = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let jobs: Vec<(usize, f64, &PathBuf)> = plan
        .variants
        .iter()
        .enumerate()
        .flat_map(|(k, _)| c.epsilon_m.iter().map(move |&e| (k, e)))
        .zip(&plan.directories)
        .map(|((k, e), d)| (k, e, d))
        .collect();
    let outputs: Vec<PointOutput> = jobs
        .par_iter()
        .map(|&(k, eps, dir)| {
            info!("grid point {} eps={eps}", plan.variants[k].label());
            run_point(&ctx, &plan.variants[k], &marks[k], eps, dir)
        })
        .collect::<Result<_, _>>()?;
    timings.grid = t0.elapsed().as_secs_f64();

    let mut points = Vec::with_capacity(outputs.len());
    let mut tsed = Vec::new();
    for o in outputs {
        warnings.extend(o.warnings);
        tsed.extend(o.tsed);
        points.push(o.summary);
    }

    let t0 = Instant::now();
    let mut regression = None;
    if c.energy.enabled {
        write_with(&c.output.join("tsed.csv"), |w| write_tsed(&tsed, w).map_err(|e| ExportError::Invalid(e.to_string())))?;
        match regress_grid(&tsed, &c.output) {
            Ok(r) => regression = r,
            Err(e) => warnings.push(format!("regression skipped: {e}")),
        }
    }
    timings.regression = t0.elapsed().as_secs_f64();

    for w in &warnings {
        warn!("{w}");
    }
    let summary = RunSummary {
        schema: SUMMARY_SCHEMA.to_string(),
        seed: c.seed,
        lambda0: c.lambda0,
        generators: t.len(),
        nonempty_cells: t.nonempty().count(),
        inner_cells: view.inner.len(),
        q_cells: view.q_cells.len(),
        boundary_violations: view.boundary_violations.clone(),
        fit_iterations,
        fit_worst_relative_error: fit_worst,
        v_min: view.v_min,
        v_max: view.v_max,
        points,
        regression,
        warnings,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| PipelineError::stage(Stage::Output, None, e))?;
    fs::write(c.output.join("summary.json"), json + "\n").map_err(|e| PipelineError::stage(Stage::Output, None, e))?;
    timings.total = start.elapsed().as_secs_f64();
    let json = serde_json::to_string_pretty(&timings).map_err(|e| PipelineError::stage(Stage::Output, None, e))?;
    fs::write(c.output.join("timings.json"), json + "\n").map_err(|e| PipelineError::stage(Stage::Output, None, e))?;
    Ok(RunReport { plan, summary: Some(summary), timings })
}
