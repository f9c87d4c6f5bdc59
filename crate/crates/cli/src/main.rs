use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;

use twinlab::energy::{classify_all, phase_tsed, read_elements, synthesize_elements, write_elements};
use twinlab::lamellae::{build_nested, clip_to_window, LamellarSystem, NestedTessellation};
use twinlab::orientation::Orientation;
use twinlab::pipeline::export::{self, ExportError};
use twinlab::pipeline::{
    epsilon_label, generate_tessellation_with, run_pipeline, sample_marks, simulate_lamellae, substream, twin_cells,
    window_view, LamellaMethod, PipelineError, RunConfig, RunOptions, Variant,
};
use twinlab::regression::{
    f_test_joint, read_tsed, write_coefficients, write_tsed, DesignSpec, Marking, TsedRecord,
};
use twinlab::stats::{histogram_range, ipf_mothers, ipf_subcells, kde2, lamella_count_frequencies, normalized_geometry, GridSpec};
use twinlab::tessellation::LaguerreTessellation;
use twinlab::twinning::TwinState;

#[derive(Parser)]
#[command(name = "twinlab", version, about = "Marked nested Laguerre tessellations with twin lamellae")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate generators and fit weights to Gaussian-diameter volume targets.
    Tess(TessArgs),
    /// Orientation marks for every cell.
    Mark(MarkArgs),
    /// Twin decisions and twin states at one strain level.
    Twin(TwinArgs),
    /// Lamellar systems for the twinned cells.
    Lamellae(LamellaeArgs),
    /// Subcells of the nested tessellation.
    Nest(NestArgs),
    /// Histograms, count frequencies, KDE and IPF datasets.
    Stats(StatsArgs),
    /// Synthetic element records in place of finite-element output.
    EnergySynth(EnergySynthArgs),
    /// Total and per-phase strain energy density of an element file.
    IngestElements(IngestArgs),
    /// Fit a strain energy model to a TSED table.
    Regress(RegressArgs),
    /// All stages over the configured grid.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct Common {
    /// Run configuration supplying model parameters (defaults: study profile).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Failure> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::study(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct TessArgs {
    #[command(flatten)]
    common: Common,
    /// Exact generator count instead of a Poisson number.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    lambda0: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Relative volume tolerance of the weight fit.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MarkingArg {
    Im,
    Ma,
}

#[derive(Args)]
struct MarkArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    tess: PathBuf,
    #[arg(long, value_enum, default_value = "im")]
    marking: MarkingArg,
    #[arg(long, default_value_t = 0.0)]
    kappa: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TwinArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    tess: PathBuf,
    #[arg(long)]
    marks: PathBuf,
    #[arg(long)]
    epsilon_m: f64,
    #[arg(long)]
    psi1: Option<f64>,
    #[arg(long)]
    psi2: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Growth,
    Anneal,
}

#[derive(Args)]
struct LamellaeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    tess: PathBuf,
    #[arg(long)]
    twin: PathBuf,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Stack {
    #[arg(long)]
    tess: PathBuf,
    #[arg(long)]
    marks: PathBuf,
    #[arg(long)]
    twin: PathBuf,
    #[arg(long)]
    lamellae: PathBuf,
}

#[derive(Args)]
struct NestArgs {
    #[command(flatten)]
    stack: Stack,
    /// Keep the whole simulation domain instead of clipping to the unit window.
    #[arg(long)]
    no_clip: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    stack: Stack,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EnergySynthArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    stack: Stack,
    /// Elements per unit volume.
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    /// Classify elements against this nested tessellation (all four files required).
    #[arg(long, requires_all = ["marks", "twin", "lamellae"])]
    tess: Option<PathBuf>,
    #[arg(long)]
    marks: Option<PathBuf>,
    #[arg(long)]
    twin: Option<PathBuf>,
    #[arg(long)]
    lamellae: Option<PathBuf>,
    #[arg(long)]
    epsilon_m: f64,
    #[arg(long)]
    kappa: f64,
    #[arg(long, value_enum, default_value = "im")]
    marking: MarkingArg,
    /// TSED table to append the result to (created if missing).
    #[arg(long)]
    tsed: PathBuf,
}

#[derive(Args)]
struct RegressArgs {
    #[arg(long)]
    input: PathBuf,
    /// m1, m1p, m0, lamella, matrix or cubic.
    #[arg(long, default_value = "m1p")]
    model: String,
    /// Also test the model against a nested reduced model.
    #[arg(long)]
    against: Option<String>,
    /// Coefficient table destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "TWINLAB_OUTPUT")]
    output: Option<PathBuf>,
    #[arg(long)]
    dry_run: bool,
    /// Reuse an exported tessellation for every grid point.
    #[arg(long)]
    reuse_tess: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(m: impl std::fmt::Display) -> Self {
        Failure { code: 2, message: m.to_string() }
    }

    fn stage(m: impl std::fmt::Display) -> Self {
        Failure { code: 3, message: m.to_string() }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        Failure { code: e.exit_code() as u8, message: e.to_string() }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path).map(BufReader::new).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn read<T>(path: &Path, f: impl FnOnce(BufReader<File>) -> Result<T, ExportError>) -> Result<T, Failure> {
    f(open(path)?).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn write(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), ExportError>) -> Result<(), Failure> {
    let err = |e: &dyn std::fmt::Display| Failure::stage(format!("{}: {e}", path.display()));
    let mut w = File::create(path).map(BufWriter::new).map_err(|e| err(&e))?;
    f(&mut w).map_err(|e| err(&e))?;
    w.flush().map_err(|e| err(&e))
}

struct Loaded {
    t: LaguerreTessellation,
    marks: Vec<Orientation>,
    states: BTreeMap<usize, TwinState>,
    systems: BTreeMap<usize, LamellarSystem>,
}

fn load_stack(tess: &Path, marks: &Path, twin: &Path, lamellae: &Path) -> Result<Loaded, Failure> {
    let t = read(tess, export::read_tess)?;
    let marks = read(marks, export::read_marks)?;
    if marks.len() != t.len() {
        return Err(Failure::input(format!("{} marks for {} cells", marks.len(), t.len())));
    }
    let states = read(twin, export::read_twin_states)?;
    let geometry = read(lamellae, export::read_lamellae)?;
    let systems = export::rebuild_systems(&t, &states, &geometry).map_err(Failure::input)?;
    Ok(Loaded { t, marks, states, systems })
}

fn nested(l: Loaded) -> Result<NestedTessellation, Failure> {
    build_nested(&l.t, &l.marks, &l.states, l.systems).map_err(Failure::stage)
}

fn cmd_tess(a: TessArgs) -> Result<(), Failure> {
    let mut c = a.common.load()?;
    if let Some(v) = a.lambda0 {
        c.lambda0 = v;
    }
    if let Some(v) = a.margin {
        c.margin = v;
    }
    if let Some(v) = a.mu {
        c.diameter_mu = v;
    }
    if let Some(v) = a.sigma {
        c.diameter_sigma = v;
    }
    if let Some(v) = a.tol {
        c.fit_tol = v;
    }
    c.validate()?;
    let fit = generate_tessellation_with(&c, a.n)?;
    write(&a.out, |w| export::write_tess(&fit.tessellation, w))?;
    println!(
        "cells={} iterations={} max_relative_volume_error={:e}",
        fit.tessellation.len(),
        fit.iterations,
        fit.worst_relative_error
    );
    Ok(())
}

fn cmd_mark(a: MarkArgs) -> Result<(), Failure> {
    let c = a.common.load()?;
    let t = read(&a.tess, export::read_tess)?;
    let marking = match a.marking {
        MarkingArg::Im => Marking::Independent,
        MarkingArg::Ma => Marking::MovingAverage,
    };
    c.odf(a.kappa)?;
    let marks = sample_marks(&t, &Variant { marking, kappa: a.kappa }, &c)?;
    write(&a.out, |w| export::write_marks(&marks, w))
}

fn cmd_twin(a: TwinArgs) -> Result<(), Failure> {
    let mut c = a.common.load()?;
    if let Some(v) = a.psi1 {
        c.twinning.psi1 = v;
    }
    if let Some(v) = a.psi2 {
        c.twinning.psi2 = v;
    }
    if !(a.epsilon_m > 0.0 && a.epsilon_m < 1.0) {
        return Err(Failure::input(format!("epsilon-m must lie in (0, 1), got {}", a.epsilon_m)));
    }
    let t = read(&a.tess, export::read_tess)?;
    let marks = read(&a.marks, export::read_marks)?;
    if marks.len() != t.len() {
        return Err(Failure::input(format!("{} marks for {} cells", marks.len(), t.len())));
    }
    let view = window_view(&t, &c.window())?;
    let params = c.twinning.decision_params(view.v_min, view.v_max)?;
    let states = twin_cells(&t, &marks, &view.inner, &c.twinning.system()?, &params, a.epsilon_m)?;
    let q_twinned = view.q_cells.iter().filter(|i| states.get(i).is_some_and(|s| s.decision)).count();
    println!("window_cells={} twinned={} v_min={} v_max={}", view.q_cells.len(), q_twinned, view.v_min, view.v_max);
    write(&a.out, |w| export::write_twin_states(&states, t.volumes(), w))
}

fn cmd_lamellae(a: LamellaeArgs) -> Result<(), Failure> {
    let c = a.common.load()?;
    let t = read(&a.tess, export::read_tess)?;
    let states = read(&a.twin, export::read_twin_states)?;
    let method = match a.method {
        Some(MethodArg::Growth) => LamellaMethod::Growth,
        Some(MethodArg::Anneal) => LamellaMethod::Anneal,
        None => c.lamella_method,
    };
    let out = simulate_lamellae(&t, &states, &c.lamellae, method, c.seed)?;
    for i in &out.unresolvable {
        warn!("cell {i}: left untwinned");
    }
    println!("systems={} unresolvable={}", out.systems.len(), out.unresolvable.len());
    write(&a.out, |w| export::write_lamellae(&out.systems, w))
}

fn cmd_nest(a: NestArgs) -> Result<(), Failure> {
    let s = &a.stack;
    let n = nested(load_stack(&s.tess, &s.marks, &s.twin, &s.lamellae)?)?;
    let n = if a.no_clip { n } else { clip_to_window(&n, &RunConfig::default().window()) };
    println!("subcells={} volume={}", n.subcells.len(), n.total_volume());
    write(&a.out, |w| export::write_subcells(&n, w))
}

fn cmd_stats(a: StatsArgs) -> Result<(), Failure> {
    let c = a.common.load()?;
    let s = &a.stack;
    let l = load_stack(&s.tess, &s.marks, &s.twin, &s.lamellae)?;
    std::fs::create_dir_all(&a.out_dir).map_err(Failure::stage)?;
    let view = window_view(&l.t, &c.window())?;
    let d_l = c.twinning.loading();
    let marks = l.marks.clone();
    let freq = lamella_count_frequencies(&l.systems, &view.inner, c.lamellae.l_max);
    let pairs: Vec<(f64, f64)> =
        normalized_geometry(&l.systems).iter().filter(|g| g.pair).map(|g| (g.d, g.w)).collect();
    let q_states: Vec<&TwinState> = view.q_cells.iter().filter_map(|i| l.states.get(i)).collect();
    let prop = histogram_range(&q_states.iter().map(|s| s.propensity).collect::<Vec<_>>(), 25, 0.0, 0.5)
        .map_err(Failure::stage)?;
    let fr: Vec<f64> = q_states.iter().filter(|s| s.decision).map(|s| s.v_t).collect();
    let vt = histogram_range(&fr, 25, 0.0, 1.0).map_err(Failure::stage)?;
    let n = clip_to_window(&nested(l)?, &c.window());
    let dir = &a.out_dir;
    write(&dir.join("counts.csv"), |w| export::write_counts(&freq, w))?;
    write(&dir.join("propensity_hist.csv"), |w| export::write_histogram(&prop, w))?;
    write(&dir.join("volume_fraction_hist.csv"), |w| export::write_histogram(&vt, w))?;
    write(&dir.join("ipf_before.csv"), |w| export::write_ipf(&ipf_mothers(&marks, &view.q_cells, &d_l), w))?;
    write(&dir.join("ipf_after.csv"), |w| export::write_ipf(&ipf_subcells(&n, &d_l), w))?;
    if pairs.len() >= 2 {
        match kde2(&pairs, GridSpec::new(0.0, 1.0, 101), GridSpec::new(0.0, c.lamellae.zeta2, 51)) {
            Ok(k) => write(&dir.join("kde_pairs.csv"), |w| export::write_kde(&k, w))?,
            Err(e) => warn!("kde skipped: {e}"),
        }
    }
    let freq: Vec<String> = freq.iter().map(|p| format!("{p:.4}")).collect();
    println!("count_frequencies={}", freq.join(","));
    Ok(())
}

fn cmd_energy_synth(a: EnergySynthArgs) -> Result<(), Failure> {
    let c = a.common.load()?;
    let s = &a.stack;
    let n = clip_to_window(&nested(load_stack(&s.tess, &s.marks, &s.twin, &s.lamellae)?)?, &c.window());
    let mut p = c.energy.synth_params(c.twinning.loading());
    if let Some(d) = a.density {
        if !(d > 0.0) {
            return Err(Failure::input(format!("density must be positive, got {d}")));
        }
        p.density = d;
    }
    let elements = synthesize_elements(&n, &p, &mut substream(c.seed, "energy", 0));
    println!("elements={}", elements.len());
    write(&a.out, |w| write_elements(&elements, w).map_err(|e| ExportError::Invalid(e.to_string())))
}

fn cmd_ingest(a: IngestArgs) -> Result<(), Failure> {
    let mut records = read_elements(open(&a.input)?).map_err(|e| Failure::input(format!("{}: {e}", a.input.display())))?;
    if let (Some(t), Some(m), Some(tw), Some(l)) = (&a.tess, &a.marks, &a.twin, &a.lamellae) {
        let n = nested(load_stack(t, m, tw, l)?)?;
        classify_all(&mut records, &n, &RunConfig::default().window()).map_err(Failure::input)?;
    }
    let r = phase_tsed(&records).map_err(Failure::stage)?;
    println!(
        "w_total={} w_lamella={} w_matrix={} v_l={} v_m={} straddling={}",
        r.w_total,
        r.w_lamella.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
        r.w_matrix.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
        r.v_l,
        r.v_m,
        r.straddling_count
    );
    let mut table: Vec<TsedRecord> = if a.tsed.exists() {
        read_tsed(open(&a.tsed)?).map_err(|e| Failure::input(format!("{}: {e}", a.tsed.display())))?
    } else {
        Vec::new()
    };
    table.push(TsedRecord {
        epsilon_m: a.epsilon_m,
        kappa: a.kappa,
        marking: match a.marking {
            MarkingArg::Im => Marking::Independent,
            MarkingArg::Ma => Marking::MovingAverage,
        },
        w_total: r.w_total,
        w_lamella: r.w_lamella,
        w_matrix: r.w_matrix,
    });
    write(&a.tsed, |w| write_tsed(&table, w).map_err(|e| ExportError::Invalid(e.to_string())))
}

fn cmd_regress(a: RegressArgs) -> Result<(), Failure> {
    let data = read_tsed(open(&a.input)?).map_err(|e| Failure::input(format!("{}: {e}", a.input.display())))?;
    let spec = DesignSpec::by_name(&a.model).map_err(Failure::input)?;
    let fit = spec.fit(&data).map_err(Failure::stage)?;
    match &a.out {
        Some(p) => write(p, |w| write_coefficients(&spec, &fit, w).map_err(|e| ExportError::Invalid(e.to_string())))?,
        None => write_coefficients(&spec, &fit, io::stdout().lock()).map_err(Failure::stage)?,
    }
    if let Some(r) = &a.against {
        let reduced = DesignSpec::by_name(r).map_err(Failure::input)?.fit(&data).map_err(Failure::stage)?;
        let t = f_test_joint(&fit, &reduced).map_err(Failure::input)?;
        eprintln!("F={} df=({}, {}) p={:.4}", t.f, t.q, t.dof, t.p);
    }
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> Result<(), Failure> {
    let mut c = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        c.seed = s;
    }
    if let Some(o) = a.output {
        c.output = o;
    }
    let opts = RunOptions { dry_run: a.dry_run, reuse_tess: a.reuse_tess };
    let report = run_pipeline(&c, &opts)?;
    if a.dry_run {
        println!("configuration valid: {} grid points", report.plan.directories.len());
        for v in &report.plan.variants {
            let eps: Vec<String> = c.epsilon_m.iter().map(|&e| epsilon_label(e)).collect();
            println!("  {} x [{}]", v.label(), eps.join(", "));
        }
        println!("output root: {}", report.plan.output.display());
        return Ok(());
    }
    let s = report.summary.expect("summary of a full run");
    println!(
        "cells={} window_cells={} inner={} grid_points={} warnings={} seconds={:.1}",
        s.generators,
        s.q_cells,
        s.inner_cells,
        s.points.len(),
        s.warnings.len(),
        report.timings.total
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let r = match cli.command {
        Command::Tess(a) => cmd_tess(a),
        Command::Mark(a) => cmd_mark(a),
        Command::Twin(a) => cmd_twin(a),
        Command::Lamellae(a) => cmd_lamellae(a),
        Command::Nest(a) => cmd_nest(a),
        Command::Stats(a) => cmd_stats(a),
        Command::EnergySynth(a) => cmd_energy_synth(a),
        Command::IngestElements(a) => cmd_ingest(a),
        Command::Regress(a) => cmd_regress(a),
        Command::Pipeline(a) => cmd_pipeline(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
