use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pdmp_core::averaged::default_margin;
use pdmp_core::config::{DensityBlock, FieldConfig, HormanderBlock, SingularityBlock};
use pdmp_core::density::{estimate_occupation, OccupationEstimate, OccupationRequest};
use pdmp_core::liealg::DEFAULT_RANK_TOL;
use pdmp_core::singularity::VerdictOptions;
use pdmp_core::{
    blowup_diagnostic, blowup_exponent, config::grid_points, example, full_verdict, hormander_rank, simulate,
    BlowupReport, ConfigError, Experiment, ExperimentConfig, GammaCandidate, RadialMass, RankReport,
    SingularityVerdict,
};
use serde::Serialize;

use crate::error::{runtime, CliError};
use crate::output::{lambda_dir, load_config, stamped_json, write_json, write_text, Meta};

pub const DEFAULT_CELLS: usize = 64;
pub const DEFAULT_TRAJECTORIES: usize = 100;
pub const DEFAULT_RADII: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn cmd_simulate(config: &Path, out: &Path, output_dt: Option<f64>) -> Result<(), CliError> {
    let (exp, meta) = load_config(config)?;
    let mut cfg = exp.pdmp();
    if let Some(dt) = output_dt {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(CliError::Usage(format!("--output-dt must be positive, got {dt}")));
        }
        cfg.output_dt = Some(dt);
    }
    // Without an explicit spacing every RK step is a sample.
    cfg.output_dt = cfg.output_dt.or(Some(cfg.step));
    let traj = simulate(&cfg).map_err(runtime)?;
    let mut csv = meta.csv_comments();
    let _ = writeln!(csv, "# horizon={}", cfg.horizon);
    let _ = writeln!(csv, "# output_dt={}", cfg.output_dt.unwrap_or(cfg.step));
    let _ = writeln!(csv, "# jumps={}", traj.jump_times.len() - 1);
    let coords: Vec<String> = (1..=cfg.dim()).map(|k| format!("x{k}")).collect();
    let _ = writeln!(csv, "t,state,{}", coords.join(","));
    for s in &traj.samples {
        let _ = write!(csv, "{},{}", s.t, s.state);
        for x in &s.x {
            let _ = write!(csv, ",{x}");
        }
        csv.push('\n');
    }
    write_text(out, &csv)
}

#[derive(Debug, Clone)]
pub struct DensityArgs {
    pub cells: Option<usize>,
    pub trajectories: Option<usize>,
    pub workers: usize,
    pub lambda_list: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct DensitySummary {
    lambda: Option<f64>,
    cells: usize,
    trajectories: usize,
    horizon: f64,
    burn_in: f64,
    total_time: f64,
    state_marginal: Vec<f64>,
    /// Largest cell density per state.
    sup_density: Vec<f64>,
    blowup_slope: Option<f64>,
    files: Vec<String>,
}

/// Blow-up diagnostic output; carries the raw ball masses when the fit
/// cannot be made.
#[derive(Serialize)]
#[serde(untagged)]
enum BlowupOutput {
    Report(BlowupReport),
    Failed { error: String, radial: RadialMass },
}

impl BlowupOutput {
    fn from_radial(radial: &RadialMass) -> Self {
        match blowup_diagnostic(radial) {
            Ok(r) => BlowupOutput::Report(r),
            Err(e) => BlowupOutput::Failed {
                error: e.to_string(),
                radial: radial.clone(),
            },
        }
    }

    fn describe(&self) -> String {
        match self {
            BlowupOutput::Report(r) => format!("{:?} (slope {:.3}, R2 {:.3})", r.verdict, r.slope, r.r_squared),
            BlowupOutput::Failed { error, .. } => format!("no verdict ({error})"),
        }
    }
}

fn singularity_radial(block: &SingularityBlock) -> Result<RadialMass, CliError> {
    let radii = block.radii.clone().unwrap_or_else(|| DEFAULT_RADII.to_vec());
    RadialMass::new(block.gamma.points[0].clone(), block.gamma.state, radii).map_err(|e| CliError::Usage(e.to_string()))
}

fn run_occupation(
    exp: &Experiment,
    cells: Option<usize>,
    radial: Option<RadialMass>,
    trajectories: usize,
    workers: usize,
) -> Result<OccupationEstimate, CliError> {
    let cfg = exp.pdmp();
    cfg.recording_start().map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(r) = &radial {
        r.check_inside(&cfg.bbox).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let req = OccupationRequest {
        grid_cells: cells.into_iter().collect(),
        radial: radial.into_iter().collect(),
    };
    estimate_occupation(&cfg, &req, trajectories, workers).map_err(runtime)
}

/// One density pass written to `dir`. Returns the blow-up output when the
/// config has a singularity block.
fn density_pass(
    exp: &Experiment,
    meta: &Meta,
    lambda: Option<f64>,
    cells: usize,
    trajectories: usize,
    workers: usize,
    dir: &Path,
) -> Result<Option<BlowupOutput>, CliError> {
    let radial = exp.raw.singularity.as_ref().map(singularity_radial).transpose()?;
    let est = run_occupation(exp, Some(cells), radial, trajectories, workers)?;
    let grid = &est.grids[0];
    let mut pairs = meta.pairs();
    pairs.push(("trajectories", trajectories.to_string()));
    if let Some(l) = lambda {
        pairs.push(("lambda", l.to_string()));
    }
    let pairs_ref: Vec<(&str, String)> = pairs.iter().map(|(k, v)| (*k, v.clone())).collect();
    let mut files = Vec::new();
    for state in 0..exp.rates.n() {
        let name = format!("density_state{state}.csv");
        write_text(&dir.join(&name), &grid.to_csv(state, &pairs_ref))?;
        files.push(name);
    }
    let blowup = est.radial.first().map(BlowupOutput::from_radial);
    if let Some(b) = &blowup {
        write_json(&dir.join("blowup.json"), b, meta)?;
        files.push("blowup.json".into());
    }
    let cfg = exp.pdmp();
    let summary = DensitySummary {
        lambda,
        cells,
        trajectories,
        horizon: cfg.horizon,
        burn_in: cfg.burn_in(),
        total_time: grid.total_weight(),
        state_marginal: grid.state_marginal(),
        sup_density: (0..exp.rates.n())
            .map(|s| grid.state_values(s).iter().copied().fold(0.0, f64::max))
            .collect(),
        blowup_slope: match &blowup {
            Some(BlowupOutput::Report(r)) => Some(r.slope),
            _ => None,
        },
        files,
    };
    write_json(&dir.join("summary.json"), &summary, meta)?;
    Ok(blowup)
}

fn density_settings(block: Option<&DensityBlock>, args: &DensityArgs) -> (usize, usize, Option<Vec<f64>>) {
    let cells = args.cells.or(block.and_then(|b| b.cells)).unwrap_or(DEFAULT_CELLS);
    let traj = args
        .trajectories
        .or(block.and_then(|b| b.trajectories))
        .unwrap_or(DEFAULT_TRAJECTORIES);
    let lambdas = args.lambda_list.clone().or(block.and_then(|b| b.lambda_list.clone()));
    (cells, traj, lambdas)
}

pub fn cmd_density(config: &Path, out: &Path, args: &DensityArgs) -> Result<(), CliError> {
    let (exp, meta) = load_config(config)?;
    run_density(&exp, &meta, out, args)
}

fn run_density(exp: &Experiment, meta: &Meta, out: &Path, args: &DensityArgs) -> Result<(), CliError> {
    let (cells, traj, lambdas) = density_settings(exp.raw.density.as_ref(), args);
    if cells == 0 || traj == 0 {
        return Err(CliError::Usage("--cells and --trajectories must be positive".into()));
    }
    match lambdas {
        None => {
            let b = density_pass(exp, meta, exp.raw.lambda, cells, traj, args.workers, out)?;
            report_blowup("density", b.as_ref());
        }
        Some(list) => {
            if list.is_empty() {
                return Err(CliError::Usage("empty lambda list".into()));
            }
            for l in list {
                let scaled = exp.with_lambda(l)?;
                let dir = lambda_dir(out, l);
                let b = density_pass(&scaled, meta, Some(l), cells, traj, args.workers, &dir)?;
                report_blowup(&format!("lambda {l}"), b.as_ref());
            }
        }
    }
    Ok(())
}

fn report_blowup(label: &str, b: Option<&BlowupOutput>) {
    if let Some(b) = b {
        println!("{label}: blow-up diagnostic {}", b.describe());
    }
}

/// Where the Hörmander points come from.
#[derive(Debug, Clone)]
pub enum PointSource {
    File(PathBuf),
    Grid { lower: Vec<f64>, upper: Vec<f64>, n: usize },
    Config,
}

/// Parses `LO:HI:N` with comma-separated bounds, e.g. `-1,-1:1,1:5`.
pub fn parse_grid(s: &str) -> Result<PointSource, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, n] = parts.as_slice() else {
        return Err(format!("grid `{s}` is not of the form LO:HI:N"));
    };
    let coords = |t: &str| -> Result<Vec<f64>, String> {
        t.split(',')
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|e| format!("bad coordinate `{c}`: {e}"))
            })
            .collect()
    };
    let n: usize = n.trim().parse().map_err(|e| format!("bad point count `{n}`: {e}"))?;
    let (lower, upper) = (coords(lo)?, coords(hi)?);
    if lower.len() != upper.len() || n == 0 {
        return Err("grid bounds must have equal length and N must be positive".into());
    }
    Ok(PointSource::Grid { lower, upper, n })
}

#[derive(Serialize)]
struct HormanderOutput<'a> {
    depth: usize,
    rank_tol: f64,
    reports: &'a [RankReport],
}

fn hormander_reports(
    exp: &Experiment,
    points: &[Vec<f64>],
    depth: usize,
    rank_tol: f64,
) -> Result<Vec<RankReport>, CliError> {
    let d = exp.raw.dimension;
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(CliError::Usage(format!("point {p:?} does not have dimension {d}")));
    }
    points
        .iter()
        .map(|p| hormander_rank(&exp.fields, p, depth, rank_tol).map_err(runtime))
        .collect()
}

pub fn cmd_hormander(
    config: &Path,
    source: &PointSource,
    depth: Option<usize>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let (exp, meta) = load_config(config)?;
    let block = exp.raw.hormander.clone().unwrap_or_default();
    let points = match source {
        PointSource::File(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| CliError::Read {
                path: p.clone(),
                source,
            })?;
            serde_json::from_str::<Vec<Vec<f64>>>(&text)
                .map_err(|e| CliError::Usage(format!("{}: expected a JSON array of points: {e}", p.display())))?
        }
        PointSource::Grid { lower, upper, n } => grid_points(lower, upper, *n),
        PointSource::Config => exp.hormander_points(),
    };
    if points.is_empty() {
        return Err(CliError::Usage(
            "no points: pass --points, --grid, or a `hormander` block with points or grid".into(),
        ));
    }
    let depth = depth.or(block.depth).unwrap_or(1);
    let rank_tol = block.rank_tol.unwrap_or(DEFAULT_RANK_TOL);
    let reports = hormander_reports(&exp, &points, depth, rank_tol)?;
    let body = stamped_json(
        &HormanderOutput {
            depth,
            rank_tol,
            reports: &reports,
        },
        &meta,
    )?;
    match out {
        Some(path) => write_text(path, &body),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct VerdictOutput<'a> {
    #[serde(flatten)]
    verdict: &'a SingularityVerdict,
    gamma: &'a GammaCandidate,
    empirical: Option<&'a BlowupOutput>,
}

fn verdict_options(exp: &Experiment, block: &SingularityBlock, workers: usize) -> VerdictOptions {
    let cfg = exp.pdmp();
    VerdictOptions {
        bbox: exp.bbox.clone(),
        invariance_t_max: block.invariance_t_max.unwrap_or(5.0),
        invariance_times: 20,
        invariance_tol: block.invariance_tol.unwrap_or(1e-6),
        access_from: block.access_from.clone().unwrap_or_else(|| cfg.x0.clone()),
        access_trials: block.access_trials.unwrap_or(200),
        access_horizon: block.access_horizon.unwrap_or(100.0),
        hormander_depth: block.hormander_depth.unwrap_or(1),
        rank_tol: DEFAULT_RANK_TOL,
        step: cfg.step,
        seed: exp.seed,
        workers,
    }
}

/// Writes `verdict.json` and `exponent.csv` for the block's Γ candidate.
fn singularity_outputs(
    exp: &Experiment,
    meta: &Meta,
    block: &SingularityBlock,
    blowup: Option<&BlowupOutput>,
    workers: usize,
    out: &Path,
) -> Result<SingularityVerdict, CliError> {
    let opts = verdict_options(exp, block, workers);
    let gamma = &block.gamma;
    let verdict = full_verdict(gamma, &exp.fields, &exp.rates, &opts).map_err(runtime)?;
    write_json(
        &out.join("verdict.json"),
        &VerdictOutput {
            verdict: &verdict,
            gamma,
            empirical: blowup,
        },
        meta,
    )?;
    let i = gamma.state;
    let s_max = block.exponent_s_max.unwrap_or(5.0);
    let samples = blowup_exponent(
        &gamma.points[0],
        &exp.fields[i],
        exp.rates.rate(i, i),
        s_max,
        100,
        opts.step,
    )
    .map_err(runtime)?;
    let mut csv = meta.csv_comments();
    let _ = writeln!(csv, "# state={i}");
    let _ = writeln!(csv, "# point={:?}", gamma.points[0]);
    csv.push_str("s,exponent\n");
    for (s, e) in samples {
        let _ = writeln!(csv, "{s},{e}");
    }
    write_text(&out.join("exponent.csv"), &csv)?;
    Ok(verdict)
}

pub fn cmd_singularity(config: &Path, out: &Path, trajectories: Option<usize>, workers: usize) -> Result<(), CliError> {
    let (exp, meta) = load_config(config)?;
    let block = exp
        .raw
        .singularity
        .clone()
        .ok_or(ConfigError::MissingBlock("singularity"))?;
    let traj = trajectories.or(block.trajectories).unwrap_or(DEFAULT_TRAJECTORIES);
    let est = run_occupation(&exp, None, Some(singularity_radial(&block)?), traj, workers)?;
    let blowup = BlowupOutput::from_radial(&est.radial[0]);
    write_json(&out.join("blowup.json"), &blowup, &meta)?;
    let verdict = singularity_outputs(&exp, &meta, &block, Some(&blowup), workers, out)?;
    println!(
        "prediction {:?}: exit rate {} vs R {}; empirical {}",
        verdict.prediction,
        verdict.exit_rate,
        verdict.r_value,
        blowup.describe()
    );
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExampleArgs {
    pub q1: f64,
    pub q2: f64,
    pub lambda: f64,
    pub trajectories: usize,
    pub horizon: f64,
    pub step: f64,
    pub cells: usize,
    pub seed: u64,
    pub workers: usize,
}

/// The built-in rotation/contraction example as a config document.
pub fn example_config(args: &ExampleArgs) -> ExperimentConfig {
    let a = example::A.iter().map(|r| r.to_vec()).collect();
    let e0 = example::E0.to_vec();
    let bbox = example::bounding_box();
    ExperimentConfig {
        dimension: 2,
        fields: vec![
            FieldConfig::Affine {
                label: "v".into(),
                a,
                b: None,
            },
            FieldConfig::Affine {
                label: "w".into(),
                a: vec![vec![-1.0, 0.0], vec![0.0, -1.0]],
                b: Some(e0.clone()),
            },
        ],
        q: vec![vec![-args.q1, args.q1], vec![args.q2, -args.q2]],
        lambda: Some(args.lambda),
        bbox: bbox.lower().iter().zip(bbox.upper()).map(|(l, u)| [*l, *u]).collect(),
        x0: vec![0.0, 0.0],
        i0: example::STATE_V,
        horizon: args.horizon,
        burn_in: None,
        step: Some(args.step),
        seed: Some(args.seed),
        output_dt: None,
        density: Some(DensityBlock {
            cells: Some(args.cells),
            trajectories: Some(args.trajectories),
            lambda_list: None,
        }),
        hormander: Some(HormanderBlock {
            depth: Some(1),
            points: Some(vec![e0, vec![0.0, 0.0]]),
            grid: Some(pdmp_core::config::GridBlock {
                lower: bbox.lower().to_vec(),
                upper: bbox.upper().to_vec(),
                points_per_axis: 11,
            }),
            rank_tol: None,
        }),
        singularity: Some(SingularityBlock {
            gamma: GammaCandidate::point(vec![0.0, 0.0], example::STATE_V, 0.01),
            radii: Some(DEFAULT_RADII.to_vec()),
            trajectories: Some(args.trajectories),
            access_trials: Some(300),
            access_horizon: Some(100.0),
            hormander_depth: Some(1),
            invariance_t_max: Some(5.0),
            invariance_tol: Some(1e-6),
            access_from: Some(vec![0.3, -0.2]),
            exponent_s_max: Some(5.0),
        }),
    }
}

#[derive(Serialize)]
struct ExampleSummary<'a> {
    q1: f64,
    q2: f64,
    lambda: f64,
    exit_rate: f64,
    r_value: f64,
    prediction: pdmp_core::singularity::Prediction,
    empirical: &'a BlowupOutput,
    rank_at_e0: usize,
    rank_at_origin: usize,
    q0_member: bool,
    attractor_centroid: Vec<f64>,
}

pub fn cmd_example(args: &ExampleArgs, out: &Path) -> Result<(), CliError> {
    let raw = example_config(args);
    let text = serde_json::to_string_pretty(&raw).map_err(runtime)? + "\n";
    let exp = raw.validate(None)?;
    let meta = Meta::new(text.as_bytes(), exp.seed);
    write_text(&out.join("config.json"), &text)?;

    let blowup = density_pass(
        &exp,
        &meta,
        Some(args.lambda),
        args.cells,
        args.trajectories,
        args.workers,
        &out.join("density"),
    )?
    .expect("the example config has a singularity block");
    write_json(&out.join("blowup.json"), &blowup, &meta)?;

    let points = exp.hormander_points();
    let reports = hormander_reports(&exp, &points, 1, DEFAULT_RANK_TOL)?;
    write_json(
        &out.join("hormander.json"),
        &HormanderOutput {
            depth: 1,
            rank_tol: DEFAULT_RANK_TOL,
            reports: &reports,
        },
        &meta,
    )?;

    let block = exp.raw.singularity.clone().expect("example singularity block");
    let verdict = singularity_outputs(&exp, &meta, &block, Some(&blowup), args.workers, out)?;

    let avg = pdmp_core::averaged_field(&exp.fields, &exp.rates).map_err(runtime)?;
    let params = pdmp_core::averaged::AttractorParams {
        samples: 200,
        t_step: 2.0,
        max_iters: 40,
        tol: 1e-6,
        seed: exp.seed,
        step: 1e-2,
    };
    let att = pdmp_core::attractor_estimate(&avg, &exp.bbox, &params).map_err(runtime)?;
    let q0 =
        pdmp_core::q0_membership(&exp.fields, &att, 1, DEFAULT_RANK_TOL, default_margin(&exp.bbox)).map_err(runtime)?;

    let summary = ExampleSummary {
        q1: args.q1,
        q2: args.q2,
        lambda: args.lambda,
        exit_rate: verdict.exit_rate,
        r_value: verdict.r_value,
        prediction: verdict.prediction,
        empirical: &blowup,
        rank_at_e0: reports[0].rank,
        rank_at_origin: reports[1].rank,
        q0_member: q0.member,
        attractor_centroid: att.centroid(),
    };
    write_json(&out.join("summary.json"), &summary, &meta)?;
    println!(
        "prediction {:?} (exit rate {} vs R {}); empirical at 0: {}",
        verdict.prediction,
        verdict.exit_rate,
        verdict.r_value,
        blowup.describe()
    );
    Ok(())
}
