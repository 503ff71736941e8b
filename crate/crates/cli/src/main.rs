//! Command-line front end: config + data files in, CSV/report files out.
//!
//! Exit codes: 0 success, 2 input/config, 3 geometry validity,
//! 4 unphysical state, 5 identifiability.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;

use scantomo::bipartite::{
    mirrored_pair_vector, read_scan_set, reconstruct_joint, simulate_conditional_set,
    write_scan_set, ConditionalScanPlan,
};
use scantomo::forward::{simulate_scan, DensityMatrix, ScanRecord};
use scantomo::numerics::{hermitian_eig, ComplexMatrix};
use scantomo::optics::{validity_check, Geometry, ValidityLevel};
use scantomo::patterns::{pattern_table, DetectorSpec};
use scantomo::reconstruct::{
    fidelity, fidelity_mixed, read_matrix_file, reconstruct_single_with, write_fit_report,
    FitReport, PatternMode, ReconstructOptions,
};
use scantomo::Error;

#[derive(Parser)]
#[command(
    name = "scantomo",
    version,
    about = "Single-scan tomography of multi-slit spatial qutrits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tabulate the nine pattern functions over the configured grid
    Patterns(CommonArgs),
    /// Simulate a counting scan (3x3 state) or conditional scan set (9x9)
    Simulate {
        #[command(flatten)]
        args: CommonArgs,
        /// Density-matrix file for the state being measured
        matrix: PathBuf,
    },
    /// Fit a single-qutrit state to one scan CSV
    Reconstruct {
        #[command(flatten)]
        args: CommonArgs,
        /// Scan CSV produced by `simulate` or by an instrument
        scan: PathBuf,
        /// Search half-width (um) for the scan center offset
        #[arg(long, value_name = "UM")]
        offset_search: Option<f64>,
        /// Density-matrix file to report fidelity against
        #[arg(long, value_name = "PATH")]
        reference: Option<PathBuf>,
    },
    /// Fit the joint 9x9 pair state to a manifest of conditional scans
    ReconstructJoint {
        #[command(flatten)]
        args: CommonArgs,
        /// Manifest listing one conditional scan CSV per line
        manifest: PathBuf,
        /// Density-matrix file to report fidelity against
        /// (default: the mirrored pair state)
        #[arg(long, value_name = "PATH")]
        reference: Option<PathBuf>,
    },
    /// Report trace, purity, eigenvalue floor, and fidelity of a matrix file
    Metrics {
        matrix: PathBuf,
        /// Density-matrix file to compare against
        #[arg(long, value_name = "PATH")]
        reference: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// key = value run configuration
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Pattern model: ideal (point detector) or realistic (slit average)
    #[arg(long, value_name = "MODE")]
    mode: Option<String>,
    /// Random seed override
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output path override
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

/// Default mapping from library errors; call sites with more context
/// (unphysical input, validity gate) pick their own code.
impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidInput(_) | Error::Parse { .. } | Error::Io(_) => 2,
            Error::Degenerate(_) => 3,
            Error::RankDeficient { .. } | Error::NoConvergence(_) => 5,
        };
        Failure::new(code, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

const GEOMETRY_KEYS: [&str; 7] = [
    "lambda_nm",
    "slit_width_um",
    "slit_pitch_um",
    "slit_offsets_um",
    "f_mm",
    "L_mm",
    "z_mm",
];

struct RunConfig {
    geometry: Geometry,
    detector: DetectorSpec,
    grid: Vec<f64>,
    exposure: f64,
    seed: u64,
    mode: PatternMode,
    positions_b: Vec<f64>,
    out: Option<PathBuf>,
}

impl RunConfig {
    fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::new(2, format!("{}: {e}", path.display())))?;
        let label = path.display().to_string();

        let mut geometry_lines: Vec<&str> = Vec::new();
        let mut detector_slit = 0.0f64;
        let mut grid_min = None;
        let mut grid_max = None;
        let mut grid_step = None;
        let mut exposure = 1e7;
        let mut seed = 0u64;
        let mut mode = PatternMode::Realistic;
        let mut positions_b = Vec::new();
        let mut out = None;

        let bad = |line: usize, msg: String| Failure::new(2, format!("{label}:{line}: {msg}"));
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                geometry_lines.push("");
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(bad(line, "expected key = value".into()));
            };
            let key = key.trim();
            let value = value.trim();
            if GEOMETRY_KEYS.contains(&key) {
                geometry_lines.push(raw);
                continue;
            }
            geometry_lines.push("");
            let num = |v: &str| -> Result<f64, Failure> {
                v.parse::<f64>()
                    .map_err(|_| bad(line, format!("bad number {v:?} for {key}")))
            };
            match key {
                "detector_slit_um" => detector_slit = num(value)?,
                "grid_min_um" => grid_min = Some(num(value)?),
                "grid_max_um" => grid_max = Some(num(value)?),
                "grid_step_um" => grid_step = Some(num(value)?),
                "exposure" => exposure = num(value)?,
                "seed" => {
                    seed = value
                        .parse::<u64>()
                        .map_err(|_| bad(line, format!("bad seed {value:?}")))?;
                }
                "mode" => mode = parse_mode(value).map_err(|e| bad(line, e.message))?,
                "xB_list_um" => {
                    positions_b = value
                        .split(',')
                        .map(|tok| num(tok.trim()))
                        .collect::<Result<Vec<f64>, Failure>>()?;
                }
                "out" => out = Some(PathBuf::from(value)),
                other => return Err(bad(line, format!("unknown key {other:?}"))),
            }
        }

        // geometry keys keep their original line numbers in error messages
        let geometry = Geometry::from_config_str(&geometry_lines.join("\n"), &label)
            .map_err(|e| Failure::new(2, e.to_string()))?;
        let detector =
            DetectorSpec::slit(detector_slit).map_err(|e| Failure::new(2, e.to_string()))?;

        let need = |opt: Option<f64>, key: &str| {
            opt.ok_or_else(|| Failure::new(2, format!("{label}: missing key {key}")))
        };
        let lo = need(grid_min, "grid_min_um")?;
        let hi = need(grid_max, "grid_max_um")?;
        let step = need(grid_step, "grid_step_um")?;
        if !(lo < hi) || !(step > 0.0) {
            return Err(Failure::new(
                2,
                format!("{label}: need grid_min_um < grid_max_um and grid_step_um > 0"),
            ));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        let grid: Vec<f64> = (0..n).map(|k| lo + step * k as f64).collect();
        if !(exposure > 0.0) {
            return Err(Failure::new(2, format!("{label}: exposure must be > 0")));
        }

        Ok(RunConfig {
            geometry,
            detector,
            grid,
            exposure,
            seed,
            mode,
            positions_b,
            out,
        })
    }

    fn apply_overrides(&mut self, args: &CommonArgs) -> Result<(), Failure> {
        if let Some(mode) = &args.mode {
            self.mode = parse_mode(mode)?;
        }
        if let Some(seed) = args.seed {
            self.seed = seed;
        }
        if let Some(out) = &args.out {
            self.out = Some(out.clone());
        }
        Ok(())
    }

    fn out_path(&self) -> Result<&Path, Failure> {
        self.out.as_deref().ok_or_else(|| {
            Failure::new(2, "no output path: pass --out or set out in the config")
        })
    }
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| Failure::new(2, format!("{}: {e}", dir.display())))?;
        }
    }
    Ok(())
}

fn parse_mode(s: &str) -> Result<PatternMode, Failure> {
    s.parse::<PatternMode>()
        .map_err(|e| Failure::new(2, e.to_string()))
}

fn load_config(args: &CommonArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply_overrides(args)?;
    Ok(cfg)
}

/// Hard validity failures abort with exit 3; warnings go to stderr.
fn gate_validity(g: &Geometry) -> Result<(), Failure> {
    let report = validity_check(g);
    match report.level {
        ValidityLevel::Fail => Err(Failure::new(3, report.message)),
        ValidityLevel::Warn => {
            eprintln!("warning: {}", report.message);
            Ok(())
        }
        ValidityLevel::Pass => Ok(()),
    }
}

fn cmd_patterns(args: &CommonArgs) -> CmdResult {
    let cfg = load_config(args)?;
    gate_validity(&cfg.geometry)?;
    let det = match cfg.mode {
        PatternMode::Ideal => DetectorSpec::ideal(),
        PatternMode::Realistic => cfg.detector,
    };
    let table = pattern_table(&cfg.geometry, &det, &cfg.grid)?;
    let out = cfg.out_path()?;
    ensure_parent(out)?;
    table.write_csv(out)?;
    println!(
        "wrote {} pattern rows (b = {} um, {} mode) to {}",
        table.len(),
        det.slit_width_um(),
        cfg.mode,
        out.display()
    );
    Ok(())
}

/// read_matrix_file with the path prepended to I/O errors.
fn load_matrix(path: &Path) -> Result<ComplexMatrix, Failure> {
    read_matrix_file(path).map_err(|e| match e {
        Error::Io(io) => Failure::new(2, format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

fn read_state(path: &Path) -> Result<DensityMatrix, Failure> {
    let m = load_matrix(path)?;
    DensityMatrix::new(m).map_err(|e| {
        Failure::new(4, format!("{}: unphysical state: {e}", path.display()))
    })
}

fn cmd_simulate(args: &CommonArgs, matrix: &Path) -> CmdResult {
    let cfg = load_config(args)?;
    gate_validity(&cfg.geometry)?;
    let rho = read_state(matrix)?;
    let out = cfg.out_path()?;
    match rho.dim() {
        3 => {
            let table = pattern_table(&cfg.geometry, &cfg.detector, &cfg.grid)?;
            let scan = simulate_scan(&rho, &table, cfg.exposure, cfg.seed)?;
            ensure_parent(out)?;
            scan.write_csv(out)?;
            println!(
                "wrote scan with {} counts in {} bins to {}",
                scan.total_counts(),
                scan.grid().len(),
                out.display()
            );
        }
        9 => {
            if cfg.positions_b.is_empty() {
                return Err(Failure::new(
                    2,
                    "9x9 state needs xB_list_um in the config",
                ));
            }
            let plan = ConditionalScanPlan {
                grid_a: cfg.grid.clone(),
                positions_b: cfg.positions_b.clone(),
                det_a: cfg.detector,
                det_b: cfg.detector,
                exposure: cfg.exposure,
            };
            let scans = simulate_conditional_set(&rho, &cfg.geometry, &plan, cfg.seed)?;
            let dir = out.parent().unwrap_or_else(|| Path::new("."));
            let stem = out
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Failure::new(2, "output path has no usable stem"))?;
            ensure_parent(out)?;
            let manifest = write_scan_set(&scans, dir, stem)?;
            println!(
                "wrote {} conditional scans and manifest {}",
                scans.len(),
                manifest.display()
            );
        }
        d => {
            return Err(Failure::new(
                2,
                format!("expected a 3x3 or 9x9 state, got {d}x{d}"),
            ))
        }
    }
    Ok(())
}

fn print_report(rep: &FitReport) {
    println!("mode        = {}", rep.mode);
    println!("rss_pre     = {:.6e}", rep.rss_pre);
    println!("rss_post    = {:.6e}", rep.rss_post);
    println!("condition   = {:.3e}", rep.condition);
    println!("offset_um   = {:.4}", rep.offset_um);
    println!("design_rank = {}", rep.design_rank);
    if rep.unphysicality_warning() {
        eprintln!(
            "warning: raw estimate far from physical (projection distance {:.3})",
            rep.projection_distance
        );
    }
}

fn cmd_reconstruct(
    args: &CommonArgs,
    scan_path: &Path,
    offset_search: Option<f64>,
    reference: Option<&Path>,
) -> CmdResult {
    let cfg = load_config(args)?;
    gate_validity(&cfg.geometry)?;
    let scan = ScanRecord::from_csv_file(scan_path).map_err(|e| match e {
        Error::Io(io) => Failure::new(2, format!("{}: {io}", scan_path.display())),
        other => other.into(),
    })?;
    let opts = ReconstructOptions {
        offset_search_halfwidth_um: offset_search,
        ..ReconstructOptions::default()
    };
    let rep = reconstruct_single_with(&scan, &cfg.geometry, &cfg.detector, cfg.mode, &opts)?;
    print_report(&rep);
    if let Some(ref_path) = reference {
        let target = read_state(ref_path)?;
        let f = fidelity_mixed(&rep.state, &target)?;
        println!("fidelity    = {f:.6}");
    }
    if let Some(out) = &cfg.out {
        ensure_parent(out)?;
        write_fit_report(&rep, out)?;
        println!("wrote fit report to {}", out.display());
    }
    Ok(())
}

fn cmd_reconstruct_joint(
    args: &CommonArgs,
    manifest: &Path,
    reference: Option<&Path>,
) -> CmdResult {
    let cfg = load_config(args)?;
    gate_validity(&cfg.geometry)?;
    let scans = read_scan_set(manifest)?;
    let rep = reconstruct_joint(&scans, &cfg.geometry, &cfg.detector, cfg.mode)?;
    println!("scans       = {}", scans.len());
    print_report(&rep);
    let f = match reference {
        Some(ref_path) => fidelity_mixed(&rep.state, &read_state(ref_path)?)?,
        None => fidelity(&rep.state, &mirrored_pair_vector(3))?,
    };
    println!("fidelity    = {f:.6}");
    if let Some(out) = &cfg.out {
        ensure_parent(out)?;
        write_fit_report(&rep, out)?;
        println!("wrote fit report to {}", out.display());
    }
    Ok(())
}

/// Largest-eigenvalue overlap <psi|M|psi> when the reference is pure;
/// Uhlmann fidelity otherwise (then both matrices must be states).
fn file_fidelity(m: &ComplexMatrix, reference: &ComplexMatrix) -> Result<f64, Failure> {
    let tr = reference.trace().re;
    if tr <= 0.0 {
        return Err(Failure::new(2, "reference has non-positive trace"));
    }
    let normalized = reference.hermitized().scale(Complex64::new(1.0 / tr, 0.0));
    let eig = hermitian_eig(&normalized)?;
    let top = eig.values[eig.values.len() - 1];
    if top >= 1.0 - 1e-6 {
        let d = normalized.rows();
        let m_tr = m.trace().re;
        let mut overlap = Complex64::new(0.0, 0.0);
        for i in 0..d {
            for j in 0..d {
                let psi_i = eig.vectors.get(i, d - 1);
                let psi_j = eig.vectors.get(j, d - 1);
                overlap += psi_i.conj() * m.get(i, j) * psi_j;
            }
        }
        Ok(overlap.re / m_tr)
    } else {
        let a = DensityMatrix::new(m.clone())
            .map_err(|e| Failure::new(4, format!("matrix is not a state: {e}")))?;
        let b = DensityMatrix::new(reference.clone())
            .map_err(|e| Failure::new(4, format!("reference is not a state: {e}")))?;
        Ok(fidelity_mixed(&a, &b)?)
    }
}

fn cmd_metrics(matrix: &Path, reference: Option<&Path>) -> CmdResult {
    let m = load_matrix(matrix)?;
    let d = m.rows();
    let tr = m.trace();
    let herm = m.hermiticity_error();
    let eig = hermitian_eig(&m.hermitized())?;
    let fro = m.frobenius_norm();
    println!("dim            = {d}");
    println!("trace          = {:.6} + {:.2e}i", tr.re, tr.im);
    println!("hermiticity    = {herm:.2e}");
    println!("min_eigenvalue = {:.6}", eig.values[0]);
    println!("purity         = {:.6}", (fro * fro) / (tr.re * tr.re));
    if let Some(ref_path) = reference {
        let reference = load_matrix(ref_path)?;
        if reference.rows() != d {
            return Err(Failure::new(
                2,
                format!(
                    "dimension mismatch: matrix is {d}x{d}, reference is {}x{}",
                    reference.rows(),
                    reference.rows()
                ),
            ));
        }
        let f = file_fidelity(&m, &reference)?;
        println!("fidelity       = {f:.6}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Patterns(args) => cmd_patterns(args),
        Command::Simulate { args, matrix } => cmd_simulate(args, matrix),
        Command::Reconstruct {
            args,
            scan,
            offset_search,
            reference,
        } => cmd_reconstruct(args, scan, *offset_search, reference.as_deref()),
        Command::ReconstructJoint {
            args,
            manifest,
            reference,
        } => cmd_reconstruct_joint(args, manifest, reference.as_deref()),
        Command::Metrics { matrix, reference } => cmd_metrics(matrix, reference.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
