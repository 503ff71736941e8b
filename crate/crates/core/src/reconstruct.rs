//! Linear inversion of one scan into a physical density matrix.
//!
//! Counts are linear in the state: counts_k = E * Tr[M(x_k) rho] * dx_k.
//! Expanding the trace over the nine real degrees of freedom of a qutrit
//! state turns a scan into an ordinary least-squares problem with a 9-column
//! design matrix (off-diagonal columns doubled because each coherence enters
//! twice). The overall flux E times the trace is one scale factor, absorbed
//! by fitting unnormalized parameters and dividing out their diagonal sum.
//!
//! Noise pushes the raw estimate slightly outside the physical set, so the
//! fit is followed by the Frobenius-nearest projection onto unit-trace
//! positive semidefinite matrices (eigenvalue simplex projection). Both
//! residuals are reported: rss_pre for the unconstrained fit, rss_post after
//! projection, whose gap is a cheap model-mismatch diagnostic.

use num_complex::Complex64;

use crate::forward::{local_steps, DensityMatrix, ScanRecord};
use crate::numerics::{column_rank, hermitian_eig, lsq_solve, ComplexMatrix, RealMatrix};
use crate::patterns::{pattern_table, DetectorSpec, PatternSet, CHANNEL_NAMES};
use crate::util::{fmt_sig, split_key_value};
use crate::{Error, Result};

/// Which pattern model a design matrix (and fit) used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatternMode {
    /// Point-detector patterns.
    Ideal,
    /// Slit-averaged patterns.
    Realistic,
}

impl PatternMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PatternMode::Ideal => "ideal",
            PatternMode::Realistic => "realistic",
        }
    }
}

impl std::fmt::Display for PatternMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PatternMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ideal" => Ok(PatternMode::Ideal),
            "realistic" => Ok(PatternMode::Realistic),
            other => Err(Error::invalid(format!(
                "mode must be ideal or realistic, got {other:?}"
            ))),
        }
    }
}

/// Least-squares design for one scan: row k holds the nine pattern channels
/// at x_k (off-diagonals doubled) times the local step, plus an optional
/// constant-background column.
#[derive(Clone, Debug)]
pub struct DesignMatrix {
    matrix: RealMatrix,
    grid: Vec<f64>,
    mode: PatternMode,
    condition: f64,
    background: bool,
}

impl DesignMatrix {
    pub fn matrix(&self) -> &RealMatrix {
        &self.matrix
    }

    /// The evaluation grid the patterns were computed on (scan grid plus
    /// any center offset).
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn mode(&self) -> PatternMode {
        self.mode
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn has_background(&self) -> bool {
        self.background
    }
}

/// Builds the design from a tabulated pattern set. Errors if the columns
/// lose rank (the error names the channel mixture that became invisible);
/// the recorded condition number is the pivoted-QR diagonal ratio.
pub fn build_design(patterns: &PatternSet) -> Result<DesignMatrix> {
    build_design_with(patterns, false)
}

pub fn build_design_with(patterns: &PatternSet, background: bool) -> Result<DesignMatrix> {
    let n = patterns.len();
    let ncols = if background { 10 } else { 9 };
    let steps = local_steps(patterns.grid());
    let mut m = RealMatrix::zeros(n, ncols);
    for k in 0..n {
        let ch = patterns.channels(k)?;
        let dx = steps[k];
        for (j, &v) in ch.iter().enumerate() {
            let fold = if j >= 3 { 2.0 } else { 1.0 };
            m.set(k, j, fold * v * dx);
        }
        if background {
            m.set(k, 9, dx);
        }
    }
    let rank = column_rank(&m);
    if rank.rank < ncols {
        return Err(Error::RankDeficient {
            rank: rank.rank,
            needed: ncols,
            channels: name_null_mixture(rank.null_vector.as_deref()),
        });
    }
    Ok(DesignMatrix {
        matrix: m,
        grid: patterns.grid().to_vec(),
        mode: if patterns.detector().is_ideal() {
            PatternMode::Ideal
        } else {
            PatternMode::Realistic
        },
        condition: rank.condition,
        background,
    })
}

fn column_name(j: usize) -> &'static str {
    CHANNEL_NAMES.get(j).copied().unwrap_or("background")
}

fn name_null_mixture(v: Option<&[f64]>) -> String {
    match v {
        None => "unknown channel mixture".to_string(),
        Some(v) => {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[j].abs().total_cmp(&v[i].abs()));
            let parts: Vec<String> = idx
                .iter()
                .take(4)
                .filter(|&&i| v[i].abs() > 1e-6)
                .map(|&i| format!("{}({:+.2})", column_name(i), v[i]))
                .collect();
            parts.join(" ")
        }
    }
}

/// Unconstrained linear fit of one scan.
#[derive(Clone, Debug)]
pub struct LinearFit {
    /// Nine state channels normalized so the diagonals sum to 1
    /// ([`CHANNEL_NAMES`] order, with M read as rho).
    pub channels: [f64; 9],
    /// Diagonal sum of the raw coefficients: the fitted flux
    /// (exposure times the unnormalized trace).
    pub scale: f64,
    /// Fitted constant background, as a rate per micrometer relative to
    /// `scale`; only with a background column.
    pub background: Option<f64>,
    /// Unweighted residual sum of squares of the raw fit.
    pub rss: f64,
    pub condition: f64,
    /// Numerical rank of the (possibly weighted) design the solver saw.
    pub rank: usize,
}

/// Fits scan counts against a design built on the scan's own grid shifted
/// by its recorded center offset. The fit is scale-free: multiplying the
/// counts only rescales `scale`.
pub fn solve_linear(design: &DesignMatrix, scan: &ScanRecord) -> Result<LinearFit> {
    check_alignment(design, scan.grid(), scan.center_offset_um())?;
    let values: Vec<f64> = scan.counts().iter().map(|&c| c as f64).collect();
    solve_core(design, &values, None)
}

/// Same inversion on already-averaged (possibly non-integer) bin values.
pub fn solve_values(design: &DesignMatrix, values: &[f64]) -> Result<LinearFit> {
    solve_core(design, values, None)
}

fn check_alignment(design: &DesignMatrix, grid: &[f64], offset: f64) -> Result<()> {
    if design.grid.len() != grid.len() {
        return Err(Error::invalid(format!(
            "design has {} rows for a {}-point scan",
            design.grid.len(),
            grid.len()
        )));
    }
    for (dg, sg) in design.grid.iter().zip(grid) {
        if (dg - (sg + offset)).abs() > 1e-9 * (1.0 + sg.abs()) {
            return Err(Error::invalid(format!(
                "design grid point {dg} does not match scan point {sg} + offset {offset}"
            )));
        }
    }
    Ok(())
}

fn solve_core(design: &DesignMatrix, values: &[f64], variance: Option<&[f64]>) -> Result<LinearFit> {
    if values.len() != design.matrix.rows() {
        return Err(Error::invalid(format!(
            "{} values for a {}-row design",
            values.len(),
            design.matrix.rows()
        )));
    }
    let fit = match variance {
        None => lsq_solve(&design.matrix, values)?,
        Some(var) => {
            if var.len() != values.len() {
                return Err(Error::invalid("variance length mismatch"));
            }
            let mut a = design.matrix.clone();
            let mut y = values.to_vec();
            for k in 0..y.len() {
                let v = var[k];
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::invalid(format!("variance {v} in bin {k}")));
                }
                let w = 1.0 / v.sqrt();
                y[k] *= w;
                for j in 0..a.cols() {
                    a.set(k, j, a.get(k, j) * w);
                }
            }
            lsq_solve(&a, &y)?
        }
    };
    let raw = &fit.coefficients;
    let scale = raw[0] + raw[1] + raw[2];
    if !scale.is_finite() || scale <= 0.0 {
        return Err(Error::Degenerate(format!(
            "fitted total intensity {scale:.3e} is not positive; \
             scan carries no invertible signal"
        )));
    }
    let mut channels = [0.0; 9];
    for (j, ch) in channels.iter_mut().enumerate() {
        *ch = raw[j] / scale;
    }
    let background = design.background.then(|| raw[9] / scale);
    let pred = design.matrix.apply(raw)?;
    let rss = values
        .iter()
        .zip(&pred)
        .map(|(y, p)| (y - p) * (y - p))
        .sum();
    Ok(LinearFit {
        channels,
        scale,
        background,
        rss,
        condition: fit.condition,
        rank: fit.rank,
    })
}

/// Rebuilds the 3x3 Hermitian matrix encoded by nine channels.
pub fn matrix_from_channels(channels: &[f64; 9]) -> ComplexMatrix {
    let c = channels;
    let mut m = ComplexMatrix::zeros(3, 3);
    m.set(0, 0, Complex64::new(c[0], 0.0));
    m.set(1, 1, Complex64::new(c[1], 0.0));
    m.set(2, 2, Complex64::new(c[2], 0.0));
    m.set(0, 1, Complex64::new(c[3], c[4]));
    m.set(1, 0, Complex64::new(c[3], -c[4]));
    m.set(0, 2, Complex64::new(c[5], c[6]));
    m.set(2, 0, Complex64::new(c[5], -c[6]));
    m.set(1, 2, Complex64::new(c[7], c[8]));
    m.set(2, 1, Complex64::new(c[7], -c[8]));
    m
}

/// Result of projecting an estimate onto the physical state space.
#[derive(Clone, Debug)]
pub struct PhysicalProjection {
    pub state: DensityMatrix,
    /// Frobenius distance from the (hermitized) input to the projected
    /// state; a large value flags an estimate far outside physicality.
    pub distance: f64,
    /// True when the input was so pathological (nonpositive trace) that
    /// the maximally mixed state was substituted.
    pub fallback: bool,
}

/// Distance at which a projection should be treated as a warning sign
/// rather than routine noise cleanup.
pub const PROJECTION_WARN_DISTANCE: f64 = 0.2;

/// Frobenius-nearest unit-trace positive semidefinite matrix: hermitize,
/// normalize the trace, then project the eigenvalue vector onto the
/// probability simplex in the fitted eigenbasis.
pub fn project_physical(estimate: &ComplexMatrix) -> Result<PhysicalProjection> {
    if !estimate.is_square() || estimate.rows() == 0 {
        return Err(Error::invalid("projection input must be square and nonempty"));
    }
    if !estimate.is_finite() {
        return Err(Error::invalid("projection input must be finite"));
    }
    let d = estimate.rows();
    let herm = estimate.hermitized();
    let tr = herm.trace().re;
    if !(tr > 1e-12) {
        let state = DensityMatrix::maximally_mixed(d);
        let distance = state.entries().frobenius_distance(&herm)?;
        return Ok(PhysicalProjection {
            state,
            distance,
            fallback: true,
        });
    }
    let normalized = herm.scale(Complex64::new(1.0 / tr, 0.0));
    let eig = hermitian_eig(&normalized)?;
    let lambda = simplex_project(&eig.values);
    let mut vd = eig.vectors.clone();
    for i in 0..d {
        for j in 0..d {
            vd.set(i, j, vd.get(i, j) * lambda[j]);
        }
    }
    let rebuilt = vd.mul(&eig.vectors.adjoint())?.hermitized();
    // Kill rounding drift in the trace before validation.
    let rebuilt_tr = rebuilt.trace().re;
    let state = DensityMatrix::new(rebuilt.scale(Complex64::new(1.0 / rebuilt_tr, 0.0)))?;
    let distance = state.entries().frobenius_distance(&herm)?;
    Ok(PhysicalProjection {
        state,
        distance,
        fallback: false,
    })
}

/// Euclidean projection of a real vector onto the probability simplex
/// (sum 1, entries >= 0).
fn simplex_project(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut mu = 0.0;
    let mut k_active = 0;
    for (k, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let candidate = (1.0 - cumsum) / (k + 1) as f64;
        if v + candidate > 0.0 {
            mu = candidate;
            k_active = k + 1;
        }
    }
    debug_assert!(k_active >= 1);
    let _ = k_active;
    values.iter().map(|&v| (v + mu).max(0.0)).collect()
}

/// Offset search outcome.
#[derive(Clone, Copy, Debug)]
pub struct OffsetFit {
    pub offset_um: f64,
    pub rss: f64,
    /// The minimum sat at the edge of the search window; the window was
    /// probably too small.
    pub at_boundary: bool,
}

/// Reconstruction behavior switches.
#[derive(Clone, Copy, Debug, Default)]
pub struct ReconstructOptions {
    /// Search half-width around the recorded center offset; None trusts
    /// the record.
    pub offset_search_halfwidth_um: Option<f64>,
    /// Weight bins by estimated Poisson variance max(counts, 1).
    pub poisson_weights: bool,
    /// Add a constant-background column to the design.
    pub background: bool,
}

/// Complete result of a single-scan reconstruction.
#[derive(Clone, Debug)]
pub struct FitReport {
    pub state: DensityMatrix,
    pub scale: f64,
    pub rss_pre: f64,
    pub rss_post: f64,
    pub condition: f64,
    pub offset_um: f64,
    pub mode: PatternMode,
    /// Frobenius distance moved by the physicality projection.
    pub projection_distance: f64,
    /// Background rate relative to scale, when fitted.
    pub background: Option<f64>,
    /// Projection had to fall back to the maximally mixed state.
    pub fallback: bool,
    /// Offset search stopped at the window edge.
    pub offset_at_boundary: bool,
    /// Numerical rank of the design the solver saw; 0 for reports loaded
    /// from a file (not serialized).
    pub design_rank: usize,
}

impl FitReport {
    pub fn unphysicality_warning(&self) -> bool {
        self.fallback || self.projection_distance > PROJECTION_WARN_DISTANCE
    }
}

/// Inverts one scan with default options (no offset search, no weights,
/// no background).
pub fn reconstruct_single(
    scan: &ScanRecord,
    g: &crate::optics::Geometry,
    det: &DetectorSpec,
    mode: PatternMode,
) -> Result<FitReport> {
    reconstruct_single_with(scan, g, det, mode, &ReconstructOptions::default())
}

/// Inverts one scan: tabulate patterns on the (offset-corrected) grid,
/// least-squares fit, project onto physical states, and refit the flux
/// scale for the post-projection residual.
pub fn reconstruct_single_with(
    scan: &ScanRecord,
    g: &crate::optics::Geometry,
    det: &DetectorSpec,
    mode: PatternMode,
    opts: &ReconstructOptions,
) -> Result<FitReport> {
    if g.dim() != 3 {
        return Err(Error::invalid("single-scan inversion is for three slits"));
    }
    let det_eff = match mode {
        PatternMode::Ideal => DetectorSpec::ideal(),
        PatternMode::Realistic => *det,
    };
    let values: Vec<f64> = scan.counts().iter().map(|&c| c as f64).collect();
    let variance: Option<Vec<f64>> = opts
        .poisson_weights
        .then(|| scan.counts().iter().map(|&c| (c as f64).max(1.0)).collect());

    let fit_at = |offset: f64| -> Result<(DesignMatrix, LinearFit)> {
        let eval: Vec<f64> = scan.grid().iter().map(|x| x + offset).collect();
        let pats = pattern_table(g, &det_eff, &eval)?;
        let design = build_design_with(&pats, opts.background)?;
        let fit = solve_core(&design, &values, variance.as_deref())?;
        Ok((design, fit))
    };

    let (offset, at_boundary) = match opts.offset_search_halfwidth_um {
        None => (scan.center_offset_um(), false),
        Some(h) => {
            let of = fit_offset_with(scan.center_offset_um(), h, |o| Ok(fit_at(o)?.1.rss))?;
            (of.offset_um, of.at_boundary)
        }
    };

    let (design, fit) = fit_at(offset)?;
    let estimate = matrix_from_channels(&fit.channels);
    let projection = project_physical(&estimate)?;
    let rss_post = post_projection_rss(&design, &projection.state, &values)?;
    Ok(FitReport {
        state: projection.state,
        scale: fit.scale,
        rss_pre: fit.rss,
        rss_post,
        condition: fit.condition,
        offset_um: offset,
        mode,
        projection_distance: projection.distance,
        background: fit.background,
        fallback: projection.fallback,
        offset_at_boundary: at_boundary,
        design_rank: fit.rank,
    })
}

/// Residual after re-fitting only the flux scale (and background, if the
/// design has one) with the state pinned to `state`.
fn post_projection_rss(design: &DesignMatrix, state: &DensityMatrix, values: &[f64]) -> Result<f64> {
    let ch = crate::patterns::channels_of(state.entries())?;
    let n = design.matrix.rows();
    let mut shape = vec![0.0; n];
    for k in 0..n {
        let row = design.matrix.row(k);
        let mut acc = 0.0;
        for j in 0..9 {
            acc += row[j] * ch[j];
        }
        shape[k] = acc;
    }
    let ncols = if design.background { 2 } else { 1 };
    let mut a = RealMatrix::zeros(n, ncols);
    for k in 0..n {
        a.set(k, 0, shape[k]);
        if design.background {
            a.set(k, 1, design.matrix.get(k, 9));
        }
    }
    let refit = lsq_solve(&a, values)?;
    let pred = a.apply(&refit.coefficients)?;
    Ok(values
        .iter()
        .zip(&pred)
        .map(|(y, p)| (y - p) * (y - p))
        .sum())
}

/// Minimizes `rss_of(offset)` over [center - halfwidth, center + halfwidth]
/// with a coarse sweep plus golden-section refinement.
pub fn fit_offset_with(
    center: f64,
    halfwidth: f64,
    mut rss_of: impl FnMut(f64) -> Result<f64>,
) -> Result<OffsetFit> {
    if !halfwidth.is_finite() || halfwidth <= 0.0 {
        return Err(Error::invalid("offset search half-width must be > 0"));
    }
    let coarse_step = (halfwidth / 4.0).min(0.5);
    let n_steps = (2.0 * halfwidth / coarse_step).round() as usize;
    let mut best = (center - halfwidth, rss_of(center - halfwidth)?);
    for i in 1..=n_steps {
        let o = center - halfwidth + i as f64 * coarse_step;
        let r = rss_of(o)?;
        if r < best.1 {
            best = (o, r);
        }
    }
    let lo = (best.0 - coarse_step).max(center - halfwidth);
    let hi = (best.0 + coarse_step).min(center + halfwidth);
    let (xm, rm) = golden_min(&mut rss_of, lo, hi, 1e-3)?;
    let (offset_um, rss) = if rm < best.1 { (xm, rm) } else { best };
    Ok(OffsetFit {
        offset_um,
        rss,
        at_boundary: (offset_um - center).abs() >= halfwidth - coarse_step / 2.0,
    })
}

fn golden_min(
    f: &mut impl FnMut(f64) -> Result<f64>,
    mut a: f64,
    mut b: f64,
    tol: f64,
) -> Result<(f64, f64)> {
    const INVPHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INVPHI * (b - a);
    let mut d = a + INVPHI * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while (b - a) > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INVPHI * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INVPHI * (b - a);
            fd = f(d)?;
        }
    }
    let xm = 0.5 * (a + b);
    Ok((xm, f(xm)?))
}

/// Overlap <psi| rho |psi> with a pure target (normalized internally).
pub fn fidelity(rho: &DensityMatrix, psi: &[Complex64]) -> Result<f64> {
    if psi.len() != rho.dim() {
        return Err(Error::invalid(format!(
            "target vector length {} for a dim-{} state",
            psi.len(),
            rho.dim()
        )));
    }
    let norm: f64 = psi.iter().map(|a| a.norm_sqr()).sum();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(Error::invalid("target vector must be nonzero and finite"));
    }
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..rho.dim() {
        for j in 0..rho.dim() {
            acc += psi[i].conj() * rho.element(i, j) * psi[j];
        }
    }
    Ok((acc.re / norm).clamp(0.0, 1.0))
}

/// Uhlmann fidelity (Tr sqrt(sqrt(a) b sqrt(a)))^2 between two states;
/// reduces to the pure-state overlap when either input is pure.
pub fn fidelity_mixed(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid("state dimensions differ"));
    }
    let ea = hermitian_eig(a.entries())?;
    let d = a.dim();
    let mut vs = ea.vectors.clone();
    for i in 0..d {
        for j in 0..d {
            vs.set(i, j, vs.get(i, j) * ea.values[j].max(0.0).sqrt());
        }
    }
    let sqrt_a = vs.mul(&ea.vectors.adjoint())?.hermitized();
    let t = sqrt_a.mul(b.entries())?.mul(&sqrt_a)?.hermitized();
    let et = hermitian_eig(&t)?;
    // sqrt turns O(eps) eigenvalue noise on exact zeros into O(sqrt(eps))
    // fidelity error; zero anything that small relative to the largest.
    let vmax = et.values.iter().cloned().fold(0.0f64, f64::max);
    let floor = vmax * 1e-12;
    let root_sum: f64 = et
        .values
        .iter()
        .filter(|&&v| v > floor)
        .map(|&v| v.sqrt())
        .sum();
    Ok((root_sum * root_sum).clamp(0.0, 1.0))
}

/// Tr(rho^2); 1 for pure states, 1/d for the maximally mixed state.
pub fn purity(rho: &DensityMatrix) -> f64 {
    let f = rho.entries().frobenius_norm();
    f * f
}

/// (1/2) trace norm of the difference of two states.
pub fn trace_distance(a: &DensityMatrix, b: &DensityMatrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid("state dimensions differ"));
    }
    let diff = a.entries().sub(b.entries())?;
    let eig = hermitian_eig(&diff)?;
    Ok(0.5 * eig.values.iter().map(|v| v.abs()).sum::<f64>())
}

const MATRIX_FILE_DIGITS: usize = 12;

fn push_matrix_lines(out: &mut String, m: &ComplexMatrix) {
    out.push_str(&format!("dim = {}\n", m.rows()));
    let join = |f: &dyn Fn(Complex64) -> f64| -> String {
        m.data()
            .iter()
            .map(|&v| fmt_sig(f(v), MATRIX_FILE_DIGITS))
            .collect::<Vec<_>>()
            .join(" ")
    };
    out.push_str(&format!("re = {}\n", join(&|v| v.re)));
    out.push_str(&format!("im = {}\n", join(&|v| v.im)));
}

/// Writes a square complex matrix as `dim`, `re`, `im` (row-major) lines.
pub fn write_matrix_file(m: &ComplexMatrix, path: &std::path::Path) -> Result<()> {
    if !m.is_square() {
        return Err(Error::invalid("matrix file stores square matrices"));
    }
    let mut out = String::new();
    push_matrix_lines(&mut out, m);
    Ok(std::fs::write(path, out)?)
}

fn parse_matrix_parts(
    label: &str,
    dim: Option<usize>,
    re: Option<Vec<f64>>,
    im: Option<Vec<f64>>,
) -> Result<ComplexMatrix> {
    let dim = dim.ok_or_else(|| Error::parse(label, 0, "missing dim"))?;
    let re = re.ok_or_else(|| Error::parse(label, 0, "missing re"))?;
    let im = im.ok_or_else(|| Error::parse(label, 0, "missing im"))?;
    if dim == 0 {
        return Err(Error::parse(label, 0, "dim must be >= 1"));
    }
    if re.len() != dim * dim || im.len() != dim * dim {
        return Err(Error::parse(
            label,
            0,
            format!(
                "need {} entries for dim {dim}, got re: {}, im: {}",
                dim * dim,
                re.len(),
                im.len()
            ),
        ));
    }
    let data: Vec<Complex64> = re
        .iter()
        .zip(&im)
        .map(|(&r, &i)| Complex64::new(r, i))
        .collect();
    let m = ComplexMatrix::from_row_major(dim, dim, data)?;
    if !m.is_finite() {
        return Err(Error::parse(label, 0, "non-finite matrix entries"));
    }
    Ok(m)
}

fn parse_float_list(label: &str, lineno: usize, raw: &str) -> Result<Vec<f64>> {
    raw.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| Error::parse(label, lineno, format!("bad number {tok:?}")))
        })
        .collect()
}

/// Reads a matrix file; extra keys (e.g. fit metadata) are ignored so both
/// plain matrices and full fit reports load.
pub fn read_matrix_file(path: &std::path::Path) -> Result<ComplexMatrix> {
    let text = std::fs::read_to_string(path)?;
    let label = path.display().to_string();
    let mut dim = None;
    let mut re = None;
    let mut im = None;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let Some((key, value)) = split_key_value(raw) else {
            continue;
        };
        match key {
            "dim" => {
                dim = Some(value.parse::<usize>().map_err(|_| {
                    Error::parse(&label, lineno, "dim: expected a positive integer")
                })?)
            }
            "re" => re = Some(parse_float_list(&label, lineno, value)?),
            "im" => im = Some(parse_float_list(&label, lineno, value)?),
            _ => {}
        }
    }
    parse_matrix_parts(&label, dim, re, im)
}

/// Writes the full fit report: the state matrix plus the scalar fit
/// metadata, one `key = value` per line.
pub fn write_fit_report(report: &FitReport, path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    push_matrix_lines(&mut out, report.state.entries());
    out.push_str(&format!("scale = {}\n", fmt_sig(report.scale, MATRIX_FILE_DIGITS)));
    out.push_str(&format!(
        "rss_pre = {}\n",
        fmt_sig(report.rss_pre, MATRIX_FILE_DIGITS)
    ));
    out.push_str(&format!(
        "rss_post = {}\n",
        fmt_sig(report.rss_post, MATRIX_FILE_DIGITS)
    ));
    out.push_str(&format!(
        "condition = {}\n",
        fmt_sig(report.condition, MATRIX_FILE_DIGITS)
    ));
    out.push_str(&format!(
        "offset_um = {}\n",
        fmt_sig(report.offset_um, MATRIX_FILE_DIGITS)
    ));
    out.push_str(&format!("mode = {}\n", report.mode));
    Ok(std::fs::write(path, out)?)
}

/// Reads back a fit report written by [`write_fit_report`]. The embedded
/// state must still pass density-matrix validation.
pub fn read_fit_report(path: &std::path::Path) -> Result<FitReport> {
    let text = std::fs::read_to_string(path)?;
    let label = path.display().to_string();
    let mut dim = None;
    let mut re = None;
    let mut im = None;
    let mut scalars: std::collections::HashMap<String, f64> = std::collections::HashMap::new();
    let mut mode = None;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let Some((key, value)) = split_key_value(raw) else {
            continue;
        };
        match key {
            "dim" => {
                dim = Some(value.parse::<usize>().map_err(|_| {
                    Error::parse(&label, lineno, "dim: expected a positive integer")
                })?)
            }
            "re" => re = Some(parse_float_list(&label, lineno, value)?),
            "im" => im = Some(parse_float_list(&label, lineno, value)?),
            "mode" => mode = Some(value.parse::<PatternMode>()?),
            other => {
                let v = value.parse::<f64>().map_err(|_| {
                    Error::parse(&label, lineno, format!("{other}: expected a number"))
                })?;
                scalars.insert(other.to_string(), v);
            }
        }
    }
    let m = parse_matrix_parts(&label, dim, re, im)?;
    let state = DensityMatrix::new(m)?;
    let need = |key: &str| -> Result<f64> {
        scalars
            .get(key)
            .copied()
            .ok_or_else(|| Error::parse(&label, 0, format!("missing {key}")))
    };
    Ok(FitReport {
        state,
        scale: need("scale")?,
        rss_pre: need("rss_pre")?,
        rss_post: need("rss_post")?,
        condition: need("condition")?,
        offset_um: need("offset_um")?,
        mode: mode.ok_or_else(|| Error::parse(&label, 0, "missing mode"))?,
        projection_distance: 0.0,
        background: None,
        fallback: false,
        offset_at_boundary: false,
        design_rank: 0,
    })
}
