//! Two-photon (two-arm) measurements: conditional states, coincidence
//! scan simulation, joint 9x9 reconstruction, and the focal-plane fringe
//! check.
//!
//! Arm ordering is A-major: basis index of the pair state is a*3 + b.
//! Holding arm B's detector fixed at x_B while sweeping arm A multiplies
//! the joint state down to an (unnormalized) conditional state of A, so
//! every single-arm tool applies bin by bin. Repeating the sweep for
//! enough distinct x_B values makes the full 81-parameter joint state
//! linearly identifiable from coincidence counts alone.

use num_complex::Complex64;

use crate::forward::{local_steps, ArmContext, DensityMatrix, ScanRecord};
use crate::numerics::{kron, lsq_solve, ComplexMatrix, RealMatrix};
use crate::optics::Geometry;
use crate::patterns::{measurement_operator, DetectorSpec};
use crate::reconstruct::{project_physical, FitReport, PatternMode};
use crate::util::split_key_value;
use crate::{Error, Result};

/// Pair amplitude goes slit a (arm A) with the mirrored slit (arm B):
/// sum_a |a, d-1-a> / sqrt(d).
pub fn mirrored_pair_vector(d: usize) -> Vec<Complex64> {
    let mut v = vec![Complex64::new(0.0, 0.0); d * d];
    let amp = 1.0 / (d as f64).sqrt();
    for a in 0..d {
        v[a * d + (d - 1 - a)] = Complex64::new(amp, 0.0);
    }
    v
}

pub fn mirrored_pair_state(d: usize) -> DensityMatrix {
    DensityMatrix::pure(&mirrored_pair_vector(d)).expect("mirrored pair vector is normalized")
}

/// Isotropic mixture: visibility * pure pair + (1 - visibility) * I/d^2.
pub fn isotropic_pair_state(d: usize, visibility: f64) -> Result<DensityMatrix> {
    if !(0.0..=1.0).contains(&visibility) {
        return Err(Error::invalid(format!(
            "mixture weight must be in [0, 1], got {visibility}"
        )));
    }
    let pure = mirrored_pair_state(d);
    let dd = d * d;
    let m = ComplexMatrix::from_fn(dd, dd, |i, j| {
        let base = if i == j {
            Complex64::new((1.0 - visibility) / dd as f64, 0.0)
        } else {
            Complex64::new(0.0, 0.0)
        };
        base + pure.element(i, j) * visibility
    });
    DensityMatrix::new(m)
}

/// Tr[(M_a (x) M_b) rho_ab].
pub fn coincidence_probability(
    rho_ab: &DensityMatrix,
    m_a: &ComplexMatrix,
    m_b: &ComplexMatrix,
) -> Result<f64> {
    let da = m_a.rows();
    let db = m_b.rows();
    if !m_a.is_square() || !m_b.is_square() || da * db != rho_ab.dim() {
        return Err(Error::invalid(format!(
            "operator dims {da}x{db} do not factor the pair dim {}",
            rho_ab.dim()
        )));
    }
    let joint = kron(m_a, m_b);
    let mut acc = Complex64::new(0.0, 0.0);
    let n = da * db;
    for i in 0..n {
        for j in 0..n {
            acc += joint.get(i, j) * rho_ab.element(j, i);
        }
    }
    if acc.im.abs() > 1e-9 * (1.0 + acc.re.abs()) {
        return Err(Error::invalid(format!(
            "coincidence probability has imaginary part {:.3e}",
            acc.im
        )));
    }
    Ok(acc.re.max(0.0))
}

/// Unnormalized conditional state of arm A given arm B's detection
/// operator: sigma = Tr_B[(I (x) M_b) rho_ab]. Its trace is the detection
/// probability on arm B.
pub fn conditional_operator(rho_ab: &DensityMatrix, m_b: &ComplexMatrix) -> Result<ComplexMatrix> {
    let db = m_b.rows();
    if !m_b.is_square() || db == 0 || rho_ab.dim() % db != 0 {
        return Err(Error::invalid(format!(
            "B operator dim {db} does not divide the pair dim {}",
            rho_ab.dim()
        )));
    }
    let da = rho_ab.dim() / db;
    let mut sigma = ComplexMatrix::zeros(da, da);
    for i in 0..da {
        for j in 0..da {
            let mut acc = Complex64::new(0.0, 0.0);
            for bb in 0..db {
                for bp in 0..db {
                    acc += m_b.get(bb, bp) * rho_ab.element(i * db + bp, j * db + bb);
                }
            }
            sigma.set(i, j, acc);
        }
    }
    Ok(sigma.hermitized())
}

/// Simulation request for a family of B-conditioned A scans.
#[derive(Clone, Debug)]
pub struct ConditionalScanPlan {
    /// Arm A sweep positions.
    pub grid_a: Vec<f64>,
    /// Arm B detector positions, one scan each.
    pub positions_b: Vec<f64>,
    /// Detector slit on arm A.
    pub det_a: DetectorSpec,
    /// Detector slit on arm B.
    pub det_b: DetectorSpec,
    /// Coincidence flux: expected pairs per unit probability per um.
    pub exposure: f64,
}

/// Expected coincidence counts for every scan in a plan, one vector of
/// per-bin means per B position.
pub fn expected_conditional_means(
    rho_ab: &DensityMatrix,
    g: &Geometry,
    plan: &ConditionalScanPlan,
) -> Result<Vec<Vec<f64>>> {
    if rho_ab.dim() != g.dim() * g.dim() {
        return Err(Error::invalid(format!(
            "pair state dim {} does not match {} slits per arm",
            rho_ab.dim(),
            g.dim()
        )));
    }
    if plan.positions_b.is_empty() {
        return Err(Error::invalid("need at least one B position"));
    }
    if !plan.exposure.is_finite() || plan.exposure <= 0.0 {
        return Err(Error::invalid(format!(
            "exposure must be > 0, got {}",
            plan.exposure
        )));
    }
    let steps = local_steps(&plan.grid_a);
    if steps.is_empty() {
        return Err(Error::invalid("A grid must have at least two points"));
    }
    let d = g.dim();
    let m_a_table = plan
        .grid_a
        .iter()
        .map(|&xa| measurement_operator(g, &plan.det_a, xa))
        .collect::<Result<Vec<_>>>()?;
    let mut all = Vec::with_capacity(plan.positions_b.len());
    for &xb in &plan.positions_b {
        let m_b = measurement_operator(g, &plan.det_b, xb)?;
        let sigma = conditional_operator(rho_ab, &m_b)?;
        let mut means = Vec::with_capacity(plan.grid_a.len());
        for (k, m_a) in m_a_table.iter().enumerate() {
            let mut p = Complex64::new(0.0, 0.0);
            for i in 0..d {
                for j in 0..d {
                    p += m_a.get(i, j) * sigma.get(j, i);
                }
            }
            means.push(plan.exposure * p.re.max(0.0) * steps[k]);
        }
        all.push(means);
    }
    Ok(all)
}

/// Simulates one Poisson coincidence scan per B position. Scan s uses the
/// derived seed (seed << 32) | s, so a whole set is reproducible from one
/// seed and scans stay statistically independent.
pub fn simulate_conditional_set(
    rho_ab: &DensityMatrix,
    g: &Geometry,
    plan: &ConditionalScanPlan,
    seed: u64,
) -> Result<Vec<ScanRecord>> {
    let all_means = expected_conditional_means(rho_ab, g, plan)?;
    let mut scans = Vec::with_capacity(all_means.len());
    for (s, (means, &xb)) in all_means.iter().zip(&plan.positions_b).enumerate() {
        let derived = (seed << 32) | s as u64;
        let counts = crate::forward::sample_poisson_bins(means, derived)?;
        scans.push(
            ScanRecord::new(plan.grid_a.clone(), counts, plan.exposure)?
                .with_seed(derived)
                .with_context(ArmContext {
                    position_um: xb,
                    slit_width_um: plan.det_b.slit_width_um(),
                }),
        );
    }
    Ok(scans)
}

/// 81 real parameters of a 9x9 Hermitian matrix: the 9 diagonals, then
/// (Re, Im) of each above-diagonal entry in row-major order.
fn pack_hermitian(m: &ComplexMatrix) -> Vec<f64> {
    let d = m.rows();
    let mut out = Vec::with_capacity(d * d);
    for p in 0..d {
        out.push(m.get(p, p).re);
    }
    for p in 0..d {
        for q in (p + 1)..d {
            let v = m.get(p, q);
            out.push(v.re);
            out.push(v.im);
        }
    }
    out
}

fn unpack_hermitian(theta: &[f64], d: usize) -> ComplexMatrix {
    let mut m = ComplexMatrix::zeros(d, d);
    for p in 0..d {
        m.set(p, p, Complex64::new(theta[p], 0.0));
    }
    let mut idx = d;
    for p in 0..d {
        for q in (p + 1)..d {
            let v = Complex64::new(theta[idx], theta[idx + 1]);
            idx += 2;
            m.set(p, q, v);
            m.set(q, p, v.conj());
        }
    }
    m
}

/// Joint reconstruction of the full two-arm state from a set of
/// B-conditioned A scans. Needs at least nine scans at distinct B
/// positions (each scan must carry its arm context); all scans are fitted
/// against one shared flux scale.
pub fn reconstruct_joint(
    scans: &[ScanRecord],
    g: &Geometry,
    det_a: &DetectorSpec,
    mode: PatternMode,
) -> Result<FitReport> {
    if g.dim() != 3 {
        return Err(Error::invalid("joint inversion is for three slits per arm"));
    }
    if scans.len() < 9 {
        return Err(Error::invalid(format!(
            "joint inversion needs at least 9 conditioned scans, got {}",
            scans.len()
        )));
    }
    let mut positions: Vec<f64> = Vec::with_capacity(scans.len());
    for (s, scan) in scans.iter().enumerate() {
        let ctx = scan.context().ok_or_else(|| {
            Error::invalid(format!("scan {s} has no partner-arm context (xB)"))
        })?;
        for &prev in &positions {
            if (ctx.position_um - prev).abs() < 1e-9 {
                return Err(Error::invalid(format!(
                    "duplicate B position {} in scans",
                    ctx.position_um
                )));
            }
        }
        positions.push(ctx.position_um);
    }

    let det_a_eff = match mode {
        PatternMode::Ideal => DetectorSpec::ideal(),
        PatternMode::Realistic => *det_a,
    };
    let rows_total: usize = scans.iter().map(|s| s.grid().len()).sum();
    let mut design = RealMatrix::zeros(rows_total, 81);
    let mut values = Vec::with_capacity(rows_total);
    let mut row = 0;
    // Scans usually share one A grid; build each A operator once.
    let mut m_a_memo: std::collections::HashMap<u64, ComplexMatrix> =
        std::collections::HashMap::new();
    for scan in scans {
        let ctx = scan.context().expect("checked above");
        let det_b = if matches!(mode, PatternMode::Ideal) || ctx.slit_width_um == 0.0 {
            DetectorSpec::ideal()
        } else {
            DetectorSpec::slit(ctx.slit_width_um)?
        };
        let m_b = measurement_operator(g, &det_b, ctx.position_um)?;
        let steps = local_steps(scan.grid());
        for (k, &xk) in scan.grid().iter().enumerate() {
            let xa = xk + scan.center_offset_um();
            let m_a = match m_a_memo.entry(xa.to_bits()) {
                std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(measurement_operator(g, &det_a_eff, xa)?)
                }
            };
            let joint = kron(m_a, &m_b);
            let packed = pack_hermitian(&joint);
            let dx = steps[k];
            for (j, &v) in packed.iter().enumerate() {
                let fold = if j >= 9 { 2.0 } else { 1.0 };
                design.set(row, j, fold * v * dx);
            }
            values.push(scan.counts()[k] as f64);
            row += 1;
        }
    }

    let fit = lsq_solve(&design, &values)?;
    let raw = &fit.coefficients;
    let scale: f64 = raw[..9].iter().sum();
    if !scale.is_finite() || scale <= 0.0 {
        return Err(Error::Degenerate(format!(
            "fitted total coincidence intensity {scale:.3e} is not positive"
        )));
    }
    let theta: Vec<f64> = raw.iter().map(|v| v / scale).collect();
    let estimate = unpack_hermitian(&theta, 9);
    let pred = design.apply(raw)?;
    let rss_pre: f64 = values
        .iter()
        .zip(&pred)
        .map(|(y, p)| (y - p) * (y - p))
        .sum();

    let projection = project_physical(&estimate)?;
    let theta_proj = pack_hermitian(projection.state.entries());
    let mut shape = vec![0.0; rows_total];
    let mut sy = 0.0;
    let mut ss = 0.0;
    for k in 0..rows_total {
        let r = design.row(k);
        let mut acc = 0.0;
        for j in 0..81 {
            acc += r[j] * theta_proj[j];
        }
        shape[k] = acc;
        sy += acc * values[k];
        ss += acc * acc;
    }
    let s_opt = if ss > 0.0 { sy / ss } else { 0.0 };
    let rss_post: f64 = values
        .iter()
        .zip(&shape)
        .map(|(y, p)| (y - s_opt * p) * (y - s_opt * p))
        .sum();

    Ok(FitReport {
        state: projection.state,
        scale,
        rss_pre,
        rss_post,
        condition: fit.condition,
        offset_um: 0.0,
        mode,
        projection_distance: projection.distance,
        background: None,
        fallback: projection.fallback,
        offset_at_boundary: false,
        design_rank: fit.rank,
    })
}

/// One focal-plane fringe fit. With the sweeping detector in the lens
/// focal plane the three envelopes coincide, so a conditioned scan is a
/// two-frequency interference pattern on one envelope; its first-harmonic
/// phase tracks the partner detector position.
#[derive(Clone, Debug)]
pub struct FringeFit {
    /// Basis coefficients: envelope, cos/sin at the slit-spacing frequency,
    /// cos/sin at twice that frequency.
    pub coefficients: [f64; 5],
    /// Phase of the first harmonic, fringe ~ cos(6 K x + phase).
    pub phase: f64,
    /// (max - min) / (max + min) of the fitted fringe over one period.
    pub visibility: f64,
    /// False when the visibility is too small for the phase to mean
    /// anything.
    pub phase_defined: bool,
    pub rss: f64,
}

/// Threshold below which a fringe phase is reported as undefined.
pub const FRINGE_PHASE_MIN_VISIBILITY: f64 = 0.05;

/// Fits one conditioned focal-plane scan to the two-harmonic fringe model.
/// `g` must put the sweep in the focal plane (z = f).
pub fn fringe_fit(scan: &ScanRecord, g: &Geometry) -> Result<FringeFit> {
    let k = crate::optics::sinc_scale(g)?;
    let steps = local_steps(scan.grid());
    let n = scan.grid().len();
    if n < 8 {
        return Err(Error::invalid("fringe fit needs at least 8 bins"));
    }
    let mut a = RealMatrix::zeros(n, 5);
    let mut y = Vec::with_capacity(n);
    for (idx, &x) in scan.grid().iter().enumerate() {
        let e = crate::optics::sinc(k * x);
        let env = e * e;
        let t = 6.0 * k * x;
        a.set(idx, 0, env);
        a.set(idx, 1, env * t.cos());
        a.set(idx, 2, env * t.sin());
        a.set(idx, 3, env * (2.0 * t).cos());
        a.set(idx, 4, env * (2.0 * t).sin());
        // Fit count rates so the fringe shape is grid-independent.
        y.push(scan.counts()[idx] as f64 / steps[idx]);
    }
    let fit = lsq_solve(&a, &y)?;
    let c = &fit.coefficients;
    let pred = a.apply(c)?;
    let rss = y
        .iter()
        .zip(&pred)
        .map(|(yv, p)| (yv - p) * (yv - p))
        .sum();

    // fringe(theta) over one period of the first harmonic.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..2048 {
        let t = 2.0 * std::f64::consts::PI * i as f64 / 2048.0;
        let v = c[0] + c[1] * t.cos() + c[2] * t.sin() + c[3] * (2.0 * t).cos()
            + c[4] * (2.0 * t).sin();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let visibility = if hi + lo > 0.0 { (hi - lo) / (hi + lo) } else { 0.0 };
    let phase = f64::atan2(-c[2], c[1]);
    Ok(FringeFit {
        coefficients: [c[0], c[1], c[2], c[3], c[4]],
        phase,
        visibility,
        phase_defined: visibility >= FRINGE_PHASE_MIN_VISIBILITY,
        rss,
    })
}

/// Wraps an angle difference into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Writes each scan to `<stem>_NNN.csv` in `dir` plus a `<stem>.manifest`
/// listing them in order; returns the manifest path.
pub fn write_scan_set(
    scans: &[ScanRecord],
    dir: &std::path::Path,
    stem: &str,
) -> Result<std::path::PathBuf> {
    if scans.is_empty() {
        return Err(Error::invalid("refusing to write an empty scan set"));
    }
    let mut manifest = String::from("# conditioned scan set\n");
    for (s, scan) in scans.iter().enumerate() {
        let name = format!("{stem}_{s:03}.csv");
        scan.write_csv(&dir.join(&name))?;
        manifest.push_str(&format!("scan = {name}\n"));
    }
    let mpath = dir.join(format!("{stem}.manifest"));
    std::fs::write(&mpath, manifest)?;
    Ok(mpath)
}

/// Reads the scans listed by a manifest; relative entries resolve against
/// the manifest's directory.
pub fn read_scan_set(manifest: &std::path::Path) -> Result<Vec<ScanRecord>> {
    let text = std::fs::read_to_string(manifest)?;
    let base = manifest.parent().unwrap_or_else(|| std::path::Path::new("."));
    let mut scans = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let Some((key, value)) = split_key_value(raw) else {
            continue;
        };
        if key != "scan" {
            return Err(Error::parse(
                &manifest.display().to_string(),
                idx + 1,
                format!("unexpected key {key:?}"),
            ));
        }
        scans.push(ScanRecord::from_csv_file(&base.join(value))?);
    }
    if scans.is_empty() {
        return Err(Error::parse(
            &manifest.display().to_string(),
            0,
            "manifest lists no scans",
        ));
    }
    Ok(scans)
}

/// Purity of the reduced single-arm state: 1/d for a maximally entangled
/// pair, 1 for a product of pure states.
pub fn reduced_purity(rho_ab: &DensityMatrix, d: usize) -> Result<f64> {
    let reduced = crate::numerics::partial_trace_b(rho_ab.entries(), d)?;
    let f = reduced.frobenius_norm();
    Ok(f * f)
}
