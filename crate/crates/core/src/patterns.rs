//! Measurement-operator matrix elements ("pattern functions") on detector
//! grids.
//!
//! A point detector at x measures the rank-one operator with entries
//! M_ij(x) = phi_i^*(x) phi_j(x). A real detector slit of width b averages
//! that operator over its face:
//!
//!   M_ij(x) = (1/b) * integral_{-b/2}^{+b/2} phi_i^*(x+t) phi_j(x+t) dt
//!
//! The average leaves the slowly varying diagonals nearly untouched but
//! multiplies each interference channel by roughly sinc(omega b / 2) of its
//! carrier frequency omega, which is how a finite slit eats fringe
//! visibility. Keeping that distinction explicit (ideal vs realistic
//! patterns) is the difference between an inversion that matches the data
//! and one that systematically underestimates coherences.

use num_complex::Complex64;

use crate::numerics::{gauss_legendre, ComplexMatrix};
use crate::optics::{sinc_scale, slit_wavefunction, Geometry};
use crate::util::fmt_sig;
use crate::{Error, Result};

/// Real-valued channel layout used everywhere a 3x3 Hermitian pattern or
/// state is flattened: three diagonals, then Re/Im of the upper triangle
/// in (l,c), (l,r), (c,r) order.
pub const CHANNEL_NAMES: [&str; 9] = [
    "Mll", "Mcc", "Mrr", "ReMlc", "ImMlc", "ReMlr", "ImMlr", "ReMcr", "ImMcr",
];

const QUAD_REL_TOL: f64 = 1e-9;

/// Detector slit description: aperture width and the quadrature order used
/// for the face average. Width 0 is the ideal point detector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorSpec {
    slit_width_um: f64,
    quad_points: usize,
}

impl DetectorSpec {
    /// Point detector; patterns reduce to phi_i^* phi_j.
    pub fn ideal() -> Self {
        DetectorSpec {
            slit_width_um: 0.0,
            quad_points: 32,
        }
    }

    /// Slit of width `b_um` averaged with the default 32-node rule.
    pub fn slit(b_um: f64) -> Result<Self> {
        Self::with_quad_points(b_um, 32)
    }

    pub fn with_quad_points(b_um: f64, quad_points: usize) -> Result<Self> {
        if !b_um.is_finite() || b_um < 0.0 {
            return Err(Error::invalid(format!(
                "detector width must be finite and >= 0, got {b_um}"
            )));
        }
        if quad_points < 4 {
            return Err(Error::invalid("need at least 4 quadrature nodes"));
        }
        Ok(DetectorSpec {
            slit_width_um: b_um,
            quad_points,
        })
    }

    pub fn slit_width_um(&self) -> f64 {
        self.slit_width_um
    }

    pub fn quad_points(&self) -> usize {
        self.quad_points
    }

    pub fn is_ideal(&self) -> bool {
        self.slit_width_um == 0.0
    }
}

/// Point-detector pattern phi_i^*(x) phi_j(x).
pub fn ideal_pattern(g: &Geometry, i: usize, j: usize, x_um: f64) -> Result<Complex64> {
    Ok(slit_wavefunction(g, i, x_um)?.conj() * slit_wavefunction(g, j, x_um)?)
}

/// Slit-averaged pattern; with an ideal detector this is `ideal_pattern`.
pub fn realistic_pattern(
    g: &Geometry,
    det: &DetectorSpec,
    i: usize,
    j: usize,
    x_um: f64,
) -> Result<Complex64> {
    let m = measurement_operator(g, det, x_um)?;
    Ok(m.get(i, j))
}

/// The full dxd measurement operator at one detector position. Hermitian
/// and positive semidefinite by construction. The slit average is Gauss-
/// Legendre; the result is accepted only if doubling the node count moves
/// it by less than 1e-9 relative, otherwise the quadrature is reported as
/// non-converged rather than silently trusted.
pub fn measurement_operator(g: &Geometry, det: &DetectorSpec, x_um: f64) -> Result<ComplexMatrix> {
    let d = g.dim();
    if det.is_ideal() {
        let phi = (0..d)
            .map(|i| slit_wavefunction(g, i, x_um))
            .collect::<Result<Vec<_>>>()?;
        return Ok(ComplexMatrix::from_fn(d, d, |i, j| phi[i].conj() * phi[j]));
    }

    let half = det.slit_width_um() / 2.0;
    let average = |order: usize| -> Result<ComplexMatrix> {
        let gl = gauss_legendre(order);
        let (nodes, weights) = (&gl.0, &gl.1);
        let mut acc = ComplexMatrix::zeros(d, d);
        for (t, w) in nodes.iter().zip(weights) {
            let xt = x_um + half * t;
            let phi = (0..d)
                .map(|i| slit_wavefunction(g, i, xt))
                .collect::<Result<Vec<_>>>()?;
            // (1/b) integral over [-b/2, b/2] == (1/2) * sum of w * f on [-1, 1].
            for i in 0..d {
                for j in 0..d {
                    let v = acc.get(i, j) + 0.5 * w * phi[i].conj() * phi[j];
                    acc.set(i, j, v);
                }
            }
        }
        Ok(acc)
    };

    let coarse = average(det.quad_points())?;
    let fine = average(det.quad_points() * 2)?;
    let delta = fine.frobenius_distance(&coarse)?;
    let scale = fine
        .frobenius_norm()
        .max(sinc_scale(g)? / std::f64::consts::PI);
    if delta > QUAD_REL_TOL * scale {
        return Err(Error::NoConvergence(format!(
            "detector average quadrature at x = {x_um} (delta {delta:.3e})"
        )));
    }
    // Scalar-weight rounding breaks the i<->j symmetry at the last ulp.
    Ok(fine.hermitized())
}

/// Measurement operators tabulated over a detector grid, tagged with the
/// geometry fingerprint and detector they were built for.
#[derive(Clone, Debug)]
pub struct PatternSet {
    geometry_digest: u64,
    detector: DetectorSpec,
    grid: Vec<f64>,
    matrices: Vec<ComplexMatrix>,
}

/// Tabulates `measurement_operator` over `grid` (finite, strictly
/// increasing, at least two points).
pub fn pattern_table(g: &Geometry, det: &DetectorSpec, grid: &[f64]) -> Result<PatternSet> {
    check_grid(grid)?;
    let matrices = grid
        .iter()
        .map(|&x| measurement_operator(g, det, x))
        .collect::<Result<Vec<_>>>()?;
    Ok(PatternSet {
        geometry_digest: g.digest(),
        detector: *det,
        grid: grid.to_vec(),
        matrices,
    })
}

pub(crate) fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::invalid("grid needs at least two points"));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("grid positions must be finite"));
    }
    for pair in grid.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::invalid(format!(
                "grid must be strictly increasing ({} then {})",
                pair[0], pair[1]
            )));
        }
    }
    Ok(())
}

impl PatternSet {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn matrix(&self, k: usize) -> &ComplexMatrix {
        &self.matrices[k]
    }

    pub fn detector(&self) -> &DetectorSpec {
        &self.detector
    }

    pub fn geometry_digest(&self) -> u64 {
        self.geometry_digest
    }

    pub fn dim(&self) -> usize {
        self.matrices.first().map(|m| m.rows()).unwrap_or(0)
    }

    /// Nine real channels of the k-th operator, [`CHANNEL_NAMES`] order.
    /// Qutrit layouts only.
    pub fn channels(&self, k: usize) -> Result<[f64; 9]> {
        channels_of(&self.matrices[k])
    }

    /// CSV export: `x_um` plus the nine channels, 12 significant digits.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str("x_um,");
        out.push_str(&CHANNEL_NAMES.join(","));
        out.push('\n');
        for k in 0..self.len() {
            let ch = self.channels(k)?;
            out.push_str(&fmt_sig(self.grid[k], 12));
            for v in ch {
                out.push(',');
                out.push_str(&fmt_sig(v, 12));
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv_string()?)?)
    }
}

/// Flattens one 3x3 Hermitian operator into the nine-channel layout.
pub fn channels_of(m: &ComplexMatrix) -> Result<[f64; 9]> {
    if m.rows() != 3 || m.cols() != 3 {
        return Err(Error::invalid(format!(
            "nine-channel layout is for qutrits, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    Ok([
        m.get(0, 0).re,
        m.get(1, 1).re,
        m.get(2, 2).re,
        m.get(0, 1).re,
        m.get(0, 1).im,
        m.get(0, 2).re,
        m.get(0, 2).im,
        m.get(1, 2).re,
        m.get(1, 2).im,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::hermitian_eig;
    use crate::optics::Geometry;
    use approx::assert_abs_diff_eq;

    fn reference_geometry() -> Geometry {
        Geometry::new(0.81, 45.0, vec![-135.0, 0.0, 135.0], 50_000.0, 100_000.0, 90_500.0)
            .unwrap()
    }

    fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    }

    #[test]
    fn operator_hermitian_and_psd() {
        let g = reference_geometry();
        let det = DetectorSpec::slit(20.0).unwrap();
        for &x in &[-313.0, -40.0, 0.0, 17.5, 222.0] {
            for d in [DetectorSpec::ideal(), det] {
                let m = measurement_operator(&g, &d, x).unwrap();
                assert_eq!(m.hermiticity_error(), 0.0, "x={x}");
                let e = hermitian_eig(&m).unwrap();
                assert!(
                    e.values[0] >= -1e-15,
                    "x={x} b={} min eig {}",
                    d.slit_width_um(),
                    e.values[0]
                );
            }
        }
    }

    #[test]
    fn ideal_operator_is_rank_one() {
        let g = reference_geometry();
        let m = measurement_operator(&g, &DetectorSpec::ideal(), 13.0).unwrap();
        let e = hermitian_eig(&m).unwrap();
        assert!(e.values[2] > 1e-4);
        assert!(e.values[1].abs() <= 1e-12 * e.values[2], "{}", e.values[1]);
    }

    #[test]
    fn zero_width_slit_equals_ideal() {
        let g = reference_geometry();
        let det = DetectorSpec::slit(0.0).unwrap();
        for &x in &[-100.0, 3.0, 250.0] {
            let a = measurement_operator(&g, &det, x).unwrap();
            let b = measurement_operator(&g, &DetectorSpec::ideal(), x).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn diagonal_channels_integrate_to_one() {
        // Each diagonal pattern is |phi_i|^2, a unit-normalized density;
        // the cross channels integrate to ~0 (disjoint spatial-frequency
        // support). Riemann sum over +-20 envelope widths.
        let g = reference_geometry();
        let k = sinc_scale(&g).unwrap();
        let span = 20.0 * std::f64::consts::PI / k;
        let n = 120_001;
        let dx = 2.0 * span / (n - 1) as f64;
        let mut sums = [Complex64::new(0.0, 0.0); 6];
        let pairs = [(0usize, 0usize), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];
        for i in 0..n {
            let x = -span + i as f64 * dx;
            let m = measurement_operator(&g, &DetectorSpec::ideal(), x).unwrap();
            for (s, &(a, b)) in sums.iter_mut().zip(&pairs) {
                *s += m.get(a, b) * dx;
            }
        }
        for s in &sums[..3] {
            assert!((s.re - 1.0).abs() < 6e-3, "diag integral {}", s.re);
        }
        for s in &sums[3..] {
            assert!(s.norm() < 6e-3, "cross integral {}", s.norm());
        }
    }

    #[test]
    fn slit_average_shaves_high_frequency_channel_by_sinc_factor() {
        // The l-r channel rides carrier 12K, so a width-b average scales it
        // by about sinc(6 K b): 0.3655 for b = 20 um here. Diagonals move
        // by well under 2 percent.
        let g = reference_geometry();
        let k = sinc_scale(&g).unwrap();
        let det = DetectorSpec::slit(20.0).unwrap();
        let grid = linspace(-500.0, 500.0, 1001);
        let ideal = pattern_table(&g, &DetectorSpec::ideal(), &grid).unwrap();
        let real = pattern_table(&g, &det, &grid).unwrap();

        let peak = |set: &PatternSet, ch: usize| -> f64 {
            (0..set.len())
                .map(|i| set.channels(i).unwrap()[ch].abs())
                .fold(0.0, f64::max)
        };
        let ratio = peak(&real, 5) / peak(&ideal, 5);
        let predicted = crate::optics::sinc(6.0 * k * 20.0);
        assert!(
            (ratio - predicted).abs() < 0.01 * predicted.abs().max(0.1),
            "lr visibility ratio {ratio} vs sinc model {predicted}"
        );

        for ch in 0..3 {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..grid.len() {
                let a = ideal.channels(i).unwrap()[ch];
                let b = real.channels(i).unwrap()[ch];
                num += (a - b) * (a - b);
                den += a * a;
            }
            let rel = (num / den).sqrt();
            assert!(rel < 0.02, "diagonal channel {ch} moved {rel}");
        }
    }

    #[test]
    fn finite_slit_reduction_ordering() {
        // RMS change from the slit average must rank with carrier
        // frequency: lr (12K) >= lc, cr (6K) >= diagonals (envelope only).
        let g = reference_geometry();
        let det = DetectorSpec::slit(20.0).unwrap();
        let grid = linspace(-500.0, 500.0, 501);
        let ideal = pattern_table(&g, &DetectorSpec::ideal(), &grid).unwrap();
        let real = pattern_table(&g, &det, &grid).unwrap();
        let rms = |ch: usize| -> f64 {
            let s: f64 = (0..grid.len())
                .map(|i| {
                    let d = ideal.channels(i).unwrap()[ch] - real.channels(i).unwrap()[ch];
                    d * d
                })
                .sum();
            (s / grid.len() as f64).sqrt()
        };
        let lr = rms(5).max(rms(6));
        let mid = rms(3).max(rms(4)).max(rms(7)).max(rms(8));
        let diag = rms(0).max(rms(1)).max(rms(2));
        assert!(lr > mid, "lr {lr} vs mid {mid}");
        assert!(mid > diag, "mid {mid} vs diag {diag}");
    }

    #[test]
    fn table_rejects_bad_grids() {
        let g = reference_geometry();
        let det = DetectorSpec::ideal();
        assert!(pattern_table(&g, &det, &[0.0]).is_err());
        assert!(pattern_table(&g, &det, &[0.0, 0.0]).is_err());
        assert!(pattern_table(&g, &det, &[1.0, 0.0]).is_err());
        assert!(pattern_table(&g, &det, &[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn csv_layout_and_round_trip() {
        let g = reference_geometry();
        let set = pattern_table(&g, &DetectorSpec::ideal(), &linspace(-50.0, 50.0, 11)).unwrap();
        let csv = set.to_csv_string().unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "x_um,Mll,Mcc,Mrr,ReMlc,ImMlc,ReMlr,ImMlr,ReMcr,ImMcr"
        );
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 11);
        for (k, row) in rows.iter().enumerate() {
            let cells: Vec<f64> = row.split(',').map(|t| t.parse().unwrap()).collect();
            assert_eq!(cells.len(), 10);
            assert_abs_diff_eq!(cells[0], set.grid()[k], epsilon = 1e-9);
            let ch = set.channels(k).unwrap();
            for (a, b) in cells[1..].iter().zip(ch.iter()) {
                assert!((a - b).abs() <= 1e-11 * b.abs().max(1e-3), "{a} vs {b}");
            }
        }
        // Deterministic export.
        assert_eq!(csv, set.to_csv_string().unwrap());
    }

    #[test]
    fn detector_spec_validation() {
        assert!(DetectorSpec::slit(-1.0).is_err());
        assert!(DetectorSpec::with_quad_points(10.0, 2).is_err());
        assert!(DetectorSpec::slit(20.0).unwrap().slit_width_um() == 20.0);
        assert!(DetectorSpec::ideal().is_ideal());
    }

    #[test]
    fn channels_reject_non_qutrit() {
        let m = ComplexMatrix::identity(2);
        assert!(channels_of(&m).is_err());
    }
}
