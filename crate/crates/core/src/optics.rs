//! Multi-slit aperture, lens, and detector-plane geometry.
//!
//! A plane wave illuminates d parallel slits of width a centered at offsets
//! r_i; a thin lens of focal length f sits a distance L behind them and a
//! point on the detector line is a distance z behind the lens, with z between
//! the focal plane and the image plane. In that regime the field at the
//! detector from slit i is, up to a slit-independent global phase,
//!
//!   phi_i(x) = sqrt(K/pi) * exp(-i (2 r_i / a) K x) * sinc(K (x + (z-f)/f * r_i))
//!
//! with K = pi a f / (lambda N) and N = L f + z f - L z. K sets the fringe
//! and envelope scale, (z-f)/f shifts each slit's envelope so they separate
//! as z approaches the image plane (where N = 0), and the linear phase makes
//! the slit-to-slit interference visible. The model is a stationary-phase
//! limit, good when the slit is narrow against the Fresnel zone of the
//! reduced distance R = N / (z - f); `validity_check` scores that ratio and
//! `fresnel_oracle` integrates the diffraction problem numerically so the
//! model can be tested against it rather than trusted.
//!
//! All lengths in micrometers.

use num_complex::Complex64;

use crate::numerics::gauss_legendre;
use crate::util::{parse_f64, split_key_value, Fnv1a};
use crate::{Error, Result};

/// Validity-ratio threshold below which the sinc model is trusted.
pub const VALIDITY_PASS_BELOW: f64 = 0.5;
/// Validity ratio at or above which the sinc model is rejected.
pub const VALIDITY_FAIL_AT: f64 = 1.0;

/// Immutable slit/lens/detector layout. Constructors validate; fields are
/// only readable, so every instance satisfies the geometric invariants.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    lambda_um: f64,
    slit_width_um: f64,
    slit_offsets_um: Vec<f64>,
    focal_um: f64,
    slit_to_lens_um: f64,
    lens_to_detector_um: f64,
}

impl Geometry {
    pub fn new(
        lambda_um: f64,
        slit_width_um: f64,
        slit_offsets_um: Vec<f64>,
        focal_um: f64,
        slit_to_lens_um: f64,
        lens_to_detector_um: f64,
    ) -> Result<Self> {
        let g = Geometry {
            lambda_um,
            slit_width_um,
            slit_offsets_um,
            focal_um,
            slit_to_lens_um,
            lens_to_detector_um,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_um", self.lambda_um),
            ("slit_width_um", self.slit_width_um),
            ("focal_um", self.focal_um),
            ("slit_to_lens_um", self.slit_to_lens_um),
            ("lens_to_detector_um", self.lens_to_detector_um),
        ];
        for (name, v) in all {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if self.slit_offsets_um.len() < 2 {
            return Err(Error::invalid("need at least two slits"));
        }
        if self.slit_offsets_um.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("slit offsets must be finite"));
        }
        for pair in self.slit_offsets_um.windows(2) {
            if pair[1] - pair[0] <= self.slit_width_um {
                return Err(Error::invalid(format!(
                    "slit offsets must ascend with gaps wider than the slit width \
                     ({} then {} with width {})",
                    pair[0], pair[1], self.slit_width_um
                )));
            }
        }
        Ok(())
    }

    pub fn lambda_um(&self) -> f64 {
        self.lambda_um
    }

    pub fn slit_width_um(&self) -> f64 {
        self.slit_width_um
    }

    pub fn slit_offsets_um(&self) -> &[f64] {
        &self.slit_offsets_um
    }

    pub fn focal_um(&self) -> f64 {
        self.focal_um
    }

    pub fn slit_to_lens_um(&self) -> f64 {
        self.slit_to_lens_um
    }

    pub fn lens_to_detector_um(&self) -> f64 {
        self.lens_to_detector_um
    }

    /// Number of slits, i.e. the Hilbert-space dimension.
    pub fn dim(&self) -> usize {
        self.slit_offsets_um.len()
    }

    /// Same layout with the detector plane moved to `z_um`.
    pub fn with_detector_distance(&self, z_um: f64) -> Result<Self> {
        Geometry::new(
            self.lambda_um,
            self.slit_width_um,
            self.slit_offsets_um.clone(),
            self.focal_um,
            self.slit_to_lens_um,
            z_um,
        )
    }

    /// Order-independent fingerprint of every geometric parameter; lets
    /// downstream tables assert they were built for the same layout.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_f64(self.lambda_um);
        h.write_f64(self.slit_width_um);
        h.write(&(self.slit_offsets_um.len() as u64).to_le_bytes());
        for &r in &self.slit_offsets_um {
            h.write_f64(r);
        }
        h.write_f64(self.focal_um);
        h.write_f64(self.slit_to_lens_um);
        h.write_f64(self.lens_to_detector_um);
        h.finish()
    }

    /// Parses `key = value` lines: lambda_nm, slit_width_um, f_mm, L_mm,
    /// z_mm, and either slit_pitch_um (three slits at -p, 0, +p) or an
    /// explicit comma-separated slit_offsets_um list. `label` names the
    /// source in errors.
    pub fn from_config_str(text: &str, label: &str) -> Result<Self> {
        let mut lambda_nm = None;
        let mut slit_width = None;
        let mut pitch = None;
        let mut offsets: Option<Vec<f64>> = None;
        let mut f_mm = None;
        let mut l_mm = None;
        let mut z_mm = None;
        let mut extra: Vec<(String, String, usize)> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let Some((key, value)) = split_key_value(raw) else {
                if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                    continue;
                }
                return Err(Error::parse(label, lineno, "expected key = value"));
            };
            match key {
                "lambda_nm" => lambda_nm = Some(parse_f64(label, lineno, key, value)?),
                "slit_width_um" => slit_width = Some(parse_f64(label, lineno, key, value)?),
                "slit_pitch_um" => pitch = Some(parse_f64(label, lineno, key, value)?),
                "slit_offsets_um" => {
                    let vals = value
                        .split(',')
                        .map(|tok| parse_f64(label, lineno, key, tok))
                        .collect::<Result<Vec<f64>>>()?;
                    offsets = Some(vals);
                }
                "f_mm" => f_mm = Some(parse_f64(label, lineno, key, value)?),
                "L_mm" => l_mm = Some(parse_f64(label, lineno, key, value)?),
                "z_mm" => z_mm = Some(parse_f64(label, lineno, key, value)?),
                other => extra.push((other.to_string(), value.to_string(), lineno)),
            }
        }
        if let Some((key, _, lineno)) = extra.first() {
            return Err(Error::parse(label, *lineno, format!("unknown key {key:?}")));
        }
        let require = |opt: Option<f64>, key: &str| {
            opt.ok_or_else(|| Error::parse(label, 0, format!("missing key {key}")))
        };
        let lambda_nm = require(lambda_nm, "lambda_nm")?;
        let slit_width = require(slit_width, "slit_width_um")?;
        let f_mm = require(f_mm, "f_mm")?;
        let l_mm = require(l_mm, "L_mm")?;
        let z_mm = require(z_mm, "z_mm")?;
        let offsets = match (pitch, offsets) {
            (Some(_), Some(_)) => {
                return Err(Error::parse(
                    label,
                    0,
                    "give slit_pitch_um or slit_offsets_um, not both",
                ))
            }
            (Some(p), None) => vec![-p, 0.0, p],
            (None, Some(o)) => o,
            (None, None) => {
                return Err(Error::parse(
                    label,
                    0,
                    "missing slit layout: slit_pitch_um or slit_offsets_um",
                ))
            }
        };
        Geometry::new(
            lambda_nm / 1000.0,
            slit_width,
            offsets,
            f_mm * 1000.0,
            l_mm * 1000.0,
            z_mm * 1000.0,
        )
    }

    pub fn from_config_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_config_str(&text, &path.display().to_string())
    }
}

/// The three derived quantities most formulas want, bundled. Construction
/// fails off the intermediate-plane regime (z = f or N <= 0) where one of
/// them stops being meaningful.
#[derive(Clone, Copy, Debug)]
pub struct DerivedScales {
    pub effective_distance_um: f64,
    pub sinc_scale_per_um: f64,
    pub envelope_shift_factor: f64,
}

impl DerivedScales {
    pub fn for_geometry(g: &Geometry) -> Result<Self> {
        Ok(DerivedScales {
            effective_distance_um: effective_distance(g)?,
            sinc_scale_per_um: sinc_scale(g)?,
            envelope_shift_factor: envelope_shift_factor(g),
        })
    }
}

/// N = L f + z f - L z; zero exactly at the image plane.
fn plane_product(g: &Geometry) -> f64 {
    let (f, l, z) = (g.focal_um(), g.slit_to_lens_um(), g.lens_to_detector_um());
    l * f + z * f - l * z
}

/// Reduced propagation distance R = N / (z - f). Positive between the focal
/// and image planes; errors at z = f where it diverges.
pub fn effective_distance(g: &Geometry) -> Result<f64> {
    let dz = g.lens_to_detector_um() - g.focal_um();
    if dz == 0.0 {
        return Err(Error::Degenerate(
            "effective distance diverges at the focal plane (z = f)".into(),
        ));
    }
    Ok(plane_product(g) / dz)
}

/// Pattern scale K = pi a f / (lambda N) in 1/um. Errors at or beyond the
/// image plane (N <= 0) where the intermediate-plane model breaks down.
pub fn sinc_scale(g: &Geometry) -> Result<f64> {
    let n = plane_product(g);
    if n <= 0.0 {
        return Err(Error::Degenerate(format!(
            "detector at or beyond the image plane (L f + z f - L z = {n:.6e} um^2)"
        )));
    }
    Ok(std::f64::consts::PI * g.slit_width_um() * g.focal_um() / (g.lambda_um() * n))
}

/// Envelope displacement per unit slit offset, (z - f) / f. Zero at the
/// focal plane, grows toward the image plane.
pub fn envelope_shift_factor(g: &Geometry) -> f64 {
    (g.lens_to_detector_um() - g.focal_um()) / g.focal_um()
}

/// sin(u)/u, continued through u = 0 with its series.
pub fn sinc(u: f64) -> f64 {
    if u.abs() < 1e-4 {
        1.0 - u * u / 6.0
    } else {
        u.sin() / u
    }
}

/// Detector-plane amplitude from slit `slit` at position `x_um`, normalized
/// so the continuum integral of |phi|^2 over the detector line is 1.
/// Slit-independent global phase omitted; relative phases between slits are
/// what carry the state information.
pub fn slit_wavefunction(g: &Geometry, slit: usize, x_um: f64) -> Result<Complex64> {
    if slit >= g.dim() {
        return Err(Error::invalid(format!(
            "slit index {slit} out of range for {} slits",
            g.dim()
        )));
    }
    if !x_um.is_finite() {
        return Err(Error::invalid("x must be finite"));
    }
    let k = sinc_scale(g)?;
    let r = g.slit_offsets_um()[slit];
    let shift = envelope_shift_factor(g);
    let amp = (k / std::f64::consts::PI).sqrt() * sinc(k * (x_um + shift * r));
    let phase = -(2.0 * r / g.slit_width_um()) * k * x_um;
    Ok(amp * Complex64::from_polar(1.0, phase))
}

/// How the sinc model was scored at a given geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValidityLevel {
    Pass,
    Warn,
    Fail,
}

#[derive(Clone, Debug)]
pub struct ValidityReport {
    pub level: ValidityLevel,
    /// a / sqrt(R lambda); None when R is not positive and the score is
    /// meaningless.
    pub ratio: Option<f64>,
    /// R itself; None exactly at the focal plane.
    pub effective_distance_um: Option<f64>,
    pub message: String,
}

/// Scores the slit-width-to-Fresnel-zone ratio a / sqrt(R lambda) against
/// the default thresholds.
pub fn validity_check(g: &Geometry) -> ValidityReport {
    validity_check_with(g, VALIDITY_PASS_BELOW, VALIDITY_FAIL_AT)
}

/// Same with caller-chosen thresholds: Pass below `pass_below`, Fail at or
/// above `fail_at`, Warn between.
pub fn validity_check_with(g: &Geometry, pass_below: f64, fail_at: f64) -> ValidityReport {
    assert!(pass_below <= fail_at);
    let z = g.lens_to_detector_um();
    let f = g.focal_um();
    if z == f {
        // Far-field limit: the model is the exact Fourier transform here.
        return ValidityReport {
            level: ValidityLevel::Pass,
            ratio: Some(0.0),
            effective_distance_um: None,
            message: "detector in the focal plane; model exact in the far-field limit".into(),
        };
    }
    let r = plane_product(g) / (z - f);
    if r <= 0.0 {
        let msg = if z < f {
            "detector before the focal plane"
        } else {
            "detector at or beyond the image plane"
        };
        return ValidityReport {
            level: ValidityLevel::Fail,
            ratio: None,
            effective_distance_um: Some(r),
            message: msg.into(),
        };
    }
    let ratio = g.slit_width_um() / (r * g.lambda_um()).sqrt();
    let level = if ratio < pass_below {
        ValidityLevel::Pass
    } else if ratio < fail_at {
        ValidityLevel::Warn
    } else {
        ValidityLevel::Fail
    };
    ValidityReport {
        level,
        ratio: Some(ratio),
        effective_distance_um: Some(r),
        message: format!("slit width / Fresnel zone = {ratio:.4}"),
    }
}

const ORACLE_REL_TOL: f64 = 1e-6;

/// Detector-plane amplitude from slit `slit` by direct quadrature of the
/// Fresnel propagation integral (slit -> lens -> detector, with the lens
/// plane integrated out in closed form):
///
///   E(x) = sqrt(f / (lambda N a)) *
///          integral over the slit of exp(i k (f - z) xi^2 / (2 N))
///                                  * exp(-i k f x xi / N) d xi
///
/// Continuum-normalized like the model; global phase differs from the model
/// by a slit-independent factor, so only |E| and slit-to-slit relative
/// phases are comparable. `base_nodes` floors the total node count; panels
/// scale with the integrand's phase span, and the result is accepted only
/// once halving the node spacing changes it by less than 1e-6 relative.
pub fn fresnel_oracle(g: &Geometry, slit: usize, x_um: f64, base_nodes: usize) -> Result<Complex64> {
    if slit >= g.dim() {
        return Err(Error::invalid(format!(
            "slit index {slit} out of range for {} slits",
            g.dim()
        )));
    }
    if !x_um.is_finite() {
        return Err(Error::invalid("x must be finite"));
    }
    let n_prod = plane_product(g);
    if n_prod <= 0.0 {
        return Err(Error::Degenerate(
            "oracle undefined at or beyond the image plane".into(),
        ));
    }
    let (f, z, a, lambda) = (
        g.focal_um(),
        g.lens_to_detector_um(),
        g.slit_width_um(),
        g.lambda_um(),
    );
    let k = 2.0 * std::f64::consts::PI / lambda;
    let r = g.slit_offsets_um()[slit];
    let lo = r - a / 2.0;
    let hi = r + a / 2.0;
    let c2 = k * (f - z) / (2.0 * n_prod);
    let c1 = -k * f * x_um / n_prod;
    let prefactor = (f / (lambda * n_prod * a)).sqrt();

    // Panels sized to the phase gradient so each sees only a few cycles.
    let dphase = |xi: f64| 2.0 * c2 * xi + c1;
    let max_grad = dphase(lo).abs().max(dphase(hi).abs());
    let cycles = max_grad * (hi - lo) / (2.0 * std::f64::consts::PI);
    let mut panels = ((cycles / 6.0).ceil() as usize).max(1);
    let base_order = 24usize;
    if panels * base_order < base_nodes {
        panels = base_nodes.div_ceil(base_order);
    }

    let integrate = |order: usize| -> Complex64 {
        let gl = gauss_legendre(order);
        let (nodes, weights) = (&gl.0, &gl.1);
        let mut acc = Complex64::new(0.0, 0.0);
        let width = (hi - lo) / panels as f64;
        for p in 0..panels {
            let a0 = lo + p as f64 * width;
            let mid = a0 + width / 2.0;
            let half = width / 2.0;
            for (t, w) in nodes.iter().zip(weights) {
                let xi = mid + half * t;
                let phase = (c2 * xi + c1) * xi;
                acc += w * half * Complex64::from_polar(1.0, phase);
            }
        }
        prefactor * acc
    };

    let floor = prefactor * a * 1e-6;
    let mut prev = integrate(base_order);
    for order in [48usize, 96, 192, 384, 768] {
        let cur = integrate(order);
        let delta = (cur - prev).norm();
        if delta <= ORACLE_REL_TOL * cur.norm().max(floor) {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(Error::NoConvergence("diffraction oracle quadrature".into()))
}
