//! Single-scan quantum state tomography for multi-slit spatial qudits.
//!
//! A photon behind a d-slit aperture carries a d-level quantum state in the
//! which-slit basis. Scanning a single detector across one intermediate plane
//! between the focal and image planes of a lens samples a detection
//! distribution P(x) = Tr[M(x) rho] whose pattern functions M_ij(x) are
//! linearly independent, so a single sweep determines every element of the
//! density matrix. This crate models those pattern functions (including the
//! visibility loss from a finite detector slit), simulates Poisson counting
//! scans, and inverts scans back into physical density matrices for single
//! qutrits and for entangled qutrit pairs measured in coincidence.
//!
//! Modules follow the processing chain:
//! - [`optics`]: slit/lens geometry, the sinc-model wavefunctions, and a
//!   numerical diffraction oracle used to check where the model is valid.
//! - [`patterns`]: measurement-operator matrix elements on detector grids,
//!   ideal (point detector) and realistic (slit of width b).
//! - [`forward`]: detection probabilities and synthetic counting scans.
//! - [`reconstruct`]: linear inversion of one scan, projection onto the
//!   physical state space, and state quality metrics.
//! - [`bipartite`]: two-qutrit states, conditional scans, and joint
//!   reconstruction of the full 9x9 density matrix.
//! - [`numerics`]: the small dense complex linear algebra the rest sits on.
//!
//! All lengths are f64 micrometers unless the name says otherwise.

#![forbid(unsafe_code)]

pub mod bipartite;
pub mod forward;
pub mod numerics;
pub mod optics;
pub mod patterns;
pub mod reconstruct;
mod util;

pub use util::fmt_sig;

/// Errors reported by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A constructor or operation was handed a value outside its domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A parameter combination is formally accepted but physically
    /// meaningless (for example a detector plane at the focal plane where
    /// the image-side magnification diverges).
    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    /// The least-squares design lost column rank; the named channels are
    /// the directions that became indistinguishable.
    #[error("design matrix rank {rank} < {needed}: unresolved {channels}")]
    RankDeficient {
        rank: usize,
        needed: usize,
        channels: String,
    },

    /// An iterative routine failed to reach its convergence target.
    #[error("{0} did not converge")]
    NoConvergence(String),

    /// A file had the right shape but inconsistent or unparseable content.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn parse(path: &str, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_string(),
            line,
            msg: msg.into(),
        }
    }
}
