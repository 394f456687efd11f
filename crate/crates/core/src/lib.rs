//! Ground-state energies of few-body Coulomb systems from generalized
//! Feynman-Kac path integrals.
//!
//! The pipeline is: describe particles in a [`system::SystemSpec`], pick a
//! guide function from [`trial`], propagate an ensemble of drifted binomial
//! random walks with [`walk::run_ensemble`], and turn the weighted paths into
//! energies and properties with [`estimate`]. [`quantities`] combines
//! energies into ionization potentials and dissociation energies, and
//! [`cli`] drives everything from a TOML run file.

use rand::RngCore;

pub mod cli;
pub mod estimate;
pub mod quantities;
pub mod system;
pub mod trial;
pub mod walk;

pub use estimate::{EnsembleResult, EnergySeries, Extrapolation, FitModel};
pub use system::{Configuration, HarmonicWell, Mode, Particle, Scaling, SystemSpec};
pub use trial::{AtomicProductTrial, CorrelatedExponentialTrial, GaussianTrial, TrialFunction};
pub use walk::{run_ensemble, Start, WalkParams};

/// What the walk needs from a physical system.
///
/// Walk coordinates `x'` map onto a flat vector of physical coordinates; walk
/// coordinate `k` is physical coordinate `map[k].0` divided by `map[k].1`.
/// Coordinates that do not appear in the map are fixed.
pub trait Hamiltonian: Send + Sync {
    /// Walk dimension.
    fn dim(&self) -> usize;

    /// Number of physical coordinates, fixed ones included.
    fn n_coords(&self) -> usize;

    /// Diffusion scale per walk coordinate.
    fn walk_scales(&self) -> Vec<f64>;

    /// `(physical index, scale)` for every walk coordinate.
    fn coordinate_map(&self) -> Vec<(usize, f64)>;

    fn to_physical(&self, walk: &[f64], out: &mut [f64]);

    fn potential_at(&self, physical: &[f64]) -> Result<f64, system::SystemError>;

    /// A plausible non-singular starting point in walk coordinates.
    fn initial_guess(&self, rng: &mut dyn RngCore) -> Vec<f64>;
}
