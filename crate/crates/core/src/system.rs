//! Particle systems and their Coulomb potential.
//!
//! A [`SystemSpec`] holds the particle list together with the treatment of
//! the nuclei ([`Mode`]) and the coordinate convention used by the random
//! walk ([`Scaling`]). Free particles make up the walk coordinates; clamped
//! particles are fixed parameters of the Hamiltonian.
//!
//! In [`Scaling::Scaled`] mode every free particle `i` is walked in
//! coordinates `x'_i = x_i / s_i` with `s_i = sqrt(m_ref / m_i)`, so all walk
//! directions share one diffusion constant and the mass dependence moves into
//! the potential. In [`Scaling::Physical`] mode the walk runs in bohr and each
//! particle diffuses with its own scale `1 / sqrt(m_i)`.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Hamiltonian;

/// Proton to electron mass ratio used throughout.
pub const PROTON_ELECTRON_MASS_RATIO: f64 = 1836.152701;

/// Pair distances below this floor (bohr) are treated as singular.
pub const SINGULAR_DISTANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("particle `{label}`: {reason}")]
    InvalidParticle { label: String, reason: String },
    #[error("invalid system: {0}")]
    Invalid(String),
    #[error("configuration has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("configuration contains a non-finite coordinate")]
    NonFiniteCoordinate,
    #[error("particles `{a}` and `{b}` are {distance:e} bohr apart")]
    SingularConfiguration { a: String, b: String, distance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub label: String,
    /// Mass in electron masses.
    pub mass: f64,
    /// Charge in units of the elementary charge.
    pub charge: f64,
    /// Fixed position in bohr; `Some` exactly when the particle is clamped.
    pub fixed_position: Option<[f64; 3]>,
}

impl Particle {
    pub fn free(label: impl Into<String>, mass: f64, charge: f64) -> Self {
        Particle {
            label: label.into(),
            mass,
            charge,
            fixed_position: None,
        }
    }

    pub fn clamped(label: impl Into<String>, mass: f64, charge: f64, at: [f64; 3]) -> Self {
        Particle {
            label: label.into(),
            mass,
            charge,
            fixed_position: Some(at),
        }
    }

    pub fn electron(label: impl Into<String>) -> Self {
        Self::free(label, 1.0, -1.0)
    }

    pub fn proton(label: impl Into<String>) -> Self {
        Self::free(label, PROTON_ELECTRON_MASS_RATIO, 1.0)
    }

    pub fn is_clamped(&self) -> bool {
        self.fixed_position.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Clamped nuclei; only light particles are quantum variables.
    #[serde(rename = "bo")]
    BornOppenheimer,
    /// All particles move.
    #[serde(rename = "nbo")]
    NonBornOppenheimer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scaling {
    #[serde(rename = "scaled")]
    Scaled,
    #[serde(rename = "physical")]
    Physical,
}

/// A walk-space point: three coordinates per free particle, in the order the
/// free particles appear in the spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration(pub Vec<f64>);

impl Configuration {
    pub fn zeros(dim: usize) -> Self {
        Configuration(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Configuration {
    fn from(v: Vec<f64>) -> Self {
        Configuration(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRepr", into = "SpecRepr")]
pub struct SystemSpec {
    particles: Vec<Particle>,
    mode: Mode,
    scaling: Scaling,
    reference_mass: f64,
    // derived
    free: Vec<usize>,
    /// s_i per particle (1 for clamped particles).
    coord_scale: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SpecRepr {
    particles: Vec<Particle>,
    mode: Mode,
    scaling: Scaling,
    reference_mass: f64,
}

impl TryFrom<SpecRepr> for SystemSpec {
    type Error = SystemError;
    fn try_from(r: SpecRepr) -> Result<Self, SystemError> {
        SystemSpec::new(r.particles, r.mode, r.scaling, r.reference_mass)
    }
}

impl From<SystemSpec> for SpecRepr {
    fn from(s: SystemSpec) -> Self {
        SpecRepr {
            particles: s.particles,
            mode: s.mode,
            scaling: s.scaling,
            reference_mass: s.reference_mass,
        }
    }
}

impl SystemSpec {
    pub fn new(
        particles: Vec<Particle>,
        mode: Mode,
        scaling: Scaling,
        reference_mass: f64,
    ) -> Result<Self, SystemError> {
        if !(reference_mass > 0.0 && reference_mass.is_finite()) {
            return Err(SystemError::Invalid(format!(
                "reference mass must be positive, got {reference_mass}"
            )));
        }
        for (i, p) in particles.iter().enumerate() {
            let bad = |reason: &str| SystemError::InvalidParticle {
                label: p.label.clone(),
                reason: reason.to_string(),
            };
            if !(p.mass > 0.0 && p.mass.is_finite()) {
                return Err(bad("mass must be positive and finite"));
            }
            if !p.charge.is_finite() {
                return Err(bad("charge must be finite"));
            }
            if let Some(x) = p.fixed_position {
                if x.iter().any(|c| !c.is_finite()) {
                    return Err(bad("fixed position must be finite"));
                }
            }
            if mode == Mode::BornOppenheimer && p.mass > reference_mass && !p.is_clamped() {
                return Err(bad(
                    "heavier than the reference mass and therefore must be clamped in BO mode",
                ));
            }
            if mode == Mode::NonBornOppenheimer && p.is_clamped() {
                return Err(bad("clamped particles are not allowed in non-BO mode"));
            }
            if particles[..i].iter().any(|q| q.label == p.label) {
                return Err(bad("duplicate label"));
            }
        }
        let free: Vec<usize> = particles
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.is_clamped())
            .map(|(i, _)| i)
            .collect();
        if free.is_empty() {
            return Err(SystemError::Invalid("no free particles".into()));
        }
        let coord_scale = particles
            .iter()
            .map(|p| match (scaling, p.is_clamped()) {
                (Scaling::Scaled, false) => (reference_mass / p.mass).sqrt(),
                _ => 1.0,
            })
            .collect();
        Ok(SystemSpec {
            particles,
            mode,
            scaling,
            reference_mass,
            free,
            coord_scale,
        })
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn scaling(&self) -> Scaling {
        self.scaling
    }

    pub fn reference_mass(&self) -> f64 {
        self.reference_mass
    }

    /// Indices (into `particles`) of the free particles, in walk order.
    pub fn free_particles(&self) -> &[usize] {
        &self.free
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    /// Walk dimension `3 * N_free`.
    pub fn dim(&self) -> usize {
        3 * self.free.len()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.particles.iter().position(|p| p.label == label)
    }

    /// Factor mapping a walk coordinate of free particle `k` (walk order) to bohr.
    pub fn coordinate_scale(&self, k: usize) -> f64 {
        self.coord_scale[self.free[k]]
    }

    /// Same spec with a different coordinate convention.
    pub fn with_scaling(&self, scaling: Scaling) -> Self {
        SystemSpec::new(
            self.particles.clone(),
            self.mode,
            scaling,
            self.reference_mass,
        )
        .expect("rescaling a valid spec")
    }

    /// Places the two clamped particles at `(0, 0, -R/2)` and `(0, 0, R/2)`.
    pub fn with_bond_length(&self, r: f64) -> Result<Self, SystemError> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(SystemError::Invalid(format!("bond length must be positive, got {r}")));
        }
        let clamped: Vec<usize> = (0..self.particles.len())
            .filter(|&i| self.particles[i].is_clamped())
            .collect();
        if clamped.len() != 2 {
            return Err(SystemError::Invalid(format!(
                "a bond length needs exactly two clamped particles, found {}",
                clamped.len()
            )));
        }
        let mut particles = self.particles.clone();
        particles[clamped[0]].fixed_position = Some([0.0, 0.0, -0.5 * r]);
        particles[clamped[1]].fixed_position = Some([0.0, 0.0, 0.5 * r]);
        SystemSpec::new(particles, self.mode, self.scaling, self.reference_mass)
    }

    /// Per-dimension diffusion scale of the walk.
    ///
    /// Scaled mode: `1/sqrt(m_ref)` everywhere (all ones for the default
    /// reference mass). Physical mode: `1/sqrt(m_i)` over each particle's
    /// three slots.
    pub fn walk_scales(&self) -> Vec<f64> {
        self.free
            .iter()
            .flat_map(|&i| {
                let s = match self.scaling {
                    Scaling::Scaled => 1.0 / self.reference_mass.sqrt(),
                    Scaling::Physical => 1.0 / self.particles[i].mass.sqrt(),
                };
                [s; 3]
            })
            .collect()
    }

    pub fn check(&self, config: &Configuration) -> Result<(), SystemError> {
        if config.dim() != self.dim() {
            return Err(SystemError::DimensionMismatch {
                expected: self.dim(),
                got: config.dim(),
            });
        }
        if config.0.iter().any(|c| !c.is_finite()) {
            return Err(SystemError::NonFiniteCoordinate);
        }
        Ok(())
    }

    /// Physical positions (bohr) of every particle, clamped ones included,
    /// flattened to three coordinates per particle.
    pub fn physical_positions(&self, config: &[f64], out: &mut [f64]) {
        for (i, p) in self.particles.iter().enumerate() {
            if let Some(x) = p.fixed_position {
                out[3 * i..3 * i + 3].copy_from_slice(&x);
            }
        }
        for (k, &i) in self.free.iter().enumerate() {
            let s = self.coord_scale[i];
            for c in 0..3 {
                out[3 * i + c] = s * config[3 * k + c];
            }
        }
    }

    /// Maps a physical configuration (free-particle blocks in bohr) to walk coordinates.
    pub fn to_walk_coordinates(&self, physical: &[f64]) -> Configuration {
        let mut out = physical.to_vec();
        for (k, &i) in self.free.iter().enumerate() {
            for c in &mut out[3 * k..3 * k + 3] {
                *c /= self.coord_scale[i];
            }
        }
        Configuration(out)
    }

    /// Coulomb energy (hartree) of the configuration.
    pub fn potential(&self, config: &Configuration) -> Result<f64, SystemError> {
        self.check(config)?;
        let mut pos = vec![0.0; 3 * self.particles.len()];
        self.physical_positions(&config.0, &mut pos);
        self.coulomb(&pos)
    }

    /// Coulomb energy for explicit physical positions of every particle.
    pub fn coulomb(&self, pos: &[f64]) -> Result<f64, SystemError> {
        let mut v = 0.0;
        let n = self.particles.len();
        for a in 0..n {
            let qa = self.particles[a].charge;
            if qa == 0.0 {
                continue;
            }
            for b in a + 1..n {
                let qb = self.particles[b].charge;
                if qb == 0.0 {
                    continue;
                }
                let r = distance(&pos[3 * a..3 * a + 3], &pos[3 * b..3 * b + 3]);
                if !(r >= SINGULAR_DISTANCE_FLOOR) {
                    return Err(SystemError::SingularConfiguration {
                        a: self.particles[a].label.clone(),
                        b: self.particles[b].label.clone(),
                        distance: r,
                    });
                }
                v += qa * qb / r;
            }
        }
        Ok(v)
    }
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

impl Hamiltonian for SystemSpec {
    fn dim(&self) -> usize {
        SystemSpec::dim(self)
    }

    fn n_coords(&self) -> usize {
        3 * self.particles.len()
    }

    fn walk_scales(&self) -> Vec<f64> {
        SystemSpec::walk_scales(self)
    }

    fn coordinate_map(&self) -> Vec<(usize, f64)> {
        self.free
            .iter()
            .flat_map(|&i| (0..3).map(move |c| (3 * i + c, self.coord_scale[i])))
            .collect()
    }

    fn to_physical(&self, walk: &[f64], out: &mut [f64]) {
        self.physical_positions(walk, out)
    }

    fn potential_at(&self, physical: &[f64]) -> Result<f64, SystemError> {
        self.coulomb(physical)
    }

    /// Free heavy particles go on the z axis 1.4 bohr apart; light particles
    /// are scattered within ±0.5 bohr of the heavy ones (free or clamped),
    /// or of the origin when there are none.
    fn initial_guess(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let heavy_free: Vec<usize> = self
            .free
            .iter()
            .copied()
            .filter(|&i| self.particles[i].mass > self.reference_mass)
            .collect();
        let mut pos = vec![0.0; 3 * self.particles.len()];
        let offset = 0.5 * 1.4 * (heavy_free.len().max(1) - 1) as f64;
        for (j, &i) in heavy_free.iter().enumerate() {
            pos[3 * i + 2] = 1.4 * j as f64 - offset;
        }
        let mut centers: Vec<[f64; 3]> = self
            .particles
            .iter()
            .enumerate()
            .filter(|(i, p)| p.is_clamped() || heavy_free.contains(i))
            .map(|(i, p)| p.fixed_position.unwrap_or([pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]]))
            .collect();
        if centers.is_empty() {
            centers.push([0.0; 3]);
        }
        let mut next = 0;
        for &i in &self.free {
            if heavy_free.contains(&i) {
                continue;
            }
            let c = centers[next % centers.len()];
            next += 1;
            for k in 0..3 {
                pos[3 * i + k] = c[k] + rng.gen_range(-0.5..0.5);
            }
        }
        let phys: Vec<f64> = self
            .free
            .iter()
            .flat_map(|&i| [pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]])
            .collect();
        self.to_walk_coordinates(&phys).0
    }
}

/// Isotropic harmonic well `V = ½ ω² |x|²` in `dim` unit-mass coordinates.
///
/// Not a Coulomb system; it exists because its ground state is known in
/// closed form, which makes it the reference problem for the walk and the
/// estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicWell {
    pub dim: usize,
    pub omega: f64,
}

impl HarmonicWell {
    pub fn new(dim: usize, omega: f64) -> Self {
        assert!(dim > 0 && omega > 0.0);
        HarmonicWell { dim, omega }
    }

    pub fn ground_state_energy(&self) -> f64 {
        0.5 * self.omega * self.dim as f64
    }
}

impl Hamiltonian for HarmonicWell {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_coords(&self) -> usize {
        self.dim
    }

    fn walk_scales(&self) -> Vec<f64> {
        vec![1.0; self.dim]
    }

    fn coordinate_map(&self) -> Vec<(usize, f64)> {
        (0..self.dim).map(|k| (k, 1.0)).collect()
    }

    fn to_physical(&self, walk: &[f64], out: &mut [f64]) {
        out.copy_from_slice(walk);
    }

    fn potential_at(&self, x: &[f64]) -> Result<f64, SystemError> {
        Ok(0.5 * self.omega * self.omega * x.iter().map(|v| v * v).sum::<f64>())
    }

    fn initial_guess(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        (0..self.dim).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }
}

/// Ready-made systems.
pub mod presets {
    use super::*;

    pub fn hydrogen_atom_bo() -> SystemSpec {
        SystemSpec::new(
            vec![
                Particle::electron("e"),
                Particle::clamped("p", PROTON_ELECTRON_MASS_RATIO, 1.0, [0.0; 3]),
            ],
            Mode::BornOppenheimer,
            Scaling::Physical,
            1.0,
        )
        .unwrap()
    }

    pub fn hydrogen_atom_nbo(scaling: Scaling) -> SystemSpec {
        SystemSpec::new(
            vec![Particle::electron("e"), Particle::proton("p")],
            Mode::NonBornOppenheimer,
            scaling,
            1.0,
        )
        .unwrap()
    }

    /// Clamped-nuclei one-electron ion with nuclei `A`, `B` a distance `r` apart.
    pub fn h2_ion_bo(r: f64) -> SystemSpec {
        SystemSpec::new(
            vec![
                Particle::electron("e1"),
                Particle::clamped("A", PROTON_ELECTRON_MASS_RATIO, 1.0, [0.0, 0.0, -0.5 * r]),
                Particle::clamped("B", PROTON_ELECTRON_MASS_RATIO, 1.0, [0.0, 0.0, 0.5 * r]),
            ],
            Mode::BornOppenheimer,
            Scaling::Physical,
            1.0,
        )
        .unwrap()
    }

    pub fn h2_bo(r: f64) -> SystemSpec {
        SystemSpec::new(
            vec![
                Particle::electron("e1"),
                Particle::electron("e2"),
                Particle::clamped("A", PROTON_ELECTRON_MASS_RATIO, 1.0, [0.0, 0.0, -0.5 * r]),
                Particle::clamped("B", PROTON_ELECTRON_MASS_RATIO, 1.0, [0.0, 0.0, 0.5 * r]),
            ],
            Mode::BornOppenheimer,
            Scaling::Physical,
            1.0,
        )
        .unwrap()
    }

    pub fn h2_ion_nbo(scaling: Scaling) -> SystemSpec {
        SystemSpec::new(
            vec![Particle::electron("e1"), Particle::proton("A"), Particle::proton("B")],
            Mode::NonBornOppenheimer,
            scaling,
            1.0,
        )
        .unwrap()
    }

    pub fn h2_nbo(scaling: Scaling) -> SystemSpec {
        SystemSpec::new(
            vec![
                Particle::electron("e1"),
                Particle::electron("e2"),
                Particle::proton("A"),
                Particle::proton("B"),
            ],
            Mode::NonBornOppenheimer,
            scaling,
            1.0,
        )
        .unwrap()
    }
}
