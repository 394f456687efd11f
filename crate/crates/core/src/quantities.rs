//! Ionization potentials, dissociation energies, offsets and unit conversion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// cm⁻¹ per hartree.
pub const HARTREE_TO_WAVENUMBER: f64 = 219474.6313702;
/// Bohr-model hydrogen atom energy with an infinitely heavy nucleus.
pub const HYDROGEN_ATOM_ENERGY: f64 = -0.5;

/// Hydrogen atom energy with the proton's finite mass, `−½·M/(M+m)`.
pub fn hydrogen_atom_reduced_mass_energy() -> f64 {
    let m = crate::system::PROTON_ELECTRON_MASS_RATIO;
    -0.5 * m / (m + 1.0)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantityError {
    #[error("unit mismatch: expected {expected:?}, got {got:?}")]
    UnitMismatch { expected: Unit, got: Unit },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Hartree,
    Wavenumber,
}

impl std::fmt::Display for Unit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Unit::Hartree => "hartree",
            Unit::Wavenumber => "cm^-1",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyValue {
    pub value: f64,
    pub unit: Unit,
    pub sigma: f64,
}

impl EnergyValue {
    pub fn hartree(value: f64, sigma: f64) -> Self {
        EnergyValue {
            value,
            unit: Unit::Hartree,
            sigma: sigma.abs(),
        }
    }

    pub fn wavenumber(value: f64, sigma: f64) -> Self {
        EnergyValue {
            value,
            unit: Unit::Wavenumber,
            sigma: sigma.abs(),
        }
    }

    fn expect(&self, unit: Unit) -> Result<(), QuantityError> {
        if self.unit == unit {
            Ok(())
        } else {
            Err(QuantityError::UnitMismatch {
                expected: unit,
                got: self.unit,
            })
        }
    }
}

/// `E(ion) − E(molecule)`.
pub fn ionization_potential(ion: EnergyValue, molecule: EnergyValue) -> Result<EnergyValue, QuantityError> {
    ion.expect(Unit::Hartree)?;
    molecule.expect(Unit::Hartree)?;
    Ok(EnergyValue::hartree(ion.value - molecule.value, ion.sigma.hypot(molecule.sigma)))
}

/// `2·E(atom) − E(molecule)`, positive for a bound molecule.
pub fn dissociation_energy(atom: EnergyValue, molecule: EnergyValue) -> Result<EnergyValue, QuantityError> {
    atom.expect(Unit::Hartree)?;
    molecule.expect(Unit::Hartree)?;
    Ok(EnergyValue::hartree(
        2.0 * atom.value - molecule.value,
        (2.0 * atom.sigma).hypot(molecule.sigma),
    ))
}

/// Hartree to cm⁻¹; values already in cm⁻¹ pass through.
pub fn to_wavenumber(e: EnergyValue) -> EnergyValue {
    match e.unit {
        Unit::Hartree => EnergyValue::wavenumber(e.value * HARTREE_TO_WAVENUMBER, e.sigma * HARTREE_TO_WAVENUMBER),
        Unit::Wavenumber => e,
    }
}

pub fn to_hartree(e: EnergyValue) -> EnergyValue {
    match e.unit {
        Unit::Wavenumber => EnergyValue::hartree(e.value / HARTREE_TO_WAVENUMBER, e.sigma / HARTREE_TO_WAVENUMBER),
        Unit::Hartree => e,
    }
}

/// An additive correction with a citation for where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Offset {
    pub value: EnergyValue,
    pub citation: String,
}

/// Result of [`apply_offset`] with the offset carried along for output metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetValue {
    pub corrected: EnergyValue,
    pub uncorrected: EnergyValue,
    pub offset: Offset,
}

/// Adds an offset of the same unit, combining errors in quadrature.
pub fn apply_offset(e: EnergyValue, offset: &Offset) -> Result<OffsetValue, QuantityError> {
    offset.value.expect(e.unit)?;
    Ok(OffsetValue {
        corrected: EnergyValue {
            value: e.value + offset.value.value,
            unit: e.unit,
            sigma: e.sigma.hypot(offset.value.sigma),
        },
        uncorrected: e,
        offset: offset.clone(),
    })
}
