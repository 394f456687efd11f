//! Energies, weighted properties, error bars and infinite-time fits.
//!
//! At horizon `t` the energy is `λ_T − ln(mean Z)/t`. Weights are kept
//! relative to the largest log-weight at that horizon so long runs neither
//! overflow nor underflow. Paths are grouped into contiguous blocks by index
//! for jackknife error bars.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::walk::PathResult;

/// Upper limit on jackknife blocks.
pub const JACKKNIFE_BLOCKS: usize = 64;
/// Smallest |⟨T⟩| accepted by [`virial_ratio`].
pub const VIRIAL_GUARD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error("degenerate ensemble at t = {t}: {reason}")]
    DegenerateEnsemble { t: f64, reason: String },
    #[error("no horizon at t = {0}")]
    UnknownHorizon(f64),
    #[error("no property named {0:?}")]
    UnknownProperty(String),
    #[error("fit failed: {0}")]
    FitFailed(String),
    #[error("kinetic energy {0} too close to zero for a virial ratio")]
    VirialUndefined(f64),
    #[error("inconsistent input: {0}")]
    Invalid(String),
}

/// Sums over one block of paths at one horizon, weights relative to the
/// horizon shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSums {
    pub paths: u64,
    pub weight: f64,
    /// Σ w·A per property.
    pub weighted: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRecord {
    pub t: f64,
    /// Paths that reached this horizon.
    pub paths: u64,
    /// ln of the mean weight.
    pub log_mean_weight: f64,
    /// Replication standard error of the mean weight relative to the mean.
    pub weight_rel_stderr: f64,
    /// Largest ln Z over paths; block sums are taken of `exp(ln Z − shift)`.
    pub shift: f64,
    pub blocks: Vec<BlockSums>,
}

impl HorizonRecord {
    fn totals(&self) -> (f64, f64, Vec<f64>) {
        let np = self.blocks.first().map_or(0, |b| b.weighted.len());
        let mut n = 0.0;
        let mut w = 0.0;
        let mut wa = vec![0.0; np];
        for b in &self.blocks {
            n += b.paths as f64;
            w += b.weight;
            for (acc, x) in wa.iter_mut().zip(&b.weighted) {
                *acc += x;
            }
        }
        (n, w, wa)
    }

    /// Totals with block `skip` removed.
    fn without(&self, skip: usize) -> (f64, f64, Vec<f64>) {
        let (mut n, mut w, mut wa) = self.totals();
        let b = &self.blocks[skip];
        n -= b.paths as f64;
        w -= b.weight;
        for (acc, x) in wa.iter_mut().zip(&b.weighted) {
            *acc -= x;
        }
        (n, w, wa)
    }
}

/// Reduced output of an ensemble run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub lambda_t: f64,
    pub steps_per_unit: u32,
    pub n_rep: u64,
    pub aborted: u64,
    pub singular_hits: u64,
    pub property_names: Vec<String>,
    pub horizons: Vec<HorizonRecord>,
}

fn block_of(i: usize, n: usize, blocks: usize) -> usize {
    i * blocks / n
}

impl EnsembleResult {
    /// Reduces per-path results in the given order. Aborted paths are left
    /// out of every horizon.
    pub fn from_paths(
        lambda_t: f64,
        steps_per_unit: u32,
        horizons: &[f64],
        property_names: Vec<String>,
        paths: &[PathResult],
    ) -> Result<Self, EstimateError> {
        let good: Vec<&PathResult> = paths.iter().filter(|p| !p.aborted).collect();
        let n = good.len();
        let nb = JACKKNIFE_BLOCKS.min(n).max(1);
        let np = property_names.len();
        let mut records = Vec::with_capacity(horizons.len());
        for (h, &t) in horizons.iter().enumerate() {
            let degenerate = |reason: String| EstimateError::DegenerateEnsemble { t, reason };
            if n == 0 {
                return Err(degenerate("no completed paths".into()));
            }
            let mut shift = f64::NEG_INFINITY;
            for p in &good {
                let s = p.snapshots.get(h).ok_or_else(|| degenerate(format!("path {} has no snapshot", p.index)))?;
                if s.properties.len() != np {
                    return Err(EstimateError::Invalid(format!(
                        "path {} records {} properties, expected {np}",
                        p.index,
                        s.properties.len()
                    )));
                }
                shift = shift.max(s.log_weight);
            }
            if !shift.is_finite() {
                return Err(degenerate("non-finite path weight".into()));
            }
            let mut blocks = vec![
                BlockSums {
                    paths: 0,
                    weight: 0.0,
                    weighted: vec![0.0; np],
                };
                nb
            ];
            for (i, p) in good.iter().enumerate() {
                let s = &p.snapshots[h];
                let w = (s.log_weight - shift).exp();
                let b = &mut blocks[block_of(i, n, nb)];
                b.paths += 1;
                b.weight += w;
                for (acc, a) in b.weighted.iter_mut().zip(&s.properties) {
                    *acc += w * a;
                }
            }
            let sum: f64 = blocks.iter().map(|b| b.weight).sum();
            let nf = n as f64;
            let mean = sum / nf;
            // two passes: Σw² − n·mean² loses everything when the weights agree
            let var = if n > 1 {
                good.iter()
                    .map(|p| ((p.snapshots[h].log_weight - shift).exp() - mean).powi(2))
                    .sum::<f64>()
                    / (nf - 1.0)
            } else {
                0.0
            };
            records.push(HorizonRecord {
                t,
                paths: n as u64,
                log_mean_weight: shift + mean.ln(),
                weight_rel_stderr: (var / nf).sqrt() / mean,
                shift,
                blocks,
            });
        }
        Ok(EnsembleResult {
            lambda_t,
            steps_per_unit,
            n_rep: paths.len() as u64,
            aborted: (paths.len() - n) as u64,
            singular_hits: paths.iter().map(|p| p.singular_hits).sum(),
            property_names,
            horizons: records,
        })
    }

    pub fn horizon(&self, t: f64) -> Result<&HorizonRecord, EstimateError> {
        self.horizons
            .iter()
            .find(|h| (h.t - t).abs() <= 1e-9 * t.abs().max(1.0))
            .ok_or(EstimateError::UnknownHorizon(t))
    }

    pub fn property_index(&self, name: &str) -> Result<usize, EstimateError> {
        self.property_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| EstimateError::UnknownProperty(name.to_string()))
    }

    pub fn times(&self) -> Vec<f64> {
        self.horizons.iter().map(|h| h.t).collect()
    }
}

fn jackknife(estimates: &[f64]) -> f64 {
    let m = estimates.len() as f64;
    if m < 2.0 {
        return 0.0;
    }
    let mean = estimates.iter().sum::<f64>() / m;
    ((m - 1.0) / m * estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>()).sqrt()
}

/// Energy estimate at one horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyPoint {
    pub t: f64,
    pub energy: f64,
    /// Delta-method error.
    pub sigma: f64,
    /// Block jackknife error.
    pub sigma_jackknife: f64,
}

fn energy_from(lambda_t: f64, t: f64, shift: f64, w: f64, n: f64) -> f64 {
    lambda_t - (shift + (w / n).ln()) / t
}

/// `E(t) = λ_T − ln(mean Z)/t` with delta-method and jackknife errors.
pub fn energy_at_t(ens: &EnsembleResult, t: f64) -> Result<EnergyPoint, EstimateError> {
    let rec = ens.horizon(t)?;
    energy_of_record(ens.lambda_t, rec)
}

fn energy_of_record(lambda_t: f64, rec: &HorizonRecord) -> Result<EnergyPoint, EstimateError> {
    let t = rec.t;
    let degenerate = |reason: &str| EstimateError::DegenerateEnsemble {
        t,
        reason: reason.to_string(),
    };
    let (n, w, _) = rec.totals();
    if !(w > 0.0) || !w.is_finite() {
        return Err(degenerate("mean weight is not positive"));
    }
    if !rec.weight_rel_stderr.is_finite() {
        return Err(degenerate("weight spread is not finite"));
    }
    let energy = energy_from(lambda_t, t, rec.shift, w, n);
    let jk: Vec<f64> = (0..rec.blocks.len())
        .filter_map(|b| {
            let (n, w, _) = rec.without(b);
            (w > 0.0 && n > 0.0).then(|| energy_from(lambda_t, t, rec.shift, w, n))
        })
        .collect();
    Ok(EnergyPoint {
        t,
        energy,
        sigma: rec.weight_rel_stderr / t,
        sigma_jackknife: if rec.blocks.len() > 1 { jackknife(&jk) } else { 0.0 },
    })
}

/// Weighted endpoint average `Σ Z·A / Σ Z` at one horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropertyEstimate {
    pub value: f64,
    /// Block jackknife error.
    pub sigma: f64,
}

pub fn property_expectation(
    ens: &EnsembleResult,
    name: &str,
    t: f64,
) -> Result<PropertyEstimate, EstimateError> {
    let k = ens.property_index(name)?;
    let rec = ens.horizon(t)?;
    let (_, w, wa) = rec.totals();
    if !(w > 0.0) {
        return Err(EstimateError::DegenerateEnsemble {
            t,
            reason: "mean weight is not positive".into(),
        });
    }
    let jk: Vec<f64> = (0..rec.blocks.len())
        .filter_map(|b| {
            let (_, w, wa) = rec.without(b);
            (w > 0.0).then(|| wa[k] / w)
        })
        .collect();
    Ok(PropertyEstimate {
        value: wa[k] / w,
        sigma: jackknife(&jk),
    })
}

/// `−⟨V⟩/⟨T⟩` with `⟨T⟩ = E − ⟨V⟩`.
pub fn virial_ratio(potential: f64, energy: f64) -> Result<f64, EstimateError> {
    let kinetic = energy - potential;
    if kinetic.abs() < VIRIAL_GUARD {
        return Err(EstimateError::VirialUndefined(kinetic));
    }
    Ok(-potential / kinetic)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySeries {
    pub points: Vec<EnergyPoint>,
}

impl EnergySeries {
    pub fn from_ensemble(ens: &EnsembleResult) -> Result<Self, EstimateError> {
        let points = ens
            .horizons
            .iter()
            .map(|h| energy_of_record(ens.lambda_t, h))
            .collect::<Result<_, _>>()?;
        Ok(EnergySeries { points })
    }

    /// Series from tabulated values; the jackknife column repeats `sigma`.
    pub fn from_values(t: &[f64], energy: &[f64], sigma: &[f64]) -> Result<Self, EstimateError> {
        if t.len() != energy.len() || t.len() != sigma.len() {
            return Err(EstimateError::Invalid("column lengths differ".into()));
        }
        let points = t
            .iter()
            .zip(energy)
            .zip(sigma)
            .map(|((&t, &energy), &sigma)| EnergyPoint {
                t,
                energy,
                sigma,
                sigma_jackknife: sigma,
            })
            .collect();
        Ok(EnergySeries { points })
    }

    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.t).collect()
    }

    pub fn energies(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.energy).collect()
    }
}

/// Large-`t` model for `E(t)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitModel {
    /// `E∞ + a·exp(−b·t)`, `b > 0`.
    Exponential,
    /// `E∞ + a/t`, the form of the finite-overlap term of a converged walk.
    #[default]
    InverseTime,
}

impl std::str::FromStr for FitModel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "exponential" => Ok(FitModel::Exponential),
            "inverse-time" => Ok(FitModel::InverseTime),
            _ => Err(format!("unknown fit model {s:?} (exponential, inverse-time)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    pub model: FitModel,
    pub e_inf: f64,
    pub sigma: f64,
    pub amplitude: Option<f64>,
    pub rate: Option<f64>,
    /// Parameter covariance in the order (E∞, a, b), scaled by max(1, χ²/dof).
    pub covariance: Vec<Vec<f64>>,
    pub chi2: f64,
    pub dof: usize,
    /// Set when the model could not be fitted and the plateau mean was used.
    pub fallback: bool,
    pub note: Option<String>,
}

/// Minimum number of horizons for [`extrapolate`].
pub const MIN_FIT_POINTS: usize = 4;
const RATE_MIN: f64 = 1e-3;
const RATE_MAX: f64 = 20.0;
const RATE_GRID: usize = 400;
/// Reciprocal condition bound below which the normal matrix counts as singular.
const RCOND_MIN: f64 = 1e-12;

/// Inverse of a small symmetric positive-definite matrix, or `None` when it
/// is numerically singular.
fn invert_spd(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    // scale to unit diagonal so the pivot test is relative
    let d: Vec<f64> = (0..n).map(|i| a[i][i].sqrt()).collect();
    if d.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return None;
    }
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| a[i][j] / (d[i] * d[j])).collect();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))?;
        if m[p][c].abs() < RCOND_MIN {
            return None;
        }
        m.swap(c, p);
        let pivot = m[c][c];
        for v in m[c].iter_mut() {
            *v /= pivot;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                if f != 0.0 {
                    for j in 0..2 * n {
                        m[r][j] -= f * m[c][j];
                    }
                }
            }
        }
    }
    Some(
        (0..n)
            .map(|i| (0..n).map(|j| m[i][n + j] / (d[i] * d[j])).collect())
            .collect(),
    )
}

/// Weighted linear least squares. Returns (coefficients, χ², unscaled covariance).
fn linear_wls(basis: &[Vec<f64>], y: &[f64], w: &[f64]) -> Option<(Vec<f64>, f64, Vec<Vec<f64>>)> {
    let p = basis.len();
    let mut ata = vec![vec![0.0; p]; p];
    let mut aty = vec![0.0; p];
    for i in 0..y.len() {
        for r in 0..p {
            aty[r] += w[i] * basis[r][i] * y[i];
            for c in 0..p {
                ata[r][c] += w[i] * basis[r][i] * basis[c][i];
            }
        }
    }
    let cov = invert_spd(&ata)?;
    let coef: Vec<f64> = (0..p).map(|r| (0..p).map(|c| cov[r][c] * aty[c]).sum()).collect();
    let chi2 = (0..y.len())
        .map(|i| {
            let f: f64 = (0..p).map(|r| coef[r] * basis[r][i]).sum();
            w[i] * (y[i] - f).powi(2)
        })
        .sum();
    Some((coef, chi2, cov))
}

fn inflation(chi2: f64, dof: usize) -> f64 {
    if dof == 0 {
        1.0
    } else {
        (chi2 / dof as f64).max(1.0)
    }
}

/// Weighted fit of the chosen model with weights `1/σ²`.
///
/// The exponential model is solved by profiling `b` over a log grid with the
/// linear parameters eliminated, then refining by golden section. A rate on
/// the grid boundary or a singular normal matrix triggers the fallback: the
/// weighted mean of the last half of the horizons.
pub fn extrapolate(series: &EnergySeries, model: FitModel) -> Result<Extrapolation, EstimateError> {
    let pts = &series.points;
    if pts.len() < MIN_FIT_POINTS {
        return Err(EstimateError::FitFailed(format!(
            "need at least {MIN_FIT_POINTS} horizons, got {}",
            pts.len()
        )));
    }
    if pts.iter().any(|p| !(p.sigma > 0.0) || !p.energy.is_finite() || !p.sigma.is_finite()) {
        let fb = fallback(pts, model, "non-positive or non-finite errors".into());
        return finite(fb);
    }
    let t: Vec<f64> = pts.iter().map(|p| p.t).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.energy).collect();
    let w: Vec<f64> = pts.iter().map(|p| 1.0 / (p.sigma * p.sigma)).collect();
    let fit = match model {
        FitModel::InverseTime => fit_inverse_time(&t, &y, &w),
        FitModel::Exponential => fit_exponential(&t, &y, &w),
    };
    match fit {
        Ok(f) => finite(f),
        Err(reason) => finite(fallback(pts, model, reason)),
    }
}

fn finite(e: Extrapolation) -> Result<Extrapolation, EstimateError> {
    if e.e_inf.is_finite() && e.sigma.is_finite() {
        Ok(e)
    } else {
        Err(EstimateError::FitFailed("no finite estimate".into()))
    }
}

fn fit_inverse_time(t: &[f64], y: &[f64], w: &[f64]) -> Result<Extrapolation, String> {
    let basis = vec![vec![1.0; t.len()], t.iter().map(|t| 1.0 / t).collect()];
    let (coef, chi2, mut cov) = linear_wls(&basis, y, w).ok_or("singular normal matrix")?;
    let dof = t.len() - 2;
    let s = inflation(chi2, dof);
    cov.iter_mut().flatten().for_each(|c| *c *= s);
    Ok(Extrapolation {
        model: FitModel::InverseTime,
        e_inf: coef[0],
        sigma: cov[0][0].sqrt(),
        amplitude: Some(coef[1]),
        rate: None,
        covariance: cov,
        chi2,
        dof,
        fallback: false,
        note: None,
    })
}

fn profile(t: &[f64], y: &[f64], w: &[f64], b: f64) -> Option<(Vec<f64>, f64)> {
    let basis = vec![vec![1.0; t.len()], t.iter().map(|t| (-b * t).exp()).collect()];
    linear_wls(&basis, y, w).map(|(c, chi2, _)| (c, chi2))
}

fn fit_exponential(t: &[f64], y: &[f64], w: &[f64]) -> Result<Extrapolation, String> {
    let chi = |b: f64| profile(t, y, w, b).map_or(f64::INFINITY, |(_, c)| c);
    let ratio = (RATE_MAX / RATE_MIN).powf(1.0 / (RATE_GRID - 1) as f64);
    let grid: Vec<f64> = (0..RATE_GRID).map(|i| RATE_MIN * ratio.powi(i as i32)).collect();
    let values: Vec<f64> = grid.iter().map(|&b| chi(b)).collect();
    let best = (0..grid.len())
        .min_by(|&i, &j| values[i].total_cmp(&values[j]))
        .filter(|&i| values[i].is_finite())
        .ok_or("no finite profile")?;
    if best == 0 || best == grid.len() - 1 {
        return Err(format!("decay rate at the search boundary ({})", grid[best]));
    }
    // golden section on ln b within the bracketing grid cell pair
    let (mut lo, mut hi) = (grid[best - 1].ln(), grid[best + 1].ln());
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (chi(x1.exp()), chi(x2.exp()));
    for _ in 0..200 {
        if hi - lo < 1e-14 {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = chi(x1.exp());
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = chi(x2.exp());
        }
    }
    let b = (0.5 * (lo + hi)).exp();
    let (coef, chi2) = profile(t, y, w, b).ok_or("singular normal matrix")?;
    let (e_inf, a) = (coef[0], coef[1]);
    // full Jacobian for the covariance
    let mut jtj = vec![vec![0.0; 3]; 3];
    for i in 0..t.len() {
        let e = (-b * t[i]).exp();
        let row = [1.0, e, -a * t[i] * e];
        for r in 0..3 {
            for c in 0..3 {
                jtj[r][c] += w[i] * row[r] * row[c];
            }
        }
    }
    let mut cov = invert_spd(&jtj).ok_or("decay rate not identifiable")?;
    let dof = t.len() - 3;
    let s = inflation(chi2, dof);
    cov.iter_mut().flatten().for_each(|c| *c *= s);
    if !(cov[0][0] >= 0.0) {
        return Err("negative variance".into());
    }
    Ok(Extrapolation {
        model: FitModel::Exponential,
        e_inf,
        sigma: cov[0][0].sqrt(),
        amplitude: Some(a),
        rate: Some(b),
        covariance: cov,
        chi2,
        dof,
        fallback: false,
        note: None,
    })
}

fn fallback(pts: &[EnergyPoint], model: FitModel, reason: String) -> Extrapolation {
    let tail = &pts[pts.len() / 2..];
    let usable = tail.iter().all(|p| p.sigma > 0.0 && p.sigma.is_finite());
    let w: Vec<f64> = tail
        .iter()
        .map(|p| if usable { 1.0 / (p.sigma * p.sigma) } else { 1.0 })
        .collect();
    let sw: f64 = w.iter().sum();
    let mean = tail.iter().zip(&w).map(|(p, w)| w * p.energy).sum::<f64>() / sw;
    let chi2: f64 = tail.iter().zip(&w).map(|(p, w)| w * (p.energy - mean).powi(2)).sum();
    let dof = tail.len() - 1;
    let var = if usable {
        inflation(chi2, dof) / sw
    } else {
        chi2 / (dof.max(1) as f64 * tail.len() as f64)
    };
    Extrapolation {
        model,
        e_inf: mean,
        sigma: var.sqrt(),
        amplitude: None,
        rate: None,
        covariance: vec![vec![var]],
        chi2,
        dof,
        fallback: true,
        note: Some(reason),
    }
}

/// Extrapolation of an ensemble, with the error of `E∞` replaced by a block
/// jackknife over the whole fit. Horizons share paths, so their errors are
/// correlated and the fit covariance alone understates the spread.
pub fn extrapolate_ensemble(ens: &EnsembleResult, model: FitModel) -> Result<Extrapolation, EstimateError> {
    let series = EnergySeries::from_ensemble(ens)?;
    let mut fit = extrapolate(&series, model)?;
    let nb = ens.horizons.first().map_or(0, |h| h.blocks.len());
    if nb < 2 {
        return Ok(fit);
    }
    let mut estimates = Vec::with_capacity(nb);
    for b in 0..nb {
        let points: Vec<EnergyPoint> = series
            .points
            .iter()
            .zip(&ens.horizons)
            .map(|(p, rec)| {
                let (n, w, _) = rec.without(b);
                EnergyPoint {
                    energy: energy_from(ens.lambda_t, rec.t, rec.shift, w, n),
                    ..*p
                }
            })
            .collect();
        let Ok(f) = extrapolate(&EnergySeries { points }, model) else {
            continue;
        };
        if f.fallback != fit.fallback {
            continue;
        }
        estimates.push(f.e_inf);
    }
    if estimates.len() >= 2 {
        fit.sigma = jackknife(&estimates);
    }
    Ok(fit)
}

/// One output row per horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub t: f64,
    pub energy: f64,
    pub sigma: f64,
    pub sigma_jackknife: f64,
    pub potential: f64,
    pub kinetic: f64,
    pub virial_ratio: Option<f64>,
}

/// Energy, `⟨V⟩`, `⟨T⟩ = E − ⟨V⟩` and the virial ratio at every horizon.
pub fn horizon_rows(ens: &EnsembleResult) -> Result<Vec<HorizonRow>, EstimateError> {
    ens.horizons
        .iter()
        .map(|h| {
            let e = energy_of_record(ens.lambda_t, h)?;
            let v = property_expectation(ens, "potential", h.t)?.value;
            Ok(HorizonRow {
                t: h.t,
                energy: e.energy,
                sigma: e.sigma,
                sigma_jackknife: e.sigma_jackknife,
                potential: v,
                kinetic: e.energy - v,
                virial_ratio: virial_ratio(v, e.energy).ok(),
            })
        })
        .collect()
}

pub fn write_rows_csv<W: Write>(rows: &[HorizonRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `t`, `energy` and `sigma` columns from a CSV with a header row.
pub fn read_series_csv<R: std::io::Read>(input: R) -> Result<EnergySeries, EstimateError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| EstimateError::Invalid(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| EstimateError::Invalid(format!("missing column {name:?}")))
    };
    let (ct, ce, cs) = (col("t")?, col("energy")?, col("sigma")?);
    let (mut t, mut e, mut s) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| EstimateError::Invalid(e.to_string()))?;
        let num = |c: usize| {
            rec.get(c)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| EstimateError::Invalid(format!("row {}: bad number in column {c}", line + 2)))
        };
        t.push(num(ct)?);
        e.push(num(ce)?);
        s.push(num(cs)?);
    }
    EnergySeries::from_values(&t, &e, &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::walk::Snapshot;
    use proptest::prelude::*;

    fn path(index: u64, log_weights: &[f64], props: &[Vec<f64>]) -> PathResult {
        PathResult {
            index,
            aborted: false,
            singular_hits: 0,
            snapshots: log_weights
                .iter()
                .zip(props)
                .enumerate()
                .map(|(k, (&lw, p))| Snapshot {
                    t: k as f64 + 1.0,
                    log_weight: lw,
                    properties: p.clone(),
                })
                .collect(),
        }
    }

    fn names() -> Vec<String> {
        vec!["potential".into()]
    }

    #[test]
    fn unit_weight_gives_lambda() {
        let paths: Vec<_> = (0..10).map(|i| path(i, &[0.0, 0.0], &[vec![0.0], vec![0.0]])).collect();
        let ens = EnsembleResult::from_paths(-0.5, 30, &[1.0, 2.0], names(), &paths).unwrap();
        for t in [1.0, 2.0] {
            let e = energy_at_t(&ens, t).unwrap();
            assert_eq!(e.energy, -0.5);
            assert_eq!(e.sigma, 0.0);
            assert_eq!(e.sigma_jackknife, 0.0);
        }
    }

    #[test]
    fn nearly_equal_weights_have_tiny_spread() {
        let lw: Vec<f64> = (0..1000).map(|i| -1e-15 * (i % 2) as f64).collect();
        let paths: Vec<_> = lw.iter().enumerate().map(|(i, &l)| path(i as u64, &[l], &[vec![0.0]])).collect();
        let ens = EnsembleResult::from_paths(-0.5, 30, &[1.0], names(), &paths).unwrap();
        // the spread of the weights bounds their standard deviation
        let bound = 1.0 - (-1e-15f64).exp();
        let rel = ens.horizons[0].weight_rel_stderr;
        assert!(rel <= bound / 1000f64.sqrt() * 1.01, "{rel:e}");
    }

    #[test]
    fn decaying_weight() {
        let t = 10.0;
        let paths: Vec<_> = (0..4).map(|i| path(i, &[-0.2 * t], &[vec![0.0]])).collect();
        let ens = EnsembleResult::from_paths(-1.0, 30, &[t], names(), &paths).unwrap();
        let e = energy_at_t(&ens, t).unwrap();
        assert!((e.energy + 0.8).abs() < 1e-14);
    }

    #[test]
    fn huge_log_weights_stay_finite() {
        let paths: Vec<_> = (0..4).map(|i| path(i, &[900.0 + i as f64], &[vec![1.0]])).collect();
        let ens = EnsembleResult::from_paths(0.0, 30, &[100.0], names(), &paths).unwrap();
        let e = energy_at_t(&ens, 100.0).unwrap();
        let oracle = -((900f64.exp() + 901f64.exp() + 902f64.exp() + 903f64.exp()) / 4.0).ln() / 100.0;
        assert!(e.energy.is_finite());
        assert!(oracle.is_infinite() || (e.energy - oracle).abs() < 1e-12);
        let direct = -(900.0 + ((1.0 + 1f64.exp() + 2f64.exp() + 3f64.exp()) / 4.0).ln()) / 100.0;
        assert!((e.energy - direct).abs() < 1e-14);
    }

    #[test]
    fn weighted_property_and_jackknife_oracle() {
        // independent oracle: explicit leave-one-out over single-path blocks
        let lw = [0.1, -0.3, 0.7, 0.0, -1.2, 0.4];
        let v = [-1.0, -0.5, -2.0, -0.8, -1.5, -0.9];
        let paths: Vec<_> = (0..6).map(|i| path(i as u64, &[lw[i]], &[vec![v[i]]])).collect();
        let ens = EnsembleResult::from_paths(0.0, 30, &[1.0], names(), &paths).unwrap();
        let p = property_expectation(&ens, "potential", 1.0).unwrap();
        let w: Vec<f64> = lw.iter().map(|x: &f64| x.exp()).collect();
        let ratio = |skip: Option<usize>| {
            let (mut a, mut b) = (0.0, 0.0);
            for i in 0..6 {
                if Some(i) != skip {
                    a += w[i] * v[i];
                    b += w[i];
                }
            }
            a / b
        };
        assert!((p.value - ratio(None)).abs() < 1e-14);
        let loo: Vec<f64> = (0..6).map(|i| ratio(Some(i))).collect();
        let m = loo.iter().sum::<f64>() / 6.0;
        let sd = (5.0 / 6.0 * loo.iter().map(|x| (x - m).powi(2)).sum::<f64>()).sqrt();
        assert!((p.sigma - sd).abs() < 1e-12);

        let e = energy_at_t(&ens, 1.0).unwrap();
        let mean = w.iter().sum::<f64>() / 6.0;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
        assert!((e.sigma - (var / 6.0).sqrt() / mean).abs() < 1e-12);
        assert!(e.sigma_jackknife > 0.5 * e.sigma && e.sigma_jackknife < 2.0 * e.sigma);
    }

    #[test]
    fn zero_potential_property_is_zero() {
        let paths: Vec<_> = (0..8).map(|i| path(i, &[-(i as f64)], &[vec![0.0]])).collect();
        let ens = EnsembleResult::from_paths(0.0, 30, &[1.0], names(), &paths).unwrap();
        assert_eq!(property_expectation(&ens, "potential", 1.0).unwrap().value, 0.0);
        assert!(property_expectation(&ens, "kinetic", 1.0).is_err());
        assert!(energy_at_t(&ens, 2.0).is_err());
    }

    #[test]
    fn aborted_paths_are_dropped() {
        let mut paths: Vec<_> = (0..4).map(|i| path(i, &[0.0], &[vec![1.0]])).collect();
        paths.push(PathResult {
            index: 4,
            aborted: true,
            singular_hits: 101,
            snapshots: vec![],
        });
        let ens = EnsembleResult::from_paths(0.0, 30, &[1.0], names(), &paths).unwrap();
        assert_eq!(ens.aborted, 1);
        assert_eq!(ens.singular_hits, 101);
        assert_eq!(ens.horizons[0].paths, 4);
    }

    #[test]
    fn virial_examples() {
        assert_eq!(virial_ratio(-1.0, -0.5).unwrap(), 2.0);
        assert_eq!(virial_ratio(0.75, 1.5).unwrap(), -1.0);
        assert!(virial_ratio(-1.0, -1.0).is_err());
    }

    fn synthetic(f: impl Fn(f64) -> f64) -> EnergySeries {
        let t: Vec<f64> = (1..=6).map(|k| 8.0 * k as f64).collect();
        let e: Vec<f64> = t.iter().map(|&t| f(t)).collect();
        EnergySeries::from_values(&t, &e, &[1e-3; 6]).unwrap()
    }

    #[test]
    fn exponential_fit_exact_data() {
        let s = synthetic(|t| -1.0 + 0.1 * (-0.5 * t).exp());
        let f = extrapolate(&s, FitModel::Exponential).unwrap();
        assert!(!f.fallback);
        assert!((f.e_inf + 1.0).abs() < 1e-9, "{}", f.e_inf);
    }

    #[test]
    fn exponential_fit_recovers_rate() {
        let s = synthetic(|t| -1.0 + 0.5 * (-0.08 * t).exp());
        let f = extrapolate(&s, FitModel::Exponential).unwrap();
        assert!(!f.fallback);
        assert!((f.e_inf + 1.0).abs() < 1e-9);
        assert!((f.rate.unwrap() - 0.08).abs() < 1e-6);
        assert!((f.amplitude.unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn constant_series_falls_back() {
        let s = synthetic(|_| -0.5);
        let f = extrapolate(&s, FitModel::Exponential).unwrap();
        assert!(f.fallback);
        assert_eq!(f.e_inf, -0.5);
    }

    #[test]
    fn inverse_time_exact() {
        let s = synthetic(|t| -1.17 + 0.3 / t);
        let f = extrapolate(&s, FitModel::InverseTime).unwrap();
        assert!((f.e_inf + 1.17).abs() < 1e-12);
        assert!((f.amplitude.unwrap() - 0.3).abs() < 1e-10);
        assert!(f.sigma > 0.0);
    }

    #[test]
    fn too_few_points() {
        let s = EnergySeries::from_values(&[1.0, 2.0, 3.0], &[0.0; 3], &[1.0; 3]).unwrap();
        assert!(matches!(extrapolate(&s, FitModel::Exponential), Err(EstimateError::FitFailed(_))));
    }

    #[test]
    fn table_six_series() {
        let t = [8.0, 16.0, 24.0, 32.0, 40.0, 48.0];
        let e = [-1.164376, -1.159098, -1.163043, -1.165153, -1.164310, -1.15559];
        let s = [5e-6, 4e-6, 1e-6, 2e-6, 5e-6, 2e-5];
        let series = EnergySeries::from_values(&t, &e, &s).unwrap();
        let reference = -1.164546;
        let reference_sigma = 3e-6;
        for model in [FitModel::Exponential, FitModel::InverseTime] {
            let f = extrapolate(&series, model).unwrap();
            let joint = (f.sigma.powi(2) + reference_sigma * reference_sigma).sqrt();
            assert!(
                (f.e_inf - reference).abs() < 3.0 * joint,
                "{model:?}: {} ± {} (fallback {})",
                f.e_inf,
                f.sigma,
                f.fallback
            );
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![HorizonRow {
            t: 8.0,
            energy: -1.1,
            sigma: 1e-4,
            sigma_jackknife: 1.1e-4,
            potential: -2.2,
            kinetic: 1.1,
            virial_ratio: Some(2.0),
        }];
        let mut buf = Vec::new();
        write_rows_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,energy,sigma,sigma_jackknife,potential,kinetic,virial_ratio"));
        let s = read_series_csv(&buf[..]).unwrap();
        assert_eq!(s.points[0].energy, -1.1);
        assert_eq!(s.points[0].sigma, 1e-4);
    }

    proptest! {
        #[test]
        fn energy_is_shift_covariant(lw in proptest::collection::vec(-5.0f64..5.0, 3..20), c in -3.0f64..3.0) {
            // adding c·t to every log weight is the same as lowering λ_T by c
            let t = 4.0;
            let mk = |shift: f64| -> Vec<PathResult> {
                lw.iter().enumerate().map(|(i, &x)| path(i as u64, &[x + shift], &[vec![0.0]])).collect()
            };
            let a = EnsembleResult::from_paths(0.0, 30, &[t], names(), &mk(0.0)).unwrap();
            let b = EnsembleResult::from_paths(c, 30, &[t], names(), &mk(c * t)).unwrap();
            let ea = energy_at_t(&a, t).unwrap();
            let eb = energy_at_t(&b, t).unwrap();
            prop_assert!((ea.energy - eb.energy).abs() < 1e-12);
            prop_assert!((ea.sigma - eb.sigma).abs() < 1e-12 * ea.sigma.max(1.0));
        }

        #[test]
        fn linear_fits_are_exact(e_inf in -2.0f64..0.0, a in -1.0f64..1.0) {
            let s = synthetic(|t| e_inf + a / t);
            let f = extrapolate(&s, FitModel::InverseTime).unwrap();
            prop_assert!((f.e_inf - e_inf).abs() < 1e-10);
        }
    }
}
