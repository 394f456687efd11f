//! Guide (trial) functions for importance sampling.
//!
//! A trial function is evaluated on the flat vector of physical coordinates
//! of every particle (three per particle, clamped ones included). It reports
//! `ln ψ`, the gradient of `ln ψ` and the diagonal of the Hessian of `ln ψ`
//! for every coordinate; the walk only reads the entries that belong to free
//! particles. [`Evaluator`] turns that into walk-coordinate quantities (drift,
//! Laplacian ratio, local energy) for a given [`Hamiltonian`].

use std::fmt::Debug;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::system::{Configuration, SystemError};
use crate::Hamiltonian;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrialError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("trial drift is not finite")]
    NonFiniteDrift,
    #[error("invalid trial: {0}")]
    Invalid(String),
    #[error("trial energy estimate did not converge: standard error {stderr:e} exceeds {bound:e}")]
    NonConverged { stderr: f64, bound: f64 },
}

/// Value and log-derivatives of a trial function at one point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialEval {
    pub log_value: f64,
    /// ∂ ln ψ / ∂x_k
    pub grad: Vec<f64>,
    /// ∂² ln ψ / ∂x_k²
    pub hess_diag: Vec<f64>,
}

impl TrialEval {
    pub fn zeroed(n: usize) -> Self {
        TrialEval {
            log_value: 0.0,
            grad: vec![0.0; n],
            hess_diag: vec![0.0; n],
        }
    }

    fn reset(&mut self, n: usize) {
        self.log_value = 0.0;
        self.grad.clear();
        self.grad.resize(n, 0.0);
        self.hess_diag.clear();
        self.hess_diag.resize(n, 0.0);
    }

    /// (∂²ψ/∂x_k²)/ψ
    pub fn second_ratio(&self, k: usize) -> f64 {
        self.hess_diag[k] + self.grad[k] * self.grad[k]
    }
}

pub trait TrialFunction: Send + Sync + Debug {
    fn name(&self) -> &'static str;

    fn parameters(&self) -> Vec<(String, f64)>;

    /// Fills `out` (resized to `coords.len()`).
    fn evaluate(&self, coords: &[f64], out: &mut TrialEval);

    fn log_value(&self, coords: &[f64]) -> f64 {
        let mut e = TrialEval::default();
        self.evaluate(coords, &mut e);
        e.log_value
    }
}

/// `ψ = exp(-σ Σ x_k²)` over a set of coordinates (all of them by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianTrial {
    pub sigma: f64,
    pub coords: Option<Vec<usize>>,
}

impl GaussianTrial {
    pub fn new(sigma: f64) -> Result<Self, TrialError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(TrialError::Invalid(format!("sigma must be positive, got {sigma}")));
        }
        Ok(GaussianTrial { sigma, coords: None })
    }

    /// Restricts the Gaussian to the coordinate blocks of the given particles.
    pub fn over_particles(sigma: f64, particles: &[usize]) -> Result<Self, TrialError> {
        let mut t = Self::new(sigma)?;
        t.coords = Some(particles.iter().flat_map(|&p| [3 * p, 3 * p + 1, 3 * p + 2]).collect());
        Ok(t)
    }
}

impl TrialFunction for GaussianTrial {
    fn name(&self) -> &'static str {
        "gaussian"
    }

    fn parameters(&self) -> Vec<(String, f64)> {
        vec![("sigma".into(), self.sigma)]
    }

    fn evaluate(&self, x: &[f64], out: &mut TrialEval) {
        out.reset(x.len());
        let mut add = |k: usize| {
            out.log_value -= self.sigma * x[k] * x[k];
            out.grad[k] = -2.0 * self.sigma * x[k];
            out.hess_diag[k] = -2.0 * self.sigma;
        };
        match &self.coords {
            Some(ks) => ks.iter().for_each(|&k| add(k)),
            None => (0..x.len()).for_each(add),
        }
    }
}

/// Scalar function of a pair distance, with first and second derivatives.
#[derive(Debug, Clone, Copy)]
struct Radial {
    f: f64,
    df: f64,
    d2f: f64,
}

/// Geometry of the pair `(a, b)`: distance and unit vector from `b` to `a`.
#[derive(Debug, Clone, Copy)]
struct Pair {
    a: usize,
    b: usize,
    r: f64,
    n: [f64; 3],
}

impl Pair {
    fn new(x: &[f64], a: usize, b: usize) -> Self {
        let d = [
            x[3 * a] - x[3 * b],
            x[3 * a + 1] - x[3 * b + 1],
            x[3 * a + 2] - x[3 * b + 2],
        ];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        Pair {
            a,
            b,
            r,
            n: [d[0] / r, d[1] / r, d[2] / r],
        }
    }

    /// Adds the derivatives of `F(r)` to a log-derivative accumulator.
    fn accumulate(&self, g: Radial, grad: &mut [f64], hess: &mut [f64]) {
        for c in 0..3 {
            let nc = self.n[c];
            let h = g.d2f * nc * nc + g.df * (1.0 - nc * nc) / self.r;
            grad[3 * self.a + c] += g.df * nc;
            grad[3 * self.b + c] -= g.df * nc;
            hess[3 * self.a + c] += h;
            hess[3 * self.b + c] += h;
        }
    }
}

/// Folds `ln Σ_j exp(L_j)` with per-term gradients and Hessian diagonals
/// into `out`.
fn log_sum_exp(terms: &[TrialEval], out: &mut TrialEval) {
    let n = terms[0].grad.len();
    out.reset(n);
    let m = terms.iter().map(|t| t.log_value).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = terms.iter().map(|t| (t.log_value - m).exp()).sum();
    out.log_value = m + z.ln();
    for t in terms {
        let p = (t.log_value - m).exp() / z;
        for k in 0..n {
            out.grad[k] += p * t.grad[k];
            out.hess_diag[k] += p * (t.hess_diag[k] + t.grad[k] * t.grad[k]);
        }
    }
    for k in 0..n {
        out.hess_diag[k] -= out.grad[k] * out.grad[k];
    }
}

/// Products of `exp(-α r_{eN})` over electron-nucleus pairs.
///
/// Unsymmetrized: `ψ = Π_e Π_N exp(-α r_eN)`. Symmetrized:
/// `ψ = Π_e Σ_N exp(-α r_eN)`, the orbital-sum form that is symmetric
/// under exchange of the nuclei. With a single nucleus both coincide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicProductTrial {
    pub alpha: f64,
    pub electrons: Vec<usize>,
    pub nuclei: Vec<usize>,
    pub symmetrized: bool,
}

impl AtomicProductTrial {
    pub fn new(
        alpha: f64,
        electrons: Vec<usize>,
        nuclei: Vec<usize>,
        symmetrized: bool,
    ) -> Result<Self, TrialError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(TrialError::Invalid(format!("alpha must be positive, got {alpha}")));
        }
        if electrons.is_empty() || nuclei.is_empty() {
            return Err(TrialError::Invalid("needs at least one electron and one nucleus".into()));
        }
        Ok(AtomicProductTrial {
            alpha,
            electrons,
            nuclei,
            symmetrized,
        })
    }

    fn slater(&self) -> Radial {
        Radial {
            f: 0.0,
            df: -self.alpha,
            d2f: 0.0,
        }
    }
}

impl TrialFunction for AtomicProductTrial {
    fn name(&self) -> &'static str {
        "atomic-product"
    }

    fn parameters(&self) -> Vec<(String, f64)> {
        vec![
            ("alpha".into(), self.alpha),
            ("symmetrized".into(), if self.symmetrized { 1.0 } else { 0.0 }),
        ]
    }

    fn evaluate(&self, x: &[f64], out: &mut TrialEval) {
        let n = x.len();
        out.reset(n);
        let mut g = self.slater();
        if !self.symmetrized || self.nuclei.len() == 1 {
            for &e in &self.electrons {
                for &nu in &self.nuclei {
                    let p = Pair::new(x, e, nu);
                    out.log_value -= self.alpha * p.r;
                    p.accumulate(g, &mut out.grad, &mut out.hess_diag);
                }
            }
            return;
        }
        let mut terms: Vec<TrialEval> = Vec::with_capacity(self.nuclei.len());
        let mut per_electron = TrialEval::zeroed(n);
        for &e in &self.electrons {
            terms.clear();
            for &nu in &self.nuclei {
                let p = Pair::new(x, e, nu);
                let mut t = TrialEval::zeroed(n);
                g.f = -self.alpha * p.r;
                t.log_value = g.f;
                p.accumulate(g, &mut t.grad, &mut t.hess_diag);
                terms.push(t);
            }
            log_sum_exp(&terms, &mut per_electron);
            out.log_value += per_electron.log_value;
            for k in 0..n {
                out.grad[k] += per_electron.grad[k];
                out.hess_diag[k] += per_electron.hess_diag[k];
            }
        }
    }
}

/// One exponent term `a · q_1A^u q_1B^v q_2A^w q_2B^n q_12^g q_AB^h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelatedTerm {
    #[serde(default)]
    pub u: u32,
    #[serde(default)]
    pub v: u32,
    #[serde(default)]
    pub w: u32,
    #[serde(default)]
    pub n: u32,
    #[serde(default)]
    pub g: u32,
    #[serde(default)]
    pub h: u32,
    pub a: f64,
}

impl CorrelatedTerm {
    fn powers(&self) -> [u32; 6] {
        [self.u, self.v, self.w, self.n, self.g, self.h]
    }
}

// pair slots, in exponent order
const P1A: usize = 0;
const P1B: usize = 1;
const P2A: usize = 2;
const P2B: usize = 3;
const P12: usize = 4;
const PAB: usize = 5;

/// Explicitly correlated exponential trial for up to two electrons and two
/// nuclei:
///
/// `ψ = (1 + P₁₂)(1 + P_AB) exp(Σ_k a_k q_1A^u q_1B^v q_2A^w q_2B^n q_12^g q_AB^h − χ r_1A − δ r_2B)`
///
/// with `q_x = r_x / (1 + c r_x)`. With one electron the terms may only use
/// `u`, `v` and `h`, and `δ` must vanish; with one nucleus `v`, `n`, `h`
/// and `δ` must vanish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelatedExponentialTrial {
    pub electrons: Vec<usize>,
    pub nuclei: Vec<usize>,
    pub terms: Vec<CorrelatedTerm>,
    pub c: f64,
    pub chi: f64,
    pub delta: f64,
    pub symmetrize_electrons: bool,
    pub symmetrize_nuclei: bool,
    pub n_max: u32,
}

impl CorrelatedExponentialTrial {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        electrons: Vec<usize>,
        nuclei: Vec<usize>,
        terms: Vec<CorrelatedTerm>,
        c: f64,
        chi: f64,
        delta: f64,
        symmetrize_electrons: bool,
        symmetrize_nuclei: bool,
        n_max: u32,
    ) -> Result<Self, TrialError> {
        let bad = |m: String| Err(TrialError::Invalid(m));
        if !(1..=2).contains(&electrons.len()) || !(1..=2).contains(&nuclei.len()) {
            return bad("needs one or two electrons and one or two nuclei".into());
        }
        if !(c > 0.0 && c.is_finite()) {
            return bad(format!("c must be positive, got {c}"));
        }
        if !(chi > 0.0 && chi.is_finite()) || !(delta >= 0.0 && delta.is_finite()) {
            return bad("chi must be positive and delta non-negative".into());
        }
        let two_e = electrons.len() == 2;
        let two_n = nuclei.len() == 2;
        if !two_e && delta != 0.0 {
            return bad("delta needs a second electron".into());
        }
        if two_e && delta == 0.0 {
            return bad("delta must be positive with two electrons".into());
        }
        if !two_n && delta != 0.0 {
            return bad("delta needs a second nucleus".into());
        }
        for (k, t) in terms.iter().enumerate() {
            let p = t.powers();
            if p.iter().sum::<u32>() > n_max {
                return bad(format!("term {k} exceeds the total power bound {n_max}"));
            }
            if !two_e && (p[P2A] + p[P2B] + p[P12]) > 0 {
                return bad(format!("term {k} references the second electron"));
            }
            if !two_n && (p[P1B] + p[P2B] + p[PAB]) > 0 {
                return bad(format!("term {k} references the second nucleus"));
            }
            if !t.a.is_finite() {
                return bad(format!("term {k} has a non-finite coefficient"));
            }
        }
        Ok(CorrelatedExponentialTrial {
            electrons,
            nuclei,
            terms,
            c,
            chi,
            delta,
            symmetrize_electrons,
            symmetrize_nuclei,
            n_max,
        })
    }

    /// Role assignments `[e1, e2, A, B]` summed over by the symmetrizers.
    fn assignments(&self) -> Vec<[Option<usize>; 4]> {
        let e1 = self.electrons[0];
        let e2 = self.electrons.get(1).copied();
        let a = self.nuclei[0];
        let b = self.nuclei.get(1).copied();
        let mut out = vec![[Some(e1), e2, Some(a), b]];
        if self.symmetrize_electrons && e2.is_some() {
            out.push([e2, Some(e1), Some(a), b]);
        }
        if self.symmetrize_nuclei && b.is_some() {
            let k = out.len();
            for i in 0..k {
                let [x, y, p, q] = out[i];
                out.push([x, y, q, p]);
            }
        }
        out
    }

    fn q(&self, r: f64) -> Radial {
        let d = 1.0 + self.c * r;
        Radial {
            f: r / d,
            df: 1.0 / (d * d),
            d2f: -2.0 * self.c / (d * d * d),
        }
    }

    /// Exponent for one role assignment.
    fn exponent(&self, x: &[f64], roles: [Option<usize>; 4], out: &mut TrialEval) {
        out.reset(x.len());
        let [e1, e2, a, b] = roles;
        let slots: [(Option<usize>, Option<usize>); 6] =
            [(e1, a), (e1, b), (e2, a), (e2, b), (e1, e2), (a, b)];
        let mut pairs: [Option<Pair>; 6] = [None; 6];
        let mut qs = [Radial { f: 0.0, df: 0.0, d2f: 0.0 }; 6];
        for (s, (i, j)) in slots.iter().enumerate() {
            if let (Some(i), Some(j)) = (i, j) {
                let p = Pair::new(x, *i, *j);
                qs[s] = self.q(p.r);
                pairs[s] = Some(p);
            }
        }

        // P, ∂P/∂q_x and ∂²P/∂q_x∂q_y
        let mut value = 0.0;
        let mut dp = [0.0; 6];
        let mut d2p = [[0.0; 6]; 6];
        for t in &self.terms {
            let pw = t.powers();
            let mut pow = [1.0; 6];
            let mut dpow = [0.0; 6];
            let mut d2pow = [0.0; 6];
            for s in 0..6 {
                let e = pw[s] as i32;
                if e > 0 {
                    let q = qs[s].f;
                    pow[s] = q.powi(e);
                    dpow[s] = e as f64 * q.powi(e - 1);
                    d2pow[s] = if e > 1 { (e * (e - 1)) as f64 * q.powi(e - 2) } else { 0.0 };
                }
            }
            let prod_except = |skip: &[usize]| -> f64 {
                (0..6).filter(|s| !skip.contains(s)).map(|s| pow[s]).product()
            };
            value += t.a * pow.iter().product::<f64>();
            for s in 0..6 {
                if pw[s] == 0 {
                    continue;
                }
                dp[s] += t.a * dpow[s] * prod_except(&[s]);
                d2p[s][s] += t.a * d2pow[s] * prod_except(&[s]);
                for r in s + 1..6 {
                    if pw[r] == 0 {
                        continue;
                    }
                    let v = t.a * dpow[s] * dpow[r] * prod_except(&[s, r]);
                    d2p[s][r] += v;
                    d2p[r][s] += v;
                }
            }
        }

        // chain rule to pair distances
        let mut linear = [0.0; 6];
        linear[P1A] = self.chi;
        linear[P2B] = self.delta;
        let mut dr = [0.0; 6];
        let mut d2r = [[0.0; 6]; 6];
        out.log_value = value;
        for s in 0..6 {
            let Some(p) = pairs[s] else { continue };
            out.log_value -= linear[s] * p.r;
            dr[s] = dp[s] * qs[s].df - linear[s];
            for r in 0..6 {
                if pairs[r].is_some() {
                    d2r[s][r] = d2p[s][r] * qs[s].df * qs[r].df;
                }
            }
            d2r[s][s] += dp[s] * qs[s].d2f;
        }

        for s in 0..6 {
            let Some(p) = pairs[s] else { continue };
            for c in 0..3 {
                out.grad[3 * p.a + c] += dr[s] * p.n[c];
                out.grad[3 * p.b + c] -= dr[s] * p.n[c];
            }
        }
        // Hessian diagonal: for each particle sum over the pairs touching it
        let mut touched: Vec<usize> = pairs.iter().flatten().flat_map(|p| [p.a, p.b]).collect();
        touched.sort_unstable();
        touched.dedup();
        for &particle in &touched {
            for c in 0..3 {
                let mut h = 0.0;
                for s in 0..6 {
                    let Some(ps) = pairs[s] else { continue };
                    let sign_s = if ps.a == particle {
                        1.0
                    } else if ps.b == particle {
                        -1.0
                    } else {
                        continue;
                    };
                    let js = sign_s * ps.n[c];
                    h += dr[s] * (1.0 - ps.n[c] * ps.n[c]) / ps.r;
                    for r in 0..6 {
                        let Some(pr) = pairs[r] else { continue };
                        let sign_r = if pr.a == particle {
                            1.0
                        } else if pr.b == particle {
                            -1.0
                        } else {
                            continue;
                        };
                        h += d2r[s][r] * js * sign_r * pr.n[c];
                    }
                }
                out.hess_diag[3 * particle + c] = h;
            }
        }
    }
}

impl TrialFunction for CorrelatedExponentialTrial {
    fn name(&self) -> &'static str {
        "correlated-exponential"
    }

    fn parameters(&self) -> Vec<(String, f64)> {
        let mut p = vec![
            ("c".into(), self.c),
            ("chi".into(), self.chi),
            ("delta".into(), self.delta),
        ];
        for (k, t) in self.terms.iter().enumerate() {
            let [u, v, w, n, g, h] = t.powers();
            p.push((format!("a{k}[{u}{v}{w}{n}{g}{h}]"), t.a));
        }
        p
    }

    fn evaluate(&self, x: &[f64], out: &mut TrialEval) {
        let roles = self.assignments();
        if roles.len() == 1 {
            self.exponent(x, roles[0], out);
            return;
        }
        let terms: Vec<TrialEval> = roles
            .iter()
            .map(|&r| {
                let mut t = TrialEval::default();
                self.exponent(x, r, &mut t);
                t
            })
            .collect();
        log_sum_exp(&terms, out);
    }
}

/// Walk-space view of a trial function at one point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalEval {
    pub log_value: f64,
    /// ∂ ln ψ / ∂x'_k in walk coordinates.
    pub drift: Vec<f64>,
    /// Σ_k (∂²ψ/∂x'_k²)/ψ in walk coordinates.
    pub laplacian_ratio: f64,
    /// −½ Σ_k D_k (∂²ψ/∂x'_k²)/ψ with the walk diffusion constants D_k.
    pub kinetic: f64,
    pub potential: f64,
    pub local_energy: f64,
}

/// Evaluates potential, drift and local energy in walk coordinates.
///
/// Holds scratch buffers, so each worker keeps its own.
#[derive(Debug)]
pub struct Evaluator<'a, H: Hamiltonian + ?Sized> {
    ham: &'a H,
    trial: Option<&'a dyn TrialFunction>,
    map: Vec<(usize, f64)>,
    diffusion: Vec<f64>,
    phys: Vec<f64>,
    eval: TrialEval,
}

impl<'a, H: Hamiltonian + ?Sized> Evaluator<'a, H> {
    pub fn new(ham: &'a H, trial: Option<&'a dyn TrialFunction>) -> Self {
        let map = ham.coordinate_map();
        let diffusion = ham.walk_scales().iter().map(|s| s * s).collect();
        Evaluator {
            ham,
            trial,
            map,
            diffusion,
            phys: vec![0.0; ham.n_coords()],
            eval: TrialEval::default(),
        }
    }

    pub fn hamiltonian(&self) -> &'a H {
        self.ham
    }

    pub fn trial(&self) -> Option<&'a dyn TrialFunction> {
        self.trial
    }

    /// Diffusion constant per walk coordinate (walk scale squared).
    pub fn diffusion(&self) -> &[f64] {
        &self.diffusion
    }

    pub fn evaluate(&mut self, x: &[f64], out: &mut LocalEval) -> Result<(), TrialError> {
        self.ham.to_physical(x, &mut self.phys);
        let potential = self.ham.potential_at(&self.phys)?;
        out.drift.clear();
        out.drift.resize(x.len(), 0.0);
        out.potential = potential;
        let Some(trial) = self.trial else {
            out.log_value = 0.0;
            out.laplacian_ratio = 0.0;
            out.kinetic = 0.0;
            out.local_energy = potential;
            return Ok(());
        };
        trial.evaluate(&self.phys, &mut self.eval);
        let mut lap = 0.0;
        let mut kin = 0.0;
        for (k, &(i, s)) in self.map.iter().enumerate() {
            let d = s * self.eval.grad[i];
            if !d.is_finite() {
                return Err(TrialError::NonFiniteDrift);
            }
            out.drift[k] = d;
            let second = s * s * self.eval.second_ratio(i);
            lap += second;
            kin -= 0.5 * self.diffusion[k] * second;
        }
        if !lap.is_finite() || !self.eval.log_value.is_finite() {
            return Err(TrialError::NonFiniteDrift);
        }
        out.log_value = self.eval.log_value;
        out.laplacian_ratio = lap;
        out.kinetic = kin;
        out.local_energy = kin + potential;
        Ok(())
    }
}

fn checked<H: Hamiltonian + ?Sized>(ham: &H, config: &Configuration) -> Result<(), TrialError> {
    if config.dim() != ham.dim() {
        return Err(SystemError::DimensionMismatch {
            expected: ham.dim(),
            got: config.dim(),
        }
        .into());
    }
    Ok(())
}

/// `∇ψ_T/ψ_T` in walk coordinates.
pub fn drift<H: Hamiltonian + ?Sized>(
    trial: &dyn TrialFunction,
    ham: &H,
    config: &Configuration,
) -> Result<Vec<f64>, TrialError> {
    checked(ham, config)?;
    let mut ev = Evaluator::new(ham, Some(trial));
    let mut out = LocalEval::default();
    ev.evaluate(config.as_slice(), &mut out)?;
    Ok(out.drift)
}

/// `(Hψ_T)/ψ_T` in hartree.
pub fn local_energy<H: Hamiltonian + ?Sized>(
    trial: &dyn TrialFunction,
    ham: &H,
    config: &Configuration,
) -> Result<f64, TrialError> {
    checked(ham, config)?;
    let mut ev = Evaluator::new(ham, Some(trial));
    let mut out = LocalEval::default();
    ev.evaluate(config.as_slice(), &mut out)?;
    Ok(out.local_energy)
}

/// Sampling budget for [`lambda_t_estimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerBudget {
    pub walkers: usize,
    pub steps_per_unit: u32,
    pub burn_in: f64,
    pub sample_time: f64,
    pub seed: u64,
    /// Largest acceptable standard error.
    pub max_stderr: f64,
}

impl Default for SamplerBudget {
    fn default() -> Self {
        SamplerBudget {
            walkers: 200,
            steps_per_unit: 30,
            burn_in: 2.0,
            sample_time: 10.0,
            seed: 0x5eed,
            max_stderr: 1e-2,
        }
    }
}

/// Trial-energy estimate: mean local energy over the drifted walk's
/// stationary distribution (≈ ψ_T²), with a standard error across walkers.
pub fn lambda_t_estimate<H: Hamiltonian + ?Sized>(
    trial: &dyn TrialFunction,
    ham: &H,
    initial: Option<&Configuration>,
    budget: &SamplerBudget,
) -> Result<(f64, f64), TrialError> {
    let (mean, stderr) = crate::walk::sample_local_energy(trial, ham, initial, budget)?;
    if !(stderr <= budget.max_stderr) {
        return Err(TrialError::NonConverged {
            stderr,
            bound: budget.max_stderr,
        });
    }
    Ok((mean, stderr))
}

/// Centered finite-difference check of the analytic log-derivatives.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DerivativeReport {
    pub points: usize,
    pub max_grad_error: f64,
    pub max_laplacian_error: f64,
    pub tolerance: f64,
}

impl DerivativeReport {
    pub fn passed(&self) -> bool {
        self.max_grad_error <= self.tolerance && self.max_laplacian_error <= self.tolerance
    }
}

/// Mixed relative error `|a-b| / max(|b|, 1)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Finite-difference gradient and Hessian diagonal of `ln ψ` at `x`, for
/// the listed coordinates. Gradient: centered, h = 1e-5. Second derivative:
/// Richardson-extrapolated centered second differences, h = 2e-3 and 1e-3.
pub fn finite_difference(
    trial: &dyn TrialFunction,
    x: &[f64],
    coords: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let mut y = x.to_vec();
    let f0 = trial.log_value(x);
    let mut at = |k: usize, h: f64| {
        y[k] = x[k] + h;
        let v = trial.log_value(&y);
        y[k] = x[k];
        v
    };
    let mut grad = Vec::with_capacity(coords.len());
    let mut hess = Vec::with_capacity(coords.len());
    for &k in coords {
        let h = 1e-5;
        grad.push((at(k, h) - at(k, -h)) / (2.0 * h));
        let d2 = |h: f64, at: &mut dyn FnMut(usize, f64) -> f64| {
            ((at(k, h) - f0) + (at(k, -h) - f0)) / (h * h)
        };
        let coarse = d2(2e-3, &mut at);
        let fine = d2(1e-3, &mut at);
        hess.push(fine + (fine - coarse) / 3.0);
    }
    (grad, hess)
}

/// Compares analytic derivatives with [`finite_difference`] at the given points.
pub fn derivative_check(
    trial: &dyn TrialFunction,
    coords: &[usize],
    points: &[Vec<f64>],
    tolerance: f64,
) -> DerivativeReport {
    let mut rep = DerivativeReport {
        points: points.len(),
        tolerance,
        ..Default::default()
    };
    let mut e = TrialEval::default();
    for x in points {
        trial.evaluate(x, &mut e);
        let (g, h) = finite_difference(trial, x, coords);
        let mut lap_fd = 0.0;
        let mut lap = 0.0;
        for (j, &k) in coords.iter().enumerate() {
            rep.max_grad_error = rep.max_grad_error.max(rel_err(e.grad[k], g[j]));
            lap += e.second_ratio(k);
            lap_fd += h[j] + g[j] * g[j];
        }
        rep.max_laplacian_error = rep.max_laplacian_error.max(rel_err(lap, lap_fd));
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::presets::*;
    use crate::system::{HarmonicWell, Scaling};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n_particles: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        while out.len() < count {
            let x: Vec<f64> = (0..3 * n_particles).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let ok = (0..n_particles).all(|i| {
                (i + 1..n_particles).all(|j| {
                    let d: f64 = (0..3).map(|c| (x[3 * i + c] - x[3 * j + c]).powi(2)).sum();
                    d.sqrt() > 0.2
                })
            });
            if ok {
                out.push(x);
            }
        }
        out
    }

    pub(crate) fn h2_trial() -> CorrelatedExponentialTrial {
        CorrelatedExponentialTrial::new(
            vec![0, 1],
            vec![2, 3],
            vec![
                CorrelatedTerm { g: 1, a: 0.5, ..zero_term() },
                CorrelatedTerm { u: 1, v: 1, a: 0.13, ..zero_term() },
                CorrelatedTerm { w: 2, g: 1, a: -0.07, ..zero_term() },
                CorrelatedTerm { h: 2, a: 0.3, ..zero_term() },
                CorrelatedTerm { u: 1, n: 1, h: 1, a: 0.05, ..zero_term() },
            ],
            0.6,
            1.1,
            0.9,
            true,
            true,
            4,
        )
        .unwrap()
    }

    pub(crate) fn zero_term() -> CorrelatedTerm {
        CorrelatedTerm { u: 0, v: 0, w: 0, n: 0, g: 0, h: 0, a: 0.0 }
    }

    #[test]
    fn gaussian_drift() {
        let t = GaussianTrial::new(0.5).unwrap();
        let well = HarmonicWell::new(3, 1.0);
        let d = drift(&t, &well, &vec![1.0, 0.0, 0.0].into()).unwrap();
        assert_eq!(d, vec![-1.0, 0.0, 0.0]);
    }

    #[test]
    fn atomic_drift_points_at_nucleus() {
        let spec = hydrogen_atom_bo();
        let t = AtomicProductTrial::new(1.0, vec![0], vec![1], false).unwrap();
        let d = drift(&t, &spec, &vec![0.0, 0.0, 2.0].into()).unwrap();
        assert_eq!(d, vec![0.0, 0.0, -1.0]);
    }

    #[test]
    fn hydrogen_local_energy_is_exact() {
        let spec = hydrogen_atom_bo();
        let t = AtomicProductTrial::new(1.0, vec![0], vec![1], false).unwrap();
        for x in random_points(1, 50, 3) {
            let e = local_energy(&t, &spec, &x.into()).unwrap();
            assert_relative_eq!(e, -0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn oscillator_local_energy() {
        let well = HarmonicWell::new(3, 1.0);
        let exact = GaussianTrial::new(0.5).unwrap();
        for x in random_points(1, 20, 5) {
            assert_relative_eq!(local_energy(&exact, &well, &x.into()).unwrap(), 1.5, epsilon = 1e-12);
        }
        let t = GaussianTrial::new(0.3).unwrap();
        let e = local_energy(&t, &well, &vec![1.0, 1.0, 1.0].into()).unwrap();
        // 3σ + |x|²(1 − 4σ²)/2
        let closed = 3.0 * 0.3 + 3.0 * (1.0 - 4.0 * 0.09) / 2.0;
        assert_relative_eq!(closed, 1.86, epsilon = 1e-12);
        assert_relative_eq!(e, 1.86, epsilon = 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let pts4 = random_points(4, 100, 11);
        let pts3 = random_points(3, 100, 12);
        let all4: Vec<usize> = (0..12).collect();
        let all3: Vec<usize> = (0..9).collect();
        let cases: Vec<(Box<dyn TrialFunction>, &Vec<Vec<f64>>, &Vec<usize>)> = vec![
            (Box::new(GaussianTrial::new(0.37).unwrap()), &pts4, &all4),
            (Box::new(AtomicProductTrial::new(1.2, vec![0, 1], vec![2, 3], false).unwrap()), &pts4, &all4),
            (Box::new(AtomicProductTrial::new(0.8, vec![0, 1], vec![2, 3], true).unwrap()), &pts4, &all4),
            (Box::new(AtomicProductTrial::new(1.0, vec![0], vec![1, 2], true).unwrap()), &pts3, &all3),
            (Box::new(h2_trial()), &pts4, &all4),
        ];
        for (t, pts, coords) in cases {
            let rep = derivative_check(t.as_ref(), coords, pts, 1e-6);
            assert!(rep.passed(), "{}: {rep:?}", t.name());
        }
    }

    #[test]
    fn correlated_one_electron_form() {
        let t = CorrelatedExponentialTrial::new(
            vec![0],
            vec![1, 2],
            vec![
                CorrelatedTerm { u: 1, v: 1, a: 0.2, ..zero_term() },
                CorrelatedTerm { v: 2, a: -0.1, ..zero_term() },
                CorrelatedTerm { h: 1, a: 0.05, ..zero_term() },
            ],
            0.5,
            1.0,
            0.0,
            false,
            true,
            2,
        )
        .unwrap();
        let pts = random_points(3, 100, 21);
        let coords: Vec<usize> = (0..9).collect();
        assert!(derivative_check(&t, &coords, &pts, 1e-6).passed());
        // nuclear exchange
        for x in &pts {
            let mut y = x.clone();
            for c in 0..3 {
                y.swap(3 + c, 6 + c);
            }
            assert_relative_eq!(t.log_value(x), t.log_value(&y), epsilon = 1e-12);
        }
    }

    #[test]
    fn exchange_symmetry() {
        let t = h2_trial();
        for x in random_points(4, 100, 31) {
            let swap = |x: &[f64], i: usize, j: usize| {
                let mut y = x.to_vec();
                for c in 0..3 {
                    y.swap(3 * i + c, 3 * j + c);
                }
                y
            };
            let f = t.log_value(&x);
            assert!((f - t.log_value(&swap(&x, 0, 1))).abs() <= 1e-12 * f.abs().max(1.0));
            assert!((f - t.log_value(&swap(&x, 2, 3))).abs() <= 1e-12 * f.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(GaussianTrial::new(0.0).is_err());
        assert!(AtomicProductTrial::new(-1.0, vec![0], vec![1], false).is_err());
        let over = CorrelatedExponentialTrial::new(
            vec![0, 1],
            vec![2, 3],
            vec![CorrelatedTerm { u: 3, v: 2, a: 1.0, ..zero_term() }],
            1.0,
            1.0,
            1.0,
            true,
            true,
            4,
        );
        assert!(matches!(over, Err(TrialError::Invalid(_))));
        let one_e = CorrelatedExponentialTrial::new(
            vec![0],
            vec![1, 2],
            vec![CorrelatedTerm { g: 1, a: 1.0, ..zero_term() }],
            1.0,
            1.0,
            0.0,
            false,
            false,
            4,
        );
        assert!(one_e.is_err());
    }

    #[test]
    fn walk_space_derivatives_follow_the_scheme() {
        // same physical point in both schemes: drift_scaled = s * drift_physical,
        // and the local energies agree
        let t = h2_trial();
        let phys = random_points(4, 10, 41);
        let scaled = h2_nbo(Scaling::Scaled);
        let physical = h2_nbo(Scaling::Physical);
        for x in phys {
            let ds = drift(&t, &scaled, &scaled.to_walk_coordinates(&x)).unwrap();
            let dp = drift(&t, &physical, &x.clone().into()).unwrap();
            for k in 0..12 {
                let s = scaled.coordinate_scale(k / 3);
                assert_relative_eq!(ds[k], s * dp[k], max_relative = 1e-12, epsilon = 1e-14);
            }
            let es = local_energy(&t, &scaled, &scaled.to_walk_coordinates(&x)).unwrap();
            let ep = local_energy(&t, &physical, &x.into()).unwrap();
            assert_relative_eq!(es, ep, max_relative = 1e-12);
        }
    }

    #[test]
    fn non_finite_drift_is_an_error() {
        let spec = hydrogen_atom_bo();
        let t = AtomicProductTrial::new(1.0, vec![0], vec![1], false).unwrap();
        let mut ev = Evaluator::new(&spec, Some(&t as &dyn TrialFunction));
        let mut out = LocalEval::default();
        // potential is singular before the trial is consulted
        assert!(ev.evaluate(&[0.0, 0.0, 0.0], &mut out).is_err());
        let g = GaussianTrial::new(0.5).unwrap();
        let mut ev = Evaluator::new(&spec, Some(&g as &dyn TrialFunction));
        assert!(matches!(
            ev.evaluate(&[f64::MAX, 0.0, 1.0], &mut out),
            Err(TrialError::NonFiniteDrift)
        ));
    }
}
