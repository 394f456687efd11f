//! Reference values computed independently of the library.

use nalgebra::DMatrix;

/// Lowest separation constant `A` of the angular equation
/// `d/dμ[(1−μ²) M'] + (A + p²μ²) M = 0`, from an orthonormal Legendre basis.
fn angular_constant(p: f64, size: usize) -> f64 {
    let n = size + 2;
    let mut mu = DMatrix::<f64>::zeros(n, n);
    for l in 0..n - 1 {
        let c = (l as f64 + 1.0) / (((2 * l + 1) * (2 * l + 3)) as f64).sqrt();
        mu[(l, l + 1)] = c;
        mu[(l + 1, l)] = c;
    }
    let mu2 = &mu * &mu;
    let k = DMatrix::from_fn(size, size, |i, j| {
        let diag = if i == j { (i * (i + 1)) as f64 } else { 0.0 };
        diag - p * p * mu2[(i, j)]
    });
    k.symmetric_eigen().eigenvalues.min()
}

/// `y(λ_max)` for the regular solution of the radial equation
/// `d/dλ[(λ²−1) Λ'] + (2Rλ − p²λ² − A) Λ = 0` written as `Λ = e^{−p(λ−1)} y`.
/// It changes sign where `p` crosses an eigenvalue.
fn radial_tail(r: f64, p: f64, a_sep: f64, h: f64, lambda_max: f64) -> f64 {
    let b = |l: f64| 2.0 * l - 2.0 * p * (l * l - 1.0);
    let c = |l: f64| -p * p - a_sep + (2.0 * r - 2.0 * p) * l;
    let f = |l: f64, y: f64, dy: f64| (dy, -(b(l) * dy + c(l) * y) / (l * l - 1.0));
    // Taylor start off the regular singular point λ = 1
    let c1 = c(1.0);
    let d1 = -c1 / 2.0;
    let d2 = -((2.0 - 4.0 * p + c1) * d1 + (2.0 * r - 2.0 * p)) / 4.0;
    let delta = 1e-5;
    let mut l = 1.0 + delta;
    let mut y = 1.0 + d1 * delta + 0.5 * d2 * delta * delta;
    let mut dy = d1 + d2 * delta;
    while l < lambda_max {
        // steps shrink towards λ = 1 where the equation is stiff
        let s = h.min(0.05 * (l - 1.0)).min(lambda_max - l);
        let (k1y, k1d) = f(l, y, dy);
        let (k2y, k2d) = f(l + s / 2.0, y + s / 2.0 * k1y, dy + s / 2.0 * k1d);
        let (k3y, k3d) = f(l + s / 2.0, y + s / 2.0 * k2y, dy + s / 2.0 * k2d);
        let (k4y, k4d) = f(l + s, y + s * k3y, dy + s * k3d);
        y += s / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
        dy += s / 6.0 * (k1d + 2.0 * k2d + 2.0 * k3d + k4d);
        l += s;
    }
    y
}

/// Clamped-nuclei H₂⁺ ground-state energy (hartree) at bond length `r`,
/// nuclear repulsion included, from the separated equations in prolate
/// spheroidal coordinates. `h` is the largest radial step.
pub fn h2_ion_energy(r: f64, h: f64) -> f64 {
    let tail = |p: f64| radial_tail(r, p, angular_constant(p, 40), h, 1.0 + 40.0 / p);
    // electronic energies between −2 and −0.6 hartree
    let (mut lo, mut hi) = (r * 0.3f64.sqrt(), r);
    let (f_lo, f_hi) = (tail(lo), tail(hi));
    assert!(f_lo.signum() != f_hi.signum(), "no eigenvalue bracketed");
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tail(mid).signum() == f_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    let p = 0.5 * (lo + hi);
    -2.0 * p * p / (r * r) + 1.0 / r
}
