//! Reference capacities in radial and strip geometry.
//!
//! [`radial_numeric`] solves the 1-D radial problem through its first
//! integral `g(|u'|) rho^(n-1) = kappa`, bisecting on `kappa`; it shares no
//! code with the 2-D engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::Flux;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialSpec {
    /// Space dimension.
    pub n: u32,
    pub p: f64,
    /// Inner radius.
    pub r: f64,
    /// Outer radius.
    #[serde(rename = "R")]
    pub big_r: f64,
}

impl RadialSpec {
    pub fn new(n: u32, p: f64, r: f64, big_r: f64) -> Result<Self> {
        let spec = RadialSpec { n, p, r, big_r };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid("dimension must be >= 2"));
        }
        if !(self.p > 1.0 && self.p.is_finite()) {
            return Err(Error::invalid("p must be > 1"));
        }
        if !(self.r > 0.0 && self.r < self.big_r && self.big_r.is_finite()) {
            return Err(Error::invalid(format!("need 0 < r < R, got r={} R={}", self.r, self.big_r)));
        }
        Ok(())
    }
}

/// Surface measure of the unit sphere in `R^n`: `2 pi^(n/2) / Gamma(n/2)`.
pub fn unit_sphere_area(n: u32) -> f64 {
    use std::f64::consts::PI;
    // Gamma(n/2) by recursion from Gamma(1) = 1 or Gamma(1/2) = sqrt(pi)
    let (mut g, mut x) = if n % 2 == 0 { (1.0, 1.0) } else { (PI.sqrt(), 0.5) };
    let target = n as f64 / 2.0;
    while x < target {
        g *= x;
        x += 1.0;
    }
    2.0 * PI.powf(target) / g
}

/// `sigma_{n-1} I^(1-p)` with `I = int_r^R rho^(-(n-1)/(p-1)) d rho`.
pub fn radial_p_capacity(spec: &RadialSpec) -> Result<f64> {
    spec.validate()?;
    let alpha = (spec.n as f64 - 1.0) / (spec.p - 1.0);
    let integral = if spec.n as f64 - 1.0 == spec.p - 1.0 {
        (spec.big_r / spec.r).ln()
    } else {
        (spec.big_r.powf(1.0 - alpha) - spec.r.powf(1.0 - alpha)) / (1.0 - alpha)
    };
    Ok(unit_sphere_area(spec.n) * integral.powf(1.0 - spec.p))
}

/// `Ly (b - a)^(1 - p)`: capacity of the slab `x <= a` inside `x < b`.
pub fn strip_capacity(p: f64, a: f64, b: f64, ly: f64) -> Result<f64> {
    if !(p > 1.0) {
        return Err(Error::invalid("p must be > 1"));
    }
    if !(a >= 0.0 && a < b) {
        return Err(Error::invalid(format!("need 0 <= a < b, got a={a} b={b}")));
    }
    if !(ly > 0.0) {
        return Err(Error::invalid("Ly must be positive"));
    }
    Ok(ly * (b - a).powf(1.0 - p))
}

/// Largest `t` with `g(t) = 0` (zero for strictly monotone profiles).
fn dead_radius(g: &impl Fn(f64) -> f64) -> f64 {
    if g(1e-300) > 0.0 {
        return 0.0;
    }
    let mut hi = 1.0;
    while g(hi) == 0.0 {
        hi *= 2.0;
        if hi > 1e300 {
            return f64::INFINITY;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) == 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 * hi {
            break;
        }
    }
    lo
}

/// Solves `g(t) = y` for `y > 0` by bisection.
fn invert(g: &impl Fn(f64) -> f64, y: f64, t0: f64) -> f64 {
    let mut lo = t0;
    let mut hi = t0.max(1.0);
    while g(hi) < y {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..120 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 2e-16 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Composite Simpson rule in `t = ln rho` over `[r, R]` with `m` panels.
fn log_simpson(r: f64, big_r: f64, m: usize, f: impl Fn(f64) -> f64) -> f64 {
    let m = if m % 2 == 1 { m + 1 } else { m.max(2) };
    let (a, b) = (r.ln(), big_r.ln());
    let h = (b - a) / m as f64;
    let mut acc = 0.0;
    for k in 0..=m {
        let t = a + k as f64 * h;
        let rho = t.exp();
        let w = if k == 0 || k == m {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * f(rho) * rho;
    }
    acc * h / 3.0
}

/// Capacity of the annulus `r < |x| < R` for an isotropic flux
/// `a(xi) = g(|xi|) xi / |xi|`, computed from the first integral of the
/// radial equation with `m` quadrature panels.
pub fn radial_numeric(spec: &RadialSpec, flux: &Flux, m: usize) -> Result<f64> {
    spec.validate()?;
    if !flux.is_isotropic() {
        return Err(Error::invalid(format!("{} is not isotropic", flux.label())));
    }
    if m == 0 {
        return Err(Error::invalid("need at least one quadrature panel"));
    }
    let g = |t: f64| flux.radial_profile(t).expect("isotropic");
    let dim = spec.n as f64;
    let (r, big_r) = (spec.r, spec.big_r);
    let t0 = dead_radius(&g);
    if t0 * (big_r - r) >= 1.0 {
        // a profile with |u'| <= t0 carries no flux
        return Ok(0.0);
    }
    let drop = |kappa: f64| log_simpson(r, big_r, m, |rho| invert(&g, kappa / rho.powf(dim - 1.0), t0));

    // bracket kappa: total potential drop is increasing in kappa
    let (mut lo, mut hi) = (1.0, 1.0);
    while drop(lo) > 1.0 {
        lo *= 0.5;
    }
    while drop(hi) < 1.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if drop(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    let kappa = (lo * hi).sqrt();
    let energy = log_simpson(r, big_r, m, |rho| {
        let slope = invert(&g, kappa / rho.powf(dim - 1.0), t0);
        g(slope) * slope * rho.powf(dim - 1.0)
    });
    Ok(unit_sphere_area(spec.n) * energy)
}
