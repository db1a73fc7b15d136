//! Monotone flux maps `a(x, xi)`.
//!
//! Every flux carries its growth exponent `p` and the declared constants
//! `(c1, c2, b1, b2)` of the structure conditions
//!
//! ```text
//! a(x, 0) = 0
//! (a(x, xi) - a(x, eta)) . (xi - eta) >= 0
//! a(x, xi) . xi >= c1 |xi|^p - b1
//! |a(x, xi)| <= c2 |xi|^(p-1) + b2
//! ```
//!
//! `b1` and `b2` are constants. [`check_conditions`] verifies the declared
//! constants against random samples.

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

/// Declared structure constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluxConstants {
    pub c1: f64,
    pub c2: f64,
    pub b1: f64,
    pub b2: f64,
}

impl FluxConstants {
    pub const UNIT: FluxConstants = FluxConstants { c1: 1.0, c2: 1.0, b1: 0.0, b2: 0.0 };
}

/// Smooth spatial weight `w(x, y) = w_min + (w_max - w_min) (1 + sin(2 pi f x) sin(2 pi f y)) / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightField {
    pub w_min: f64,
    pub w_max: f64,
    pub freq: f64,
}

impl WeightField {
    pub fn at(&self, x: Vec2) -> f64 {
        let tau = std::f64::consts::TAU * self.freq;
        let bump = 0.5 * (1.0 + (tau * x.x).sin() * (tau * x.y).sin());
        self.w_min + (self.w_max - self.w_min) * bump
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FluxKind {
    /// `|xi|^(p-2) xi`
    PLaplacian,
    /// `w(x) |xi|^(p-2) xi`
    WeightedPLaplacian(WeightField),
    /// `|xi|_B^(p-2) B xi` with `B = diag(alpha, beta)`; gradient of `|xi|_B^p / p`.
    AnisotropicP { alpha: f64, beta: f64 },
    /// `M xi`, `p = 2`. A skew part makes the operator non-variational.
    LinearMatrix(Mat2),
    /// `(|xi| - rho0)_+^(p-1) xi / |xi|`; monotone, not strictly.
    FlatCoreP { rho0: f64 },
    /// `s a(x, s xi)`
    STransformed { inner: Box<Flux>, s: f64 },
    /// `sum_k w_k a_k(x, xi)`
    WeightedSum(Vec<(Flux, f64)>),
    /// `-xi`. Test fixture that violates monotonicity.
    AdversarialNegation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Flux {
    kind: FluxKind,
    p: f64,
    consts: FluxConstants,
}

fn check_p(p: f64) -> Result<()> {
    if p.is_finite() && p > 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("growth exponent p must be > 1, got {p}")))
    }
}

/// Smoothed positive part `(t + sqrt(t^2 + eps^2)) / 2` and its derivative.
fn smooth_plus(t: f64, eps: f64) -> (f64, f64) {
    if eps == 0.0 {
        let d = if t > 0.0 {
            1.0
        } else if t < 0.0 {
            0.0
        } else {
            0.5
        };
        (t.max(0.0), d)
    } else {
        let root = t.hypot(eps);
        (0.5 * (t + root), 0.5 * (1.0 + t / root))
    }
}

/// Jacobian of an isotropic flux `h(|xi|) xi / |xi|` given `h/rho` and `h'`
/// evaluated at the regularized radius `rho_e`.
fn isotropic_jacobian(xi: Vec2, rho_e: f64, h_over_rho: f64, h_prime: f64) -> Mat2 {
    if rho_e == 0.0 {
        return Mat2::identity() * h_prime;
    }
    let outer = xi * xi.transpose() / (rho_e * rho_e);
    (Mat2::identity() - outer) * h_over_rho + outer * h_prime
}

impl Flux {
    pub fn p_laplacian(p: f64) -> Result<Self> {
        check_p(p)?;
        Ok(Flux { kind: FluxKind::PLaplacian, p, consts: FluxConstants::UNIT })
    }

    pub fn weighted_p_laplacian(p: f64, w_min: f64, w_max: f64, freq: f64) -> Result<Self> {
        check_p(p)?;
        if !(w_min > 0.0 && w_min <= w_max && w_max.is_finite() && freq.is_finite()) {
            return Err(Error::invalid("weight requires 0 < w_min <= w_max"));
        }
        Ok(Flux {
            kind: FluxKind::WeightedPLaplacian(WeightField { w_min, w_max, freq }),
            p,
            consts: FluxConstants { c1: w_min, c2: w_max, b1: 0.0, b2: 0.0 },
        })
    }

    pub fn anisotropic_p(p: f64, alpha: f64, beta: f64) -> Result<Self> {
        check_p(p)?;
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::invalid("axis weights must be positive"));
        }
        let (lo, hi) = (alpha.min(beta), alpha.max(beta));
        Ok(Flux {
            kind: FluxKind::AnisotropicP { alpha, beta },
            p,
            consts: FluxConstants {
                c1: lo.powf(0.5 * p),
                c2: hi.powf(0.5 * p),
                b1: 0.0,
                b2: 0.0,
            },
        })
    }

    /// Linear flux `xi -> M xi`; requires a positive-definite symmetric part.
    pub fn linear_matrix(m: Mat2) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("matrix entries must be finite"));
        }
        let sym = (m + m.transpose()) * 0.5;
        let c1 = sym.symmetric_eigenvalues().min();
        if c1 <= 0.0 {
            return Err(Error::invalid("symmetric part of M must be positive definite"));
        }
        let c2 = m.singular_values().max();
        Ok(Flux { kind: FluxKind::LinearMatrix(m), p: 2.0, consts: FluxConstants { c1, c2, b1: 0.0, b2: 0.0 } })
    }

    /// Flat-core flux with the default coercivity constant `c1 = 1/2`.
    pub fn flat_core(p: f64, rho0: f64) -> Result<Self> {
        Self::flat_core_with_c1(p, rho0, 0.5)
    }

    pub fn flat_core_with_c1(p: f64, rho0: f64, c1: f64) -> Result<Self> {
        check_p(p)?;
        if !(rho0 >= 0.0 && rho0.is_finite()) {
            return Err(Error::invalid("core radius must be >= 0"));
        }
        if !(c1 > 0.0 && c1 < 1.0) {
            return Err(Error::invalid("flat-core coercivity constant must lie in (0, 1)"));
        }
        let b1 = flat_core_defect(p, rho0, c1);
        Ok(Flux { kind: FluxKind::FlatCoreP { rho0 }, p, consts: FluxConstants { c1, c2: 1.0, b1, b2: 0.0 } })
    }

    pub fn adversarial_negation() -> Self {
        Flux { kind: FluxKind::AdversarialNegation, p: 2.0, consts: FluxConstants::UNIT }
    }

    pub fn kind(&self) -> &FluxKind {
        &self.kind
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Conjugate exponent `q = p / (p - 1)`.
    pub fn q(&self) -> f64 {
        self.p / (self.p - 1.0)
    }

    pub fn constants(&self) -> FluxConstants {
        self.consts
    }

    /// An analytic Jacobian is available for every kind (away from the
    /// singular sets, where the regularized form is used).
    pub fn differentiable(&self) -> bool {
        true
    }

    /// True when `a(x, xi) = g(|xi|) xi / |xi|` with no `x` dependence.
    pub fn is_isotropic(&self) -> bool {
        match &self.kind {
            FluxKind::PLaplacian | FluxKind::FlatCoreP { .. } => true,
            FluxKind::LinearMatrix(m) => (m - Mat2::identity() * m[(0, 0)]).norm() == 0.0,
            FluxKind::STransformed { inner, .. } => inner.is_isotropic(),
            FluxKind::WeightedSum(parts) => parts.iter().all(|(f, _)| f.is_isotropic()),
            _ => false,
        }
    }

    /// Radial profile `g(t) = |a(t e)|` for isotropic fluxes.
    pub fn radial_profile(&self, t: f64) -> Option<f64> {
        if !self.is_isotropic() {
            return None;
        }
        Some(self.eval(Vec2::zeros(), Vec2::new(t, 0.0)).x)
    }

    /// Evaluates `a(x, xi)` without input validation.
    pub fn eval(&self, x: Vec2, xi: Vec2) -> Vec2 {
        let p = self.p;
        match &self.kind {
            FluxKind::PLaplacian => {
                let rho = xi.norm();
                if rho == 0.0 {
                    Vec2::zeros()
                } else {
                    xi * rho.powf(p - 2.0)
                }
            }
            FluxKind::WeightedPLaplacian(w) => {
                let rho = xi.norm();
                if rho == 0.0 {
                    Vec2::zeros()
                } else {
                    xi * (w.at(x) * rho.powf(p - 2.0))
                }
            }
            FluxKind::AnisotropicP { alpha, beta } => {
                let bxi = Vec2::new(alpha * xi.x, beta * xi.y);
                let nb = xi.dot(&bxi).sqrt();
                if nb == 0.0 {
                    Vec2::zeros()
                } else {
                    bxi * nb.powf(p - 2.0)
                }
            }
            FluxKind::LinearMatrix(m) => m * xi,
            FluxKind::FlatCoreP { rho0 } => {
                let rho = xi.norm();
                if rho <= *rho0 || rho == 0.0 {
                    Vec2::zeros()
                } else {
                    xi * ((rho - rho0).powf(p - 1.0) / rho)
                }
            }
            FluxKind::STransformed { inner, s } => inner.eval(x, xi * *s) * *s,
            FluxKind::WeightedSum(parts) => {
                parts.iter().fold(Vec2::zeros(), |acc, (f, w)| acc + f.eval(x, xi) * *w)
            }
            FluxKind::AdversarialNegation => -xi,
        }
    }

    /// `eval` with validation of the inputs.
    pub fn eval_flux(&self, x: Vec2, xi: Vec2) -> Result<Vec2> {
        if !(xi.x.is_finite() && xi.y.is_finite()) {
            return Err(Error::invalid("non-finite gradient"));
        }
        if !(x.x.is_finite() && x.y.is_finite()) {
            return Err(Error::invalid("non-finite point"));
        }
        Ok(self.eval(x, xi))
    }

    /// `d a / d xi` with `|xi|` replaced by `sqrt(|xi|^2 + eps^2)` in the
    /// derivative formulas. `eps = 0` gives the exact Jacobian off the
    /// singular set.
    pub fn jacobian(&self, x: Vec2, xi: Vec2, eps: f64) -> Mat2 {
        let p = self.p;
        match &self.kind {
            FluxKind::PLaplacian => {
                let rho_e = xi.norm().hypot(eps);
                if rho_e == 0.0 {
                    return if p == 2.0 { Mat2::identity() } else { Mat2::zeros() };
                }
                let base = rho_e.powf(p - 2.0);
                isotropic_jacobian(xi, rho_e, base, (p - 1.0) * base)
            }
            FluxKind::WeightedPLaplacian(w) => {
                let plain = Flux { kind: FluxKind::PLaplacian, p, consts: self.consts };
                plain.jacobian(x, xi, eps) * w.at(x)
            }
            FluxKind::AnisotropicP { alpha, beta } => {
                let b = Mat2::new(*alpha, 0.0, 0.0, *beta);
                let bxi = b * xi;
                let nb_e = (xi.dot(&bxi) + eps * eps).sqrt();
                if nb_e == 0.0 {
                    return if p == 2.0 { b } else { Mat2::zeros() };
                }
                b * nb_e.powf(p - 2.0) + bxi * bxi.transpose() * ((p - 2.0) * nb_e.powf(p - 4.0))
            }
            FluxKind::LinearMatrix(m) => *m,
            FluxKind::FlatCoreP { rho0 } => {
                let rho_e = xi.norm().hypot(eps);
                if rho_e == 0.0 {
                    return Mat2::zeros();
                }
                let (plus, dplus) = smooth_plus(rho_e - rho0, eps);
                let h = plus.powf(p - 1.0);
                let h_prime = if dplus == 0.0 { 0.0 } else { (p - 1.0) * plus.powf(p - 2.0) * dplus };
                isotropic_jacobian(xi, rho_e, h / rho_e, h_prime)
            }
            FluxKind::STransformed { inner, s } => inner.jacobian(x, xi * *s, eps) * (s * s),
            FluxKind::WeightedSum(parts) => {
                parts.iter().fold(Mat2::zeros(), |acc, (f, w)| acc + f.jacobian(x, xi, eps) * *w)
            }
            FluxKind::AdversarialNegation => -Mat2::identity(),
        }
    }

    pub fn to_spec(&self) -> FluxSpec {
        let mut params = FluxParams::default();
        let kind = match &self.kind {
            FluxKind::PLaplacian => FluxKindName::PLaplacian,
            FluxKind::WeightedPLaplacian(w) => {
                params.w_min = Some(w.w_min);
                params.w_max = Some(w.w_max);
                params.freq = Some(w.freq);
                FluxKindName::WeightedPLaplacian
            }
            FluxKind::AnisotropicP { alpha, beta } => {
                params.alpha = Some(*alpha);
                params.beta = Some(*beta);
                FluxKindName::AnisotropicP
            }
            FluxKind::LinearMatrix(m) => {
                params.matrix = Some([[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]);
                FluxKindName::LinearMatrix
            }
            FluxKind::FlatCoreP { rho0 } => {
                params.rho0 = Some(*rho0);
                params.c1 = Some(self.consts.c1);
                FluxKindName::FlatCoreP
            }
            FluxKind::STransformed { inner, s } => {
                params.s = Some(*s);
                params.inner = Some(Box::new(inner.to_spec()));
                FluxKindName::STransformed
            }
            FluxKind::WeightedSum(parts) => {
                params.components = Some(
                    parts.iter().map(|(f, w)| WeightedComponent { flux: f.to_spec(), weight: *w }).collect(),
                );
                FluxKindName::WeightedSum
            }
            FluxKind::AdversarialNegation => FluxKindName::AdversarialNegation,
        };
        FluxSpec { kind, p: self.p, params }
    }

    /// Short human-readable label, e.g. `p_laplacian(p=3)`.
    pub fn label(&self) -> String {
        let name = match &self.kind {
            FluxKind::PLaplacian => "p_laplacian",
            FluxKind::WeightedPLaplacian(_) => "weighted_p_laplacian",
            FluxKind::AnisotropicP { .. } => "anisotropic_p",
            FluxKind::LinearMatrix(_) => "linear_matrix",
            FluxKind::FlatCoreP { .. } => "flat_core_p",
            FluxKind::STransformed { .. } => "s_transformed",
            FluxKind::WeightedSum(_) => "weighted_sum",
            FluxKind::AdversarialNegation => "adversarial_negation",
        };
        match &self.kind {
            FluxKind::FlatCoreP { rho0 } => format!("{name}(p={}, rho0={rho0})", self.p),
            _ => format!("{name}(p={})", self.p),
        }
    }
}

/// `sup_{rho >= 0} c1 rho^p - (rho - rho0)_+^(p-1) rho`, the smallest valid `b1`
/// for the flat-core flux, inflated by a relative `1e-9`.
fn flat_core_defect(p: f64, rho0: f64, c1: f64) -> f64 {
    if rho0 == 0.0 {
        return 0.0;
    }
    let f = |rho: f64| c1 * rho.powf(p) - (rho - rho0).max(0.0).powf(p - 1.0) * rho;
    // beyond rho_hi the defect is negative
    let rho_hi = rho0 / (1.0 - c1.powf(1.0 / (p - 1.0)));
    let n = 4000;
    let step = (rho_hi - rho0) / n as f64;
    let (mut best_k, mut best) = (0usize, f(rho0));
    for k in 1..=n {
        let v = f(rho0 + k as f64 * step);
        if v > best {
            best = v;
            best_k = k;
        }
    }
    // golden-section refinement on the bracketing cells
    let mut lo = rho0 + best_k.saturating_sub(1) as f64 * step;
    let mut hi = (rho0 + (best_k + 1) as f64 * step).min(rho_hi);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..200 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if f(a) > f(b) {
            hi = b;
        } else {
            lo = a;
        }
        best = best.max(f(a)).max(f(b));
    }
    best.max(0.0) * (1.0 + 1e-9) + 1e-15
}

/// `a_s(x, xi) = s a(x, s xi)` with the rescaled constants
/// `c1 -> |s|^p c1`, `c2 -> |s|^p c2`, `b2 -> |s| b2`, `b1` unchanged.
pub fn s_transform(flux: &Flux, s: f64) -> Result<Flux> {
    if s == 0.0 || !s.is_finite() {
        return Err(Error::invalid(format!("s_transform requires a finite s != 0, got {s}")));
    }
    let sp = s.abs().powf(flux.p);
    let c = flux.consts;
    Ok(Flux {
        kind: FluxKind::STransformed { inner: Box::new(flux.clone()), s },
        p: flux.p,
        consts: FluxConstants { c1: sp * c.c1, c2: sp * c.c2, b1: c.b1, b2: s.abs() * c.b2 },
    })
}

/// Nonnegative combination `w1 a1 + w2 a2`.
pub fn combine(f1: &Flux, f2: &Flux, w1: f64, w2: f64) -> Result<Flux> {
    weighted_sum(vec![(f1.clone(), w1), (f2.clone(), w2)])
}

fn weighted_sum(parts: Vec<(Flux, f64)>) -> Result<Flux> {
    let Some(first) = parts.first() else {
        return Err(Error::invalid("weighted sum needs at least one component"));
    };
    let p = first.0.p;
    if parts.iter().any(|(f, _)| f.p != p) {
        return Err(Error::invalid("combined fluxes must share the same p"));
    }
    if parts.iter().any(|(_, w)| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid("combination weights must be finite and >= 0"));
    }
    let c1 = parts.iter().map(|(f, w)| w * f.consts.c1).fold(0.0, f64::max);
    if c1 <= 0.0 {
        return Err(Error::invalid("at least one weight must be positive"));
    }
    let sum = |g: fn(&FluxConstants) -> f64| parts.iter().map(|(f, w)| w * g(&f.consts)).sum::<f64>();
    let consts = FluxConstants { c1, c2: sum(|c| c.c2), b1: sum(|c| c.b1), b2: sum(|c| c.b2) };
    Ok(Flux { kind: FluxKind::WeightedSum(parts), p, consts })
}

// ---------------------------------------------------------------------------
// JSON description

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FluxKindName {
    PLaplacian,
    WeightedPLaplacian,
    AnisotropicP,
    LinearMatrix,
    FlatCoreP,
    STransformed,
    WeightedSum,
    AdversarialNegation,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluxParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<[[f64; 2]; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner: Option<Box<FluxSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<WeightedComponent>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedComponent {
    pub flux: FluxSpec,
    pub weight: f64,
}

/// `{"kind": ..., "p": ..., "params": {...}}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluxSpec {
    pub kind: FluxKindName,
    pub p: f64,
    #[serde(default)]
    pub params: FluxParams,
}

impl FluxSpec {
    pub fn build(&self) -> Result<Flux> {
        let pr = &self.params;
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::invalid(format!("{:?} flux needs params.{name}", self.kind)))
        };
        match self.kind {
            FluxKindName::PLaplacian => Flux::p_laplacian(self.p),
            FluxKindName::WeightedPLaplacian => Flux::weighted_p_laplacian(
                self.p,
                need(pr.w_min, "w_min")?,
                need(pr.w_max, "w_max")?,
                pr.freq.unwrap_or(1.0),
            ),
            FluxKindName::AnisotropicP => {
                Flux::anisotropic_p(self.p, need(pr.alpha, "alpha")?, need(pr.beta, "beta")?)
            }
            FluxKindName::LinearMatrix => {
                if self.p != 2.0 {
                    return Err(Error::invalid("linear_matrix requires p = 2"));
                }
                let m = pr.matrix.ok_or_else(|| Error::invalid("linear_matrix needs params.matrix"))?;
                Flux::linear_matrix(Mat2::new(m[0][0], m[0][1], m[1][0], m[1][1]))
            }
            FluxKindName::FlatCoreP => {
                Flux::flat_core_with_c1(self.p, need(pr.rho0, "rho0")?, pr.c1.unwrap_or(0.5))
            }
            FluxKindName::STransformed => {
                let inner = pr.inner.as_ref().ok_or_else(|| Error::invalid("s_transformed needs params.inner"))?;
                let inner = inner.build()?;
                if inner.p != self.p {
                    return Err(Error::invalid("s_transformed p must match inner flux"));
                }
                s_transform(&inner, need(pr.s, "s")?)
            }
            FluxKindName::WeightedSum => {
                let comps = pr
                    .components
                    .as_ref()
                    .ok_or_else(|| Error::invalid("weighted_sum needs params.components"))?;
                let parts = comps
                    .iter()
                    .map(|c| Ok((c.flux.build()?, c.weight)))
                    .collect::<Result<Vec<_>>>()?;
                if parts.iter().any(|(f, _)| f.p != self.p) {
                    return Err(Error::invalid("weighted_sum components must share p"));
                }
                weighted_sum(parts)
            }
            FluxKindName::AdversarialNegation => {
                if self.p != 2.0 {
                    return Err(Error::invalid("adversarial_negation is defined for p = 2"));
                }
                Ok(Flux::adversarial_negation())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Randomized structure-condition checker

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub x: [f64; 2],
    pub xi: [f64; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub name: String,
    pub passed: bool,
    /// Raw margin at the witness (negative means violated).
    pub worst_margin: f64,
    /// `worst_margin / scale` with `scale = 1 + |xi|^p + |eta|^p`.
    pub worst_scaled_margin: f64,
    pub witness: Witness,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub flux: FluxSpec,
    pub constants: FluxConstants,
    pub n_samples: usize,
    pub xi_radius: f64,
    pub seed: u64,
    pub conditions: Vec<ConditionResult>,
    pub all_passed: bool,
}

impl ConditionReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.name == name)
    }
}

/// Relative acceptance threshold for the checker.
pub const CONDITION_TOL: f64 = 1e-12;

struct Tracker {
    name: &'static str,
    best: Option<(f64, f64, Witness)>,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Tracker { name, best: None }
    }

    fn record(&mut self, margin: f64, scale: f64, witness: impl FnOnce() -> Witness) {
        let scaled = margin / scale;
        let worse = match &self.best {
            None => true,
            Some((_, s, _)) => scaled < *s || scaled.is_nan(),
        };
        if worse {
            self.best = Some((margin, scaled, witness()));
        }
    }

    fn finish(self) -> ConditionResult {
        let (worst_margin, worst_scaled_margin, witness) = self.best.expect("at least one sample");
        ConditionResult {
            name: self.name.to_string(),
            passed: worst_scaled_margin >= -CONDITION_TOL,
            worst_margin,
            worst_scaled_margin,
            witness,
        }
    }
}

fn sample_ball(rng: &mut ChaCha8Rng, radius: f64) -> Vec2 {
    let theta = rng.gen::<f64>() * std::f64::consts::TAU;
    let r = radius * rng.gen::<f64>().sqrt();
    Vec2::new(r * theta.cos(), r * theta.sin())
}

/// Samples `x` in the unit square and `xi, eta` in the ball of radius
/// `xi_radius`, and checks the four structure conditions against the
/// flux's declared constants.
pub fn check_conditions(flux: &Flux, n_samples: usize, xi_radius: f64, seed: u64) -> ConditionReport {
    check_conditions_on(flux, n_samples, xi_radius, seed, 1.0)
}

/// [`check_conditions`] with `x` drawn from `[0, side]^2`.
pub fn check_conditions_on(
    flux: &Flux,
    n_samples: usize,
    xi_radius: f64,
    seed: u64,
    side: f64,
) -> ConditionReport {
    let n_samples = n_samples.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let FluxConstants { c1, c2, b1, b2 } = flux.consts;
    let p = flux.p;
    let mut zero = Tracker::new("zero");
    let mut mono = Tracker::new("monotone");
    let mut coerc = Tracker::new("coercive");
    let mut growth = Tracker::new("growth");
    for _ in 0..n_samples {
        let x = Vec2::new(rng.gen::<f64>() * side, rng.gen::<f64>() * side);
        let xi = sample_ball(&mut rng, xi_radius);
        let eta = sample_ball(&mut rng, xi_radius);
        let a0 = flux.eval(x, Vec2::zeros());
        let axi = flux.eval(x, xi);
        let aeta = flux.eval(x, eta);
        let w = |eta: Option<Vec2>| Witness { x: [x.x, x.y], xi: [xi.x, xi.y], eta: eta.map(|e| [e.x, e.y]) };
        let nxi = xi.norm();
        let scale1 = 1.0 + nxi.powf(p);
        let scale2 = scale1 + eta.norm().powf(p);

        zero.record(-a0.norm(), 1.0, || Witness { x: [x.x, x.y], xi: [0.0, 0.0], eta: None });
        mono.record((axi - aeta).dot(&(xi - eta)), scale2, || w(Some(eta)));
        coerc.record(axi.dot(&xi) - (c1 * nxi.powf(p) - b1), scale1, || w(None));
        growth.record(c2 * nxi.powf(p - 1.0) + b2 - axi.norm(), scale1, || w(None));
    }
    let conditions: Vec<_> = [zero, mono, coerc, growth].into_iter().map(Tracker::finish).collect();
    let all_passed = conditions.iter().all(|c| c.passed);
    ConditionReport {
        flux: flux.to_spec(),
        constants: flux.consts,
        n_samples,
        xi_radius,
        seed,
        conditions,
        all_passed,
    }
}

/// The flux family exercised by the suites: p-Laplacians at p = 1.5, 2, 3,
/// a weighted and an anisotropic flux, the skew linear flux, and a
/// flat-core flux.
pub fn shipped_family() -> Vec<Flux> {
    vec![
        Flux::p_laplacian(1.5).unwrap(),
        Flux::p_laplacian(2.0).unwrap(),
        Flux::p_laplacian(3.0).unwrap(),
        Flux::weighted_p_laplacian(2.0, 1.0, 2.0, 1.0).unwrap(),
        Flux::anisotropic_p(3.0, 1.0, 2.0).unwrap(),
        skew_example(),
        Flux::flat_core(3.0, 1.0).unwrap(),
    ]
}

/// `M = [[1, 0.5], [-0.5, 1]]`.
pub fn skew_example() -> Flux {
    Flux::linear_matrix(Mat2::new(1.0, 0.5, -0.5, 1.0)).unwrap()
}
