//! Exponential-family definitions for the supported generalized linear
//! models.
//!
//! A family fixes the functions (a, b, c) of the density
//! `exp{(yψ − b(ψ))/a(φ) + c(y;φ)}` together with the canonical link `g`,
//! so that `g(b′(ψ)) = η` is the linear predictor. Both supported families
//! use their canonical link, which makes `ψ = η` and collapses the weight
//! `b″(ψ)·g′(b′(ψ))` to one; the general expressions are still evaluated
//! through these functions so the formulas match their definitions.

use serde::{Deserialize, Serialize};

use crate::error::{GmetaError, Result};

/// Numerically stable logistic function σ(x) = 1/(1+e^{−x}).
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Supported exponential families, each with its canonical link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GlmFamily {
    /// Bernoulli outcome with logit link; dispersion fixed at one.
    BernoulliLogit,
    /// Gaussian outcome with identity link; dispersion `a(φ) = φ` free.
    GaussianIdentity,
}

impl GlmFamily {
    /// Parse the on-disk family name.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "bernoulli-logit" => Ok(Self::BernoulliLogit),
            "gaussian-identity" => Ok(Self::GaussianIdentity),
            other => Err(GmetaError::UnsupportedFamily(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::BernoulliLogit => "bernoulli-logit",
            Self::GaussianIdentity => "gaussian-identity",
        }
    }

    /// a(φ).
    pub fn a(&self, phi: f64) -> f64 {
        match self {
            Self::BernoulliLogit => 1.0,
            Self::GaussianIdentity => phi,
        }
    }

    /// a′(φ).
    pub fn a_prime(&self, _phi: f64) -> f64 {
        match self {
            Self::BernoulliLogit => 0.0,
            Self::GaussianIdentity => 1.0,
        }
    }

    /// b(ψ).
    pub fn b(&self, psi: f64) -> f64 {
        match self {
            Self::BernoulliLogit => softplus(psi),
            Self::GaussianIdentity => 0.5 * psi * psi,
        }
    }

    /// b′(ψ) = E(Y | ψ).
    pub fn b_prime(&self, psi: f64) -> f64 {
        match self {
            Self::BernoulliLogit => sigmoid(psi),
            Self::GaussianIdentity => psi,
        }
    }

    /// b″(ψ), the variance function; strictly positive.
    pub fn b_double_prime(&self, psi: f64) -> f64 {
        match self {
            Self::BernoulliLogit => {
                let p = sigmoid(psi);
                p * (1.0 - p)
            }
            Self::GaussianIdentity => 1.0,
        }
    }

    /// c(y; φ).
    pub fn c(&self, y: f64, phi: f64) -> f64 {
        match self {
            Self::BernoulliLogit => 0.0,
            Self::GaussianIdentity => {
                -0.5 * y * y / phi - 0.5 * (2.0 * std::f64::consts::PI * phi).ln()
            }
        }
    }

    /// ∂c/∂φ.
    pub fn dc_dphi(&self, y: f64, phi: f64) -> f64 {
        match self {
            Self::BernoulliLogit => 0.0,
            Self::GaussianIdentity => 0.5 * y * y / (phi * phi) - 0.5 / phi,
        }
    }

    /// Canonical link g(μ).
    pub fn link(&self, mu: f64) -> f64 {
        match self {
            Self::BernoulliLogit => (mu / (1.0 - mu)).ln(),
            Self::GaussianIdentity => mu,
        }
    }

    /// Inverse link g⁻¹(η).
    pub fn inv_link(&self, eta: f64) -> f64 {
        match self {
            Self::BernoulliLogit => sigmoid(eta),
            Self::GaussianIdentity => eta,
        }
    }

    /// Link derivative g′(μ).
    pub fn link_deriv(&self, mu: f64) -> f64 {
        match self {
            Self::BernoulliLogit => 1.0 / (mu * (1.0 - mu)),
            Self::GaussianIdentity => 1.0,
        }
    }

    /// dμ/dη = (g⁻¹)′(η).
    pub fn mu_eta(&self, eta: f64) -> f64 {
        match self {
            Self::BernoulliLogit => {
                let p = sigmoid(eta);
                p * (1.0 - p)
            }
            Self::GaussianIdentity => 1.0,
        }
    }

    /// d²μ/dη² = (g⁻¹)″(η).
    pub fn mu_eta_deriv(&self, eta: f64) -> f64 {
        match self {
            Self::BernoulliLogit => {
                let p = sigmoid(eta);
                p * (1.0 - p) * (1.0 - 2.0 * p)
            }
            Self::GaussianIdentity => 0.0,
        }
    }

    /// Whether the dispersion is fixed by the family.
    pub fn dispersion_known(&self) -> bool {
        matches!(self, Self::BernoulliLogit)
    }

    /// The fixed dispersion value, when there is one.
    pub fn known_dispersion(&self) -> Option<f64> {
        match self {
            Self::BernoulliLogit => Some(1.0),
            Self::GaussianIdentity => None,
        }
    }

    /// Whether `y` lies in the family support.
    pub fn in_support(&self, y: f64) -> bool {
        match self {
            Self::BernoulliLogit => y == 0.0 || y == 1.0,
            Self::GaussianIdentity => y.is_finite(),
        }
    }

    /// The scaled-residual denominator `a(φ)·b″(ψ)·g′(b′(ψ))` that converts
    /// a mean difference into the score scale. Equals `a(φ)` under the
    /// canonical link.
    pub fn score_denominator(&self, phi: f64, psi: f64) -> f64 {
        self.a(phi) * self.b_double_prime(psi) * self.link_deriv(self.b_prime(psi))
    }
}
