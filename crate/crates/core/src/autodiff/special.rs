//! Digamma, trigamma and log-gamma, accurate enough to drive the
//! variational updates and their exact derivative rules.
//!
//! All three use the same scheme: upward recurrence until the argument
//! clears a threshold, then an asymptotic (Bernoulli-number) tail.

use crate::error::{Error, Result};

/// Recurrence threshold for the digamma/trigamma asymptotic series.
const PSI_ASYMPTOTIC_MIN: f64 = 8.0;
/// Recurrence threshold for the log-gamma Stirling series.
const LGAMMA_ASYMPTOTIC_MIN: f64 = 10.0;

const LN_2PI: f64 = 1.8378770664093453;

/// Digamma Ψ(x) for x > 0.
///
/// Uses Ψ(x) = Ψ(x+1) − 1/x until x ≥ 8, then the asymptotic series with
/// six Bernoulli terms.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::domain("digamma", format!("argument {} must be positive", x)));
    }
    let mut acc = 0.0;
    let mut z = x;
    while z < PSI_ASYMPTOTIC_MIN {
        acc -= 1.0 / z;
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // psi(z) ~ ln z - 1/(2z) - sum B_{2n} / (2n z^{2n})
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0))))));
    Ok(acc + z.ln() - 0.5 * inv - series)
}

/// Trigamma Ψ′(x) for x > 0; the exact derivative rule for the digamma
/// primitive.
pub fn trigamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::domain("trigamma", format!("argument {} must be positive", x)));
    }
    let mut acc = 0.0;
    let mut z = x;
    while z < PSI_ASYMPTOTIC_MIN {
        acc += 1.0 / (z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    // psi'(z) ~ 1/z + 1/(2z^2) + sum B_{2n} / z^{2n+1}
    let series = inv * inv2
        * (1.0 / 6.0
            - inv2
                * (1.0 / 30.0
                    - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * (691.0 / 2730.0))))));
    Ok(acc + inv + 0.5 * inv2 + series)
}

/// Natural log of the gamma function for x > 0.
pub fn ln_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::domain("ln_gamma", format!("argument {} must be positive", x)));
    }
    let mut acc = 0.0;
    let mut z = x;
    while z < LGAMMA_ASYMPTOTIC_MIN {
        acc -= z.ln();
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 * (1.0 / 1188.0)))));
    Ok(acc + (z - 0.5) * z.ln() - z + 0.5 * LN_2PI + series)
}
