//! Exactly-solvable univariate Gamma maximum-likelihood testbed: analytic
//! Fisher metric, metric partials, Levi-Civita connection, and the four
//! reparameterizations used in the invariance experiments.
//!
//! All charts are computed by exact pullback from the base (shape, rate)
//! chart, so the transformation laws are exercised directly rather than
//! re-derived per chart.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma as GammaDist};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::geometry::{
    christoffel_from_metric, ChristoffelTensor, MetricMatrix, MetricPartials, ParamVector,
};
use crate::special::{digamma, ln_gamma, tetragamma, trigamma};

/// Parameters are rejected (not clamped) below this floor; clamping would
/// silently break invariance comparisons.
pub const DOMAIN_FLOOR: f64 = 1e-8;

/// Shape and rate of a Gamma distribution, both positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaParams {
    pub a: f64,
    pub b: f64,
}

impl GammaParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > DOMAIN_FLOOR) || !(b > DOMAIN_FLOOR) {
            return Err(Error::DomainError(format!(
                "Gamma params must exceed {DOMAIN_FLOOR}: got ({a}, {b})"
            )));
        }
        Ok(GammaParams { a, b })
    }
}

/// The four coordinate systems of the invariance experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// base chart (alpha, beta)
    Original,
    /// beta = 1 / beta'
    InverseRate,
    /// beta = (beta')^3
    CubeRate,
    /// alpha = (alpha')^2, beta = (beta')^2
    SquareBoth,
}

impl Parameterization {
    pub const ALL: [Parameterization; 4] = [
        Parameterization::Original,
        Parameterization::InverseRate,
        Parameterization::CubeRate,
        Parameterization::SquareBoth,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Parameterization::Original => "original",
            Parameterization::InverseRate => "inverse_rate",
            Parameterization::CubeRate => "cube_rate",
            Parameterization::SquareBoth => "square_both",
        }
    }

    /// Map chart coordinates to base (shape, rate).
    pub fn to_base(&self, p: &ParamVector) -> Result<GammaParams> {
        let c = coords2(p)?;
        let (a, b) = match self {
            Parameterization::Original => (c[0], c[1]),
            Parameterization::InverseRate => (c[0], 1.0 / c[1]),
            Parameterization::CubeRate => (c[0], c[1] * c[1] * c[1]),
            Parameterization::SquareBoth => (c[0] * c[0], c[1] * c[1]),
        };
        GammaParams::new(a, b)
    }

    /// Map base (shape, rate) to chart coordinates; SquareBoth takes the
    /// positive root.
    pub fn from_base(&self, params: GammaParams) -> ParamVector {
        let (a, b) = (params.a, params.b);
        let c = match self {
            Parameterization::Original => [a, b],
            Parameterization::InverseRate => [a, 1.0 / b],
            Parameterization::CubeRate => [a, b.cbrt()],
            Parameterization::SquareBoth => [a.sqrt(), b.sqrt()],
        };
        ParamVector(c.to_vec())
    }

    /// Diagonal Jacobian d(base)/d(chart) at chart point `p`.
    fn jacobian(&self, p: &ParamVector) -> Result<[f64; 2]> {
        let c = coords2(p)?;
        Ok(match self {
            Parameterization::Original => [1.0, 1.0],
            Parameterization::InverseRate => [1.0, -1.0 / (c[1] * c[1])],
            Parameterization::CubeRate => [1.0, 3.0 * c[1] * c[1]],
            Parameterization::SquareBoth => [2.0 * c[0], 2.0 * c[1]],
        })
    }

    /// Second derivatives d^2(base_i)/d(chart_i)^2 (the chart maps are
    /// componentwise, so mixed second derivatives vanish).
    fn jacobian2(&self, p: &ParamVector) -> Result<[f64; 2]> {
        let c = coords2(p)?;
        Ok(match self {
            Parameterization::Original => [0.0, 0.0],
            Parameterization::InverseRate => [0.0, 2.0 / (c[1] * c[1] * c[1])],
            Parameterization::CubeRate => [0.0, 6.0 * c[1]],
            Parameterization::SquareBoth => [2.0, 2.0],
        })
    }
}

fn coords2(p: &ParamVector) -> Result<[f64; 2]> {
    let c = p.coords();
    if c.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "Gamma chart expects 2 coordinates, got {}",
            c.len()
        )));
    }
    Ok([c[0], c[1]])
}

/// Convert a point between charts. Round trips are exact to relative 1e-12.
pub fn reparam(p: &ParamVector, from: Parameterization, to: Parameterization) -> Result<ParamVector> {
    Ok(to.from_base(from.to_base(p)?))
}

/// Synthetic dataset drawn from a Gamma distribution, with cached moments.
#[derive(Debug, Clone)]
pub struct GammaDataset {
    pub samples: Vec<f64>,
    pub seed: u64,
    mean_x: f64,
    mean_log_x: f64,
}

impl GammaDataset {
    pub fn from_samples(samples: Vec<f64>, seed: u64) -> Result<Self> {
        if samples.is_empty() || samples.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::DomainError(
                "Gamma dataset requires non-empty positive samples".into(),
            ));
        }
        // fixed left-to-right summation for bit-reproducibility
        let mut sum_x = 0.0;
        let mut sum_log = 0.0;
        for x in &samples {
            sum_x += x;
            sum_log += x.ln();
        }
        let n = samples.len() as f64;
        Ok(GammaDataset {
            samples,
            seed,
            mean_x: sum_x / n,
            mean_log_x: sum_log / n,
        })
    }

    pub fn mean_x(&self) -> f64 {
        self.mean_x
    }

    pub fn mean_log_x(&self) -> f64 {
        self.mean_log_x
    }

    /// Single-column CSV with header `x`, 17 significant digits, LF endings.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"x\n")?;
        for x in &self.samples {
            writeln!(w, "{x:.16e}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, seed: u64) -> Result<Self> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "x" => {}
            _ => return Err(Error::Config("expected CSV header 'x'".into())),
        }
        let mut samples = Vec::new();
        for line in lines {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let v: f64 = t
                .parse()
                .map_err(|e| Error::Config(format!("bad sample '{t}': {e}")))?;
            samples.push(v);
        }
        GammaDataset::from_samples(samples, seed)
    }
}

/// Draw `n` samples from Gamma(shape, rate); deterministic for a fixed seed.
pub fn gamma_sample(params: GammaParams, n: usize, seed: u64) -> Result<GammaDataset> {
    if n == 0 {
        return Err(Error::Config("gamma_sample requires n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = GammaDist::new(params.a, 1.0 / params.b)
        .map_err(|e| Error::DomainError(format!("gamma sampler: {e}")))?;
    let samples: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
    GammaDataset::from_samples(samples, seed)
}

/// Mean negative log-likelihood of the dataset under the chart point.
pub fn gamma_nll(p: &ParamVector, chart: Parameterization, data: &GammaDataset) -> Result<f64> {
    let GammaParams { a, b } = chart.to_base(p)?;
    Ok(-(a * b.ln() - ln_gamma(a) + (a - 1.0) * data.mean_log_x() - b * data.mean_x()))
}

/// Analytic gradient covector, chain-ruled through the chart Jacobian.
pub fn gamma_nll_grad(
    p: &ParamVector,
    chart: Parameterization,
    data: &GammaDataset,
) -> Result<Vec<f64>> {
    let GammaParams { a, b } = chart.to_base(p)?;
    let base = [
        digamma(a) - b.ln() - data.mean_log_x(),
        -a / b + data.mean_x(),
    ];
    let j = chart.jacobian(p)?;
    Ok(vec![j[0] * base[0], j[1] * base[1]])
}

fn base_metric(params: GammaParams) -> [[f64; 2]; 2] {
    let GammaParams { a, b } = params;
    [[trigamma(a), -1.0 / b], [-1.0 / b, a / (b * b)]]
}

/// d_sigma g_{mu nu} in the base chart; index order [sigma][mu][nu].
fn base_metric_partials(params: GammaParams) -> [[[f64; 2]; 2]; 2] {
    let GammaParams { a, b } = params;
    let b2 = b * b;
    let d_a = [[tetragamma(a), 0.0], [0.0, 1.0 / b2]];
    let d_b = [[0.0, 1.0 / b2], [1.0 / b2, -2.0 * a / (b2 * b)]];
    [d_a, d_b]
}

/// Fisher information metric in the given chart (pullback g' = J^T g J).
pub fn gamma_metric(p: &ParamVector, chart: Parameterization) -> Result<MetricMatrix> {
    let base = chart.to_base(p)?;
    let g = base_metric(base);
    let j = chart.jacobian(p)?;
    let mut out = Array2::<f64>::zeros((2, 2));
    for mu in 0..2 {
        for nu in 0..2 {
            out[[mu, nu]] = j[mu] * j[nu] * g[mu][nu];
        }
    }
    MetricMatrix::new(out)
}

/// Chart-space metric partials, including the second-derivative terms of the
/// chart map.
pub fn gamma_metric_partials(p: &ParamVector, chart: Parameterization) -> Result<MetricPartials> {
    let base = chart.to_base(p)?;
    let g = base_metric(base);
    let dg = base_metric_partials(base);
    let j = chart.jacobian(p)?;
    let h = chart.jacobian2(p)?;
    let mut out = Array3::<f64>::zeros((2, 2, 2));
    // g'_{mu nu} = j_mu j_nu g_{mu nu}(base(p')); differentiate w.r.t. chart
    // coordinate sigma: product rule on both Jacobian factors plus the chain
    // rule through the base point.
    for sigma in 0..2 {
        for mu in 0..2 {
            for nu in 0..2 {
                let mut v = j[mu] * j[nu] * dg[sigma][mu][nu] * j[sigma];
                if sigma == mu {
                    v += h[mu] * j[nu] * g[mu][nu];
                }
                if sigma == nu {
                    v += j[mu] * h[nu] * g[mu][nu];
                }
                out[[sigma, mu, nu]] = v;
            }
        }
    }
    MetricPartials::new(out)
}

/// Levi-Civita connection in the given chart, assembled from the metric and
/// its partials.
pub fn gamma_connection(p: &ParamVector, chart: Parameterization) -> Result<ChristoffelTensor> {
    let g = gamma_metric(p, chart)?;
    let dg = gamma_metric_partials(p, chart)?;
    christoffel_from_metric(|rhs| g.solve(rhs), &dg)
}
