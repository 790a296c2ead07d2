//! The manifold-objective contract shared by the Gamma testbed and the
//! network models, plus its two implementations.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::gamma::{
    gamma_connection, gamma_metric, gamma_metric_partials, gamma_nll, gamma_nll_grad,
    GammaDataset, Parameterization,
};
use crate::geometry::{ChristoffelTensor, ParamVector};
use crate::network::{Batch, ConnectionSide, LossKind, Network};
use crate::solver::{damped_solve, diag_estimate, CgConfig, DiagMode, SolveReport};

/// What the update rules need from a model: loss, gradient covector,
/// metric-vector products, and the lowered connection contraction. The
/// optional operations are only available on some models.
pub trait ManifoldObjective {
    fn dim(&self) -> usize;

    fn loss(&self, theta: &ParamVector) -> Result<f64>;

    fn grad(&self, theta: &ParamVector) -> Result<Vec<f64>>;

    /// g v (applied metric, covector result)
    fn metric_vp(&self, theta: &ParamVector, v: &[f64]) -> Result<Vec<f64>>;

    /// u_nu = g_{nu mu} Gamma^mu_{ab} v^a v^b (Levi-Civita)
    fn connection_vp_lowered(&self, theta: &ParamVector, v: &[f64]) -> Result<Vec<f64>>;

    /// Solve (g + epsilon * diag) x = rhs. The default goes through the
    /// matrix-free damped CG; small dense models override with a direct
    /// factorization.
    fn solve_damped(
        &self,
        theta: &ParamVector,
        rhs: &[f64],
        epsilon: f64,
        cg: &CgConfig,
        diag_mode: DiagMode,
    ) -> Result<SolveReport> {
        let op = |v: &[f64]| self.metric_vp(theta, v);
        let diag = if epsilon == 0.0 {
            vec![0.0; self.dim()]
        } else {
            diag_estimate(&op, self.dim(), diag_mode)?
        };
        damped_solve(op, rhs, &diag, epsilon, cg)
    }

    /// Full Christoffel tensor; only low-dimensional analytic models expose it.
    fn full_connection(&self, _theta: &ParamVector) -> Result<ChristoffelTensor> {
        Err(Error::Config(
            "this objective does not expose the full connection".into(),
        ))
    }

    /// z-side (1-connection) lowered contraction; network models only.
    fn connection_vp_z(&self, _theta: &ParamVector, _v: &[f64]) -> Result<Vec<f64>> {
        Err(Error::Config(
            "this objective does not expose z-side connection products".into(),
        ))
    }

    /// Right-hand side of the full perturbation correction; network models only.
    fn perturb_rhs(&self, _theta: &ParamVector, _v: &[f64]) -> Result<Vec<f64>> {
        Err(Error::Config(
            "this objective does not expose the perturbation correction".into(),
        ))
    }
}

/// Gamma maximum likelihood in a fixed chart.
pub struct GammaObjective {
    pub chart: Parameterization,
    pub data: GammaDataset,
}

impl GammaObjective {
    pub fn new(chart: Parameterization, data: GammaDataset) -> Self {
        GammaObjective { chart, data }
    }
}

impl ManifoldObjective for GammaObjective {
    fn dim(&self) -> usize {
        2
    }

    fn loss(&self, theta: &ParamVector) -> Result<f64> {
        gamma_nll(theta, self.chart, &self.data)
    }

    fn grad(&self, theta: &ParamVector) -> Result<Vec<f64>> {
        gamma_nll_grad(theta, self.chart, &self.data)
    }

    fn metric_vp(&self, theta: &ParamVector, v: &[f64]) -> Result<Vec<f64>> {
        let g = gamma_metric(theta, self.chart)?;
        let mut out = vec![0.0; 2];
        for i in 0..2 {
            out[i] = g.get(i, 0) * v[0] + g.get(i, 1) * v[1];
        }
        Ok(out)
    }

    fn connection_vp_lowered(&self, theta: &ParamVector, v: &[f64]) -> Result<Vec<f64>> {
        // u_nu = 1/2 (d_a g_{nu b} + d_b g_{nu a} - d_nu g_{ab}) v^a v^b,
        // directly from the metric partials, no solve required
        let dg = gamma_metric_partials(theta, self.chart)?;
        let d = &dg.d_entries;
        let mut out = vec![0.0; 2];
        for nu in 0..2 {
            let mut acc = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    acc += 0.5
                        * (d[[a, nu, b]] + d[[b, nu, a]] - d[[nu, a, b]])
                        * v[a]
                        * v[b];
                }
            }
            out[nu] = acc;
        }
        Ok(out)
    }

    /// Direct dense solve via Cholesky; exact up to round-off, so the order
    /// studies are not limited by CG tolerances.
    fn solve_damped(
        &self,
        theta: &ParamVector,
        rhs: &[f64],
        epsilon: f64,
        _cg: &CgConfig,
        _diag_mode: DiagMode,
    ) -> Result<SolveReport> {
        let g = gamma_metric(theta, self.chart)?;
        let damped = if epsilon == 0.0 {
            g
        } else {
            let mut e = g.entries().clone();
            for i in 0..2 {
                e[[i, i]] += epsilon * g.get(i, i);
            }
            crate::geometry::MetricMatrix::new(e)?
        };
        let solution = damped.solve(rhs)?;
        Ok(SolveReport {
            solution,
            residual_norm: 0.0,
            iterations: 0,
            converged: true,
        })
    }

    fn full_connection(&self, theta: &ParamVector) -> Result<ChristoffelTensor> {
        gamma_connection(theta, self.chart)
    }
}

/// Feed-forward network training objective; theta is the flat parameter
/// vector, the stored network only supplies the architecture.
pub struct NetworkObjective {
    pub template: Network,
    pub loss_kind: LossKind,
    pub batch: Batch,
}

impl NetworkObjective {
    pub fn new(template: Network, loss_kind: LossKind, batch: Batch) -> Result<Self> {
        template.validate_with_loss(&loss_kind)?;
        Ok(NetworkObjective {
            template,
            loss_kind,
            batch,
        })
    }

    fn materialize(&self, theta: &ParamVector) -> Result<Network> {
        self.template.unflatten(theta.coords())
    }

    pub fn outputs(&self, theta: &ParamVector) -> Result<Array2<f64>> {
        self.materialize(theta)?.forward(&self.batch.inputs)
    }
}

impl ManifoldObjective for NetworkObjective {
    fn dim(&self) -> usize {
        self.template.param_count()
    }

    fn loss(&self, theta: &ParamVector) -> Result<f64> {
        Ok(self
            .materialize(theta)?
            .loss_and_grad(&self.loss_kind, &self.batch)?
            .0)
    }

    fn grad(&self, theta: &ParamVector) -> Result<Vec<f64>> {
        Ok(self
            .materialize(theta)?
            .loss_and_grad(&self.loss_kind, &self.batch)?
            .1)
    }

    fn metric_vp(&self, theta: &ParamVector, v: &[f64]) -> Result<Vec<f64>> {
        self.materialize(theta)?
            .fisher_vp(&self.loss_kind, &self.batch, v)
    }

    fn connection_vp_lowered(&self, theta: &ParamVector, v: &[f64]) -> Result<Vec<f64>> {
        self.materialize(theta)?.connection_vp(
            &self.loss_kind,
            &self.batch,
            v,
            ConnectionSide::LeviCivita,
        )
    }

    fn connection_vp_z(&self, theta: &ParamVector, v: &[f64]) -> Result<Vec<f64>> {
        self.materialize(theta)?
            .connection_vp(&self.loss_kind, &self.batch, v, ConnectionSide::ZSide)
    }

    fn perturb_rhs(&self, theta: &ParamVector, v: &[f64]) -> Result<Vec<f64>> {
        self.materialize(theta)?
            .perturb_rhs(&self.loss_kind, &self.batch, v)
    }
}
