//! The update rules: natural gradient, midpoint, geodesic correction, the
//! single-solve faster geodesic correction, Riemannian Euler, and the
//! perturbation variant, together with backtracking and Marquardt damping
//! adaptation.

use crate::error::{Error, Result};
use crate::geometry::{exponential_map, ParamVector};
use crate::objective::ManifoldObjective;
use crate::solver::{CgConfig, DampingState, DiagMode};

/// Per-run knobs shared by every update rule. `h_lambda` is the single
/// step-size knob (lambda is fixed to 1, so it is also the ODE step h).
#[derive(Debug, Clone)]
pub struct StepConfig {
    pub h_lambda: f64,
    pub cg: CgConfig,
    pub diag_mode: DiagMode,
    pub backtracking: bool,
    pub max_halvings: usize,
    /// Riemannian Euler geodesic substeps
    pub exp_substeps: usize,
    /// Marquardt adaptation of the damping after each step
    pub adapt_damping: bool,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            h_lambda: 1.0,
            cg: CgConfig::default(),
            diag_mode: DiagMode::Ones,
            backtracking: true,
            max_halvings: 10,
            exp_substeps: 128,
            adapt_damping: true,
        }
    }
}

/// Mutable per-run state threaded through the steps.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub theta: ParamVector,
    /// previous accepted step divided by h (a velocity estimate)
    pub prev_delta: Option<Vec<f64>>,
    pub damping: DampingState,
    pub iter: u64,
}

impl OptimizerState {
    pub fn new(theta: ParamVector, damping: DampingState) -> Self {
        OptimizerState {
            theta,
            prev_delta: None,
            damping,
            iter: 0,
        }
    }
}

/// What one step did, for logging.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss_before: f64,
    pub loss_after: f64,
    pub step_norm: f64,
    pub cg_iters: usize,
    pub epsilon: f64,
    pub corrections_active: bool,
    pub backtrack_count: usize,
    /// false iff backtracking exhausted every scale (theta unchanged)
    pub accepted: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_scaled(p: &ParamVector, lin: &[f64], quad: &[f64], scale: f64) -> ParamVector {
    let c: Vec<f64> = p
        .coords()
        .iter()
        .zip(lin)
        .zip(quad)
        .map(|((t, l), q)| t + scale * l + scale * scale * q)
        .collect();
    ParamVector(c)
}

/// Largest scale in {1, 1/2, 1/4, ...} whose candidate strictly decreases the
/// loss; the quadratic component rescales with scale^2. Returns
/// (scale, loss_after, halvings); scale 0 signals rejection. Loss evaluation
/// errors (domain exits) count as rejections of that scale.
pub fn backtrack<O: ManifoldObjective + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    lin: &[f64],
    quad: &[f64],
    loss_before: f64,
    max_halvings: usize,
) -> (f64, f64, usize) {
    let mut scale = 1.0;
    for count in 0..=max_halvings {
        let candidate = add_scaled(theta, lin, quad, scale);
        if let Ok(l) = obj.loss(&candidate) {
            if l.is_finite() && l < loss_before {
                return (scale, l, count);
            }
        }
        scale *= 0.5;
    }
    (0.0, loss_before, max_halvings + 1)
}

/// Shared tail: optional backtracking, state update, Marquardt adaptation.
fn finish_step<O: ManifoldObjective + ?Sized>(
    obj: &O,
    state: &mut OptimizerState,
    cfg: &StepConfig,
    loss_before: f64,
    lin: Vec<f64>,
    quad: Vec<f64>,
    cg_iters: usize,
    corrections_active: bool,
) -> Result<StepReport> {
    let epsilon = state.damping.epsilon;
    let (scale, loss_after, backtrack_count) = if cfg.backtracking {
        backtrack(obj, &state.theta, &lin, &quad, loss_before, cfg.max_halvings)
    } else {
        let candidate = add_scaled(&state.theta, &lin, &quad, 1.0);
        let l = obj.loss(&candidate)?;
        (1.0, l, 0)
    };

    let accepted = scale > 0.0;
    let mut step_norm = 0.0;
    if accepted {
        let new_theta = add_scaled(&state.theta, &lin, &quad, scale);
        let delta: Vec<f64> = new_theta
            .coords()
            .iter()
            .zip(state.theta.coords())
            .map(|(a, b)| a - b)
            .collect();
        step_norm = norm(&delta);
        state.prev_delta = Some(delta.iter().map(|d| d / cfg.h_lambda).collect());

        if cfg.adapt_damping {
            // reduction ratio against the local quadratic model
            let g = obj.grad(&state.theta)?;
            let gd = obj.metric_vp(&state.theta, &delta)?;
            let predicted = -(dot(&g, &delta) + 0.5 * dot(&delta, &gd));
            let rho = if predicted > 0.0 {
                (loss_before - loss_after) / predicted
            } else {
                0.0
            };
            state.damping.adapt(rho);
        }
        state.theta = new_theta;
    } else if cfg.adapt_damping {
        state.damping.adapt(0.0);
    }
    state.iter += 1;

    Ok(StepReport {
        loss_before,
        loss_after,
        step_norm,
        cg_iters,
        epsilon,
        corrections_active,
        backtrack_count,
        accepted,
    })
}

/// Plain natural gradient: theta <- theta - h lambda g^{-1} dL.
pub fn step_ng<O: ManifoldObjective + ?Sized>(
    obj: &O,
    state: &mut OptimizerState,
    cfg: &StepConfig,
) -> Result<StepReport> {
    let loss_before = obj.loss(&state.theta)?;
    let g = obj.grad(&state.theta)?;
    let rep = obj.solve_damped(&state.theta, &g, state.damping.epsilon, &cfg.cg, cfg.diag_mode)?;
    let lin: Vec<f64> = rep.solution.iter().map(|x| -cfg.h_lambda * x).collect();
    let quad = vec![0.0; obj.dim()];
    finish_step(obj, state, cfg, loss_before, lin, quad, rep.iterations, false)
}

/// Midpoint (RK2) integrator: metric and gradient re-evaluated at the half
/// step; both solves share the same damping.
pub fn step_mid<O: ManifoldObjective + ?Sized>(
    obj: &O,
    state: &mut OptimizerState,
    cfg: &StepConfig,
) -> Result<StepReport> {
    let loss_before = obj.loss(&state.theta)?;
    let g = obj.grad(&state.theta)?;
    let eps = state.damping.epsilon;
    let first = obj.solve_damped(&state.theta, &g, eps, &cfg.cg, cfg.diag_mode)?;
    let half: Vec<f64> = state
        .theta
        .coords()
        .iter()
        .zip(&first.solution)
        .map(|(t, d)| t - 0.5 * cfg.h_lambda * d)
        .collect();
    let half_point = ParamVector(half);
    let g_half = obj.grad(&half_point)?;
    let second = obj.solve_damped(&half_point, &g_half, eps, &cfg.cg, cfg.diag_mode)?;
    let lin: Vec<f64> = second.solution.iter().map(|x| -cfg.h_lambda * x).collect();
    let quad = vec![0.0; obj.dim()];
    let iters = first.iterations + second.iterations;
    finish_step(obj, state, cfg, loss_before, lin, quad, iters, false)
}

/// Geodesic correction: theta <- theta + h gdot - 1/2 h^2 Gamma gdot gdot,
/// two damped solves. Above the damping threshold the correction is switched
/// off and the step is exactly [`step_ng`].
pub fn step_geo<O: ManifoldObjective + ?Sized>(
    obj: &O,
    state: &mut OptimizerState,
    cfg: &StepConfig,
) -> Result<StepReport> {
    let corrections = state.damping.corrections_active();
    if !corrections {
        let mut rep = step_ng(obj, state, cfg)?;
        rep.corrections_active = false;
        return Ok(rep);
    }
    let loss_before = obj.loss(&state.theta)?;
    let g = obj.grad(&state.theta)?;
    let eps = state.damping.epsilon;
    let first = obj.solve_damped(&state.theta, &g, eps, &cfg.cg, cfg.diag_mode)?;
    let gdot: Vec<f64> = first.solution.iter().map(|x| -x).collect();
    let u = obj.connection_vp_lowered(&state.theta, &gdot)?;
    let second = obj.solve_damped(&state.theta, &u, eps, &cfg.cg, cfg.diag_mode)?;
    let h = cfg.h_lambda;
    let lin: Vec<f64> = gdot.iter().map(|x| h * x).collect();
    let quad: Vec<f64> = second.solution.iter().map(|x| -0.5 * h * h * x).collect();
    let iters = first.iterations + second.iterations;
    finish_step(obj, state, cfg, loss_before, lin, quad, iters, true)
}

/// Faster geodesic correction: a single damped solve of
/// G delta = -dL - 1/2 h lambda u(prev_delta). The first iteration (no
/// previous step) is bit-for-bit a natural gradient step.
pub fn step_geo_fast<O: ManifoldObjective + ?Sized>(
    obj: &O,
    state: &mut OptimizerState,
    cfg: &StepConfig,
) -> Result<StepReport> {
    let corrections = state.damping.corrections_active();
    let loss_before = obj.loss(&state.theta)?;
    let mut rhs = obj.grad(&state.theta)?;
    let mut used_correction = false;
    if corrections {
        if let Some(prev) = &state.prev_delta {
            let u = obj.connection_vp_lowered(&state.theta, prev)?;
            for (r, ui) in rhs.iter_mut().zip(&u) {
                *r += 0.5 * cfg.h_lambda * ui;
            }
            used_correction = true;
        }
    }
    let rep = obj.solve_damped(&state.theta, &rhs, state.damping.epsilon, &cfg.cg, cfg.diag_mode)?;
    let lin: Vec<f64> = rep.solution.iter().map(|x| -cfg.h_lambda * x).collect();
    let quad = vec![0.0; obj.dim()];
    finish_step(
        obj,
        state,
        cfg,
        loss_before,
        lin,
        quad,
        rep.iterations,
        used_correction,
    )
}

/// Riemannian Euler: theta <- Exp(theta, -h lambda g^{-1} dL). Requires the
/// full connection; no backtracking (it is the invariant reference method).
pub fn step_riemannian_euler<O: ManifoldObjective + ?Sized>(
    obj: &O,
    state: &mut OptimizerState,
    cfg: &StepConfig,
) -> Result<StepReport> {
    let loss_before = obj.loss(&state.theta)?;
    let g = obj.grad(&state.theta)?;
    let rep = obj.solve_damped(&state.theta, &g, state.damping.epsilon, &cfg.cg, cfg.diag_mode)?;
    let v: Vec<f64> = rep.solution.iter().map(|x| -cfg.h_lambda * x).collect();
    let new_theta = exponential_map(
        |p| obj.full_connection(p),
        &state.theta,
        &v,
        cfg.exp_substeps,
    )?;
    let loss_after = obj.loss(&new_theta)?;
    if !loss_after.is_finite() {
        return Err(Error::NonFiniteState("Riemannian Euler loss".into()));
    }
    let delta: Vec<f64> = new_theta
        .coords()
        .iter()
        .zip(state.theta.coords())
        .map(|(a, b)| a - b)
        .collect();
    let step_norm = norm(&delta);
    state.prev_delta = Some(delta.iter().map(|d| d / cfg.h_lambda).collect());
    state.theta = new_theta;
    state.iter += 1;
    Ok(StepReport {
        loss_before,
        loss_after,
        step_norm,
        cg_iters: rep.iterations,
        epsilon: state.damping.epsilon,
        corrections_active: true,
        backtrack_count: 0,
        accepted: true,
    })
}

/// Perturbation update (full normal-equation correction): delta1 is the
/// natural gradient step, delta2 solves the damped Fisher system against the
/// assembled higher-order right-hand side, and theta moves by delta1 + delta2.
pub fn step_perturb<O: ManifoldObjective + ?Sized>(
    obj: &O,
    state: &mut OptimizerState,
    cfg: &StepConfig,
) -> Result<StepReport> {
    let corrections = state.damping.corrections_active();
    if !corrections {
        let mut rep = step_ng(obj, state, cfg)?;
        rep.corrections_active = false;
        return Ok(rep);
    }
    let loss_before = obj.loss(&state.theta)?;
    let g = obj.grad(&state.theta)?;
    let eps = state.damping.epsilon;
    let first = obj.solve_damped(&state.theta, &g, eps, &cfg.cg, cfg.diag_mode)?;
    let delta1: Vec<f64> = first.solution.iter().map(|x| -cfg.h_lambda * x).collect();
    let rhs = obj.perturb_rhs(&state.theta, &delta1)?;
    let second = obj.solve_damped(&state.theta, &rhs, eps, &cfg.cg, cfg.diag_mode)?;
    // delta1 carries one factor of h, so delta2 is quadratic in h already
    let quad: Vec<f64> = second.solution.iter().map(|x| -x).collect();
    let iters = first.iterations + second.iterations;
    finish_step(obj, state, cfg, loss_before, delta1, quad, iters, true)
}

/// Geodesic correction vector -1/2 solve(G, u_LC(delta1)) for a given first
/// step, used by the small-curvature study.
pub fn geodesic_correction<O: ManifoldObjective + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    delta1: &[f64],
    epsilon: f64,
    cfg: &StepConfig,
) -> Result<Vec<f64>> {
    let u = obj.connection_vp_lowered(theta, delta1)?;
    let rep = obj.solve_damped(theta, &u, epsilon, &cfg.cg, cfg.diag_mode)?;
    Ok(rep.solution.iter().map(|x| -0.5 * x).collect())
}

/// Small-curvature correction vector -1/2 solve(G, u_z(delta1)): the
/// perturbation analysis after dropping the residual-coupled terms. For the
/// squared loss this coincides with [`geodesic_correction`]; for BCE it uses
/// the 1-connection coefficients instead.
pub fn smallcurve_correction<O: ManifoldObjective + ?Sized>(
    obj: &O,
    theta: &ParamVector,
    delta1: &[f64],
    epsilon: f64,
    cfg: &StepConfig,
) -> Result<Vec<f64>> {
    let u = obj.connection_vp_z(theta, delta1)?;
    let rep = obj.solve_damped(theta, &u, epsilon, &cfg.cg, cfg.diag_mode)?;
    Ok(rep.solution.iter().map(|x| -0.5 * x).collect())
}

/// The update rules by name, for harness dispatch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ng,
    Mid,
    Geo,
    GeoF,
    /// Riemannian Euler (exponential-map update)
    GeoExact,
    /// dense RK4 integration of the natural gradient ODE
    NgExact,
    Perturb,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Ng => "ng",
            Method::Mid => "mid",
            Method::Geo => "geo",
            Method::GeoF => "geo_f",
            Method::GeoExact => "geo_exact",
            Method::NgExact => "ng_exact",
            Method::Perturb => "perturb",
        }
    }

    /// Run one iteration of this method; `NgExact` is integrated by the
    /// harness, not stepped here.
    pub fn step<O: ManifoldObjective + ?Sized>(
        &self,
        obj: &O,
        state: &mut OptimizerState,
        cfg: &StepConfig,
    ) -> Result<StepReport> {
        match self {
            Method::Ng => step_ng(obj, state, cfg),
            Method::Mid => step_mid(obj, state, cfg),
            Method::Geo => step_geo(obj, state, cfg),
            Method::GeoF => step_geo_fast(obj, state, cfg),
            Method::GeoExact => step_riemannian_euler(obj, state, cfg),
            Method::Perturb => step_perturb(obj, state, cfg),
            Method::NgExact => Err(Error::Config(
                "ng_exact is an ODE reference, not a stepped method".into(),
            )),
        }
    }
}
