//! Matrix-free damped linear solver: conjugate gradients on
//! `v -> G v + epsilon * diag .* v`, plus Marquardt-style damping adaptation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Conjugate gradient settings. The tolerance is relative to `||rhs||`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            max_iters: 50,
            tol: 1e-8,
        }
    }
}

/// Adaptive Tikhonov damping with a corrections-off threshold: when `epsilon`
/// exceeds `threshold`, curvature corrections are disabled by callers and only
/// the plain natural gradient step is taken.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DampingState {
    pub epsilon: f64,
    pub threshold: f64,
}

impl DampingState {
    pub fn new(epsilon: f64, threshold: f64) -> Self {
        DampingState { epsilon, threshold }
    }

    pub fn corrections_active(&self) -> bool {
        self.epsilon <= self.threshold
    }

    /// Marquardt update from the reduction ratio `rho` (actual over predicted
    /// improvement): shrink damping on good steps, grow it on poor ones.
    pub fn adapt(&mut self, rho: f64) {
        if rho > 0.75 {
            self.epsilon *= 2.0 / 3.0;
        } else if rho < 0.25 {
            self.epsilon *= 1.5;
        }
    }
}

/// How to obtain the diagonal used by the damping term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagMode {
    /// probe `G e_i` for every basis vector; exact but n operator calls
    ExactProbes,
    /// unit diagonal (plain Tikhonov)
    Ones,
}

/// Diagonal of the operator under the chosen mode.
pub fn diag_estimate<F>(op: F, n: usize, mode: DiagMode) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    match mode {
        DiagMode::Ones => Ok(vec![1.0; n]),
        DiagMode::ExactProbes => {
            let mut d = vec![0.0; n];
            let mut probe = vec![0.0; n];
            for i in 0..n {
                probe[i] = 1.0;
                let col = op(&probe)?;
                if col.len() != n {
                    return Err(Error::ShapeMismatch(format!(
                        "operator returned length {} for dim {n}",
                        col.len()
                    )));
                }
                d[i] = col[i];
                probe[i] = 0.0;
            }
            Ok(d)
        }
    }
}

/// Outcome of a damped CG solve; `solution` is the iterate with the smallest
/// residual norm seen, which need not be the last one.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub solution: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solve `(G + epsilon * diag(d)) x = rhs` by CG from a zero initial guess.
///
/// Returns [`Error::Breakdown`] when the curvature term `p^T A p` goes
/// non-positive, which signals a non-PSD operator (beyond round-off).
pub fn damped_solve<F>(
    op: F,
    rhs: &[f64],
    diag: &[f64],
    epsilon: f64,
    cfg: &CgConfig,
) -> Result<SolveReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = rhs.len();
    if diag.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "diag length {} vs rhs length {n}",
            diag.len()
        )));
    }
    let apply = |v: &[f64]| -> Result<Vec<f64>> {
        let mut gv = op(v)?;
        if gv.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "operator returned length {} for dim {n}",
                gv.len()
            )));
        }
        for i in 0..n {
            gv[i] += epsilon * diag[i] * v[i];
        }
        Ok(gv)
    };

    let rhs_norm = norm(rhs);
    if rhs_norm == 0.0 {
        return Ok(SolveReport {
            solution: vec![0.0; n],
            residual_norm: 0.0,
            iterations: 0,
            converged: true,
        });
    }

    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);

    let mut best_x = x.clone();
    let mut best_res = rr.sqrt();
    let mut iterations = 0;
    let mut converged = best_res <= cfg.tol * rhs_norm;

    for _ in 0..cfg.max_iters {
        if converged {
            break;
        }
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::Breakdown(format!(
                "non-positive curvature p^T A p = {pap} at iteration {iterations}"
            )));
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        iterations += 1;
        let res = rr_new.sqrt();
        if res < best_res {
            best_res = res;
            best_x.copy_from_slice(&x);
        }
        if res <= cfg.tol * rhs_norm {
            converged = true;
            break;
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }

    Ok(SolveReport {
        solution: best_x,
        residual_norm: best_res,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mat_op(m: &'static [[f64; 2]; 2]) -> impl Fn(&[f64]) -> Result<Vec<f64>> {
        move |v: &[f64]| {
            Ok(vec![
                m[0][0] * v[0] + m[0][1] * v[1],
                m[1][0] * v[0] + m[1][1] * v[1],
            ])
        }
    }

    static SPD: [[f64; 2]; 2] = [[4.0, 1.0], [1.0, 3.0]];

    #[test]
    fn undamped_solve_matches_closed_form() {
        // [[4,1],[1,3]] x = (1,2) has solution (1/11, 7/11)
        let rep = damped_solve(mat_op(&SPD), &[1.0, 2.0], &[1.0, 1.0], 0.0, &CgConfig::default())
            .unwrap();
        assert_relative_eq!(rep.solution[0], 1.0 / 11.0, epsilon = 1e-10);
        assert_relative_eq!(rep.solution[1], 7.0 / 11.0, epsilon = 1e-10);
        assert!(rep.converged);
        assert!(rep.iterations <= 2);
    }

    #[test]
    fn damped_solve_shifts_the_system() {
        // damping eps=1 with unit diag solves [[5,1],[1,4]] x = (1,2)
        let rep = damped_solve(mat_op(&SPD), &[1.0, 2.0], &[1.0, 1.0], 1.0, &CgConfig::default())
            .unwrap();
        assert_relative_eq!(rep.solution[0], 2.0 / 19.0, epsilon = 1e-10);
        assert_relative_eq!(rep.solution[1], 9.0 / 19.0, epsilon = 1e-10);
    }

    #[test]
    fn damped_solve_with_custom_diag() {
        // eps=0.5, diag=(2,4): system [[5,1],[1,5]] x = (6,6) -> x = (1,1)
        let rep = damped_solve(
            mat_op(&SPD),
            &[6.0, 6.0],
            &[2.0, 4.0],
            0.5,
            &CgConfig::default(),
        )
        .unwrap();
        assert_relative_eq!(rep.solution[0], 1.0, epsilon = 1e-10);
        assert_relative_eq!(rep.solution[1], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn zero_rhs_returns_zero() {
        let rep = damped_solve(mat_op(&SPD), &[0.0, 0.0], &[1.0, 1.0], 0.0, &CgConfig::default())
            .unwrap();
        assert_eq!(rep.solution, vec![0.0, 0.0]);
        assert_eq!(rep.iterations, 0);
        assert!(rep.converged);
    }

    #[test]
    fn indefinite_operator_breaks_down() {
        static INDEF: [[f64; 2]; 2] = [[1.0, 0.0], [0.0, -1.0]];
        let err = damped_solve(
            mat_op(&INDEF),
            &[0.0, 1.0],
            &[1.0, 1.0],
            0.0,
            &CgConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Breakdown(_)));
    }

    #[test]
    fn iteration_cap_reports_best_iterate() {
        // badly conditioned diagonal system, capped at 1 iteration
        let op = |v: &[f64]| -> Result<Vec<f64>> {
            Ok(vec![1e6 * v[0], v[1]])
        };
        let cfg = CgConfig {
            max_iters: 1,
            tol: 1e-16,
        };
        let rep = damped_solve(op, &[1.0, 1.0], &[1.0, 1.0], 0.0, &cfg).unwrap();
        assert!(!rep.converged);
        assert_eq!(rep.iterations, 1);
        assert!(rep.residual_norm.is_finite());
        // residual of returned solution must match the report
        let x = &rep.solution;
        let res = ((1.0 - 1e6 * x[0]).powi(2) + (1.0 - x[1]).powi(2)).sqrt();
        assert_relative_eq!(res, rep.residual_norm, max_relative = 1e-9);
    }

    #[test]
    fn cg_converges_within_dimension_iterations() {
        // CG on an n-dim SPD system terminates in at most n steps exactly
        let n = 8usize;
        let op = |v: &[f64]| -> Result<Vec<f64>> {
            let mut out = vec![0.0; v.len()];
            for i in 0..v.len() {
                out[i] = (i as f64 + 1.0) * v[i] + 0.1 * v[(i + 1) % v.len()]
                    + 0.1 * v[(i + v.len() - 1) % v.len()];
            }
            Ok(out)
        };
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin() + 2.0).collect();
        let rep = damped_solve(op, &rhs, &vec![1.0; n], 0.0, &CgConfig::default()).unwrap();
        assert!(rep.converged);
        assert!(rep.iterations <= n);
        let ax = op(&rep.solution).unwrap();
        for i in 0..n {
            assert_relative_eq!(ax[i], rhs[i], max_relative = 1e-6, epsilon = 1e-8);
        }
    }

    #[test]
    fn diag_estimate_modes() {
        let d = diag_estimate(mat_op(&SPD), 2, DiagMode::ExactProbes).unwrap();
        assert_eq!(d, vec![4.0, 3.0]);
        let o = diag_estimate(mat_op(&SPD), 2, DiagMode::Ones).unwrap();
        assert_eq!(o, vec![1.0, 1.0]);
    }

    #[test]
    fn marquardt_adaptation_examples() {
        let mut s = DampingState::new(45.0, 5.0);
        s.adapt(0.9);
        assert_relative_eq!(s.epsilon, 30.0, epsilon = 1e-12);
        let mut s2 = DampingState::new(10.0, 5.0);
        s2.adapt(0.1);
        assert_relative_eq!(s2.epsilon, 15.0, epsilon = 1e-12);
        let mut s3 = DampingState::new(10.0, 5.0);
        s3.adapt(0.5);
        assert_relative_eq!(s3.epsilon, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn corrections_threshold() {
        assert!(DampingState::new(5.0, 5.0).corrections_active());
        assert!(!DampingState::new(5.1, 5.0).corrections_active());
    }
}
