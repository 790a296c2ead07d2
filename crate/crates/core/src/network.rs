//! Minimal feed-forward network engine: forward pass, backprop, forward-mode
//! R/S passes for first and second directional derivatives, and the
//! Fisher-vector / connection-vector / mixed-derivative products built from
//! them.
//!
//! Everything is full-batch and 64-bit; batch reductions use a fixed
//! left-to-right order so runs are bit-reproducible.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp range for outputs feeding BCE/MCE coefficient poles.
pub const OUTPUT_CLAMP: f64 = 1e-12;

/// Fraction of clamped outputs above which a pass fails with
/// [`Error::NumericalUnderflow`] instead of silently saturating.
pub const MAX_CLAMP_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Identity,
    /// vector-valued; allowed only on the final layer with the MCE loss
    Softmax,
}

impl Activation {
    fn is_elementwise(&self) -> bool {
        !matches!(self, Activation::Softmax)
    }

    fn apply(&self, s: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Sigmoid => s.mapv(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::Tanh => s.mapv(f64::tanh),
            Activation::Identity => s.clone(),
            Activation::Softmax => {
                let mut out = s.clone();
                for mut row in out.rows_mut() {
                    let m = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
                    row.mapv_inplace(|v| (v - m).exp());
                    let z = row.sum();
                    row.mapv_inplace(|v| v / z);
                }
                out
            }
        }
    }

    /// phi'(s) expressed through the activation value y (elementwise only).
    fn d1_from_y(&self, y: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Sigmoid => y.mapv(|v| v * (1.0 - v)),
            Activation::Tanh => y.mapv(|v| 1.0 - v * v),
            Activation::Identity => Array2::ones(y.raw_dim()),
            Activation::Softmax => unreachable!("softmax has no elementwise derivative"),
        }
    }

    /// phi''(s) through y (elementwise only).
    fn d2_from_y(&self, y: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Sigmoid => y.mapv(|v| v * (1.0 - v) * (1.0 - 2.0 * v)),
            Activation::Tanh => y.mapv(|v| -2.0 * v * (1.0 - v * v)),
            Activation::Identity => Array2::zeros(y.raw_dim()),
            Activation::Softmax => unreachable!("softmax has no elementwise derivative"),
        }
    }
}

/// softmax Jacobian applied to a direction: J u = y .* (u - <y, u>), per row.
fn softmax_jvp(y: &Array2<f64>, u: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(y.raw_dim());
    for ((mut o, yr), ur) in out.rows_mut().into_iter().zip(y.rows()).zip(u.rows()) {
        let m: f64 = yr.iter().zip(ur.iter()).map(|(a, b)| a * b).sum();
        for i in 0..o.len() {
            o[i] = yr[i] * (ur[i] - m);
        }
    }
    out
}

/// softmax Hessian contraction sum_jk d2 y_i / ds_j ds_k r_j r_k, per row:
/// y_i [(r_i - m)^2 - (<y, r^2> - m^2)] with m = <y, r>.
fn softmax_hvp(y: &Array2<f64>, r: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(y.raw_dim());
    for ((mut o, yr), rr) in out.rows_mut().into_iter().zip(y.rows()).zip(r.rows()) {
        let m: f64 = yr.iter().zip(rr.iter()).map(|(a, b)| a * b).sum();
        let q: f64 = yr.iter().zip(rr.iter()).map(|(a, b)| a * b * b).sum();
        for i in 0..o.len() {
            o[i] = yr[i] * ((rr[i] - m).powi(2) - (q - m * m));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// (out_dim x in_dim), row-major in the flat layout
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub act: Activation,
}

/// Loss families with their Fisher/connection coefficient structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    Squared { sigma2: f64 },
    BinaryCe,
    MultiClassCe,
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        if let LossKind::Squared { sigma2 } = self {
            if !(*sigma2 > 0.0) {
                return Err(Error::Config(format!("sigma2 must be > 0, got {sigma2}")));
            }
        }
        Ok(())
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LossKind::Squared { .. } => "squared",
            LossKind::BinaryCe => "binary_ce",
            LossKind::MultiClassCe => "multi_class_ce",
        }
    }
}

/// Which lambda_2 family a connection product uses: the Levi-Civita
/// coefficients of the metric connection, or the z-side ("1-connection")
/// coefficients appearing in the perturbation analysis, which carry twice the
/// lambda_2 of the Levi-Civita family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectionSide {
    LeviCivita,
    ZSide,
}

/// Full-batch training data.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "batch inputs rows {} vs targets rows {}",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if inputs.nrows() == 0 {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        Ok(Batch { inputs, targets })
    }

    fn validate_for(&self, loss: &LossKind) -> Result<()> {
        match loss {
            LossKind::Squared { .. } => Ok(()),
            LossKind::BinaryCe => {
                if self.targets.iter().any(|t| *t != 0.0 && *t != 1.0) {
                    return Err(Error::Config("BCE targets must be in {0,1}".into()));
                }
                Ok(())
            }
            LossKind::MultiClassCe => {
                for row in self.targets.rows() {
                    let sum: f64 = row.sum();
                    if (sum - 1.0).abs() > 1e-12 || row.iter().any(|t| *t != 0.0 && *t != 1.0) {
                        return Err(Error::Config("MCE targets must be one-hot rows".into()));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Output value plus first and second directional derivatives along a
/// parameter direction.
#[derive(Debug, Clone)]
pub struct DirectionalPass {
    pub y: Array2<f64>,
    pub ry: Array2<f64>,
    pub sy: Array2<f64>,
}

/// JSON shape for one layer: `w` row-major, `b`, `act`.
#[derive(Serialize, Deserialize)]
struct LayerSpec {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    act: Activation,
}

#[derive(Serialize, Deserialize)]
struct NetworkSpec {
    layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("network needs at least one layer".into()));
        }
        for i in 1..layers.len() {
            if layers[i].w.ncols() != layers[i - 1].w.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} input dim {} vs layer {} output dim {}",
                    i,
                    layers[i].w.ncols(),
                    i - 1,
                    layers[i - 1].w.nrows()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.b.len() != l.w.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} bias len {} vs rows {}",
                    l.b.len(),
                    l.w.nrows()
                )));
            }
            if l.act == Activation::Softmax && i + 1 != layers.len() {
                return Err(Error::Config("softmax is output-only".into()));
            }
        }
        Ok(Network { layers })
    }

    /// Gaussian(0, 0.5/fan_in) weights, zero biases, seed-pinned.
    pub fn random(sizes: &[usize], acts: &[Activation], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || acts.len() != sizes.len() - 1 {
            return Err(Error::Config(format!(
                "need {} activations for {} sizes",
                sizes.len().saturating_sub(1),
                sizes.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for i in 0..acts.len() {
            let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
            let std = (0.5 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| normal.sample(&mut rng));
            layers.push(Layer {
                w,
                b: Array1::zeros(fan_out),
                act: acts[i],
            });
        }
        Network::new(layers)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// The loss families constrain the output activation: squared loss needs
    /// an identity output (its coefficient formulas assume a linear final
    /// layer), BCE needs sigmoid, MCE needs sigmoid or softmax.
    pub fn validate_with_loss(&self, loss: &LossKind) -> Result<()> {
        loss.validate()?;
        let out_act = self.layers.last().unwrap().act;
        let ok = match loss {
            LossKind::Squared { .. } => out_act == Activation::Identity,
            LossKind::BinaryCe => out_act == Activation::Sigmoid,
            LossKind::MultiClassCe => {
                out_act == Activation::Softmax || out_act == Activation::Sigmoid
            }
        };
        if !ok {
            return Err(Error::Config(format!(
                "loss {} incompatible with output activation {:?}",
                loss.tag(),
                out_act
            )));
        }
        Ok(())
    }

    /// Layer-major flat layout: W1 row-major, b1, W2, b2, ...
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    /// Inverse of [`Network::flatten`] onto this network's shape.
    pub fn unflatten(&self, theta: &[f64]) -> Result<Network> {
        if theta.len() != self.param_count() {
            return Err(Error::LengthMismatch {
                expected: self.param_count(),
                got: theta.len(),
            });
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            let wn = l.w.len();
            let w = Array2::from_shape_vec(l.w.raw_dim(), theta[off..off + wn].to_vec())
                .expect("shape checked");
            off += wn;
            let b = Array1::from_vec(theta[off..off + l.b.len()].to_vec());
            off += l.b.len();
            layers.push(Layer { w, b, act: l.act });
        }
        Network::new(layers)
    }

    /// Split a flat direction into per-layer (RW, Rb) views.
    fn split_direction(&self, v: &[f64]) -> Result<Vec<(Array2<f64>, Array1<f64>)>> {
        if v.len() != self.param_count() {
            return Err(Error::LengthMismatch {
                expected: self.param_count(),
                got: v.len(),
            });
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            let wn = l.w.len();
            let rw = Array2::from_shape_vec(l.w.raw_dim(), v[off..off + wn].to_vec())
                .expect("shape checked");
            off += wn;
            let rb = Array1::from_vec(v[off..off + l.b.len()].to_vec());
            off += l.b.len();
            out.push((rw, rb));
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        let spec = NetworkSpec {
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec {
                    w: l.w.rows().into_iter().map(|r| r.to_vec()).collect(),
                    b: l.b.to_vec(),
                    act: l.act,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&spec)?)
    }

    pub fn from_json(s: &str) -> Result<Network> {
        let spec: NetworkSpec = serde_json::from_str(s)?;
        let mut layers = Vec::new();
        for (i, ls) in spec.layers.into_iter().enumerate() {
            let rows = ls.w.len();
            let cols = ls.w.first().map_or(0, |r| r.len());
            if rows == 0 || cols == 0 || ls.w.iter().any(|r| r.len() != cols) {
                return Err(Error::Config(format!("layer {i}: ragged or empty weight rows")));
            }
            let flat: Vec<f64> = ls.w.into_iter().flatten().collect();
            layers.push(Layer {
                w: Array2::from_shape_vec((rows, cols), flat).expect("shape checked"),
                b: Array1::from_vec(ls.b),
                act: ls.act,
            });
        }
        Network::new(layers)
    }

    /// Forward pass returning every activation, a[0] being the inputs.
    fn forward_cache(&self, inputs: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        if inputs.ncols() != self.in_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input dim {} vs network in_dim {}",
                inputs.ncols(),
                self.in_dim()
            )));
        }
        let mut a = Vec::with_capacity(self.layers.len() + 1);
        a.push(inputs.clone());
        for l in &self.layers {
            let s = a.last().unwrap().dot(&l.w.t()) + &l.b;
            a.push(l.act.apply(&s));
        }
        Ok(a)
    }

    pub fn forward(&self, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cache(inputs)?.pop().unwrap())
    }

    /// Gradient of mean_batch sum_i c_i y_i with the weights `c` held
    /// constant: one plain backward pass.
    fn weighted_grad(&self, a: &[Array2<f64>], c: &Array2<f64>) -> Vec<f64> {
        let n = a[0].nrows() as f64;
        let l = self.layers.len();
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(l);
        let mut da = c.clone();
        for i in (0..l).rev() {
            let layer = &self.layers[i];
            let y = &a[i + 1];
            let ds = if layer.act.is_elementwise() {
                &da * &layer.act.d1_from_y(y)
            } else {
                softmax_jvp(y, &da)
            };
            let dw = ds.t().dot(&a[i]).mapv(|v| v / n);
            let db = ds.sum_axis(Axis(0)).mapv(|v| v / n);
            if i > 0 {
                da = ds.dot(&layer.w);
            }
            grads.push((dw, db));
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.param_count());
        for (dw, db) in grads {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        flat
    }

    /// Mean loss over the batch and its gradient covector.
    pub fn loss_and_grad(&self, loss: &LossKind, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        self.validate_with_loss(loss)?;
        batch.validate_for(loss)?;
        let a = self.forward_cache(&batch.inputs)?;
        let y_raw = a.last().unwrap();
        let t = &batch.targets;
        if y_raw.raw_dim() != t.raw_dim() {
            return Err(Error::ShapeMismatch(format!(
                "outputs {:?} vs targets {:?}",
                y_raw.shape(),
                t.shape()
            )));
        }
        let n = y_raw.nrows() as f64;
        let (value, dy) = match loss {
            LossKind::Squared { sigma2 } => {
                let r = y_raw - t;
                let v = r.iter().map(|x| x * x).sum::<f64>() / (2.0 * sigma2) / n;
                (v, r.mapv(|x| x / sigma2))
            }
            LossKind::BinaryCe => {
                let y = clamp_outputs(y_raw)?;
                let mut v = 0.0;
                for (yi, ti) in y.iter().zip(t.iter()) {
                    v -= ti * yi.ln() + (1.0 - ti) * (1.0 - yi).ln();
                }
                let dy = ndarray::Zip::from(&y)
                    .and(t)
                    .map_collect(|yi, ti| (yi - ti) / (yi * (1.0 - yi)));
                (v / n, dy)
            }
            LossKind::MultiClassCe => {
                let y = clamp_outputs(y_raw)?;
                let mut v = 0.0;
                for (yi, ti) in y.iter().zip(t.iter()) {
                    if *ti != 0.0 {
                        v -= ti * yi.ln();
                    }
                }
                let dy = ndarray::Zip::from(&y).and(t).map_collect(|yi, ti| -ti / yi);
                (v / n, dy)
            }
        };
        Ok((value, self.weighted_grad(&a, &dy)))
    }

    /// Forward R/S pass along `v`; also caches the per-layer quantities the
    /// backward passes need.
    fn rs_cache(&self, inputs: &Array2<f64>, v: &[f64]) -> Result<RsCache> {
        let dir = self.split_direction(v)?;
        let a = self.forward_cache(inputs)?;
        let l = self.layers.len();
        let n = inputs.nrows();
        let mut ra: Vec<Array2<f64>> = Vec::with_capacity(l + 1);
        let mut rs: Vec<Array2<f64>> = Vec::with_capacity(l);
        let mut sa_prev = Array2::<f64>::zeros((n, self.in_dim()));
        ra.push(Array2::zeros((n, self.in_dim())));
        let mut sy = Array2::zeros((0, 0));
        for i in 0..l {
            let layer = &self.layers[i];
            let (rw, rb) = &dir[i];
            let a_prev = &a[i];
            let ra_prev = &ra[i];
            // R(s) = R(W) a_prev + W R(a_prev) + R(b)
            let rs_i = a_prev.dot(&rw.t()) + ra_prev.dot(&layer.w.t()) + rb;
            // S(s) = 2 R(W) R(a_prev) + W S(a_prev)   (S(W) = S(b) = 0)
            let ss_i = ra_prev.dot(&rw.t()).mapv(|x| 2.0 * x) + sa_prev.dot(&layer.w.t());
            let y = &a[i + 1];
            let (ra_i, sa_i) = if layer.act.is_elementwise() {
                let d1 = layer.act.d1_from_y(y);
                let d2 = layer.act.d2_from_y(y);
                let ra_i = &d1 * &rs_i;
                let sa_i = &d2 * &rs_i * &rs_i + &d1 * &ss_i;
                (ra_i, sa_i)
            } else {
                let ra_i = softmax_jvp(y, &rs_i);
                let sa_i = softmax_hvp(y, &rs_i) + softmax_jvp(y, &ss_i);
                (ra_i, sa_i)
            };
            if i + 1 == l {
                sy = sa_i.clone();
            }
            sa_prev = sa_i;
            ra.push(ra_i);
            rs.push(rs_i);
        }
        Ok(RsCache { a, ra, rs, sy, dir })
    }

    pub fn rs_pass(&self, inputs: &Array2<f64>, v: &[f64]) -> Result<DirectionalPass> {
        let c = self.rs_cache(inputs, v)?;
        Ok(DirectionalPass {
            y: c.a.last().unwrap().clone(),
            ry: c.ra.last().unwrap().clone(),
            sy: c.sy,
        })
    }

    /// Fisher-vector product: G v as a flat covector (mean over batch).
    pub fn fisher_vp(&self, loss: &LossKind, batch: &Batch, v: &[f64]) -> Result<Vec<f64>> {
        self.validate_with_loss(loss)?;
        let cache = self.rs_cache(&batch.inputs, v)?;
        let y = coefficient_outputs(loss, cache.a.last().unwrap())?;
        let lm = lambda_metric(loss, &y);
        let c = &lm * cache.ra.last().unwrap();
        Ok(self.weighted_grad(&cache.a, &c))
    }

    /// Lowered connection contraction u_nu = g_{nu mu} Gamma^mu_{ab} v^a v^b
    /// as a flat covector; the caller raises the index with a damped solve.
    pub fn connection_vp(
        &self,
        loss: &LossKind,
        batch: &Batch,
        v: &[f64],
        side: ConnectionSide,
    ) -> Result<Vec<f64>> {
        self.validate_with_loss(loss)?;
        let cache = self.rs_cache(&batch.inputs, v)?;
        let y = coefficient_outputs(loss, cache.a.last().unwrap())?;
        let ry = cache.ra.last().unwrap();
        let l1 = lambda_metric(loss, &y);
        let l2 = lambda_quad(loss, &y, side);
        let c = &l1 * &cache.sy + &l2 * ry * ry;
        Ok(self.weighted_grad(&cache.a, &c))
    }

    /// Mixed-derivative contraction sum_i lambda_i d_nu d_a y_i d_b y_i v^a v^b
    /// via a forward R pass and an R-differentiated backward pass.
    pub fn term3_vp(&self, loss: &LossKind, batch: &Batch, v: &[f64]) -> Result<Vec<f64>> {
        self.validate_with_loss(loss)?;
        let cache = self.rs_cache(&batch.inputs, v)?;
        let y = coefficient_outputs(loss, cache.a.last().unwrap())?;
        let c = lambda_metric(loss, &y) * cache.ra.last().unwrap();
        self.rd_backward(&cache, &c)
    }

    /// R-differentiated backward pass: returns the R-derivative along the
    /// cached direction of the backprop of mean_batch sum_i c_i y_i, with `c`
    /// held constant. Softmax outputs are not supported here.
    fn rd_backward(&self, cache: &RsCache, c: &Array2<f64>) -> Result<Vec<f64>> {
        let l = self.layers.len();
        if !self.layers[l - 1].act.is_elementwise() {
            return Err(Error::Config(
                "mixed-derivative products require an elementwise output activation".into(),
            ));
        }
        let n = cache.a[0].nrows() as f64;
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(l);
        let mut da = c.clone();
        let mut rda = Array2::<f64>::zeros(c.raw_dim());
        for i in (0..l).rev() {
            let layer = &self.layers[i];
            let y = &cache.a[i + 1];
            let d1 = layer.act.d1_from_y(y);
            let d2 = layer.act.d2_from_y(y);
            let ds = &da * &d1;
            let rds = &rda * &d1 + &da * &d2 * &cache.rs[i];
            let rdw = rds.t().dot(&cache.a[i]) + ds.t().dot(&cache.ra[i]);
            let rdb = rds.sum_axis(Axis(0));
            if i > 0 {
                let (rw, _) = &cache.dir[i];
                rda = ds.dot(rw) + rds.dot(&layer.w);
                da = ds.dot(&layer.w);
            }
            grads.push((rdw.mapv(|v| v / n), rdb.mapv(|v| v / n)));
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.param_count());
        for (dw, db) in grads {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        Ok(flat)
    }

    /// Right-hand side of the full perturbation correction: with delta1 = v
    /// the assembled covector combines the two mixed-Hessian terms, half the
    /// connection term, and the residual-weighted term, all with z-side
    /// coefficients. The caller solves the damped Fisher system and negates.
    pub fn perturb_rhs(&self, loss: &LossKind, batch: &Batch, v: &[f64]) -> Result<Vec<f64>> {
        self.validate_with_loss(loss)?;
        batch.validate_for(loss)?;
        let cache = self.rs_cache(&batch.inputs, v)?;
        let y = coefficient_outputs(loss, cache.a.last().unwrap())?;
        let ry = cache.ra.last().unwrap();
        let l1 = lambda_metric(loss, &y);
        let l2 = lambda_quad(loss, &y, ConnectionSide::ZSide);
        let resid = &y - &batch.targets;

        // term 1: l1 * d_mu d_j y * d_k y + l2 * d_mu y * d_j y * d_k y
        let mut rhs = self.rd_backward(&cache, &(&l1 * ry))?;
        add_assign(&mut rhs, &self.weighted_grad(&cache.a, &(&l2 * ry * ry)));
        // term 2: 1/2 [l1 * Sy + l2 * Ry^2] * d_mu y
        let t2 = self.weighted_grad(&cache.a, &(&l1 * &cache.sy + &l2 * ry * ry));
        for (r, t) in rhs.iter_mut().zip(&t2) {
            *r += 0.5 * t;
        }
        // term 3: residual-weighted mixed term
        add_assign(&mut rhs, &self.rd_backward(&cache, &(&l1 * &resid))?);
        add_assign(&mut rhs, &self.weighted_grad(&cache.a, &(&l2 * ry * &resid)));
        Ok(rhs)
    }
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

struct RsCache {
    a: Vec<Array2<f64>>,
    ra: Vec<Array2<f64>>,
    rs: Vec<Array2<f64>>,
    sy: Array2<f64>,
    dir: Vec<(Array2<f64>, Array1<f64>)>,
}

/// Outputs as seen by the coefficient formulas: clamped for the losses with
/// poles at 0/1, untouched for the squared loss (identity outputs are
/// unbounded).
fn coefficient_outputs(loss: &LossKind, y: &Array2<f64>) -> Result<Array2<f64>> {
    match loss {
        LossKind::Squared { .. } => Ok(y.clone()),
        LossKind::BinaryCe | LossKind::MultiClassCe => clamp_outputs(y),
    }
}

/// Clamp outputs to [1e-12, 1-1e-12] before evaluating coefficients with
/// poles at 0/1; fails when more than [`MAX_CLAMP_FRACTION`] of the batch
/// saturates.
fn clamp_outputs(y: &Array2<f64>) -> Result<Array2<f64>> {
    let mut clamped = 0usize;
    let out = y.mapv(|v| {
        if v < OUTPUT_CLAMP || v > 1.0 - OUTPUT_CLAMP {
            clamped += 1;
            v.clamp(OUTPUT_CLAMP, 1.0 - OUTPUT_CLAMP)
        } else {
            v
        }
    });
    if clamped as f64 > MAX_CLAMP_FRACTION * y.len() as f64 {
        return Err(Error::NumericalUnderflow(format!(
            "{clamped} of {} outputs clamped",
            y.len()
        )));
    }
    Ok(out)
}

/// Metric coefficient lambda_m(y) per loss. The MCE coefficient is 1/y
/// without a sigma^2 factor (the derivation's form; the main formula's extra
/// factor is documented as an erratum).
fn lambda_metric(loss: &LossKind, y: &Array2<f64>) -> Array2<f64> {
    match loss {
        LossKind::Squared { sigma2 } => Array2::from_elem(y.raw_dim(), 1.0 / sigma2),
        LossKind::BinaryCe => y.mapv(|v| 1.0 / (v * (1.0 - v))),
        LossKind::MultiClassCe => y.mapv(|v| 1.0 / v),
    }
}

/// Quadratic coefficient lambda_2(y); the z-side family carries twice the
/// Levi-Civita value.
fn lambda_quad(loss: &LossKind, y: &Array2<f64>, side: ConnectionSide) -> Array2<f64> {
    let base = match loss {
        LossKind::Squared { .. } => Array2::zeros(y.raw_dim()),
        LossKind::BinaryCe => y.mapv(|v| {
            let q = v * (1.0 - v);
            (2.0 * v - 1.0) / (2.0 * q * q)
        }),
        LossKind::MultiClassCe => y.mapv(|v| -1.0 / (2.0 * v * v)),
    };
    match side {
        ConnectionSide::LeviCivita => base,
        ConnectionSide::ZSide => base.mapv(|v| 2.0 * v),
    }
}

/// Slow finite-difference reference implementations, used by the check suite
/// and the test oracles. Everything here is O(params^2) per sample and only
/// suitable for tiny nets.
pub mod reference {
    use super::*;

    const EPS_J: f64 = 1e-6;
    const EPS_H: f64 = 1e-4;

    /// Output Jacobian (out_dim x params) for a single input row.
    pub fn jacobian(net: &Network, x: &Array2<f64>) -> Result<Array2<f64>> {
        let theta = net.flatten();
        let p = theta.len();
        let o = net.out_dim();
        let mut j = Array2::zeros((o, p));
        for k in 0..p {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += EPS_J;
            tm[k] -= EPS_J;
            let yp = net.unflatten(&tp)?.forward(x)?;
            let ym = net.unflatten(&tm)?.forward(x)?;
            for i in 0..o {
                j[[i, k]] = (yp[[0, i]] - ym[[0, i]]) / (2.0 * EPS_J);
            }
        }
        Ok(j)
    }

    /// Hessian-vector products (H_i v)_k = d_k d_b y_i v^b as an
    /// (out_dim x params) array for one input row, via the 4-point mixed
    /// central difference. Far more accurate than differencing full
    /// finite-difference Hessians.
    pub fn hessian_vp(net: &Network, x: &Array2<f64>, v: &[f64]) -> Result<Array2<f64>> {
        let theta = net.flatten();
        let p = theta.len();
        let o = net.out_dim();
        let eval = |t: &[f64]| -> Result<Array2<f64>> { net.unflatten(t)?.forward(x) };
        let mut out = Array2::zeros((o, p));
        for k in 0..p {
            let shifted = |sk: f64, sv: f64| -> Result<Array2<f64>> {
                let mut t = theta.clone();
                for (tj, vj) in t.iter_mut().zip(v) {
                    *tj += sv * EPS_H * vj;
                }
                t[k] += sk * EPS_H;
                eval(&t)
            };
            let pp = shifted(1.0, 1.0)?;
            let pm = shifted(1.0, -1.0)?;
            let mp = shifted(-1.0, 1.0)?;
            let mm = shifted(-1.0, -1.0)?;
            for i in 0..o {
                out[[i, k]] = (pp[[0, i]] - pm[[0, i]] - mp[[0, i]] + mm[[0, i]])
                    / (4.0 * EPS_H * EPS_H);
            }
        }
        Ok(out)
    }

    fn per_sample<'a>(
        batch: &'a Batch,
        i: usize,
    ) -> (Array2<f64>, ndarray::ArrayView1<'a, f64>) {
        (
            batch
                .inputs
                .row(i)
                .insert_axis(Axis(0))
                .to_owned(),
            batch.targets.row(i),
        )
    }

    /// Brute-force Fisher application mean_batch sum_i lambda_i J_i^T J_i v.
    pub fn fisher_apply(
        net: &Network,
        loss: &LossKind,
        batch: &Batch,
        v: &[f64],
    ) -> Result<Vec<f64>> {
        let n = batch.inputs.nrows();
        let p = net.param_count();
        let mut out = vec![0.0; p];
        for s in 0..n {
            let (x, _) = per_sample(batch, s);
            let y = super::coefficient_outputs(loss, &net.forward(&x)?)?;
            let lam = super::lambda_metric(loss, &y);
            let j = jacobian(net, &x)?;
            for i in 0..net.out_dim() {
                let jv: f64 = (0..p).map(|k| j[[i, k]] * v[k]).sum();
                for k in 0..p {
                    out[k] += lam[[0, i]] * j[[i, k]] * jv / n as f64;
                }
            }
        }
        Ok(out)
    }

    /// Brute-force lowered connection contraction
    /// u_nu = mean sum_i [l1 d_nu y_i (v^T H_i v) + l2 d_nu y_i (J_i v)^2].
    pub fn connection_lowered(
        net: &Network,
        loss: &LossKind,
        batch: &Batch,
        v: &[f64],
        side: ConnectionSide,
    ) -> Result<Vec<f64>> {
        let n = batch.inputs.nrows();
        let p = net.param_count();
        let mut out = vec![0.0; p];
        for s in 0..n {
            let (x, _) = per_sample(batch, s);
            let y = super::coefficient_outputs(loss, &net.forward(&x)?)?;
            let l1 = super::lambda_metric(loss, &y);
            let l2 = super::lambda_quad(loss, &y, side);
            let j = jacobian(net, &x)?;
            let hv = hessian_vp(net, &x, v)?;
            for i in 0..net.out_dim() {
                let jv: f64 = (0..p).map(|k| j[[i, k]] * v[k]).sum();
                let vhv: f64 = (0..p).map(|a| v[a] * hv[[i, a]]).sum();
                for k in 0..p {
                    out[k] +=
                        (l1[[0, i]] * j[[i, k]] * vhv + l2[[0, i]] * j[[i, k]] * jv * jv) / n as f64;
                }
            }
        }
        Ok(out)
    }

    /// Brute-force mixed term mean sum_i lambda_i (H_i v)_nu (J_i v).
    pub fn term3(net: &Network, loss: &LossKind, batch: &Batch, v: &[f64]) -> Result<Vec<f64>> {
        let n = batch.inputs.nrows();
        let p = net.param_count();
        let mut out = vec![0.0; p];
        for s in 0..n {
            let (x, _) = per_sample(batch, s);
            let y = super::coefficient_outputs(loss, &net.forward(&x)?)?;
            let lam = super::lambda_metric(loss, &y);
            let j = jacobian(net, &x)?;
            let hv = hessian_vp(net, &x, v)?;
            for i in 0..net.out_dim() {
                let jv: f64 = (0..p).map(|k| j[[i, k]] * v[k]).sum();
                for k in 0..p {
                    out[k] += lam[[0, i]] * hv[[i, k]] * jv / n as f64;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn net_232(out_act: Activation, seed: u64) -> Network {
        Network::random(&[2, 3, 2], &[Activation::Sigmoid, out_act], seed).unwrap()
    }

    fn batch_232(loss: &LossKind, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));
        let targets = match loss {
            LossKind::Squared { .. } => Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0)),
            LossKind::BinaryCe => {
                Array2::from_shape_fn((3, 2), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            }
            LossKind::MultiClassCe => {
                let mut t = Array2::zeros((3, 2));
                for mut row in t.rows_mut() {
                    row[rng.gen_range(0..2)] = 1.0;
                }
                t
            }
        };
        Batch::new(inputs, targets).unwrap()
    }

    fn rand_dir(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn loss_output_act(loss: &LossKind) -> Activation {
        match loss {
            LossKind::Squared { .. } => Activation::Identity,
            _ => Activation::Sigmoid,
        }
    }

    const LOSSES: [LossKind; 3] = [
        LossKind::Squared { sigma2: 1.0 },
        LossKind::BinaryCe,
        LossKind::MultiClassCe,
    ];

    #[test]
    fn forward_identity_single_layer() {
        let net = Network::new(vec![Layer {
            w: array![[2.0]],
            b: array![1.0],
            act: Activation::Identity,
        }])
        .unwrap();
        let y = net.forward(&array![[3.0]]).unwrap();
        assert_eq!(y[[0, 0]], 7.0);
    }

    #[test]
    fn forward_zero_sigmoid_is_half() {
        let net = Network::new(vec![Layer {
            w: Array2::zeros((2, 3)),
            b: Array1::zeros(2),
            act: Activation::Sigmoid,
        }])
        .unwrap();
        let y = net.forward(&array![[0.3, -0.8, 2.0]]).unwrap();
        assert!(y.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn forward_softmax_symmetry() {
        let net = Network::new(vec![Layer {
            w: Array2::zeros((3, 2)),
            b: Array1::zeros(3),
            act: Activation::Softmax,
        }])
        .unwrap();
        let y = net.forward(&array![[1.0, 2.0]]).unwrap();
        for v in y.iter() {
            assert_relative_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn flatten_round_trip_and_layout() {
        let net = net_232(Activation::Sigmoid, 3);
        let theta = net.flatten();
        assert_eq!(theta.len(), 17);
        assert_eq!(theta[0], net.layers[0].w[[0, 0]]);
        assert_eq!(theta[1], net.layers[0].w[[0, 1]]);
        let back = net.unflatten(&theta).unwrap();
        assert_eq!(back.flatten(), theta);
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let net = net_232(Activation::Sigmoid, 3);
        assert!(matches!(
            net.unflatten(&[0.0; 5]),
            Err(Error::LengthMismatch { expected: 17, got: 5 })
        ));
    }

    #[test]
    fn json_round_trip() {
        let net = net_232(Activation::Tanh, 5);
        let s = net.to_json().unwrap();
        assert!(s.contains("\"w\"") && s.contains("\"act\""));
        let back = Network::from_json(&s).unwrap();
        assert_eq!(net.flatten(), back.flatten());
        assert_eq!(net.layers[1].act, back.layers[1].act);
    }

    #[test]
    fn softmax_only_output() {
        let r = Network::random(
            &[2, 3, 2],
            &[Activation::Softmax, Activation::Identity],
            1,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn loss_activation_compatibility() {
        let net = net_232(Activation::Sigmoid, 1);
        assert!(net
            .validate_with_loss(&LossKind::Squared { sigma2: 1.0 })
            .is_err());
        assert!(net.validate_with_loss(&LossKind::BinaryCe).is_ok());
        assert!(LossKind::Squared { sigma2: 0.0 }.validate().is_err());
    }

    #[test]
    fn squared_loss_at_minimum() {
        let net = net_232(Activation::Identity, 2);
        let inputs = array![[0.5, -0.2]];
        let y = net.forward(&inputs).unwrap();
        let batch = Batch::new(inputs, y).unwrap();
        let (l, g) = net
            .loss_and_grad(&LossKind::Squared { sigma2 : 1.0 }, &batch)
            .unwrap();
        assert_relative_eq!(l, 0.0, epsilon = 1e-15);
        assert!(g.iter().all(|v| v.abs() <= 1e-15));
    }

    #[test]
    fn bce_at_half_is_log2() {
        let net = Network::new(vec![Layer {
            w: Array2::zeros((1, 1)),
            b: Array1::zeros(1),
            act: Activation::Sigmoid,
        }])
        .unwrap();
        let batch = Batch::new(array![[1.0]], array![[1.0]]).unwrap();
        let (l, _) = net.loss_and_grad(&LossKind::BinaryCe, &batch).unwrap();
        assert_relative_eq!(l, 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for loss in LOSSES {
            let net = net_232(loss_output_act(&loss), 7);
            let batch = batch_232(&loss, 8);
            let (_, g) = net.loss_and_grad(&loss, &batch).unwrap();
            let theta = net.flatten();
            for k in 0..theta.len() {
                let h = 1e-6;
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[k] += h;
                tm[k] -= h;
                let (lp, _) = net.unflatten(&tp).unwrap().loss_and_grad(&loss, &batch).unwrap();
                let (lm, _) = net.unflatten(&tm).unwrap().loss_and_grad(&loss, &batch).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                assert_relative_eq!(g[k], fd, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn rs_pass_zero_direction() {
        let net = net_232(Activation::Sigmoid, 4);
        let x = array![[0.1, 0.9], [-0.4, 0.2]];
        let p = net.rs_pass(&x, &vec![0.0; 17]).unwrap();
        assert_eq!(p.y, net.forward(&x).unwrap());
        assert!(p.ry.iter().all(|v| *v == 0.0));
        assert!(p.sy.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_layer_linear_has_zero_sy() {
        let net = Network::new(vec![Layer {
            w: array![[0.3, -0.7], [1.1, 0.2]],
            b: array![0.1, -0.2],
            act: Activation::Identity,
        }])
        .unwrap();
        let v = rand_dir(net.param_count(), 10);
        let p = net.rs_pass(&array![[0.5, 0.6]], &v).unwrap();
        assert!(p.sy.iter().all(|s| s.abs() <= 1e-15));
    }

    #[test]
    fn rs_matches_finite_differences() {
        for out_act in [Activation::Sigmoid, Activation::Identity, Activation::Tanh, Activation::Softmax] {
            let net = net_232(out_act, 11);
            let x = array![[0.4, -0.3]];
            let v = rand_dir(net.param_count(), 12);
            let p = net.rs_pass(&x, &v).unwrap();
            let theta = net.flatten();
            let shift = |eps: f64| -> Array2<f64> {
                let t: Vec<f64> = theta.iter().zip(&v).map(|(a, b)| a + eps * b).collect();
                net.unflatten(&t).unwrap().forward(&x).unwrap()
            };
            let e1 = 1e-5;
            let fd_r = (shift(e1) - shift(-e1)) / (2.0 * e1);
            for (a, b) in p.ry.iter().zip(fd_r.iter()) {
                assert_relative_eq!(a, b, max_relative = 1e-6, epsilon = 1e-9);
            }
            let e2 = 1e-3;
            let fd_s = (shift(e2) - 2.0 * &p.y + shift(-e2)) / (e2 * e2);
            for (a, b) in p.sy.iter().zip(fd_s.iter()) {
                assert_relative_eq!(a, b, max_relative = 1e-4, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn fisher_vp_zero_direction() {
        let net = net_232(Activation::Sigmoid, 13);
        let batch = batch_232(&LossKind::BinaryCe, 14);
        let out = net.fisher_vp(&LossKind::BinaryCe, &batch, &vec![0.0; 17]).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fisher_vp_scalar_closed_form() {
        // y = w x, single sample: G = x^2 / sigma^2
        let net = Network::new(vec![Layer {
            w: array![[1.7]],
            b: array![0.0],
            act: Activation::Identity,
        }])
        .unwrap();
        let x = 0.8;
        let batch = Batch::new(array![[x]], array![[0.0]]).unwrap();
        let loss = LossKind::Squared { sigma2: 2.0 };
        let out = net.fisher_vp(&loss, &batch, &[3.0, 0.0]).unwrap();
        assert_relative_eq!(out[0], x * x * 3.0 / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn fisher_vp_matches_bruteforce_all_losses() {
        for loss in LOSSES {
            let net = net_232(loss_output_act(&loss), 17);
            let batch = batch_232(&loss, 18);
            let v = rand_dir(17, 19);
            let fast = net.fisher_vp(&loss, &batch, &v).unwrap();
            let slow = reference::fisher_apply(&net, &loss, &batch, &v).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                assert_relative_eq!(a, b, max_relative = 1e-5, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn connection_vp_matches_bruteforce_all_losses() {
        for loss in LOSSES {
            for side in [ConnectionSide::LeviCivita, ConnectionSide::ZSide] {
                let net = net_232(loss_output_act(&loss), 21);
                let batch = batch_232(&loss, 22);
                let v = rand_dir(17, 23);
                let fast = net.connection_vp(&loss, &batch, &v, side).unwrap();
                let slow = reference::connection_lowered(&net, &loss, &batch, &v, side).unwrap();
                for (a, b) in fast.iter().zip(&slow) {
                    assert_relative_eq!(a, b, max_relative = 1e-5, epsilon = 1e-7);
                }
            }
        }
    }

    #[test]
    fn connection_vp_zero_for_linear_squared() {
        let net = Network::new(vec![Layer {
            w: array![[0.4, 0.9], [-0.3, 0.5]],
            b: array![0.0, 0.1],
            act: Activation::Identity,
        }])
        .unwrap();
        let batch = Batch::new(array![[0.2, 0.7]], array![[0.0, 0.0]]).unwrap();
        let v = rand_dir(6, 24);
        let out = net
            .connection_vp(&LossKind::Squared { sigma2: 1.0 }, &batch, &v, ConnectionSide::LeviCivita)
            .unwrap();
        assert!(out.iter().all(|u| u.abs() <= 1e-14));
    }

    #[test]
    fn term3_matches_bruteforce() {
        for loss in [LossKind::Squared { sigma2: 1.0 }, LossKind::BinaryCe] {
            let net = net_232(loss_output_act(&loss), 25);
            let batch = batch_232(&loss, 26);
            let v = rand_dir(17, 27);
            let fast = net.term3_vp(&loss, &batch, &v).unwrap();
            let slow = reference::term3(&net, &loss, &batch, &v).unwrap();
            for (a, b) in fast.iter().zip(&slow) {
                assert_relative_eq!(a, b, max_relative = 1e-4, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn term3_zero_for_single_linear_layer() {
        let net = Network::new(vec![Layer {
            w: array![[0.4, 0.9]],
            b: array![0.2],
            act: Activation::Identity,
        }])
        .unwrap();
        let batch = Batch::new(array![[0.2, 0.7]], array![[0.1]]).unwrap();
        let v = rand_dir(3, 30);
        let out = net
            .term3_vp(&LossKind::Squared { sigma2: 1.0 }, &batch, &v)
            .unwrap();
        assert!(out.iter().all(|u| u.abs() <= 1e-14));
    }

    #[test]
    fn term3_rejects_softmax_output() {
        let net = net_232(Activation::Softmax, 31);
        let batch = batch_232(&LossKind::MultiClassCe, 32);
        let err = net
            .term3_vp(&LossKind::MultiClassCe, &batch, &vec![0.1; 17])
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn underflow_detection_on_saturated_outputs() {
        // huge biases push every sigmoid output against the clamp
        let net = Network::new(vec![Layer {
            w: Array2::zeros((2, 2)),
            b: array![50.0, -50.0],
            act: Activation::Sigmoid,
        }])
        .unwrap();
        let batch = Batch::new(array![[0.1, 0.2]], array![[1.0, 0.0]]).unwrap();
        let err = net.loss_and_grad(&LossKind::BinaryCe, &batch).unwrap_err();
        assert!(matches!(err, Error::NumericalUnderflow(_)));
    }

    #[test]
    fn perturb_rhs_equals_smallcurve_for_squared_identity() {
        // with squared loss + identity output the residual-free terms vanish
        // only in the small-curvature combination; compare against the
        // brute-force assembly of the full normal-equation bracket instead
        let loss = LossKind::Squared { sigma2: 1.0 };
        let net = net_232(Activation::Identity, 33);
        let batch = batch_232(&loss, 34);
        let v = rand_dir(17, 35);
        let rhs = net.perturb_rhs(&loss, &batch, &v).unwrap();
        // brute force: T1 + T2 + T3 with z-side coefficients
        let mut slow = reference::term3(&net, &loss, &batch, &v).unwrap();
        let conn = reference::connection_lowered(&net, &loss, &batch, &v, ConnectionSide::ZSide).unwrap();
        // residual-weighted term via finite differences of the jacobian
        let n = batch.inputs.nrows();
        let p = net.param_count();
        for s in 0..n {
            let x = batch.inputs.row(s).insert_axis(Axis(0)).to_owned();
            let y = net.forward(&x).unwrap();
            let hv = reference::hessian_vp(&net, &x, &v).unwrap();
            for i in 0..net.out_dim() {
                let resid = y[[0, i]] - batch.targets[[s, i]];
                for k in 0..p {
                    slow[k] += resid * hv[[i, k]] / n as f64;
                }
            }
        }
        for (a, b) in slow.iter_mut().zip(&conn) {
            *a += 0.5 * b;
        }
        for (a, b) in rhs.iter().zip(&slow) {
            assert_relative_eq!(a, b, max_relative = 1e-4, epsilon = 1e-7);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn fisher_is_symmetric(seed in 0u64..1000) {
            let loss = LossKind::BinaryCe;
            let net = net_232(Activation::Sigmoid, seed);
            let batch = batch_232(&loss, seed.wrapping_add(1));
            let v = rand_dir(17, seed.wrapping_add(2));
            let w = rand_dir(17, seed.wrapping_add(3));
            let gv = net.fisher_vp(&loss, &batch, &v).unwrap();
            let gw = net.fisher_vp(&loss, &batch, &w).unwrap();
            let wgv: f64 = w.iter().zip(&gv).map(|(a, b)| a * b).sum();
            let vgw: f64 = v.iter().zip(&gw).map(|(a, b)| a * b).sum();
            let scale = wgv.abs().max(vgw.abs()).max(1e-30);
            prop_assert!((wgv - vgw).abs() / scale <= 1e-10);
        }

        #[test]
        fn fisher_is_psd(seed in 0u64..1000) {
            let loss = LossKind::BinaryCe;
            let net = net_232(Activation::Sigmoid, seed);
            let batch = batch_232(&loss, seed.wrapping_add(5));
            let v = rand_dir(17, seed.wrapping_add(6));
            let gv = net.fisher_vp(&loss, &batch, &v).unwrap();
            let vgv: f64 = v.iter().zip(&gv).map(|(a, b)| a * b).sum();
            let vv: f64 = v.iter().map(|a| a * a).sum();
            prop_assert!(vgv >= -1e-12 * vv);
        }

        #[test]
        fn connection_is_quadratic(seed in 0u64..1000, s in 0.1f64..4.0) {
            let loss = LossKind::BinaryCe;
            let net = net_232(Activation::Sigmoid, seed);
            let batch = batch_232(&loss, seed.wrapping_add(7));
            let v = rand_dir(17, seed.wrapping_add(8));
            let sv: Vec<f64> = v.iter().map(|x| s * x).collect();
            let u1 = net.connection_vp(&loss, &batch, &v, ConnectionSide::LeviCivita).unwrap();
            let u2 = net.connection_vp(&loss, &batch, &sv, ConnectionSide::LeviCivita).unwrap();
            for (a, b) in u1.iter().zip(&u2) {
                let scale = (s * s * a).abs().max(1e-30);
                prop_assert!((s * s * a - b).abs() / scale <= 1e-9);
            }
        }
    }

    #[test]
    fn connection_polarization_identity() {
        // u(v+w) - u(v) - u(w) is twice the symmetric bilinear cross term,
        // checked against the brute-force bilinear assembly
        let loss = LossKind::BinaryCe;
        let net = net_232(Activation::Sigmoid, 40);
        let batch = batch_232(&loss, 41);
        let v = rand_dir(17, 42);
        let w = rand_dir(17, 43);
        let vw: Vec<f64> = v.iter().zip(&w).map(|(a, b)| a + b).collect();
        let uvw = net.connection_vp(&loss, &batch, &vw, ConnectionSide::LeviCivita).unwrap();
        let uv = net.connection_vp(&loss, &batch, &v, ConnectionSide::LeviCivita).unwrap();
        let uw = net.connection_vp(&loss, &batch, &w, ConnectionSide::LeviCivita).unwrap();
        // brute-force bilinear cross term 2*B(v,w) via the Jacobian/Hessian assembly
        let n = batch.inputs.nrows();
        let p = net.param_count();
        let mut cross = vec![0.0; p];
        for s in 0..n {
            let x = batch.inputs.row(s).insert_axis(Axis(0)).to_owned();
            let y = coefficient_outputs(&loss, &net.forward(&x).unwrap()).unwrap();
            let l1 = lambda_metric(&loss, &y);
            let l2 = lambda_quad(&loss, &y, ConnectionSide::LeviCivita);
            let j = reference::jacobian(&net, &x).unwrap();
            let hw_all = reference::hessian_vp(&net, &x, &w).unwrap();
            for i in 0..net.out_dim() {
                let jv: f64 = (0..p).map(|k| j[[i, k]] * v[k]).sum();
                let jw: f64 = (0..p).map(|k| j[[i, k]] * w[k]).sum();
                let vhw: f64 = (0..p).map(|a| v[a] * hw_all[[i, a]]).sum();
                for k in 0..p {
                    cross[k] += 2.0
                        * (l1[[0, i]] * j[[i, k]] * vhw + l2[[0, i]] * j[[i, k]] * jv * jw)
                        / n as f64;
                }
            }
        }
        for k in 0..p {
            let lhs = uvw[k] - uv[k] - uw[k];
            assert_relative_eq!(lhs, cross[k], max_relative = 1e-4, epsilon = 1e-6);
        }
    }
}
