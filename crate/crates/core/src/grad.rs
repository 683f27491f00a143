//! Hand-derived reverse-mode gradients for every fusion variant, a central
//! finite-difference oracle, the Frobenius penalty, and Adam.
//!
//! `backward` differentiates the scalar `<upstream, forward(z_a, z_d)>`.
//! Tied arrays (the CMF mode-0 factor `U`, and `V_a`/`V_d` under shared
//! rows) own a single gradient slot that sums every appearance.

use crate::error::{Error, Result};
use crate::factorizations::{pad_one, CmfParams, CpFactors, TuckerFactors};
use crate::fusion::{padded_t_matvec, tucker_core_contract, DenseParams, FusionLayer, LayerParams};
use crate::tensor::{outer_product, DenseTensor};

/// Gradients congruent with [`FusionLayer::arrays`], plus input gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub params: Vec<(&'static str, DenseTensor)>,
    pub z_a: Vec<f64>,
    pub z_d: Vec<f64>,
}

impl ParamGradients {
    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.params.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    /// Adds `scale * other` into `self`. Both must come from the same layer.
    pub fn add_scaled(&mut self, other: &ParamGradients, scale: f64) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::InvalidArgument("gradient bundles differ in arity".into()));
        }
        for ((_, acc), (_, g)) in self.params.iter_mut().zip(&other.params) {
            if acc.dims() != g.dims() {
                return Err(Error::dims("add_scaled", acc.dims(), g.dims()));
            }
            for (x, y) in acc.data_mut().iter_mut().zip(g.data()) {
                *x += scale * y;
            }
        }
        for (x, y) in self.z_a.iter_mut().zip(&other.z_a) {
            *x += scale * y;
        }
        for (x, y) in self.z_d.iter_mut().zip(&other.z_d) {
            *x += scale * y;
        }
        Ok(())
    }

    /// Zero gradients shaped like `layer`.
    pub fn zeros_like(layer: &FusionLayer) -> ParamGradients {
        let config = layer.config();
        ParamGradients {
            params: layer
                .arrays()
                .into_iter()
                .map(|(name, t)| (name, DenseTensor::from_parts(t.shape().clone(), vec![0.0; t.len()])))
                .collect(),
            z_a: vec![0.0; config.a],
            z_d: vec![0.0; config.d],
        }
    }
}

/// `x y^T` for column vectors `x`, `y`.
fn outer2(x: &[f64], y: &[f64]) -> Result<DenseTensor> {
    outer_product(&[x, y])
}

/// Gradient of `<upstream, layer.forward(z_a, z_d)>` w.r.t. every stored
/// parameter array and both inputs.
pub fn backward(layer: &FusionLayer, z_a: &[f64], z_d: &[f64], upstream: &[f64]) -> Result<ParamGradients> {
    layer.check_inputs(z_a, z_d)?;
    if upstream.len() != layer.output_dim() {
        return Err(Error::dims("backward upstream", &[layer.output_dim()], &[upstream.len()]));
    }
    match layer.params() {
        LayerParams::Dense(p) => backward_dense(p, z_a, z_d, upstream),
        LayerParams::Joint(w) => backward_joint(w, z_a, z_d, upstream),
        LayerParams::Cp(f) => backward_cp(f, z_a, z_d, upstream),
        LayerParams::Tucker(f) => backward_tucker(f, z_a, z_d, upstream),
        LayerParams::Cmf(p) => backward_cmf(p, z_a, z_d, upstream),
        LayerParams::Concat => {
            let (ga, gd) = upstream.split_at(z_a.len());
            Ok(ParamGradients {
                params: vec![],
                z_a: ga.to_vec(),
                z_d: gd.to_vec(),
            })
        }
    }
}

fn backward_dense(p: &DenseParams, z_a: &[f64], z_d: &[f64], g: &[f64]) -> Result<ParamGradients> {
    let dw_ad = outer_product(&[g, z_a, z_d])?;
    // W_ad ×_0 g leaves an a x d matrix M; dz_a = M z_d, dz_d = M^T z_a.
    let contracted = p.w_ad.mode_n_vec_product(0, g)?;
    let mut dz_a = p.w_a.t_matvec(g)?;
    for (x, y) in dz_a.iter_mut().zip(contracted.matvec(z_d)?) {
        *x += y;
    }
    let mut dz_d = p.w_d.t_matvec(g)?;
    for (x, y) in dz_d.iter_mut().zip(contracted.t_matvec(z_a)?) {
        *x += y;
    }
    Ok(ParamGradients {
        params: vec![
            ("b", DenseTensor::vector(g)?),
            ("W_a", outer2(g, z_a)?),
            ("W_d", outer2(g, z_d)?),
            ("W_ad", dw_ad),
        ],
        z_a: dz_a,
        z_d: dz_d,
    })
}

fn backward_joint(w: &DenseTensor, z_a: &[f64], z_d: &[f64], g: &[f64]) -> Result<ParamGradients> {
    let (pa, pd) = (pad_one(z_a), pad_one(z_d));
    let contracted = w.mode_n_vec_product(0, g)?;
    let mut dz_a = contracted.matvec(&pd)?;
    let mut dz_d = contracted.t_matvec(&pa)?;
    dz_a.pop();
    dz_d.pop();
    Ok(ParamGradients {
        params: vec![("W", outer_product(&[g, &pa, &pd])?)],
        z_a: dz_a,
        z_d: dz_d,
    })
}

fn backward_cp(f: &CpFactors, z_a: &[f64], z_d: &[f64], g: &[f64]) -> Result<ParamGradients> {
    let pa = padded_t_matvec(f.factor(1), z_a);
    let pd = padded_t_matvec(f.factor(2), z_d);
    let s: Vec<f64> = pa.iter().zip(&pd).map(|(x, y)| x * y).collect();
    let ds = f.factor(0).t_matvec(g)?;
    let dpa: Vec<f64> = ds.iter().zip(&pd).map(|(x, y)| x * y).collect();
    let dpd: Vec<f64> = ds.iter().zip(&pa).map(|(x, y)| x * y).collect();
    let mut dz_a = f.factor(1).matvec(&dpa)?;
    let mut dz_d = f.factor(2).matvec(&dpd)?;
    dz_a.pop();
    dz_d.pop();
    Ok(ParamGradients {
        params: vec![
            ("A1", outer2(g, &s)?),
            ("A2", outer2(&pad_one(z_a), &dpa)?),
            ("A3", outer2(&pad_one(z_d), &dpd)?),
        ],
        z_a: dz_a,
        z_d: dz_d,
    })
}

fn backward_tucker(f: &TuckerFactors, z_a: &[f64], z_d: &[f64], g: &[f64]) -> Result<ParamGradients> {
    let pa = padded_t_matvec(f.factor(1), z_a);
    let pd = padded_t_matvec(f.factor(2), z_d);
    let h = tucker_core_contract(f.core(), &pa, &pd);
    let dh = f.factor(0).t_matvec(g)?;
    // G ×_0 dh is a k2 x k3 matrix M; dpa = M pd, dpd = M^T pa.
    let contracted = f.core().mode_n_vec_product(0, &dh)?;
    let dpa = contracted.matvec(&pd)?;
    let dpd = contracted.t_matvec(&pa)?;
    let mut dz_a = f.factor(1).matvec(&dpa)?;
    let mut dz_d = f.factor(2).matvec(&dpd)?;
    dz_a.pop();
    dz_d.pop();
    Ok(ParamGradients {
        params: vec![
            ("G", outer_product(&[&dh, &pa, &pd])?),
            ("U1", outer2(g, &h)?),
            ("U2", outer2(&pad_one(z_a), &dpa)?),
            ("U3", outer2(&pad_one(z_d), &dpd)?),
        ],
        z_a: dz_a,
        z_d: dz_d,
    })
}

fn backward_cmf(p: &CmfParams, z_a: &[f64], z_d: &[f64], g: &[f64]) -> Result<ParamGradients> {
    let la = p.v_a().t_matvec(z_a)?;
    let ld = p.v_d().t_matvec(z_d)?;
    let qa = p.b2().t_matvec(z_a)?;
    let qd = p.b3().t_matvec(z_d)?;
    let s: Vec<f64> = (0..la.len()).map(|r| la[r] + ld[r] + qa[r] * qd[r]).collect();
    let ds = p.u().t_matvec(g)?;
    let dqa: Vec<f64> = ds.iter().zip(&qd).map(|(x, y)| x * y).collect();
    let dqd: Vec<f64> = ds.iter().zip(&qa).map(|(x, y)| x * y).collect();

    let mut dz_a = p.v_a().matvec(&ds)?;
    for (x, y) in dz_a.iter_mut().zip(p.b2().matvec(&dqa)?) {
        *x += y;
    }
    let mut dz_d = p.v_d().matvec(&ds)?;
    for (x, y) in dz_d.iter_mut().zip(p.b3().matvec(&dqd)?) {
        *x += y;
    }

    let mut dv_a = outer2(z_a, &ds)?;
    let mut dv_d = outer2(z_d, &ds)?;
    let db2 = outer2(z_a, &dqa)?;
    let db3 = outer2(z_d, &dqd)?;
    let mut params = vec![("b", DenseTensor::vector(g)?), ("U", outer2(g, &s)?)];
    if p.shared_rows() {
        for (x, y) in dv_a.data_mut().iter_mut().zip(db2.data()) {
            *x += y;
        }
        for (x, y) in dv_d.data_mut().iter_mut().zip(db3.data()) {
            *x += y;
        }
        params.push(("V_a", dv_a));
        params.push(("V_d", dv_d));
    } else {
        params.push(("V_a", dv_a));
        params.push(("V_d", dv_d));
        params.push(("B2", db2));
        params.push(("B3", db3));
    }
    Ok(ParamGradients {
        params,
        z_a: dz_a,
        z_d: dz_d,
    })
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` per coordinate.
pub fn finite_diff_gradient<F>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { offset: i });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Finite-difference gradients of `<upstream, forward>` for every array and
/// both inputs of `layer`, laid out like [`backward`]'s result.
pub fn finite_diff_layer(
    layer: &FusionLayer,
    z_a: &[f64],
    z_d: &[f64],
    upstream: &[f64],
    h: f64,
) -> Result<ParamGradients> {
    let objective = |l: &FusionLayer, za: &[f64], zd: &[f64]| -> f64 {
        match l.forward(za, zd) {
            Ok(y) => y.iter().zip(upstream).map(|(a, b)| a * b).sum(),
            Err(_) => f64::NAN,
        }
    };
    let names: Vec<&'static str> = layer.arrays().iter().map(|(n, _)| *n).collect();
    let mut probe = layer.clone();
    let mut params = Vec::with_capacity(names.len());
    for (idx, name) in names.into_iter().enumerate() {
        let original = layer.arrays()[idx].1.clone();
        let grad = finite_diff_gradient(
            |values| {
                probe.arrays_mut()[idx].data_mut().copy_from_slice(values);
                objective(&probe, z_a, z_d)
            },
            original.data(),
            h,
        )?;
        probe.arrays_mut()[idx].data_mut().copy_from_slice(original.data());
        params.push((name, DenseTensor::from_parts(original.shape().clone(), grad)));
    }
    let dz_a = finite_diff_gradient(|za| objective(layer, za, z_d), z_a, h)?;
    let dz_d = finite_diff_gradient(|zd| objective(layer, z_a, zd), z_d, h)?;
    Ok(ParamGradients {
        params,
        z_a: dz_a,
        z_d: dz_d,
    })
}

/// Elementwise relative error `|x - y| / max(|x|, |y|, 1)`; the unit floor
/// keeps near-zero gradients from amplifying rounding noise.
pub fn relative_error(x: f64, y: f64) -> f64 {
    (x - y).abs() / x.abs().max(y.abs()).max(1.0)
}

/// Worst [`relative_error`] per named array (inputs as `z_a`, `z_d`).
pub fn compare_gradients(analytic: &ParamGradients, numeric: &ParamGradients) -> Result<Vec<(String, f64)>> {
    if analytic.params.len() != numeric.params.len() {
        return Err(Error::InvalidArgument("gradient bundles differ in arity".into()));
    }
    let worst = |x: &[f64], y: &[f64]| {
        x.iter()
            .zip(y)
            .map(|(a, b)| relative_error(*a, *b))
            .fold(0.0_f64, f64::max)
    };
    let mut out: Vec<(String, f64)> = analytic
        .params
        .iter()
        .zip(&numeric.params)
        .map(|((name, a), (_, n))| (name.to_string(), worst(a.data(), n.data())))
        .collect();
    out.push(("z_a".into(), worst(&analytic.z_a, &numeric.z_a)));
    out.push(("z_d".into(), worst(&analytic.z_d, &numeric.z_d)));
    Ok(out)
}

/// Sum of squared Frobenius norms over the stored arrays, tied arrays once.
pub fn frobenius_penalty(layer: &FusionLayer) -> f64 {
    layer.arrays().iter().map(|(_, t)| t.squared_norm()).sum()
}

/// Gradient of [`frobenius_penalty`]: `2 P` per array.
pub fn penalty_gradient(layer: &FusionLayer) -> Vec<(&'static str, DenseTensor)> {
    layer
        .arrays()
        .into_iter()
        .map(|(name, t)| {
            let data = t.data().iter().map(|x| 2.0 * x).collect();
            (name, DenseTensor::from_parts(t.shape().clone(), data))
        })
        .collect()
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments, one moment pair per parameter array.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero moments for arrays of the given lengths.
    pub fn new(config: AdamConfig, lens: &[usize]) -> Self {
        AdamState {
            config,
            t: 0,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_layer(config: AdamConfig, layer: &FusionLayer) -> Self {
        let lens: Vec<usize> = layer.arrays().iter().map(|(_, t)| t.len()).collect();
        Self::new(config, &lens)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every array:
    /// `m ← β1 m + (1-β1) g`, `v ← β2 v + (1-β2) g²`,
    /// `p ← p - lr m̂ / (√v̂ + ε)` with `m̂ = m / (1-β1^t)`, `v̂ = v / (1-β2^t)`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dims(
                "adam_step arity",
                &[self.m.len()],
                &[params.len(), grads.len()],
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::dims("adam_step", &[self.m[i].len()], &[p.len(), g.len()]));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Applies one step to a layer's arrays using gradients in
    /// [`FusionLayer::arrays`] order.
    pub fn step_layer(&mut self, layer: &mut FusionLayer, grads: &[(&'static str, DenseTensor)]) -> Result<()> {
        let grad_slices: Vec<&[f64]> = grads.iter().map(|(_, g)| g.data()).collect();
        let mut arrays = layer.arrays_mut();
        let mut param_slices: Vec<&mut [f64]> = arrays.iter_mut().map(|t| t.data_mut()).collect();
        self.step(&mut param_slices, &grad_slices)
    }
}
