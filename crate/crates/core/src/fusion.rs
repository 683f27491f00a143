//! The polynomial fusion layer.
//!
//! Given an audio embedding `z_a ∈ R^a` and an identity embedding
//! `z_d ∈ R^d`, the layer returns
//!
//! ```text
//! z̃ = b + W_a z_a + W_d z_d + W_ad ×_1 z_a ×_2 z_d            (dense form)
//!   = W ×_1 [z_a, 1] ×_2 [z_d, 1]                             (joint form)
//! ```
//!
//! where the joint tensor `W ∈ R^{m x (a+1) x (d+1)}` collects all three
//! orders. The factorized variants hold `W` (or its blocks) in CP, Tucker or
//! coupled matrix-tensor form and contract inputs against the small factors
//! first, so a forward pass costs `O((m + a + d) k)` and never materializes
//! `W`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorizations::{
    cmf_assemble_dense, cp_reconstruct, pad_one, tucker_reconstruct, BilinearRows, CmfParams,
    CpFactors, TuckerFactors,
};
use crate::tensor::DenseTensor;

/// Fusion layer family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "Dense")]
    Dense,
    #[serde(rename = "PF-CP")]
    Cp,
    #[serde(rename = "PF-Tucker")]
    Tucker,
    #[serde(rename = "PF-CMF")]
    Cmf,
    #[serde(rename = "PF-CMF-SR")]
    CmfSr,
    #[serde(rename = "Concat")]
    Concat,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Dense,
        Variant::Cp,
        Variant::Tucker,
        Variant::Cmf,
        Variant::CmfSr,
        Variant::Concat,
    ];

    pub const FACTORIZED: [Variant; 4] = [Variant::Cp, Variant::Tucker, Variant::Cmf, Variant::CmfSr];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dense => "Dense",
            Variant::Cp => "PF-CP",
            Variant::Tucker => "PF-Tucker",
            Variant::Cmf => "PF-CMF",
            Variant::CmfSr => "PF-CMF-SR",
            Variant::Concat => "Concat",
        }
    }

    pub fn is_factorized(self) -> bool {
        Self::FACTORIZED.contains(&self)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

/// Rank hyperparameter: `k` for CP and CMF, `(k1, k2, k3)` for Tucker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rank {
    None,
    Cp(usize),
    Tucker([usize; 3]),
}

/// Layer dimensions and family. `c = m + n` is the width after the noise
/// embedding is appended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ConfigJson", into = "ConfigJson")]
pub struct FusionConfig {
    pub variant: Variant,
    pub m: usize,
    pub a: usize,
    pub d: usize,
    pub n: usize,
    pub rank: Rank,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigJson {
    variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    a: usize,
    d: usize,
    #[serde(default)]
    n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ranks: Option<[usize; 3]>,
}

impl TryFrom<ConfigJson> for FusionConfig {
    type Error = Error;

    fn try_from(raw: ConfigJson) -> Result<Self> {
        let m = match (raw.m, raw.variant) {
            (Some(m), _) => m,
            (None, Variant::Concat) => raw.a + raw.d,
            (None, v) => return Err(Error::InvalidConfig(format!("{v} requires m"))),
        };
        let rank = match (raw.rank, raw.ranks) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidConfig("give either rank or ranks, not both".into()))
            }
            (Some(k), None) => Rank::Cp(k),
            (None, Some(ks)) => Rank::Tucker(ks),
            (None, None) => Rank::None,
        };
        FusionConfig::new(raw.variant, m, raw.a, raw.d, raw.n, rank)
    }
}

impl From<FusionConfig> for ConfigJson {
    fn from(c: FusionConfig) -> Self {
        let (rank, ranks) = match c.rank {
            Rank::None => (None, None),
            Rank::Cp(k) => (Some(k), None),
            Rank::Tucker(ks) => (None, Some(ks)),
        };
        ConfigJson {
            variant: c.variant,
            m: Some(c.m),
            a: c.a,
            d: c.d,
            n: c.n,
            rank,
            ranks,
        }
    }
}

impl FusionConfig {
    /// Validated constructor.
    pub fn new(variant: Variant, m: usize, a: usize, d: usize, n: usize, rank: Rank) -> Result<Self> {
        let config = FusionConfig {
            variant,
            m,
            a,
            d,
            n,
            rank,
        };
        config.validate()?;
        Ok(config)
    }

    /// Convenience constructor that picks the rank shape from the variant:
    /// `k` for CP/CMF, `(k, k, k)` for Tucker, nothing for Dense/Concat.
    pub fn with_uniform_rank(variant: Variant, m: usize, a: usize, d: usize, n: usize, k: usize) -> Result<Self> {
        let rank = match variant {
            Variant::Cp | Variant::Cmf | Variant::CmfSr => Rank::Cp(k),
            Variant::Tucker => Rank::Tucker([k, k, k]),
            Variant::Dense | Variant::Concat => Rank::None,
        };
        let m = if variant == Variant::Concat { a + d } else { m };
        Self::new(variant, m, a, d, n, rank)
    }

    /// The full-size speech-animation setting: `a = 256`, `d = 128`,
    /// `n = 10`, `m = 384`, `k = 128`, Tucker ranks `(192, 128, 64)`.
    pub fn full_scale(variant: Variant) -> FusionConfig {
        let rank = match variant {
            Variant::Cp | Variant::Cmf | Variant::CmfSr => Rank::Cp(128),
            Variant::Tucker => Rank::Tucker([192, 128, 64]),
            Variant::Dense | Variant::Concat => Rank::None,
        };
        FusionConfig {
            variant,
            m: 384,
            a: 256,
            d: 128,
            n: 10,
            rank,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.a == 0 || self.d == 0 {
            return Err(Error::InvalidConfig(format!(
                "m, a, d must be positive (got m={}, a={}, d={})",
                self.m, self.a, self.d
            )));
        }
        match (self.variant, self.rank) {
            (Variant::Cp | Variant::Cmf | Variant::CmfSr, Rank::Cp(k)) if k >= 1 => {}
            (Variant::Tucker, Rank::Tucker(ks)) if ks.iter().all(|&k| k >= 1) => {}
            (Variant::Dense | Variant::Concat, Rank::None) => {}
            (v, r) => {
                return Err(Error::InvalidConfig(format!(
                    "rank {r:?} does not fit variant {v}"
                )))
            }
        }
        if self.variant == Variant::Concat && self.m != self.a + self.d {
            return Err(Error::InvalidConfig(format!(
                "Concat requires m = a + d = {}, got {}",
                self.a + self.d,
                self.m
            )));
        }
        Ok(())
    }

    /// Joint-representation width `c = m + n`.
    pub fn c(&self) -> usize {
        self.output_dim() + self.n
    }

    pub fn output_dim(&self) -> usize {
        if self.variant == Variant::Concat {
            self.a + self.d
        } else {
            self.m
        }
    }

    /// Entry count of the dense joint tensor `m (a+1) (d+1)`.
    pub fn joint_numel(&self) -> usize {
        self.m * (self.a + 1) * (self.d + 1)
    }

    /// Shapes of the stored parameter arrays, tied arrays listed once.
    pub fn array_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let FusionConfig { m, a, d, .. } = *self;
        let k = match self.rank {
            Rank::Cp(k) => k,
            _ => 0,
        };
        match self.variant {
            Variant::Dense => vec![
                ("b", vec![m]),
                ("W_a", vec![m, a]),
                ("W_d", vec![m, d]),
                ("W_ad", vec![m, a, d]),
            ],
            Variant::Cp => vec![
                ("A1", vec![m, k]),
                ("A2", vec![a + 1, k]),
                ("A3", vec![d + 1, k]),
            ],
            Variant::Tucker => {
                let [k1, k2, k3] = match self.rank {
                    Rank::Tucker(ks) => ks,
                    _ => [0; 3],
                };
                vec![
                    ("G", vec![k1, k2, k3]),
                    ("U1", vec![m, k1]),
                    ("U2", vec![a + 1, k2]),
                    ("U3", vec![d + 1, k3]),
                ]
            }
            Variant::Cmf => vec![
                ("b", vec![m]),
                ("U", vec![m, k]),
                ("V_a", vec![a, k]),
                ("V_d", vec![d, k]),
                ("B2", vec![a, k]),
                ("B3", vec![d, k]),
            ],
            Variant::CmfSr => vec![
                ("b", vec![m]),
                ("U", vec![m, k]),
                ("V_a", vec![a, k]),
                ("V_d", vec![d, k]),
            ],
            Variant::Concat => vec![],
        }
    }
}

/// Number of trainable scalars, tied arrays counted once.
pub fn param_count(config: &FusionConfig) -> usize {
    let FusionConfig { m, a, d, .. } = *config;
    match (config.variant, config.rank) {
        (Variant::Dense, _) => m + m * a + m * d + m * a * d,
        (Variant::Cp, Rank::Cp(k)) => k * (m + a + 1 + d + 1),
        (Variant::Tucker, Rank::Tucker([k1, k2, k3])) => {
            k1 * k2 * k3 + m * k1 + (a + 1) * k2 + (d + 1) * k3
        }
        (Variant::Cmf, Rank::Cp(k)) => m + k * (m + 2 * a + 2 * d),
        (Variant::CmfSr, Rank::Cp(k)) => m + k * (m + a + d),
        (Variant::Cmf | Variant::CmfSr, _) => m,
        _ => 0,
    }
}

/// Unfactorized parameters of the dense polynomial.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub b: DenseTensor,
    pub w_a: DenseTensor,
    pub w_d: DenseTensor,
    pub w_ad: DenseTensor,
}

impl DenseParams {
    /// Joint tensor with the bias and first-order blocks at the trailing
    /// index of modes 1 and 2.
    pub fn to_joint(&self) -> Result<DenseTensor> {
        let (m, a, d) = (self.b.len(), self.w_a.ncols(), self.w_d.ncols());
        let mut w = DenseTensor::zeros(&[m, a + 1, d + 1])?;
        let at = |p: usize, q: usize, r: usize| p + m * (q + (a + 1) * r);
        let data = w.data_mut();
        for r in 0..d {
            for q in 0..a {
                for p in 0..m {
                    data[at(p, q, r)] = self.w_ad.data()[p + m * (q + a * r)];
                }
            }
        }
        for q in 0..a {
            for p in 0..m {
                data[at(p, q, d)] = self.w_a.at(p, q);
            }
        }
        for r in 0..d {
            for p in 0..m {
                data[at(p, a, r)] = self.w_d.at(p, r);
            }
        }
        for (p, &bp) in self.b.data().iter().enumerate() {
            data[at(p, a, d)] = bp;
        }
        Ok(w)
    }
}

/// Parameter storage, one shape per family. The Dense variant can be held
/// either as separate blocks or as the single joint tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Dense(DenseParams),
    Joint(DenseTensor),
    Cp(CpFactors),
    Tucker(TuckerFactors),
    Cmf(CmfParams),
    Concat,
}

/// A configured fusion layer. Immutable once built; forwards are pure.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionLayer {
    config: FusionConfig,
    params: LayerParams,
}

impl FusionLayer {
    pub fn new(config: FusionConfig, params: LayerParams) -> Result<Self> {
        config.validate()?;
        let FusionConfig { m, a, d, .. } = config;
        let mismatch = |what: &str| {
            Error::InvalidConfig(format!("{what} does not match config {}", config.variant))
        };
        match (&params, config.variant, config.rank) {
            (LayerParams::Dense(p), Variant::Dense, _) => {
                if p.b.dims() != [m]
                    || p.w_a.dims() != [m, a]
                    || p.w_d.dims() != [m, d]
                    || p.w_ad.dims() != [m, a, d]
                {
                    return Err(mismatch("dense parameter shapes"));
                }
            }
            (LayerParams::Joint(w), Variant::Dense, _) => {
                if w.dims() != [m, a + 1, d + 1] {
                    return Err(mismatch("joint tensor shape"));
                }
            }
            (LayerParams::Cp(f), Variant::Cp, Rank::Cp(k)) => {
                if f.joint_dims() != [m, a + 1, d + 1] || f.rank() != k {
                    return Err(mismatch("CP factor shapes"));
                }
            }
            (LayerParams::Tucker(f), Variant::Tucker, Rank::Tucker(ks)) => {
                if f.joint_dims() != [m, a + 1, d + 1] || f.ranks() != ks {
                    return Err(mismatch("Tucker factor shapes"));
                }
            }
            (LayerParams::Cmf(p), Variant::Cmf | Variant::CmfSr, Rank::Cp(k)) => {
                let shared = config.variant == Variant::CmfSr;
                if p.dims() != [m, a, d] || p.rank() != k || p.shared_rows() != shared {
                    return Err(mismatch("CMF parameter shapes"));
                }
            }
            (LayerParams::Concat, Variant::Concat, _) => {}
            _ => return Err(mismatch("parameter family")),
        }
        Ok(FusionLayer { config, params })
    }

    /// All parameters zero.
    pub fn zeros(config: FusionConfig) -> Result<Self> {
        Self::filled(config, || 0.0)
    }

    /// I.i.d. zero-mean Gaussian parameters with standard deviation `std`,
    /// drawn array by array in [`arrays`](Self::arrays) order.
    pub fn random<R: Rng + ?Sized>(config: FusionConfig, std: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidArgument(format!("bad init std {std}: {e}")))?;
        Self::filled(config, || normal.sample(rng))
    }

    fn filled(config: FusionConfig, mut sample: impl FnMut() -> f64) -> Result<Self> {
        config.validate()?;
        let arrays = config
            .array_shapes()
            .into_iter()
            .map(|(name, dims)| {
                let n: usize = dims.iter().product();
                let data = (0..n).map(|_| sample()).collect();
                Ok((name.to_string(), DenseTensor::from_dims(&dims, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_named_arrays(config, arrays)
    }

    /// Rebuilds a layer from named arrays (the names listed by
    /// [`FusionConfig::array_shapes`], or a single `W` for a joint-form
    /// Dense layer).
    pub fn from_named_arrays(config: FusionConfig, arrays: Vec<(String, DenseTensor)>) -> Result<Self> {
        let mut arrays: std::collections::HashMap<String, DenseTensor> = arrays.into_iter().collect();
        let mut take = |name: &str| {
            arrays
                .remove(name)
                .ok_or_else(|| Error::Bundle(format!("missing array {name}")))
        };
        let params = match config.variant {
            Variant::Dense => match take("W") {
                Ok(w) => LayerParams::Joint(w),
                Err(_) => LayerParams::Dense(DenseParams {
                    b: take("b")?,
                    w_a: take("W_a")?,
                    w_d: take("W_d")?,
                    w_ad: take("W_ad")?,
                }),
            },
            Variant::Cp => LayerParams::Cp(CpFactors::new(take("A1")?, take("A2")?, take("A3")?)?),
            Variant::Tucker => LayerParams::Tucker(TuckerFactors::new(
                take("G")?,
                take("U1")?,
                take("U2")?,
                take("U3")?,
            )?),
            Variant::Cmf | Variant::CmfSr => {
                let (b, u, v_a, v_d) = (take("b")?, take("U")?, take("V_a")?, take("V_d")?);
                let rows = if config.variant == Variant::CmfSr {
                    BilinearRows::Shared
                } else {
                    BilinearRows::Separate {
                        b2: take("B2")?,
                        b3: take("B3")?,
                    }
                };
                LayerParams::Cmf(CmfParams::new(b, u, v_a, v_d, rows)?)
            }
            Variant::Concat => LayerParams::Concat,
        };
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::Bundle(format!("unexpected array {extra}")));
        }
        Self::new(config, params)
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Stored parameter arrays in canonical order; a tied array appears once.
    pub fn arrays(&self) -> Vec<(&'static str, &DenseTensor)> {
        match &self.params {
            LayerParams::Dense(p) => vec![("b", &p.b), ("W_a", &p.w_a), ("W_d", &p.w_d), ("W_ad", &p.w_ad)],
            LayerParams::Joint(w) => vec![("W", w)],
            LayerParams::Cp(f) => vec![("A1", f.factor(0)), ("A2", f.factor(1)), ("A3", f.factor(2))],
            LayerParams::Tucker(f) => vec![
                ("G", f.core()),
                ("U1", f.factor(0)),
                ("U2", f.factor(1)),
                ("U3", f.factor(2)),
            ],
            LayerParams::Cmf(p) => {
                let mut out = vec![("b", p.bias()), ("U", p.u()), ("V_a", p.v_a()), ("V_d", p.v_d())];
                if !p.shared_rows() {
                    out.push(("B2", p.b2()));
                    out.push(("B3", p.b3()));
                }
                out
            }
            LayerParams::Concat => vec![],
        }
    }

    /// Mutable view of the same arrays, same order as [`arrays`](Self::arrays).
    pub fn arrays_mut(&mut self) -> Vec<&mut DenseTensor> {
        match &mut self.params {
            LayerParams::Dense(p) => vec![&mut p.b, &mut p.w_a, &mut p.w_d, &mut p.w_ad],
            LayerParams::Joint(w) => vec![w],
            LayerParams::Cp(f) => f.factors_mut().iter_mut().collect(),
            LayerParams::Tucker(f) => {
                let (core, factors) = f.parts_mut();
                let mut out = vec![core];
                out.extend(factors.iter_mut());
                out
            }
            LayerParams::Cmf(p) => p.arrays_mut(),
            LayerParams::Concat => vec![],
        }
    }

    /// Number of stored scalars.
    pub fn num_params(&self) -> usize {
        self.arrays().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn forward(&self, z_a: &[f64], z_d: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(z_a, z_d)?;
        match &self.params {
            LayerParams::Dense(p) => forward_dense(p, z_a, z_d),
            LayerParams::Joint(w) => forward_joint_dense(w, z_a, z_d),
            LayerParams::Cp(f) => forward_cp(f, z_a, z_d),
            LayerParams::Tucker(f) => forward_tucker(f, z_a, z_d),
            LayerParams::Cmf(p) => forward_cmf(p, z_a, z_d),
            LayerParams::Concat => Ok(forward_concat_baseline(z_a, z_d)),
        }
    }

    /// Forward followed by the noise concatenation `[z̃, z_n]`.
    pub fn forward_with_noise(&self, z_a: &[f64], z_d: &[f64], z_n: &[f64]) -> Result<Vec<f64>> {
        if z_n.len() != self.config.n {
            return Err(Error::dims("forward_with_noise", &[self.config.n], &[z_n.len()]));
        }
        Ok(concat_noise(&self.forward(z_a, z_d)?, z_n))
    }

    pub(crate) fn check_inputs(&self, z_a: &[f64], z_d: &[f64]) -> Result<()> {
        if z_a.len() != self.config.a || z_d.len() != self.config.d {
            return Err(Error::dims(
                "fusion input",
                &[self.config.a, self.config.d],
                &[z_a.len(), z_d.len()],
            ));
        }
        Ok(())
    }

    /// Materializes the `m x (a+1) x (d+1)` joint tensor this layer
    /// represents. Reference path only; Concat has no such tensor.
    pub fn to_joint_dense(&self) -> Result<DenseTensor> {
        let FusionConfig { m, a, d, .. } = self.config;
        match &self.params {
            LayerParams::Dense(p) => p.to_joint(),
            LayerParams::Joint(w) => Ok(w.clone()),
            LayerParams::Cp(f) => cp_reconstruct(f),
            LayerParams::Tucker(f) => tucker_reconstruct(f),
            LayerParams::Cmf(p) => cmf_assemble_dense(p, (m, a, d)),
            LayerParams::Concat => Err(Error::InvalidArgument(
                "Concat has no joint parameter tensor".into(),
            )),
        }
    }
}

/// `A^T [z, 1]` without building the padded vector. `A` has `z.len() + 1`
/// rows.
pub(crate) fn padded_t_matvec(a: &DenseTensor, z: &[f64]) -> Vec<f64> {
    let last = z.len();
    (0..a.ncols())
        .map(|j| {
            let col = a.col(j);
            col[..last].iter().zip(z).map(|(x, y)| x * y).sum::<f64>() + col[last]
        })
        .collect()
}

fn check_len(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::dims(op, &[expected], &[got]));
    }
    Ok(())
}

/// Dense polynomial `b + W_a z_a + W_d z_d + W_ad ×_1 z_a ×_2 z_d`.
pub fn forward_dense(p: &DenseParams, z_a: &[f64], z_d: &[f64]) -> Result<Vec<f64>> {
    check_len("forward_dense z_a", p.w_a.ncols(), z_a.len())?;
    check_len("forward_dense z_d", p.w_d.ncols(), z_d.len())?;
    let second = p.w_ad.mode_n_vec_product(1, z_a)?.mode_n_vec_product(1, z_d)?;
    let first_a = p.w_a.matvec(z_a)?;
    let first_d = p.w_d.matvec(z_d)?;
    Ok(p
        .b
        .data()
        .iter()
        .zip(&first_a)
        .zip(&first_d)
        .zip(second.data())
        .map(|(((b, x), y), z)| b + x + y + z)
        .collect())
}

/// Joint form `W ×_1 φ(z_a) ×_2 φ(z_d)`.
pub fn forward_joint_dense(w: &DenseTensor, z_a: &[f64], z_d: &[f64]) -> Result<Vec<f64>> {
    if w.order() != 3 {
        return Err(Error::OrderMismatch {
            op: "forward_joint_dense",
            expected: 3,
            got: w.order(),
        });
    }
    check_len("forward_joint_dense z_a", w.dims()[1], z_a.len() + 1)?;
    check_len("forward_joint_dense z_d", w.dims()[2], z_d.len() + 1)?;
    Ok(w
        .mode_n_vec_product(1, &pad_one(z_a))?
        .mode_n_vec_product(1, &pad_one(z_d))?
        .into_data())
}

/// `A1 ((A2^T φ(z_a)) ⊛ (A3^T φ(z_d)))`.
pub fn forward_cp(f: &CpFactors, z_a: &[f64], z_d: &[f64]) -> Result<Vec<f64>> {
    let [_, rows_a, rows_d] = f.joint_dims();
    check_len("forward_cp z_a", rows_a, z_a.len() + 1)?;
    check_len("forward_cp z_d", rows_d, z_d.len() + 1)?;
    let mut s = padded_t_matvec(f.factor(1), z_a);
    for (x, y) in s.iter_mut().zip(padded_t_matvec(f.factor(2), z_d)) {
        *x *= y;
    }
    f.factor(0).matvec(&s)
}

/// `U1 (G ×_1 (U2^T φ(z_a)) ×_2 (U3^T φ(z_d)))`.
pub fn forward_tucker(f: &TuckerFactors, z_a: &[f64], z_d: &[f64]) -> Result<Vec<f64>> {
    let [_, rows_a, rows_d] = f.joint_dims();
    check_len("forward_tucker z_a", rows_a, z_a.len() + 1)?;
    check_len("forward_tucker z_d", rows_d, z_d.len() + 1)?;
    let pa = padded_t_matvec(f.factor(1), z_a);
    let pd = padded_t_matvec(f.factor(2), z_d);
    let h = tucker_core_contract(f.core(), &pa, &pd);
    f.factor(0).matvec(&h)
}

/// `h_p = Σ_{q,r} G(p,q,r) pa_q pd_r` without intermediate tensors.
pub(crate) fn tucker_core_contract(g: &DenseTensor, pa: &[f64], pd: &[f64]) -> Vec<f64> {
    let k1 = g.dims()[0];
    let k2 = pa.len();
    let mut h = vec![0.0; k1];
    for (r, &wr) in pd.iter().enumerate() {
        for (q, &wq) in pa.iter().enumerate() {
            let w = wq * wr;
            let fiber = &g.data()[k1 * (q + k2 * r)..k1 * (q + k2 * r + 1)];
            for (o, &x) in h.iter_mut().zip(fiber) {
                *o += x * w;
            }
        }
    }
    h
}

/// `b + U (V_a^T z_a + V_d^T z_d + (B2^T z_a) ⊛ (B3^T z_d))`.
pub fn forward_cmf(p: &CmfParams, z_a: &[f64], z_d: &[f64]) -> Result<Vec<f64>> {
    let [_, a, d] = p.dims();
    check_len("forward_cmf z_a", a, z_a.len())?;
    check_len("forward_cmf z_d", d, z_d.len())?;
    let s = cmf_mixture(p, z_a, z_d)?;
    let mut out = p.u().matvec(&s)?;
    for (o, b) in out.iter_mut().zip(p.bias().data()) {
        *o += b;
    }
    Ok(out)
}

/// Rank-space activation `V_a^T z_a + V_d^T z_d + (B2^T z_a) ⊛ (B3^T z_d)`.
pub(crate) fn cmf_mixture(p: &CmfParams, z_a: &[f64], z_d: &[f64]) -> Result<Vec<f64>> {
    let la = p.v_a().t_matvec(z_a)?;
    let ld = p.v_d().t_matvec(z_d)?;
    let (qa, qd) = if p.shared_rows() {
        (la.clone(), ld.clone())
    } else {
        (p.b2().t_matvec(z_a)?, p.b3().t_matvec(z_d)?)
    };
    Ok((0..la.len()).map(|r| la[r] + ld[r] + qa[r] * qd[r]).collect())
}

/// `[z̃, z_n]`.
pub fn concat_noise(z_tilde: &[f64], z_n: &[f64]) -> Vec<f64> {
    [z_tilde, z_n].concat()
}

/// Parameter-free baseline `[z_a, z_d]`.
pub fn forward_concat_baseline(z_a: &[f64], z_d: &[f64]) -> Vec<f64> {
    [z_a, z_d].concat()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::outer_product;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..n).map(|_| normal.sample(rng)).collect()
    }

    fn rel_err(x: &[f64], y: &[f64]) -> f64 {
        let num: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = y.iter().map(|b| b * b).sum::<f64>().sqrt();
        num / den.max(f64::MIN_POSITIVE)
    }

    fn dense_layer(m: usize, a: usize, d: usize, seed: u64) -> FusionLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = FusionConfig::new(Variant::Dense, m, a, d, 0, Rank::None).unwrap();
        FusionLayer::random(config, 1.0, &mut rng).unwrap()
    }

    fn dense_params(layer: &FusionLayer) -> &DenseParams {
        match layer.params() {
            LayerParams::Dense(p) => p,
            _ => unreachable!(),
        }
    }

    #[test]
    fn dense_bias_only() {
        let config = FusionConfig::new(Variant::Dense, 3, 2, 2, 0, Rank::None).unwrap();
        let mut layer = FusionLayer::zeros(config).unwrap();
        layer.arrays_mut()[0].data_mut().copy_from_slice(&[1.0, -2.0, 3.0]);
        assert_eq!(layer.forward(&[0.4, 0.1], &[-7.0, 2.0]).unwrap(), vec![1.0, -2.0, 3.0]);

        let random = dense_layer(3, 2, 2, 4);
        let b = dense_params(&random).b.data().to_vec();
        assert_eq!(random.forward(&[0.0; 2], &[0.0; 2]).unwrap(), b);
    }

    #[test]
    fn dense_matches_triple_loop() {
        let layer = dense_layer(2, 2, 2, 11);
        let p = dense_params(&layer);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (za, zd) = (randn(&mut rng, 2), randn(&mut rng, 2));
        let mut expected = p.b.data().to_vec();
        for i in 0..2 {
            for q in 0..2 {
                expected[i] += p.w_a.at(i, q) * za[q];
                expected[i] += p.w_d.at(i, q) * zd[q];
                for r in 0..2 {
                    expected[i] += p.w_ad.get(&[i, q, r]).unwrap() * za[q] * zd[r];
                }
            }
        }
        assert!(rel_err(&layer.forward(&za, &zd).unwrap(), &expected) <= 1e-12);
    }

    #[test]
    fn joint_form_examples() {
        let layer = dense_layer(3, 4, 2, 5);
        let w = layer.to_joint_dense().unwrap();
        let bias = forward_joint_dense(&w, &[0.0; 4], &[0.0; 2]).unwrap();
        assert_eq!(bias, w.slice(&[0, 4, 2], &[3, 1, 1]).unwrap().data());

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (za, zd) = (randn(&mut rng, 4), randn(&mut rng, 2));
        let joint = forward_joint_dense(&w, &za, &zd).unwrap();
        assert!(rel_err(&joint, &layer.forward(&za, &zd).unwrap()) <= 1e-12);

        let (u, v, x) = (randn(&mut rng, 3), randn(&mut rng, 5), randn(&mut rng, 3));
        let rank_one = outer_product(&[&u, &v, &x]).unwrap();
        let sa: f64 = v.iter().zip(pad_one(&za)).map(|(a, b)| a * b).sum();
        let sd: f64 = x.iter().zip(pad_one(&zd)).map(|(a, b)| a * b).sum();
        let expected: Vec<f64> = u.iter().map(|ui| ui * sa * sd).collect();
        assert!(rel_err(&forward_joint_dense(&rank_one, &za, &zd).unwrap(), &expected) <= 1e-12);
    }

    #[test]
    fn cp_examples() {
        let col = |v: &[f64]| DenseTensor::column(v).unwrap();
        let f = CpFactors::new(col(&[1.0, 2.0]), col(&[3.0, 4.0]), col(&[5.0, 6.0])).unwrap();
        // W(:,0,0) = A1 (A2[0] A3[0]) = [1, 2] * 15.
        let w = cp_reconstruct(&f).unwrap();
        let unit = w.mode_n_vec_product(1, &[1.0, 0.0]).unwrap().mode_n_vec_product(1, &[1.0, 0.0]).unwrap();
        assert_eq!(unit.data(), &[15.0, 30.0]);
        // φ(1) = [1, 1]: (3 + 4) (5 + 6) = 77.
        assert_eq!(forward_cp(&f, &[1.0], &[1.0]).unwrap(), vec![77.0, 154.0]);

        let zero = CpFactors::new(
            DenseTensor::zeros(&[3, 2]).unwrap(),
            DenseTensor::zeros(&[3, 2]).unwrap(),
            DenseTensor::zeros(&[3, 2]).unwrap(),
        )
        .unwrap();
        assert_eq!(forward_cp(&zero, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn factorized_forwards_match_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for variant in Variant::FACTORIZED {
            let config = FusionConfig::with_uniform_rank(variant, 3, 2, 2, 1, 2).unwrap();
            let layer = FusionLayer::random(config, 1.0, &mut rng).unwrap();
            let w = layer.to_joint_dense().unwrap();
            let (za, zd) = (randn(&mut rng, 2), randn(&mut rng, 2));
            let fast = layer.forward(&za, &zd).unwrap();
            let slow = forward_joint_dense(&w, &za, &zd).unwrap();
            assert!(rel_err(&fast, &slow) <= 1e-10, "{variant}");
        }
    }

    #[test]
    fn tucker_identity_and_zero_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = DenseTensor::from_dims(&[2, 3, 4], randn(&mut rng, 24)).unwrap();
        let f = TuckerFactors::new(
            w.clone(),
            DenseTensor::identity(2).unwrap(),
            DenseTensor::identity(3).unwrap(),
            DenseTensor::identity(4).unwrap(),
        )
        .unwrap();
        let (za, zd) = (randn(&mut rng, 2), randn(&mut rng, 3));
        let expected = forward_joint_dense(&w, &za, &zd).unwrap();
        assert!(rel_err(&forward_tucker(&f, &za, &zd).unwrap(), &expected) <= 1e-14);

        let zero = TuckerFactors::new(
            DenseTensor::zeros(&[2, 3, 4]).unwrap(),
            DenseTensor::identity(2).unwrap(),
            DenseTensor::identity(3).unwrap(),
            DenseTensor::identity(4).unwrap(),
        )
        .unwrap();
        assert_eq!(forward_tucker(&zero, &za, &zd).unwrap(), vec![0.0; 2]);
    }

    #[test]
    fn cmf_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let config = FusionConfig::new(Variant::CmfSr, 4, 3, 2, 0, Rank::Cp(2)).unwrap();
        let sr = FusionLayer::random(config, 1.0, &mut rng).unwrap();
        let LayerParams::Cmf(p) = sr.params() else { unreachable!() };
        assert_eq!(forward_cmf(p, &[0.0; 3], &[0.0; 2]).unwrap(), p.bias().data());

        let (za, zd) = (randn(&mut rng, 3), randn(&mut rng, 2));
        let untied = p.untied();
        assert_eq!(
            forward_cmf(p, &za, &zd).unwrap(),
            forward_cmf(&untied, &za, &zd).unwrap()
        );
    }

    #[test]
    fn concat_examples() {
        assert_eq!(concat_noise(&[1.0, 2.0], &[9.0]), vec![1.0, 2.0, 9.0]);
        assert_eq!(concat_noise(&[1.0, 2.0], &[]), vec![1.0, 2.0]);
        assert_eq!(forward_concat_baseline(&[1.0], &[2.0, 3.0]), vec![1.0, 2.0, 3.0]);

        let full = FusionConfig::full_scale(Variant::Cp);
        assert_eq!(full.c(), 394);
        let z = concat_noise(&vec![0.0; full.m], &vec![0.0; full.n]);
        assert_eq!(z.len(), 394);
        let baseline = FusionConfig::full_scale(Variant::Concat);
        assert_eq!(forward_concat_baseline(&vec![0.0; 256], &vec![0.0; 128]).len(), 384);
        assert_eq!(baseline.output_dim(), 384);
    }

    #[test]
    fn param_counts_full_scale() {
        let count = |v| param_count(&FusionConfig::full_scale(v));
        assert_eq!(count(Variant::Dense), 12_730_752);
        assert_eq!(count(Variant::Cp), 98_560);
        assert_eq!(count(Variant::Tucker), 1_687_744);
        assert_eq!(count(Variant::Cmf), 147_840);
        assert_eq!(count(Variant::CmfSr), 98_688);
        assert_eq!(count(Variant::Concat), 0);
    }

    #[test]
    fn param_count_rank_zero_is_bias_only() {
        for variant in [Variant::Cmf, Variant::CmfSr] {
            let config = FusionConfig {
                variant,
                m: 7,
                a: 5,
                d: 3,
                n: 0,
                rank: Rank::Cp(0),
            };
            assert!(config.validate().is_err());
            assert_eq!(param_count(&config), 7);
        }
    }

    #[test]
    fn param_count_agrees_with_storage() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for variant in Variant::ALL {
            let config = FusionConfig::with_uniform_rank(variant, 5, 4, 3, 2, 2).unwrap();
            let layer = FusionLayer::random(config, 0.1, &mut rng).unwrap();
            assert_eq!(layer.num_params(), param_count(&config), "{variant}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(FusionConfig::new(Variant::Cp, 4, 0, 2, 0, Rank::Cp(2)).is_err());
        assert!(FusionConfig::new(Variant::Cp, 4, 3, 2, 0, Rank::None).is_err());
        assert!(FusionConfig::new(Variant::Tucker, 4, 3, 2, 0, Rank::Cp(2)).is_err());
        assert!(FusionConfig::new(Variant::Dense, 4, 3, 2, 0, Rank::Cp(2)).is_err());
        assert!(FusionConfig::new(Variant::Concat, 4, 3, 2, 0, Rank::None).is_err());
        assert!(FusionConfig::new(Variant::Concat, 5, 3, 2, 0, Rank::None).is_ok());
    }

    #[test]
    fn config_json() {
        let c: FusionConfig =
            serde_json::from_str(r#"{"variant":"PF-Tucker","m":384,"a":256,"d":128,"n":10,"ranks":[192,128,64]}"#)
                .unwrap();
        assert_eq!(c, FusionConfig::full_scale(Variant::Tucker));
        let back: FusionConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);

        let concat: FusionConfig = serde_json::from_str(r#"{"variant":"Concat","a":3,"d":4}"#).unwrap();
        assert_eq!(concat.m, 7);

        for bad in [
            r#"{"variant":"PF-CP","m":4,"a":3,"d":2,"n":0,"rank":2,"ranks":[1,1,1]}"#,
            r#"{"variant":"PF-CP","a":3,"d":2,"rank":2}"#,
            r#"{"variant":"PF-XYZ","m":4,"a":3,"d":2}"#,
            r#"{"variant":"PF-CP","m":4,"a":3,"d":2,"rank":0}"#,
        ] {
            assert!(serde_json::from_str::<FusionConfig>(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn layer_rejects_wrong_inputs() {
        let layer = dense_layer(2, 3, 4, 0);
        assert!(layer.forward(&[0.0; 2], &[0.0; 4]).is_err());
        assert!(layer.forward_with_noise(&[0.0; 3], &[0.0; 4], &[1.0]).is_err());
    }
}
