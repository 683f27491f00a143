//! Randomized verification suites: factorized forwards against the dense
//! joint evaluation, and analytic gradients against central differences.
//!
//! Trial `t` of a suite seeded with `s` draws everything from
//! `ChaCha8Rng::seed_from_u64(s)` on stream `t`, so results do not depend on
//! how trials are scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::factorizations::cmf_second_order;
use crate::fusion::{forward_dense, forward_joint_dense, DenseParams, FusionConfig, FusionLayer, LayerParams, Rank, Variant};
use crate::grad::{backward, compare_gradients, finite_diff_layer};

/// Default ceiling on `m (a+1) (d+1)` for anything that materializes the
/// joint tensor.
pub const DEFAULT_CAP: usize = 1 << 26;

/// Bounds for randomly drawn trial shapes.
pub const RANDOM_MAX_DIM: usize = 8;
pub const RANDOM_MAX_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub trials: usize,
    pub seed: u64,
    pub tol: f64,
    /// Worker threads; 0 or 1 runs serially.
    pub parallel: usize,
    pub cap: usize,
    /// Finite-difference step (gradient suite only).
    pub h: f64,
    /// Standard deviation of random parameters.
    pub param_std: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            trials: 1000,
            seed: 0,
            tol: 1e-10,
            parallel: 0,
            cap: DEFAULT_CAP,
            h: 1e-5,
            param_std: 1.0,
        }
    }
}

pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// A valid config of `variant` with `m, a, d` in `1..=max_dim` and ranks in
/// `1..=max_rank`. Concat draws `a, d` and sets `m = a + d`.
pub fn random_config<R: Rng + ?Sized>(variant: Variant, max_dim: usize, max_rank: usize, rng: &mut R) -> FusionConfig {
    let mut dim = || rng.random_range(1..=max_dim.max(1));
    let (m, a, d) = (dim(), dim(), dim());
    let mut rank = || rng.random_range(1..=max_rank.max(1));
    let (m, rank) = match variant {
        Variant::Dense => (m, Rank::None),
        Variant::Concat => (a + d, Rank::None),
        Variant::Tucker => (m, Rank::Tucker([rank(), rank(), rank()])),
        _ => (m, Rank::Cp(rank())),
    };
    FusionConfig::new(variant, m, a, d, 0, rank).expect("drawn config is valid")
}

fn standard_vec<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// `max_i |x_i - y_i| / max_i |y_i|`, or 0 when both are identically zero.
pub fn normwise_relative_error(x: &[f64], reference: &[f64]) -> f64 {
    let diff = x.iter().zip(reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        return 0.0;
    }
    let scale = reference.iter().map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale.max(f64::MIN_POSITIVE)
}

pub fn check_cap(config: &FusionConfig, cap: usize) -> Result<()> {
    let (m, a, d) = (config.output_dim(), config.a, config.d);
    let entries = (a + 1)
        .checked_mul(d + 1)
        .and_then(|x| x.checked_mul(m))
        .unwrap_or(usize::MAX);
    if entries > cap {
        return Err(Error::InvalidArgument(format!(
            "dense joint tensor would hold {entries} entries (m={m}, a={a}, d={d}), above the cap of {cap}; \
             lower the dims or raise --cap"
        )));
    }
    Ok(())
}

/// Worst discrepancy of one random layer/input draw: the layer's own
/// forward against the joint-tensor evaluation, and for CMF and block Dense
/// also against the block polynomial.
pub fn equivalence_error(layer: &FusionLayer, z_a: &[f64], z_d: &[f64]) -> Result<f64> {
    let y = layer.forward(z_a, z_d)?;
    let joint = forward_joint_dense(&layer.to_joint_dense()?, z_a, z_d)?;
    let mut err = normwise_relative_error(&y, &joint);
    if let LayerParams::Cmf(p) = layer.params() {
        let blocks = DenseParams {
            b: p.bias().clone(),
            w_a: p.u().matmul(&p.v_a().transpose()?)?,
            w_d: p.u().matmul(&p.v_d().transpose()?)?,
            w_ad: cmf_second_order(p)?,
        };
        err = err.max(normwise_relative_error(&y, &forward_dense(&blocks, z_a, z_d)?));
    }
    if let LayerParams::Dense(p) = layer.params() {
        err = err.max(normwise_relative_error(&joint, &forward_dense(p, z_a, z_d)?));
    }
    Ok(err)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceResult {
    pub variant: Variant,
    pub trials: usize,
    pub max_rel_error: f64,
    /// Trial that produced `max_rel_error` (lowest index on ties).
    pub worst_trial: Option<usize>,
    pub passed: bool,
}

fn run_trials<T, F>(trials: usize, parallel: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if parallel <= 1 {
        return (0..trials).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| (0..trials).into_par_iter().map(f).collect())
}

fn worst(values: &[f64]) -> (f64, Option<usize>) {
    let mut best = (0.0, None);
    for (i, &v) in values.iter().enumerate() {
        if best.1.is_none() || v > best.0 || v.is_nan() {
            best = (v, Some(i));
            if v.is_nan() {
                break;
            }
        }
    }
    best
}

/// Runs the equivalence suite for `variant`, on `fixed` dims if given and
/// random small dims otherwise.
pub fn equivalence_suite(variant: Variant, fixed: Option<&FusionConfig>, opts: &SuiteOptions) -> Result<EquivalenceResult> {
    if variant == Variant::Concat {
        return Err(Error::InvalidArgument("Concat has no joint tensor to compare against".into()));
    }
    if let Some(config) = fixed {
        if config.variant != variant {
            return Err(Error::InvalidConfig(format!("config is {}, suite is {}", config.variant, variant)));
        }
        config.validate()?;
        check_cap(config, opts.cap)?;
    }
    let errors = run_trials(opts.trials, opts.parallel, |t| {
        let mut rng = trial_rng(opts.seed, t as u64);
        let config = match fixed {
            Some(c) => *c,
            None => random_config(variant, RANDOM_MAX_DIM, RANDOM_MAX_RANK, &mut rng),
        };
        let layer = FusionLayer::random(config, opts.param_std, &mut rng)?;
        let z_a = standard_vec(config.a, &mut rng);
        let z_d = standard_vec(config.d, &mut rng);
        equivalence_error(&layer, &z_a, &z_d)
    })?;
    let (max_rel_error, worst_trial) = worst(&errors);
    Ok(EquivalenceResult {
        variant,
        trials: opts.trials,
        max_rel_error,
        worst_trial,
        passed: max_rel_error <= opts.tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArrayError {
    pub array: String,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientResult {
    pub variant: Variant,
    pub trials: usize,
    /// Worst error per parameter array and per input, over all trials.
    pub arrays: Vec<ArrayError>,
    pub max_rel_error: f64,
    pub worst_trial: Option<usize>,
    pub passed: bool,
}

/// Compares [`backward`] with central differences of `<u, forward>` for a
/// random upstream `u`, over every array and both inputs.
pub fn gradient_suite(variant: Variant, fixed: Option<&FusionConfig>, opts: &SuiteOptions) -> Result<GradientResult> {
    if !(opts.h > 0.0 && opts.h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {}", opts.h)));
    }
    if let Some(config) = fixed {
        if config.variant != variant {
            return Err(Error::InvalidConfig(format!("config is {}, suite is {}", config.variant, variant)));
        }
        config.validate()?;
        check_cap(config, opts.cap)?;
    }
    let per_trial = run_trials(opts.trials, opts.parallel, |t| {
        let mut rng = trial_rng(opts.seed, t as u64);
        let config = match fixed {
            Some(c) => *c,
            None => random_config(variant, RANDOM_MAX_DIM / 2 + 1, RANDOM_MAX_RANK - 1, &mut rng),
        };
        let layer = FusionLayer::random(config, opts.param_std, &mut rng)?;
        let z_a = standard_vec(config.a, &mut rng);
        let z_d = standard_vec(config.d, &mut rng);
        let upstream = standard_vec(config.output_dim(), &mut rng);
        let analytic = backward(&layer, &z_a, &z_d, &upstream)?;
        let numeric = finite_diff_layer(&layer, &z_a, &z_d, &upstream, opts.h)?;
        compare_gradients(&analytic, &numeric)
    })?;

    let mut arrays: Vec<ArrayError> = Vec::new();
    for trial in &per_trial {
        for (name, err) in trial {
            match arrays.iter_mut().find(|a| &a.array == name) {
                Some(slot) => slot.max_rel_error = slot.max_rel_error.max(*err),
                None => arrays.push(ArrayError {
                    array: name.clone(),
                    max_rel_error: *err,
                }),
            }
        }
    }
    let trial_worst: Vec<f64> = per_trial
        .iter()
        .map(|t| t.iter().map(|(_, e)| *e).fold(0.0, f64::max))
        .collect();
    let (max_rel_error, worst_trial) = worst(&trial_worst);
    Ok(GradientResult {
        variant,
        trials: opts.trials,
        arrays,
        max_rel_error,
        worst_trial,
        passed: max_rel_error <= opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(trials: usize) -> SuiteOptions {
        SuiteOptions {
            trials,
            ..SuiteOptions::default()
        }
    }

    #[test]
    fn random_configs_are_in_bounds() {
        let mut rng = trial_rng(3, 0);
        for variant in Variant::ALL {
            for _ in 0..50 {
                let c = random_config(variant, 8, 4, &mut rng);
                assert!(c.validate().is_ok());
                assert!(c.a <= 8 && c.d <= 8);
            }
        }
    }

    #[test]
    fn equivalence_passes_for_factorized_variants() {
        for variant in Variant::FACTORIZED {
            let r = equivalence_suite(variant, None, &opts(50)).unwrap();
            assert!(r.passed, "{variant}: {}", r.max_rel_error);
        }
        let r = equivalence_suite(Variant::Dense, None, &opts(20)).unwrap();
        assert!(r.passed);
    }

    #[test]
    fn zero_tolerance_fails() {
        let config = FusionConfig::with_uniform_rank(Variant::Tucker, 8, 8, 8, 0, 4).unwrap();
        let r = equivalence_suite(Variant::Tucker, Some(&config), &SuiteOptions { tol: 0.0, ..opts(50) }).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.0);
    }

    #[test]
    fn parallel_matches_serial() {
        let serial = equivalence_suite(Variant::Cmf, None, &opts(40)).unwrap();
        let parallel = equivalence_suite(Variant::Cmf, None, &SuiteOptions { parallel: 3, ..opts(40) }).unwrap();
        assert_eq!(serial, parallel);
        let serial = gradient_suite(Variant::Cp, None, &opts(10)).unwrap();
        let parallel = gradient_suite(Variant::Cp, None, &SuiteOptions { parallel: 3, ..opts(10) }).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn cap_refuses_large_dims() {
        let config = FusionConfig::full_scale(Variant::Cp);
        let err = equivalence_suite(Variant::Cp, Some(&config), &SuiteOptions { cap: 1 << 20, ..opts(1) });
        assert!(err.unwrap_err().to_string().contains("cap"));
    }

    #[test]
    fn gradient_suite_passes() {
        let g = SuiteOptions { tol: 1e-6, ..opts(10) };
        for variant in Variant::ALL {
            let r = gradient_suite(variant, None, &g).unwrap();
            assert!(r.passed, "{variant}: {:?}", r.arrays);
        }
        let concat = gradient_suite(Variant::Concat, None, &g).unwrap();
        let names: Vec<&str> = concat.arrays.iter().map(|a| a.array.as_str()).collect();
        assert_eq!(names, ["z_a", "z_d"]);
    }

    #[test]
    fn coarse_step_is_exact_for_multilinear_forwards() {
        // Every scalar parameter enters the forward with degree one, so central
        // differences carry no truncation error at any step.
        for variant in Variant::ALL {
            let r = gradient_suite(variant, None, &SuiteOptions { h: 1e-1, tol: 1e-6, ..opts(10) }).unwrap();
            assert!(r.passed, "{variant}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn normwise_error_examples() {
        assert_eq!(normwise_relative_error(&[0.0], &[0.0]), 0.0);
        assert_eq!(normwise_relative_error(&[1.0, 2.0], &[1.0, 4.0]), 0.5);
    }
}
