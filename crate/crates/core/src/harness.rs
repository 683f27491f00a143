//! Teacher-student regression for fusion layers.
//!
//! A randomly drawn teacher layer labels Gaussian inputs; a student layer is
//! fit to those labels with Adam on `MSE + λ2 Ω`, where `Ω` is the
//! Frobenius penalty over the student's parameters.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::bundle::{layer_fields, layer_from_parts, layer_meta, Bundle};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionLayer};
use crate::grad::{backward, frobenius_penalty, AdamConfig, AdamState, ParamGradients};
use crate::tensor::DenseTensor;

/// Standard deviation of the Gaussian initialization of trainable layers.
pub const INIT_STD: f64 = 0.02;
/// Standard deviation of teacher parameters.
pub const TEACHER_STD: f64 = 0.5;
/// A run is abandoned once the objective exceeds this or turns non-finite.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

// RNG stream ids, all keyed by the task seed.
const STREAM_TEACHER: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_VALIDATION: u64 = 2;
const STREAM_STUDENT: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

/// A seeded RNG on one of several independent streams.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub z_a: Vec<f64>,
    pub z_d: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub teacher: FusionLayer,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Knobs for [`generate_task_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskOptions {
    pub num_samples: usize,
    pub num_validation: usize,
    pub noise_sigma: f64,
    pub teacher_std: f64,
    pub seed: u64,
}

impl TaskOptions {
    pub fn new(num_samples: usize, noise_sigma: f64, seed: u64) -> Self {
        TaskOptions {
            num_samples,
            num_validation: (num_samples / 4).max(1),
            noise_sigma,
            teacher_std: TEACHER_STD,
            seed,
        }
    }
}

/// Draws a teacher and `num_samples` labelled training pairs (plus a
/// quarter as many validation pairs). Deterministic in `seed`.
pub fn generate_task(config: FusionConfig, num_samples: usize, noise_sigma: f64, seed: u64) -> Result<SyntheticTask> {
    generate_task_with(config, TaskOptions::new(num_samples, noise_sigma, seed))
}

pub fn generate_task_with(config: FusionConfig, opts: TaskOptions) -> Result<SyntheticTask> {
    if opts.num_samples == 0 {
        return Err(Error::InvalidArgument("num_samples must be at least 1".into()));
    }
    if !(opts.noise_sigma >= 0.0 && opts.noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad noise sigma {}", opts.noise_sigma)));
    }
    config.validate()?;
    let teacher = FusionLayer::random(config, opts.teacher_std, &mut stream_rng(opts.seed, STREAM_TEACHER))?;
    let train = draw_samples(&teacher, opts.num_samples, opts.noise_sigma, &mut stream_rng(opts.seed, STREAM_TRAIN))?;
    let validation = draw_samples(
        &teacher,
        opts.num_validation,
        opts.noise_sigma,
        &mut stream_rng(opts.seed, STREAM_VALIDATION),
    )?;
    Ok(SyntheticTask {
        teacher,
        train,
        validation,
        noise_sigma: opts.noise_sigma,
        seed: opts.seed,
    })
}

fn draw_samples<R: Rng>(teacher: &FusionLayer, count: usize, sigma: f64, rng: &mut R) -> Result<Vec<Sample>> {
    let config = *teacher.config();
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    (0..count)
        .map(|_| {
            let z_a: Vec<f64> = (0..config.a).map(|_| StandardNormal.sample(rng)).collect();
            let z_d: Vec<f64> = (0..config.d).map(|_| StandardNormal.sample(rng)).collect();
            let mut target = teacher.forward(&z_a, &z_d)?;
            if sigma > 0.0 {
                for t in &mut target {
                    *t += noise.sample(rng);
                }
            }
            Ok(Sample { z_a, z_d, target })
        })
        .collect()
}

impl SyntheticTask {
    /// A student with the teacher's config, Gaussian-initialized with
    /// [`INIT_STD`] from the task seed.
    pub fn fresh_student(&self) -> Result<FusionLayer> {
        FusionLayer::random(*self.teacher.config(), INIT_STD, &mut stream_rng(self.seed, STREAM_STUDENT))
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut fields = layer_fields(&self.teacher, "teacher/");
        for (split, samples) in [("train", &self.train), ("validation", &self.validation)] {
            for (col, pick) in [
                ("z_a", (|s: &Sample| &s.z_a) as fn(&Sample) -> &Vec<f64>),
                ("z_d", |s: &Sample| &s.z_d),
                ("target", |s: &Sample| &s.target),
            ] {
                let rows = pick(&samples[0]).len();
                let data: Vec<f64> = samples.iter().flat_map(|s| pick(s).iter().copied()).collect();
                let t = DenseTensor::from_dims(&[rows, samples.len()], data).expect("finite samples");
                fields.push((format!("{split}/{col}"), t));
            }
        }
        Bundle {
            kind: "task".into(),
            meta: serde_json::json!({
                "teacher": layer_meta(&self.teacher),
                "noise_sigma": self.noise_sigma,
                "seed": self.seed,
            }),
            fields,
        }
    }

    pub fn from_bundle(bundle: &Bundle) -> Result<SyntheticTask> {
        if bundle.kind != "task" {
            return Err(Error::Bundle(format!("expected a task bundle, got {}", bundle.kind)));
        }
        let meta = &bundle.meta;
        let mut fields = bundle.fields.clone();
        let teacher = layer_from_parts(&meta["teacher"], &mut fields, "teacher/")?;
        let mut rest = Bundle {
            kind: bundle.kind.clone(),
            meta: meta.clone(),
            fields,
        };
        let mut split = |name: &str| -> Result<Vec<Sample>> {
            let za = rest.take(&format!("{name}/z_a"))?;
            let zd = rest.take(&format!("{name}/z_d"))?;
            let tg = rest.take(&format!("{name}/target"))?;
            Ok((0..za.ncols())
                .map(|j| Sample {
                    z_a: za.col(j).to_vec(),
                    z_d: zd.col(j).to_vec(),
                    target: tg.col(j).to_vec(),
                })
                .collect())
        };
        let train = split("train")?;
        let validation = split("validation")?;
        Ok(SyntheticTask {
            teacher,
            train,
            validation,
            noise_sigma: meta["noise_sigma"].as_f64().unwrap_or(0.0),
            seed: meta["seed"].as_u64().unwrap_or(0),
        })
    }
}

/// Mean of squared differences.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dims("mse_loss", &[target.len()], &[pred.len()]));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

fn dataset_mse(layer: &FusionLayer, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += mse_loss(&layer.forward(&s.z_a, &s.z_d)?, &s.target)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    /// `None` (or a size at least the training-set size) means full batch.
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub lambda2: f64,
    /// Final training MSE at or below this counts as converged.
    pub converge_tol: f64,
    /// Seeds mini-batch shuffling.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 2000,
            batch_size: None,
            lr: 1e-2,
            lambda2: 0.0,
            converge_tol: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    NotConverged,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub version: String,
    pub config: FusionConfig,
    pub seed: u64,
    pub num_samples: usize,
    pub num_validation: usize,
    pub noise_sigma: f64,
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub lambda2: f64,
    pub init_std: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub converge_tol: f64,
    /// Training MSE before any update, then after each completed epoch.
    pub train_mse: Vec<f64>,
    /// Validation MSE at the same points.
    pub val_mse: Vec<f64>,
    pub final_train_mse: f64,
    pub final_val_mse: f64,
    pub final_penalty: f64,
    pub status: RunStatus,
    pub converged: bool,
    /// Epoch at which the objective left the finite range, if it did.
    pub diverged_at: Option<usize>,
    pub wall_time_secs: f64,
}

/// Objective value and gradient over `samples`:
/// `mean_s mse(forward(s), target(s)) + λ2 Ω`.
fn objective_gradient(
    layer: &FusionLayer,
    samples: &[Sample],
    lambda2: f64,
) -> Result<(f64, Vec<(&'static str, DenseTensor)>)> {
    let mut acc = ParamGradients::zeros_like(layer);
    let width = layer.output_dim() as f64;
    let scale = 2.0 / (width * samples.len() as f64);
    let mut mse = 0.0;
    let mut upstream = vec![0.0; layer.output_dim()];
    for s in samples {
        let pred = layer.forward(&s.z_a, &s.z_d)?;
        mse += mse_loss(&pred, &s.target)?;
        for ((u, p), t) in upstream.iter_mut().zip(&pred).zip(&s.target) {
            *u = scale * (p - t);
        }
        acc.add_scaled(&backward(layer, &s.z_a, &s.z_d, &upstream)?, 1.0)?;
    }
    mse /= samples.len() as f64;
    if lambda2 != 0.0 {
        for ((_, g), (_, p)) in acc.params.iter_mut().zip(layer.arrays()) {
            for (gi, pi) in g.data_mut().iter_mut().zip(p.data()) {
                *gi += 2.0 * lambda2 * pi;
            }
        }
    }
    Ok((mse, acc.params))
}

fn out_of_range(x: f64) -> bool {
    !x.is_finite() || x > DIVERGENCE_LIMIT
}

/// Fits `student` to `task.train` in place and reports the trajectory.
///
/// Divergence is a [`RunStatus`], not an error; errors are reserved for
/// incompatible inputs.
pub fn train(student: &mut FusionLayer, task: &SyntheticTask, opts: &TrainOptions) -> Result<TrainReport> {
    let config = *student.config();
    let teacher = task.teacher.config();
    if (config.output_dim(), config.a, config.d) != (teacher.output_dim(), teacher.a, teacher.d) {
        return Err(Error::InvalidConfig(format!(
            "student dims (m={}, a={}, d={}) do not match teacher (m={}, a={}, d={})",
            config.output_dim(),
            config.a,
            config.d,
            teacher.output_dim(),
            teacher.a,
            teacher.d
        )));
    }
    if !(opts.lr >= 0.0 && opts.lr.is_finite()) || !(opts.lambda2 >= 0.0 && opts.lambda2.is_finite()) {
        return Err(Error::InvalidArgument("lr and lambda2 must be finite and non-negative".into()));
    }
    if task.train.is_empty() {
        return Err(Error::InvalidArgument("task has no training samples".into()));
    }

    let started = Instant::now();
    let adam = AdamConfig::with_lr(opts.lr);
    let mut state = AdamState::for_layer(adam, student);
    let n = task.train.len();
    let batch = opts.batch_size.filter(|&b| b > 0 && b < n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = stream_rng(opts.seed, STREAM_SHUFFLE);

    let mut train_mse = Vec::with_capacity(opts.epochs + 1);
    let mut val_mse = Vec::with_capacity(opts.epochs + 1);
    let mut diverged_at = None;

    for epoch in 0..opts.epochs {
        match batch {
            None => {
                let (mse, grads) = objective_gradient(student, &task.train, opts.lambda2)?;
                if out_of_range(mse) {
                    diverged_at = Some(epoch);
                    break;
                }
                train_mse.push(mse);
                val_mse.push(dataset_mse(student, &task.validation)?);
                state.step_layer(student, &grads)?;
            }
            Some(size) => {
                let mse = dataset_mse(student, &task.train)?;
                if out_of_range(mse) {
                    diverged_at = Some(epoch);
                    break;
                }
                train_mse.push(mse);
                val_mse.push(dataset_mse(student, &task.validation)?);
                order.shuffle(&mut shuffle_rng);
                for chunk in order.chunks(size) {
                    let picked: Vec<Sample> = chunk.iter().map(|&i| task.train[i].clone()).collect();
                    let (_, grads) = objective_gradient(student, &picked, opts.lambda2)?;
                    state.step_layer(student, &grads)?;
                }
            }
        }
    }
    if diverged_at.is_none() {
        let mse = dataset_mse(student, &task.train)?;
        if out_of_range(mse) {
            diverged_at = Some(opts.epochs);
        } else {
            train_mse.push(mse);
            val_mse.push(dataset_mse(student, &task.validation)?);
        }
    }

    let final_train_mse = train_mse.last().copied().unwrap_or(f64::NAN);
    let final_val_mse = val_mse.last().copied().unwrap_or(f64::NAN);
    let final_penalty = frobenius_penalty(student);
    let status = if diverged_at.is_some() || out_of_range(final_penalty) {
        RunStatus::Diverged
    } else if final_train_mse <= opts.converge_tol {
        RunStatus::Converged
    } else {
        RunStatus::NotConverged
    };
    Ok(TrainReport {
        version: crate::VERSION.into(),
        config,
        seed: task.seed,
        num_samples: n,
        num_validation: task.validation.len(),
        noise_sigma: task.noise_sigma,
        epochs: opts.epochs,
        batch_size: batch,
        lr: opts.lr,
        lambda2: opts.lambda2,
        init_std: INIT_STD,
        adam_beta1: adam.beta1,
        adam_beta2: adam.beta2,
        adam_eps: adam.eps,
        converge_tol: opts.converge_tol,
        train_mse,
        val_mse,
        final_train_mse,
        final_val_mse,
        final_penalty,
        status,
        converged: status == RunStatus::Converged,
        diverged_at,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Variant;

    fn small(variant: Variant, k: usize) -> FusionConfig {
        FusionConfig::with_uniform_rank(variant, 4, 3, 3, 0, k).unwrap()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5);
        let (x, y) = ([0.3, -1.0, 2.0], [1.0, 0.5, -0.25]);
        assert_eq!(mse_loss(&x, &y).unwrap(), mse_loss(&y, &x).unwrap());
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn task_is_deterministic() {
        let a = generate_task(small(Variant::Cp, 2), 20, 0.1, 42).unwrap();
        let b = generate_task(small(Variant::Cp, 2), 20, 0.1, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_task(small(Variant::Cp, 2), 20, 0.1, 43).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn noiseless_targets_are_teacher_outputs() {
        let task = generate_task(small(Variant::Tucker, 2), 10, 0.0, 1).unwrap();
        for s in &task.train {
            assert_eq!(task.teacher.forward(&s.z_a, &s.z_d).unwrap(), s.target);
        }
    }

    #[test]
    fn task_rejects_bad_arguments() {
        assert!(generate_task(small(Variant::Cp, 2), 0, 0.0, 1).is_err());
        assert!(generate_task(small(Variant::Cp, 2), 5, -1.0, 1).is_err());
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let task = generate_task(small(Variant::Cmf, 2), 16, 0.0, 3).unwrap();
        let mut student = task.fresh_student().unwrap();
        let before = student.clone();
        let opts = TrainOptions {
            epochs: 5,
            lr: 0.0,
            ..TrainOptions::default()
        };
        let report = train(&mut student, &task, &opts).unwrap();
        assert_eq!(student, before);
        assert_eq!(report.train_mse.len(), 6);
        assert!(report.train_mse.iter().all(|&x| x == report.train_mse[0]));
    }

    #[test]
    fn teacher_is_a_fixed_point() {
        let task = generate_task(small(Variant::CmfSr, 2), 16, 0.0, 4).unwrap();
        let mut student = task.teacher.clone();
        let opts = TrainOptions {
            epochs: 20,
            ..TrainOptions::default()
        };
        let report = train(&mut student, &task, &opts).unwrap();
        assert!(report.train_mse.iter().all(|&x| x == 0.0));
        assert_eq!(student, task.teacher);
        assert!(report.converged);
    }

    #[test]
    fn zero_epochs_reports_initial_loss() {
        let task = generate_task(small(Variant::Cp, 2), 8, 0.0, 5).unwrap();
        let mut student = task.fresh_student().unwrap();
        let opts = TrainOptions {
            epochs: 0,
            ..TrainOptions::default()
        };
        let report = train(&mut student, &task, &opts).unwrap();
        assert_eq!(report.train_mse.len(), 1);
        assert_eq!(report.val_mse.len(), 1);
    }

    #[test]
    fn huge_lr_reports_divergence() {
        let config = FusionConfig::with_uniform_rank(Variant::Dense, 4, 3, 3, 0, 0).unwrap();
        let task = generate_task(config, 8, 0.0, 6).unwrap();
        let mut student = task.fresh_student().unwrap();
        let opts = TrainOptions {
            epochs: 50,
            lr: 1e14,
            ..TrainOptions::default()
        };
        let report = train(&mut student, &task, &opts).unwrap();
        assert_eq!(report.status, RunStatus::Diverged);
        assert!(report.diverged_at.is_some());
        assert!(report.train_mse.iter().all(|x| x.is_finite()));
        serde_json::to_string(&report).unwrap();
    }

    #[test]
    fn minibatch_training_reduces_loss() {
        let task = generate_task(small(Variant::Cp, 2), 64, 0.0, 7).unwrap();
        let mut student = task.fresh_student().unwrap();
        let opts = TrainOptions {
            epochs: 40,
            batch_size: Some(16),
            lr: 1e-2,
            ..TrainOptions::default()
        };
        let report = train(&mut student, &task, &opts).unwrap();
        assert_eq!(report.batch_size, Some(16));
        assert!(report.final_train_mse < report.train_mse[0]);
    }

    #[test]
    fn student_teacher_dims_must_match() {
        let task = generate_task(small(Variant::Cp, 2), 4, 0.0, 8).unwrap();
        let other = FusionConfig::with_uniform_rank(Variant::Cp, 5, 3, 3, 0, 2).unwrap();
        let mut student = FusionLayer::zeros(other).unwrap();
        assert!(train(&mut student, &task, &TrainOptions::default()).is_err());
    }

    #[test]
    fn task_bundle_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let task = generate_task(small(Variant::CmfSr, 2), 6, 0.2, 9).unwrap();
        let stem = dir.path().join("task");
        task.to_bundle().write(&stem).unwrap();
        let back = SyntheticTask::from_bundle(&Bundle::read(&stem).unwrap()).unwrap();
        assert_eq!(back, task);
    }
}
