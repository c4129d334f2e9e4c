//! Synthetic task streams with controllable class geometry.
//!
//! Class means are drawn around a shared random centre and kept only if they
//! are at least `min_class_angle` away from every earlier mean, so the angle
//! parameter controls how crowded the classes are. Samples are exponential-map
//! images of isotropic tangent Gaussians whose total standard deviation is
//! `spread_sigma` radians. Captions are the sample plus a per-class textual
//! offset and a little per-sample noise. All values are rounded to `f32` so
//! the streams survive a dataset file round trip unchanged.

use super::config::Config;
use crate::encoder::RawSample;
use crate::error::{Error, Result};
use crate::linalg::SeededRng;
use crate::pipeline::{TaskData, TaskStream};
use crate::sphere::{exp_map, geodesic_distance, TangentVector, UnitVector};
use crate::{ClassId, TaskId};

pub const MAX_PLACEMENT_ATTEMPTS: usize = 100_000;
/// Norm of the per-class caption offset.
pub const CAPTION_CLASS_OFFSET: f64 = 0.1;
/// Norm of the per-sample caption noise.
pub const CAPTION_SAMPLE_NOISE: f64 = 0.05;
/// Fraction of each class held out for evaluation.
pub const TEST_FRACTION: f64 = 0.2;

const ORDER_STREAM: u64 = 0x006f_7264;
const CENTER_STREAM: u64 = 0x0063_7472;
const MEAN_STREAM: u64 = 0x006d_6561;
const SAMPLE_STREAM: u64 = 0x0073_6d70;

/// Tangent vector at `base` with i.i.d. Gaussian coordinates scaled so that
/// its expected squared norm is `sigma²`.
fn tangent_gaussian(base: &UnitVector<f64>, sigma: f64, rng: &mut SeededRng) -> Result<TangentVector<f64>> {
    let d = base.dim();
    let raw: Vec<f64> = rng.gaussian_vec(d)?;
    let s = sigma / ((d - 1).max(1) as f64).sqrt();
    let scaled: Vec<f64> = raw.iter().map(|x| x * s).collect();
    TangentVector::project(base, &scaled)
}

fn f32_round(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| f64::from(x as f32)).collect()
}

/// Class means with pairwise angle at least `min_angle`.
pub fn place_class_means(n: usize, d_in: usize, min_angle: f64, rng: &SeededRng) -> Result<Vec<UnitVector<f64>>> {
    let center = UnitVector::new(rng.fork(CENTER_STREAM).gaussian_vec(d_in)?)?;
    let mut draw = rng.fork(MEAN_STREAM);
    // Typical pairwise angle of two cap samples is about √2 times the cap
    // radius; aim for 1.5× the minimum so few draws are rejected.
    let target = 1.5 * min_angle.max(0.2);
    let uniform = target >= std::f64::consts::FRAC_PI_2;
    let radius = target / std::f64::consts::SQRT_2;
    let mut means: Vec<UnitVector<f64>> = Vec::with_capacity(n);
    let mut attempts = 0;
    while means.len() < n {
        if attempts == MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Geometry(format!(
                "placed only {} of {n} class means with pairwise angle >= {min_angle} after \
                 {MAX_PLACEMENT_ATTEMPTS} attempts; increase d_in or decrease min_class_angle",
                means.len()
            )));
        }
        attempts += 1;
        let candidate = if uniform {
            UnitVector::new(draw.gaussian_vec(d_in)?)?
        } else {
            let u = tangent_gaussian(&center, radius, &mut draw)?;
            if u.norm() >= std::f64::consts::PI {
                continue;
            }
            exp_map(&center, &u)?
        };
        let candidate = UnitVector::new(f32_round(candidate.into_vec()))?;
        if means.iter().all(|m| geodesic_distance(m, &candidate) >= min_angle) {
            means.push(candidate);
        }
    }
    Ok(means)
}

/// Train and test streams for `config`: `b` tasks of `classes_per_task`
/// classes, `samples_per_class` samples per class split 80/20.
pub fn gen_synthetic(config: &Config) -> Result<(TaskStream, TaskStream)> {
    config.validate()?;
    let rng = SeededRng::new(config.seed);
    let n_classes = config.b * config.classes_per_task;
    let d_in = config.d_in;
    let means = place_class_means(n_classes, d_in, config.min_class_angle, &rng)?;

    let mut order: Vec<ClassId> = (0..n_classes as ClassId).collect();
    rng.fork(ORDER_STREAM).shuffle(&mut order);

    let n_test = ((config.samples_per_class as f64) * TEST_FRACTION).round().max(1.0) as usize;
    let n_test = n_test.min(config.samples_per_class - 2);
    let mut train_tasks = Vec::with_capacity(config.b);
    let mut test_tasks = Vec::with_capacity(config.b);
    for b in 0..config.b {
        let task = b as TaskId;
        let mut classes: Vec<ClassId> = order[b * config.classes_per_task..(b + 1) * config.classes_per_task].to_vec();
        classes.sort_unstable();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &classes {
            let mean = &means[c as usize];
            let mut crng = rng.fork(SAMPLE_STREAM).fork(u64::from(c));
            let offset: Vec<f64> = crng
                .gaussian_vec::<f64>(d_in)?
                .into_iter()
                .map(|x| x * CAPTION_CLASS_OFFSET / (d_in as f64).sqrt())
                .collect();
            let mut samples = Vec::with_capacity(config.samples_per_class);
            for _ in 0..config.samples_per_class {
                let x = if config.spread_sigma == 0.0 {
                    mean.clone()
                } else {
                    loop {
                        let u = tangent_gaussian(mean, config.spread_sigma, &mut crng)?;
                        if u.norm() < std::f64::consts::PI {
                            break exp_map(mean, &u)?;
                        }
                    }
                };
                let features = f32_round(x.into_vec());
                let caption: Vec<f64> = features
                    .iter()
                    .zip(&offset)
                    .map(|(&f, &o)| f + o + crng.gaussian() * CAPTION_SAMPLE_NOISE / (d_in as f64).sqrt())
                    .collect();
                samples.push(RawSample {
                    features,
                    label: c,
                    task,
                    caption: Some(f32_round(caption)),
                });
            }
            let mut idx: Vec<usize> = (0..samples.len()).collect();
            crng.shuffle(&mut idx);
            let (test_idx, _) = idx.split_at(n_test);
            for (i, s) in samples.into_iter().enumerate() {
                if test_idx.contains(&i) {
                    test.push(s);
                } else {
                    train.push(s);
                }
            }
        }
        train_tasks.push(TaskData {
            task_id: task,
            classes: classes.clone(),
            samples: train,
        });
        test_tasks.push(TaskData {
            task_id: task,
            classes,
            samples: test,
        });
    }
    Ok((TaskStream::new(train_tasks)?, TaskStream::new(test_tasks)?))
}
