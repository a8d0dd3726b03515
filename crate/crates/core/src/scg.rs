//! Scaled conjugate gradient (Møller, 1993) and the full-batch trainer for
//! the context classifier.
//!
//! SCG replaces the line search of classic conjugate gradient with a
//! Levenberg-Marquardt style scale `lambda`, estimating curvature along the
//! search direction from one extra gradient evaluation at `w + sigma_k p`.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{flat_loss, flat_loss_grad, init_network, NetworkParams, Shape};

const LAMBDA_MAX: f64 = 1e20;
// decorrelates the split stream from weight initialization
const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// A differentiable objective over a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn loss(&self, w: &[f64]) -> f64;
    /// Loss at `w`, with the gradient written into `grad`.
    fn loss_grad(&self, w: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    MinGradient,
    ValidationStop,
    LambdaOverflow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScgOptions {
    pub max_epochs: usize,
    pub sigma: f64,
    pub lambda_init: f64,
    pub min_gradient: f64,
}

/// What the optimizer reports after each iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step<'a> {
    pub epoch: usize,
    pub w: &'a [f64],
    pub loss: f64,
    pub grad_norm: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScgOutcome {
    pub w: Vec<f64>,
    pub loss: f64,
    pub epochs: usize,
    pub stop: StopReason,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `obj` from `w0`. `on_step` runs after every iteration and may
/// return a reason to stop early.
pub fn minimize<O, F>(obj: &O, w0: Vec<f64>, opts: &ScgOptions, mut on_step: F) -> Result<ScgOutcome>
where
    O: Objective,
    F: FnMut(&Step) -> Option<StopReason>,
{
    let n = obj.dim();
    let mut w = w0;
    let mut grad = vec![0.0; n];
    let mut loss = obj.loss_grad(&w, &mut grad);
    if !loss.is_finite() {
        return Err(Error::NonFinite { epoch: 0, loss });
    }
    let mut r: Vec<f64> = grad.iter().map(|g| -g).collect();
    let mut p = r.clone();

    let mut lambda = opts.lambda_init;
    let mut lambda_bar = 0.0;
    let mut success = true;
    let mut delta = 0.0;

    let mut w_try = vec![0.0; n];
    let mut g_try = vec![0.0; n];
    let mut stop = StopReason::MaxEpochs;
    let mut epochs = 0;

    for epoch in 1..=opts.max_epochs {
        if dot(&r, &r).sqrt() < opts.min_gradient {
            stop = StopReason::MinGradient;
            break;
        }
        epochs = epoch;
        let p2 = dot(&p, &p);

        // Second-order information along p.
        if success {
            let sigma_k = opts.sigma / p2.sqrt();
            for i in 0..n {
                w_try[i] = w[i] + sigma_k * p[i];
            }
            obj.loss_grad(&w_try, &mut g_try);
            // s = (E'(w + sigma_k p) - E'(w)) / sigma_k, with E'(w) = -r
            delta = (0..n).map(|i| p[i] * (g_try[i] + r[i]) / sigma_k).sum();
        }

        delta += (lambda - lambda_bar) * p2;
        if delta <= 0.0 {
            // Make the Hessian estimate positive definite.
            lambda_bar = 2.0 * (lambda - delta / p2);
            delta = -delta + lambda * p2;
            lambda = lambda_bar;
        }

        let mu = dot(&p, &r);
        let alpha = mu / delta;
        for i in 0..n {
            w_try[i] = w[i] + alpha * p[i];
        }
        let loss_try = obj.loss_grad(&w_try, &mut g_try);
        let comparison = if loss_try.is_finite() && mu != 0.0 {
            2.0 * delta * (loss - loss_try) / (mu * mu)
        } else {
            f64::NEG_INFINITY
        };

        let accepted = comparison >= 0.0;
        if accepted {
            std::mem::swap(&mut w, &mut w_try);
            loss = loss_try;
            let r_new: Vec<f64> = g_try.iter().map(|g| -g).collect();
            lambda_bar = 0.0;
            success = true;
            if epoch % n == 0 {
                p.copy_from_slice(&r_new);
            } else {
                let beta = (dot(&r_new, &r_new) - dot(&r_new, &r)) / mu;
                for i in 0..n {
                    p[i] = r_new[i] + beta * p[i];
                }
            }
            r = r_new;
            if comparison >= 0.75 {
                lambda *= 0.25;
            }
        } else {
            lambda_bar = lambda;
            success = false;
        }
        if comparison < 0.25 {
            let c = if comparison.is_finite() { comparison } else { 0.0 };
            lambda += delta * (1.0 - c) / p2;
        }

        let grad_norm = dot(&r, &r).sqrt();
        let step = Step {
            epoch,
            w: &w,
            loss,
            grad_norm,
            accepted,
        };
        if let Some(reason) = on_step(&step) {
            stop = reason;
            break;
        }
        if !lambda.is_finite() || lambda > LAMBDA_MAX {
            stop = StopReason::LambdaOverflow;
            break;
        }
        if dot(&p, &p) == 0.0 || !dot(&p, &r).is_finite() {
            // Direction collapsed; restart along steepest descent.
            p.copy_from_slice(&r);
            success = true;
        }
    }
    if stop == StopReason::MaxEpochs && dot(&r, &r).sqrt() < opts.min_gradient {
        stop = StopReason::MinGradient;
    }
    Ok(ScgOutcome {
        w,
        loss,
        epochs,
        stop,
    })
}

/// Hyperparameters of the classifier and its trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub max_epochs: usize,
    pub sigma: f64,
    pub lambda_init: f64,
    pub min_gradient: f64,
    pub validation_fraction: f64,
    pub max_validation_failures: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 1000,
            max_epochs: 1000,
            sigma: 5e-5,
            lambda_init: 5e-7,
            min_gradient: 1e-6,
            validation_fraction: 0.15,
            max_validation_failures: 6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden must be >= 1".into()));
        }
        if !(self.sigma > 0.0 && self.lambda_init > 0.0) {
            return Err(Error::Config("sigma and lambda_init must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training loss at the current parameters after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation loss after each epoch (empty without a validation split).
    pub validation_losses: Vec<f64>,
    pub stop_reason: StopReason,
    pub epochs_run: usize,
    /// Training loss of the returned parameters.
    pub final_train_loss: f64,
    /// Best validation loss, attained by the returned parameters.
    pub final_validation_loss: Option<f64>,
    pub best_epoch: usize,
    pub train_size: usize,
    pub validation_size: usize,
}

struct Batch<'a> {
    shape: Shape,
    x: ArrayView2<'a, f64>,
    y: &'a [bool],
}

impl Objective for Batch<'_> {
    fn dim(&self) -> usize {
        self.shape.param_count()
    }

    fn loss(&self, w: &[f64]) -> f64 {
        flat_loss(self.shape, w, &self.x, self.y)
    }

    fn loss_grad(&self, w: &[f64], grad: &mut [f64]) -> f64 {
        flat_loss_grad(self.shape, w, &self.x, self.y, grad)
    }
}

/// Stratified split; returns (train, validation) row indices in ascending order.
fn split_indices(y: &[bool], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_val = (idx.len() as f64 * fraction).floor() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn select_rows(x: &ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

/// Trains the classifier on `(x, y)` with full-batch SCG, keeping the
/// parameters with the lowest validation loss.
pub fn train_scg(
    x: ArrayView2<f64>,
    y: &[bool],
    cfg: &TrainConfig,
) -> Result<(NetworkParams, TrainReport)> {
    cfg.validate()?;
    if x.nrows() != y.len() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            actual: y.len(),
        });
    }
    if y.len() < 2 {
        return Err(Error::Empty("training needs at least two samples"));
    }
    if y.iter().all(|&l| l) || y.iter().all(|&l| !l) {
        return Err(Error::SingleClass);
    }

    let (train_idx, val_idx) = split_indices(y, cfg.validation_fraction, cfg.seed);
    let x_train = select_rows(&x, &train_idx);
    let y_train: Vec<bool> = train_idx.iter().map(|&i| y[i]).collect();
    let x_val = select_rows(&x, &val_idx);
    let y_val: Vec<bool> = val_idx.iter().map(|&i| y[i]).collect();

    let init = init_network(x.ncols(), cfg.hidden, cfg.seed)?;
    let shape = init.shape();
    let train = Batch {
        shape,
        x: x_train.view(),
        y: &y_train,
    };
    let val = (!y_val.is_empty()).then(|| Batch {
        shape,
        x: x_val.view(),
        y: &y_val,
    });

    let opts = ScgOptions {
        max_epochs: cfg.max_epochs,
        sigma: cfg.sigma,
        lambda_init: cfg.lambda_init,
        min_gradient: cfg.min_gradient,
    };

    let w0 = init.to_flat();
    let mut epoch_losses = Vec::new();
    let mut validation_losses = Vec::new();
    let mut best: Option<(f64, Vec<f64>, usize)> = val.as_ref().map(|v| (v.loss(&w0), w0.clone(), 0));
    let mut failures = 0;
    let mut non_finite = None;

    let outcome = minimize(&train, w0, &opts, |step| {
        if !step.loss.is_finite() {
            non_finite = Some((step.epoch, step.loss));
            return Some(StopReason::MaxEpochs);
        }
        epoch_losses.push(step.loss);
        let (Some(v), Some((best_loss, best_w, best_epoch))) = (val.as_ref(), best.as_mut()) else {
            return None;
        };
        let vl = if step.accepted {
            v.loss(step.w)
        } else {
            *validation_losses.last().unwrap_or(best_loss)
        };
        validation_losses.push(vl);
        if !step.accepted {
            return None;
        }
        if vl < *best_loss {
            *best_loss = vl;
            best_w.copy_from_slice(step.w);
            *best_epoch = step.epoch;
            failures = 0;
        } else if vl > *best_loss {
            failures += 1;
            if failures >= cfg.max_validation_failures {
                return Some(StopReason::ValidationStop);
            }
        }
        None
    })?;
    if let Some((epoch, loss)) = non_finite {
        return Err(Error::NonFinite { epoch, loss });
    }

    let (w, final_validation_loss, best_epoch) = match best {
        Some((vl, w, e)) => (w, Some(vl), e),
        None => (outcome.w, None, outcome.epochs),
    };
    let final_train_loss = train.loss(&w);
    let params = NetworkParams::from_flat(shape, &w)?;
    log::info!(
        "scg stopped after {} epochs ({:?}); train loss {:.6}, validation loss {:?}",
        outcome.epochs,
        outcome.stop,
        final_train_loss,
        final_validation_loss
    );
    Ok((
        params,
        TrainReport {
            epoch_losses,
            validation_losses,
            stop_reason: outcome.stop,
            epochs_run: outcome.epochs,
            final_train_loss,
            final_validation_loss,
            best_epoch,
            train_size: y_train.len(),
            validation_size: y_val.len(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// f(w) = 0.5 w^T A w - b^T w with A diagonal.
    struct Quadratic {
        a: Vec<f64>,
        b: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            self.a.len()
        }
        fn loss(&self, w: &[f64]) -> f64 {
            (0..w.len()).map(|i| 0.5 * self.a[i] * w[i] * w[i] - self.b[i] * w[i]).sum()
        }
        fn loss_grad(&self, w: &[f64], g: &mut [f64]) -> f64 {
            for i in 0..w.len() {
                g[i] = self.a[i] * w[i] - self.b[i];
            }
            self.loss(w)
        }
    }

    fn opts(max_epochs: usize) -> ScgOptions {
        ScgOptions {
            max_epochs,
            sigma: 5e-5,
            lambda_init: 5e-7,
            min_gradient: 1e-10,
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let q = Quadratic {
            a: vec![1.0, 4.0, 9.0, 0.5],
            b: vec![1.0, -2.0, 3.0, 0.25],
        };
        let out = minimize(&q, vec![0.0; 4], &opts(200), |_| None).unwrap();
        assert_eq!(out.stop, StopReason::MinGradient);
        for i in 0..4 {
            assert!((out.w[i] - q.b[i] / q.a[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn accepted_steps_never_raise_the_loss() {
        let q = Quadratic {
            a: vec![100.0, 0.01, 3.0],
            b: vec![1.0, 1.0, 1.0],
        };
        let mut losses = Vec::new();
        minimize(&q, vec![5.0, -5.0, 5.0], &opts(100), |s| {
            losses.push(s.loss);
            None
        })
        .unwrap();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let x = array![[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]];
        let y = [false, false, true, true];
        let cfg = TrainConfig {
            hidden: 3,
            max_epochs: 200,
            validation_fraction: 0.0,
            seed: 11,
            ..TrainConfig::default()
        };
        let (p, report) = train_scg(x.view(), &y, &cfg).unwrap();
        assert!(report.epochs_run <= 200);
        for (row, &label) in x.outer_iter().zip(&y) {
            let s = p.score(row.as_slice().unwrap()).unwrap();
            assert_eq!(s > 0.5, label, "row {row:?} scored {s}");
        }
    }

    #[test]
    fn single_class_labels_are_rejected() {
        let x = array![[0.0], [1.0]];
        let err = train_scg(x.view(), &[true, true], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::SingleClass));
    }

    #[test]
    fn stratified_split_keeps_both_classes() {
        let y: Vec<bool> = (0..40).map(|i| i % 4 == 0).collect();
        let (train, val) = split_indices(&y, 0.15, 3);
        assert_eq!(train.len() + val.len(), 40);
        assert!(train.iter().any(|&i| y[i]) && train.iter().any(|&i| !y[i]));
        assert_eq!(val.len(), 1 + 4);
    }
}
