//! Two-layer classifier: sigmoid hidden layer, two-way softmax output.
//!
//! Output 0 is "correct", output 1 is "incorrect". Parameters can be viewed
//! as one flat vector laid out as `[w1 (row-major), b1, w2 (row-major), b2]`,
//! which is what the optimizer works on.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const OUTPUTS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    /// hidden x input
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// 2 x hidden
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Layer sizes, enough to slice a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub input: usize,
    pub hidden: usize,
}

impl Shape {
    pub fn param_count(&self) -> usize {
        self.hidden * self.input + self.hidden + OUTPUTS * self.hidden + OUTPUTS
    }

    fn split<'a>(&self, theta: &'a [f64]) -> FlatView<'a> {
        let (w1, rest) = theta.split_at(self.hidden * self.input);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(OUTPUTS * self.hidden);
        FlatView {
            w1: ArrayView2::from_shape((self.hidden, self.input), w1).expect("sized"),
            b1: ArrayView1::from(b1),
            w2: ArrayView2::from_shape((OUTPUTS, self.hidden), w2).expect("sized"),
            b2: ArrayView1::from(b2),
        }
    }
}

struct FlatView<'a> {
    w1: ArrayView2<'a, f64>,
    b1: ArrayView1<'a, f64>,
    w2: ArrayView2<'a, f64>,
    b2: ArrayView1<'a, f64>,
}

impl NetworkParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, input)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((OUTPUTS, hidden)),
            b2: Array1::zeros(OUTPUTS),
        }
    }

    pub fn shape(&self) -> Shape {
        Shape {
            input: self.w1.ncols(),
            hidden: self.w1.nrows(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.shape().param_count());
        v.extend(self.w1.iter());
        v.extend(self.b1.iter());
        v.extend(self.w2.iter());
        v.extend(self.b2.iter());
        v
    }

    pub fn from_flat(shape: Shape, theta: &[f64]) -> Result<Self> {
        if theta.len() != shape.param_count() {
            return Err(Error::Dimension {
                expected: shape.param_count(),
                actual: theta.len(),
            });
        }
        let v = shape.split(theta);
        Ok(Self {
            w1: v.w1.to_owned(),
            b1: v.b1.to_owned(),
            w2: v.w2.to_owned(),
            b2: v.b2.to_owned(),
        })
    }

    /// Checks mutual consistency of the weight shapes and finiteness.
    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        let dims_ok = self.b1.len() == h
            && self.w2.dim() == (OUTPUTS, h)
            && self.b2.len() == OUTPUTS
            && h >= 1
            && self.input_dim() >= 1;
        if !dims_ok {
            return Err(Error::Config("inconsistent network dimensions".into()));
        }
        let finite = self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2);
        if !finite.into_iter().all(|v| v.is_finite()) {
            return Err(Error::Config("network weights must be finite".into()));
        }
        Ok(())
    }

    /// `(p_correct, p_incorrect)` for one input.
    pub fn forward(&self, x: &[f64]) -> Result<(f64, f64)> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        let x = ArrayView1::from(x);
        let hidden = (self.w1.dot(&x) + &self.b1).mapv(sigmoid);
        let z = self.w2.dot(&hidden) + &self.b2;
        Ok((sigmoid(z[0] - z[1]), sigmoid(z[1] - z[0])))
    }

    /// Probability that the detection is correct.
    pub fn score(&self, x: &[f64]) -> Result<f64> {
        self.forward(x).map(|(p, _)| p)
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per layer, zero biases.
pub fn init_network(input_dim: usize, hidden: usize, seed: u64) -> Result<NetworkParams> {
    if input_dim == 0 || hidden == 0 {
        return Err(Error::Config(format!(
            "network dimensions must be >= 1 (input {input_dim}, hidden {hidden})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = NetworkParams::zeros(input_dim, hidden);
    let r1 = 1.0 / (input_dim as f64).sqrt();
    p.w1.mapv_inplace(|_| rng.gen_range(-r1..=r1));
    let r2 = 1.0 / (hidden as f64).sqrt();
    p.w2.mapv_inplace(|_| rng.gen_range(-r2..=r2));
    Ok(p)
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn check_batch(shape: Shape, x: &ArrayView2<f64>, y: &[bool]) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Empty("loss needs at least one sample"));
    }
    if x.ncols() != shape.input {
        return Err(Error::Dimension {
            expected: shape.input,
            actual: x.ncols(),
        });
    }
    if y.len() != x.nrows() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            actual: y.len(),
        });
    }
    Ok(())
}

/// Logit margin `z_incorrect - z_correct` per row, plus the hidden activations.
fn margins(v: &FlatView, x: &ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut hidden = x.dot(&v.w1.t());
    hidden += &v.b1;
    hidden.mapv_inplace(sigmoid);
    let mut z = hidden.dot(&v.w2.t());
    z += &v.b2;
    let d = z.column(1).to_owned() - z.column(0);
    (hidden, d)
}

/// Mean cross-entropy over a flat parameter vector.
pub(crate) fn flat_loss(shape: Shape, theta: &[f64], x: &ArrayView2<f64>, y: &[bool]) -> f64 {
    let (_, d) = margins(&shape.split(theta), x);
    let total: f64 = d
        .iter()
        .zip(y)
        .map(|(&d, &label)| softplus(if label { d } else { -d }))
        .sum();
    total / y.len() as f64
}

/// Mean cross-entropy and its gradient, written into `grad`.
pub(crate) fn flat_loss_grad(
    shape: Shape,
    theta: &[f64],
    x: &ArrayView2<f64>,
    y: &[bool],
    grad: &mut [f64],
) -> f64 {
    let v = shape.split(theta);
    let n = y.len() as f64;
    let (hidden, d) = margins(&v, x);

    let mut loss = 0.0;
    let mut dz = Array2::<f64>::zeros((y.len(), OUTPUTS));
    for (i, (&d, &label)) in d.iter().zip(y).enumerate() {
        let t = if label { d } else { -d };
        loss += softplus(t);
        let g = sigmoid(t) / n;
        let dz0 = if label { -g } else { g };
        dz[[i, 0]] = dz0;
        dz[[i, 1]] = -dz0;
    }

    let gw2 = dz.t().dot(&hidden);
    let gb2 = dz.sum_axis(Axis(0));
    let mut da = dz.dot(&v.w2);
    da.zip_mut_with(&hidden, |g, &h| *g *= h * (1.0 - h));
    let gw1 = da.t().dot(x);
    let gb1 = da.sum_axis(Axis(0));

    // ndarray iterates in logical row-major order whatever the memory layout
    let flat = gw1.iter().chain(&gb1).chain(&gw2).chain(&gb2);
    for (dst, src) in grad.iter_mut().zip(flat) {
        *dst = *src;
    }
    loss / n
}

/// Mean cross-entropy of `params` on `(x, y)` and its exact gradient.
pub fn loss_and_gradient(
    params: &NetworkParams,
    x: ArrayView2<f64>,
    y: &[bool],
) -> Result<(f64, NetworkParams)> {
    let shape = params.shape();
    check_batch(shape, &x, y)?;
    let theta = params.to_flat();
    let mut grad = vec![0.0; theta.len()];
    let loss = flat_loss_grad(shape, &theta, &x, y, &mut grad);
    Ok((loss, NetworkParams::from_flat(shape, &grad)?))
}

pub fn loss(params: &NetworkParams, x: ArrayView2<f64>, y: &[bool]) -> Result<f64> {
    let shape = params.shape();
    check_batch(shape, &x, y)?;
    Ok(flat_loss(shape, &params.to_flat(), &x, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = init_network(1281, 1000, 3).unwrap();
        let b = init_network(1281, 1000, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.w1.dim(), (1000, 1281));
        assert_eq!(a.w2.dim(), (2, 1000));
        assert!(a.b1.iter().all(|v| *v == 0.0));
        let bound = 1.0 / 1281f64.sqrt();
        assert!(a.w1.iter().all(|v| v.abs() <= bound));
        assert!(init_network(4, 0, 1).is_err());
        assert_ne!(a, init_network(1281, 1000, 4).unwrap());
    }

    #[test]
    fn zero_weights_are_uniform() {
        let p = NetworkParams::zeros(3, 4);
        assert_eq!(p.forward(&[1.0, -2.0, 0.5]).unwrap(), (0.5, 0.5));
        assert_eq!(p.score(&[0.0, 0.0, 0.0]).unwrap(), 0.5);
        let x = array![[1.0, 2.0, 3.0], [0.0, 0.0, 1.0]];
        let l = loss(&p, x.view(), &[true, false]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(p.forward(&[1.0]).is_err());
    }

    #[test]
    fn confident_correct_predictions_have_near_zero_loss() {
        let mut p = NetworkParams::zeros(1, 1);
        p.b2[0] = 40.0;
        let x = array![[0.3], [0.9]];
        assert!(loss(&p, x.view(), &[true, true]).unwrap() < 1e-15);
    }

    #[test]
    fn raising_correct_logit_raises_score() {
        let mut p = init_network(3, 5, 9).unwrap();
        let x = [0.2, 0.7, 1.0];
        let before = p.score(&x).unwrap();
        p.b2[0] += 0.5;
        let after = p.score(&x).unwrap();
        assert!(after > before);
        let (pc, pi) = p.forward(&x).unwrap();
        assert!((pc + pi - 1.0).abs() < 1e-12);
        assert_eq!(p.score(&x).unwrap(), pc);
        assert!((p.score(&x).unwrap() - (1.0 - pi)).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let p = NetworkParams::zeros(2, 2);
        let x = Array2::<f64>::zeros((0, 2));
        assert!(matches!(loss_and_gradient(&p, x.view(), &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn flat_round_trip() {
        let p = init_network(4, 3, 1).unwrap();
        let q = NetworkParams::from_flat(p.shape(), &p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert!(NetworkParams::from_flat(p.shape(), &[0.0]).is_err());
    }
}
