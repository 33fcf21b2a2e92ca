// SPDX-License-Identifier: MIT OR Apache-2.0

//! L2-regularized logistic regression, fitted by full-batch gradient
//! descent with Armijo backtracking on standardized inputs.

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use serde::Serialize;

use super::ClassifyError;
use crate::numeric::{lit, to_f64, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRegConfig {
    pub lambda: f64,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self { lambda: 1e-2, tolerance: 1e-6, max_iter: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRegModel<T> {
    pub columns: Vec<String>,
    /// Weights on standardized features.
    pub weights: Vec<T>,
    pub bias: T,
    pub means: Vec<T>,
    /// Standardization scales; constant columns get 1.
    pub stds: Vec<T>,
    /// Columns that were constant in training; their weight is held at 0.
    pub pinned: Vec<bool>,
    pub lambda: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    pub seed: u64,
}

fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean negative log-likelihood plus `lambda / 2 * |w|^2` (bias excluded),
/// with its gradient in `w` and in the bias. Pinned weights get zero gradient.
pub fn loss_and_gradient<T: Scalar>(
    x: ArrayView2<'_, T>,
    y: &[bool],
    w: ArrayView1<'_, T>,
    b: T,
    lambda: T,
    pinned: &[bool],
) -> (T, Array1<T>, T) {
    let n: T = lit(x.nrows() as f64);
    let z = x.dot(&w) + b;
    let mut loss = T::zero();
    let mut resid = Array1::zeros(x.nrows());
    for i in 0..x.nrows() {
        let yi = if y[i] { T::one() } else { T::zero() };
        loss = loss + softplus(z[i]) - yi * z[i];
        resid[i] = sigmoid(z[i]) - yi;
    }
    let half: T = lit(0.5);
    loss = loss / n + half * lambda * w.dot(&w);
    let mut grad_w = x.t().dot(&resid) / n + &w.mapv(|v| v * lambda);
    for (g, &p) in grad_w.iter_mut().zip(pinned) {
        if p {
            *g = T::zero();
        }
    }
    let grad_b = resid.sum() / n;
    (loss, grad_w, grad_b)
}

fn standardize<T: Scalar>(x: ArrayView2<'_, T>, means: &[T], stds: &[T]) -> ndarray::Array2<T> {
    let mut z = x.to_owned();
    for (j, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
        col.mapv_inplace(|v| (v - means[j]) / stds[j]);
    }
    z
}

pub fn train_logreg<T: Scalar>(
    x: ArrayView2<'_, T>,
    columns: &[String],
    y: &[bool],
    config: &LogRegConfig,
    seed: u64,
) -> Result<LogRegModel<T>, ClassifyError> {
    let (n, p) = x.dim();
    if y.len() != n || columns.len() != p {
        return Err(ClassifyError::Shape(format!("{n}x{p} matrix, {} labels, {} names", y.len(), columns.len())));
    }
    let positives = y.iter().filter(|&&v| v).count();
    if positives < 2 || n - positives < 2 {
        return Err(ClassifyError::TooFewRows { positives, negatives: n - positives });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ClassifyError::NonFinite("training matrix".into()));
    }
    if !(config.lambda >= 0.0) {
        return Err(ClassifyError::Config(format!("lambda must be nonnegative, got {}", config.lambda)));
    }
    let mut means = Vec::with_capacity(p);
    let mut stds = Vec::with_capacity(p);
    let mut pinned = Vec::with_capacity(p);
    for col in x.axis_iter(Axis(1)) {
        let (m, s) = crate::numeric::mean_std(&col.to_vec());
        let constant = !(s > lit(1e-12));
        means.push(m);
        stds.push(if constant { T::one() } else { s });
        pinned.push(constant);
    }
    let z = standardize(x, &means, &stds);
    let lambda: T = lit(config.lambda);

    let mut w = Array1::<T>::zeros(p);
    let prior = positives as f64 / n as f64;
    let mut b: T = lit((prior / (1.0 - prior)).ln());
    let mut step = T::one();
    let (mut loss, mut gw, mut gb) = loss_and_gradient(z.view(), y, w.view(), b, lambda, &pinned);
    let mut iterations = 0;
    let mut grad_norm = to_f64((gw.dot(&gw) + gb * gb).sqrt());
    while grad_norm > config.tolerance && iterations < config.max_iter {
        if !loss.is_finite() {
            return Err(ClassifyError::NonFinite("loss".into()));
        }
        let g2 = gw.dot(&gw) + gb * gb;
        let armijo: T = lit(1e-4);
        let mut t = step;
        loop {
            let w_new = &w - &gw.mapv(|g| g * t);
            let b_new = b - gb * t;
            let (l_new, gw_new, gb_new) = loss_and_gradient(z.view(), y, w_new.view(), b_new, lambda, &pinned);
            if l_new <= loss - armijo * t * g2 || t < lit(1e-12) {
                w = w_new;
                b = b_new;
                loss = l_new;
                gw = gw_new;
                gb = gb_new;
                break;
            }
            t *= lit(0.5);
        }
        step = (t * lit(2.0)).min(lit(64.0));
        iterations += 1;
        grad_norm = to_f64((gw.dot(&gw) + gb * gb).sqrt());
    }
    if !loss.is_finite() {
        return Err(ClassifyError::NonFinite("loss".into()));
    }
    Ok(LogRegModel {
        columns: columns.to_vec(),
        weights: w.to_vec(),
        bias: b,
        means,
        stds,
        pinned,
        lambda: config.lambda,
        iterations,
        grad_norm,
        converged: grad_norm <= config.tolerance,
        seed,
    })
}

/// Probability of the positive class for each row.
pub fn predict<T: Scalar>(model: &LogRegModel<T>, x: ArrayView2<'_, T>, columns: &[String]) -> Result<Array1<T>, ClassifyError> {
    if columns != model.columns.as_slice() || x.ncols() != model.columns.len() {
        return Err(ClassifyError::Shape(format!(
            "model expects columns {:?}, got {:?} ({} values per row)",
            model.columns,
            columns,
            x.ncols()
        )));
    }
    let z = standardize(x, &model.means, &model.stds);
    let w = Array1::from(model.weights.clone());
    Ok((z.dot(&w) + model.bias).mapv(sigmoid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("f{j}")).collect()
    }

    #[test]
    fn separable_feature_saturates() {
        let x = array![[0.0], [1.0], [0.0], [1.0], [1.0], [0.0]];
        let y = [false, true, false, true, true, false];
        let cfg = LogRegConfig { lambda: 1e-4, ..Default::default() };
        let m = train_logreg(x.view(), &names(1), &y, &cfg, 0).unwrap();
        let p = predict(&m, x.view(), &names(1)).unwrap();
        for (pi, &yi) in p.iter().zip(&y) {
            let conf: f64 = if yi { *pi } else { 1.0 - pi };
            assert!(conf >= 0.95, "{pi} for {yi}");
        }
        // hand sigmoid on the standardized inputs
        for i in 0..6 {
            let z = (x[[i, 0]] - m.means[0]) / m.stds[0] * m.weights[0] + m.bias;
            assert!((p[i] - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_features_give_the_prior() {
        let x = Array2::<f64>::zeros((8, 3));
        let y = [true, false, false, false, true, false, false, false];
        let m = train_logreg(x.view(), &names(3), &y, &LogRegConfig::default(), 0).unwrap();
        assert_eq!(m.weights, vec![0.0; 3]);
        assert!((m.bias - (0.25f64 / 0.75).ln()).abs() < 1e-9);
        assert!(m.converged);
    }

    #[test]
    fn huge_lambda_kills_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_simple_fn((40, 3), || rng.random_range(-2.0..2.0));
        let y: Vec<bool> = (0..40).map(|i| x[[i, 0]] > 0.0).collect();
        let cfg = LogRegConfig { lambda: 1e6, ..Default::default() };
        let m = train_logreg(x.view(), &names(3), &y, &cfg, 0).unwrap();
        assert!(m.weights.iter().all(|w: &f64| w.abs() < 1e-5));
        let prior = y.iter().filter(|&&v| v).count() as f64 / 40.0;
        let p = predict(&m, x.view(), &names(3)).unwrap();
        assert!(p.iter().all(|&v| (v - prior).abs() < 1e-4));
    }

    #[test]
    fn zero_model_predicts_half_and_checks_columns() {
        let m = LogRegModel::<f64> {
            columns: names(2),
            weights: vec![0.0, 0.0],
            bias: 0.0,
            means: vec![0.0, 0.0],
            stds: vec![1.0, 1.0],
            pinned: vec![false, false],
            lambda: 0.0,
            iterations: 0,
            grad_norm: 0.0,
            converged: true,
            seed: 0,
        };
        let x = array![[1.0, 2.0], [-3.0, 0.5]];
        assert_eq!(predict(&m, x.view(), &names(2)).unwrap().to_vec(), vec![0.5, 0.5]);
        let swapped = vec!["f1".to_string(), "f0".to_string()];
        assert!(matches!(predict(&m, x.view(), &swapped), Err(ClassifyError::Shape(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (n, p) = (30, 4);
            let x = Array2::from_shape_simple_fn((n, p), || rng.random_range(-2.0..2.0));
            let y: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            let w = Array1::from_shape_simple_fn(p, || rng.random_range(-1.0..1.0));
            let b = rng.random_range(-1.0..1.0);
            let lambda = rng.random_range(0.0..0.5);
            let pinned = vec![false; p];
            let (_, gw, gb) = loss_and_gradient(x.view(), &y, w.view(), b, lambda, &pinned);
            let h = 1e-5;
            let f = |w: &Array1<f64>, b: f64| loss_and_gradient(x.view(), &y, w.view(), b, lambda, &pinned).0;
            for j in 0..p {
                let mut wp = w.clone();
                wp[j] += h;
                let mut wm = w.clone();
                wm[j] -= h;
                let fd = (f(&wp, b) - f(&wm, b)) / (2.0 * h);
                assert!((fd - gw[j]).abs() <= 1e-4 * gw[j].abs().max(1e-8));
            }
            let fd = (f(&w, b + h) - f(&w, b - h)) / (2.0 * h);
            assert!((fd - gb).abs() <= 1e-4 * gb.abs().max(1e-8));
        }
    }

    #[test]
    fn rejects_bad_input() {
        let x = array![[0.0], [1.0], [f64::NAN], [1.0]];
        let y = [false, true, false, true];
        assert!(matches!(train_logreg(x.view(), &names(1), &y, &LogRegConfig::default(), 0), Err(ClassifyError::NonFinite(_))));
        let x = array![[0.0], [1.0], [0.0]];
        assert!(matches!(
            train_logreg(x.view(), &names(1), &[false, true, false], &LogRegConfig::default(), 0),
            Err(ClassifyError::TooFewRows { .. })
        ));
    }

    #[test]
    fn scaling_a_column_leaves_predictions_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Array2<f64> = Array2::from_shape_simple_fn((50, 3), || rng.random_range(-1.0..1.0));
        let y: Vec<bool> = (0..50).map(|i| x[[i, 1]] + 0.3 * x[[i, 2]] + rng.random_range(-0.5..0.5) > 0.0).collect();
        let cfg = LogRegConfig::default();
        let a = train_logreg(x.view(), &names(3), &y, &cfg, 0).unwrap();
        let mut xs: Array2<f64> = x.clone();
        xs.column_mut(1).mapv_inplace(|v| v * 37.5);
        let b = train_logreg(xs.view(), &names(3), &y, &cfg, 0).unwrap();
        let pa = predict(&a, x.view(), &names(3)).unwrap();
        let pb = predict(&b, xs.view(), &names(3)).unwrap();
        for (u, v) in pa.iter().zip(&pb) {
            assert!((u - v).abs() < 1e-6);
        }
    }
}
