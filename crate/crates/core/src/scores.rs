//! Nonconformity scores and the reference predictive models behind them.
//!
//! Any fitted predictor can be wrapped: implement [`Regressor`] or
//! [`Classifier`] and put it in a [`ScoreModel`]. Full conformal additionally
//! needs the *fitting* procedure to treat its training rows symmetrically;
//! nothing here can check that for user-supplied learners.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Regressor: Send + Sync + fmt::Debug {
    fn covariate_dim(&self) -> usize;
    fn predict(&self, x: &[f64]) -> f64;
}

pub trait Classifier: Send + Sync + fmt::Debug {
    fn covariate_dim(&self) -> usize;
    fn n_classes(&self) -> usize;
    /// Class probabilities; non-negative and summing to one.
    fn predict_proba(&self, x: &[f64]) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    /// `|y - f(x)|`
    AbsResidual,
    /// `1 - f(x)_y`
    OneMinusProb,
    /// The response itself; yields one-sided upper bounds `(-∞, q]` for
    /// covariate-free ("unsupervised") prediction of `y`.
    Response,
}

/// A fitted predictor paired with its score function.
#[derive(Clone, Debug)]
pub enum ScoreModel {
    AbsResidual(Arc<dyn Regressor>),
    OneMinusProb(Arc<dyn Classifier>),
    Response,
}

impl ScoreModel {
    pub fn kind(&self) -> ScoreKind {
        match self {
            ScoreModel::AbsResidual(_) => ScoreKind::AbsResidual,
            ScoreModel::OneMinusProb(_) => ScoreKind::OneMinusProb,
            ScoreModel::Response => ScoreKind::Response,
        }
    }

    pub fn regression(model: impl Regressor + 'static) -> Self {
        ScoreModel::AbsResidual(Arc::new(model))
    }

    pub fn classification(model: impl Classifier + 'static) -> Self {
        ScoreModel::OneMinusProb(Arc::new(model))
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        let expected = match self {
            ScoreModel::AbsResidual(m) => m.covariate_dim(),
            ScoreModel::OneMinusProb(m) => m.covariate_dim(),
            ScoreModel::Response => return Ok(()),
        };
        if x.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Point prediction used as the interval centre (regression only).
    pub fn predict(&self, x: &[f64]) -> Result<Option<f64>> {
        self.check_dim(x)?;
        Ok(match self {
            ScoreModel::AbsResidual(m) => Some(m.predict(x)),
            _ => None,
        })
    }

    /// Class probabilities (classification only).
    pub fn predict_proba(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        self.check_dim(x)?;
        Ok(match self {
            ScoreModel::OneMinusProb(m) => Some(m.predict_proba(x)),
            _ => None,
        })
    }

    /// Nonconformity of `(x, y)`; lower means more conforming.
    pub fn score(&self, x: &[f64], y: f64) -> Result<f64> {
        self.check_dim(x)?;
        match self {
            ScoreModel::AbsResidual(m) => Ok((y - m.predict(x)).abs()),
            ScoreModel::OneMinusProb(m) => {
                let k = m.n_classes();
                if y < 0.0 || y.fract() != 0.0 || y as usize >= k {
                    return Err(Error::UnknownClass {
                        label: y,
                        n_classes: k,
                    });
                }
                let p = m.predict_proba(x)[y as usize];
                Ok((1.0 - p).clamp(0.0, 1.0))
            }
            ScoreModel::Response => Ok(y),
        }
    }
}

/// `beta_0 + beta . x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// Intercept first.
    pub coefficients: Vec<f64>,
    /// Fitted by weighted least squares.
    pub weighted: bool,
}

impl Regressor for LinearModel {
    fn covariate_dim(&self) -> usize {
        self.coefficients.len() - 1
    }

    fn predict(&self, x: &[f64]) -> f64 {
        self.coefficients[0]
            + self.coefficients[1..]
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }
}

/// A regressor that ignores its input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantPredictor {
    pub value: f64,
    pub dim: usize,
}

impl Regressor for ConstantPredictor {
    fn covariate_dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, _x: &[f64]) -> f64 {
        self.value
    }
}

const RANK_TOLERANCE: f64 = 1e-10;

fn check_rows(x: &[Vec<f64>], n: usize, weights: Option<&[f64]>) -> Result<usize> {
    if x.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} covariate rows for {n} responses",
            x.len()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no training rows".into()));
    }
    let d = x[0].len();
    if let Some(bad) = x.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != n || !w.iter().all(|&v| v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidArgument(
                "fit weights must be positive, finite and one per row".into(),
            ));
        }
    }
    Ok(d)
}

/// Least squares (or weighted least squares) with an intercept.
///
/// Columns are named `intercept, x1, x2, ...` in rank-deficiency errors.
pub fn fit_ols(x: &[Vec<f64>], y: &[f64], weights: Option<&[f64]>) -> Result<LinearModel> {
    let d = x.first().map_or(0, Vec::len);
    let names: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    fit_ols_named(x, y, weights, &names)
}

/// [`fit_ols`] with caller-supplied covariate names for error messages.
///
/// Solved through a Householder QR of the column-normalized design matrix.
pub fn fit_ols_named(
    x: &[Vec<f64>],
    y: &[f64],
    weights: Option<&[f64]>,
    names: &[String],
) -> Result<LinearModel> {
    let n = y.len();
    let d = check_rows(x, n, weights)?;
    let p = d + 1;
    if n < p {
        return Err(Error::InvalidArgument(format!(
            "need at least {p} rows to fit {p} coefficients, got {n}"
        )));
    }
    let column_name = |k: usize| {
        if k == 0 {
            "intercept".to_string()
        } else {
            names.get(k - 1).cloned().unwrap_or_else(|| format!("x{k}"))
        }
    };

    let root_w = |i: usize| weights.map_or(1.0, |w| w[i].sqrt());
    let mut a = DMatrix::<f64>::from_fn(n, p, |i, j| {
        let v = if j == 0 { 1.0 } else { x[i][j - 1] };
        v * root_w(i)
    });
    let b = DVector::<f64>::from_fn(n, |i, _| y[i] * root_w(i));

    let norms: Vec<f64> = (0..p).map(|j| a.column(j).norm()).collect();
    let zero: Vec<String> = (0..p)
        .filter(|&j| norms[j] == 0.0)
        .map(column_name)
        .collect();
    if !zero.is_empty() {
        return Err(Error::RankDeficient { columns: zero });
    }
    for (j, &norm) in norms.iter().enumerate() {
        a.column_mut(j).scale_mut(1.0 / norm);
    }

    let qr = a.qr();
    let r = qr.r();
    let collinear: Vec<usize> = (0..p)
        .filter(|&j| r[(j, j)].abs() < RANK_TOLERANCE)
        .collect();
    if !collinear.is_empty() {
        // Report each offending column with the earlier columns it depends on.
        let mut cols: Vec<usize> = Vec::new();
        for &j in &collinear {
            for i in 0..=j {
                if (i == j || r[(i, j)].abs() > RANK_TOLERANCE) && !cols.contains(&i) {
                    cols.push(i);
                }
            }
        }
        cols.sort_unstable();
        return Err(Error::RankDeficient {
            columns: cols.into_iter().map(column_name).collect(),
        });
    }
    let qtb = qr.q().transpose() * b;
    let scaled = r
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::RankDeficient {
            columns: (0..p).map(column_name).collect(),
        })?;
    Ok(LinearModel {
        coefficients: (0..p).map(|j| scaled[j] / norms[j]).collect(),
        weighted: weights.is_some(),
    })
}

/// Multinomial logistic regression with class 0 as the reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// One row per non-reference class: intercept then slopes.
    pub coefficients: Vec<Vec<f64>>,
    pub n_classes: usize,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticModel {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_classes);
        out.push(0.0);
        for row in &self.coefficients {
            out.push(row[0] + row[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>());
        }
        out
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

impl Classifier for LogisticModel {
    fn covariate_dim(&self) -> usize {
        self.coefficients.first().map_or(0, |r| r.len() - 1)
    }

    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }
}

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_GRAD_TOL: f64 = 1e-8;
/// Small ridge so separable classes still give a finite, unique optimum.
const LOGISTIC_RIDGE: f64 = 1e-6;

/// Fits a multinomial logistic model by damped Newton iterations.
///
/// Stops when the largest gradient entry, divided by the total weight, drops
/// below `1e-8`, or after 100 iterations.
pub fn fit_logistic(
    x: &[Vec<f64>],
    labels: &[f64],
    n_classes: usize,
    weights: Option<&[f64]>,
) -> Result<LogisticModel> {
    let n = labels.len();
    let d = check_rows(x, n, weights)?;
    if n_classes < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    let classes: Vec<usize> = labels
        .iter()
        .map(|&y| {
            if y >= 0.0 && y.fract() == 0.0 && (y as usize) < n_classes {
                Ok(y as usize)
            } else {
                Err(Error::UnknownClass {
                    label: y,
                    n_classes,
                })
            }
        })
        .collect::<Result<_>>()?;
    let p = d + 1;
    let m = n_classes - 1;
    let dim = m * p;
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total_w: f64 = (0..n).map(w).sum();
    let design = |i: usize, j: usize| if j == 0 { 1.0 } else { x[i][j - 1] };

    let objective = |beta: &DVector<f64>| -> f64 {
        let mut ll = 0.0;
        for (i, &class) in classes.iter().enumerate() {
            let mut logits = vec![0.0; n_classes];
            for k in 0..m {
                logits[k + 1] = (0..p).map(|j| beta[k * p + j] * design(i, j)).sum();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            ll += w(i) * (logits[class] - lse);
        }
        ll - 0.5 * LOGISTIC_RIDGE * beta.norm_squared()
    };

    let mut beta = DVector::<f64>::zeros(dim);
    let mut current = objective(&beta);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < NEWTON_MAX_ITER {
        let mut grad = -LOGISTIC_RIDGE * &beta;
        let mut hess = DMatrix::<f64>::identity(dim, dim) * LOGISTIC_RIDGE;
        for (i, &class) in classes.iter().enumerate() {
            let mut logits = vec![0.0; n_classes];
            for k in 0..m {
                logits[k + 1] = (0..p).map(|j| beta[k * p + j] * design(i, j)).sum();
            }
            let prob = softmax(&logits);
            let wi = w(i);
            for k in 0..m {
                let resid = f64::from(u8::from(class == k + 1)) - prob[k + 1];
                for j in 0..p {
                    grad[k * p + j] += wi * resid * design(i, j);
                }
                for l in 0..m {
                    let c = wi * prob[k + 1] * (f64::from(u8::from(k == l)) - prob[l + 1]);
                    for j in 0..p {
                        for jj in 0..p {
                            hess[(k * p + j, l * p + jj)] += c * design(i, j) * design(i, jj);
                        }
                    }
                }
            }
        }
        if grad.amax() / total_w < NEWTON_GRAD_TOL {
            converged = true;
            break;
        }
        let Some(chol) = hess.clone().cholesky() else {
            break;
        };
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let candidate = &beta + t * &step;
            let value = objective(&candidate);
            if value >= current {
                beta = candidate;
                current = value;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !improved {
            break;
        }
    }

    Ok(LogisticModel {
        coefficients: (0..m)
            .map(|k| beta.rows(k * p, p).iter().copied().collect())
            .collect(),
        n_classes,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[derive(Debug)]
    struct Fixed(Vec<f64>);

    impl Classifier for Fixed {
        fn covariate_dim(&self) -> usize {
            0
        }
        fn n_classes(&self) -> usize {
            self.0.len()
        }
        fn predict_proba(&self, _x: &[f64]) -> Vec<f64> {
            self.0.clone()
        }
    }

    #[test]
    fn score_examples() {
        let reg = ScoreModel::regression(ConstantPredictor { value: 5.0, dim: 0 });
        assert_eq!(reg.score(&[], 7.0).unwrap(), 2.0);
        assert_eq!(reg.score(&[], 5.0).unwrap(), 0.0);
        let cls = ScoreModel::classification(Fixed(vec![0.7, 0.2, 0.1]));
        assert!((cls.score(&[], 0.0).unwrap() - 0.3).abs() < 1e-15);
        assert!(matches!(
            cls.score(&[], 3.0),
            Err(Error::UnknownClass { .. })
        ));
        assert!(matches!(
            reg.score(&[1.0], 1.0),
            Err(Error::DimensionMismatch {
                expected: 0,
                got: 1
            })
        ));
    }

    #[test]
    fn exact_line_is_recovered() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| 2.0 * i as f64).collect();
        let m = fit_ols(&x, &y, None).unwrap();
        assert!(m.coefficients[0].abs() < 1e-10);
        assert!((m.coefficients[1] - 2.0).abs() < 1e-10);
        for (xi, yi) in x.iter().zip(&y) {
            assert!((m.predict(xi) - yi).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_response_gives_zero_slopes() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let m = fit_ols(&x, &[3.5; 8], None).unwrap();
        assert!((m.coefficients[0] - 3.5).abs() < 1e-10);
        assert!(m.coefficients[1..].iter().all(|b| b.abs() < 1e-10));
    }

    fn noisy_data(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| vec![rng.random::<f64>(), rng.random::<f64>() * 10.0])
            .collect();
        let y = x
            .iter()
            .map(|r| 1.0 + 3.0 * r[0] - 0.5 * r[1] + rng.random::<f64>())
            .collect();
        (x, y)
    }

    #[test]
    fn equal_weights_match_unweighted_fit() {
        let (x, y) = noisy_data(1, 50);
        let a = fit_ols(&x, &y, None).unwrap();
        let b = fit_ols(&x, &y, Some(&[2.5; 50])).unwrap();
        for (u, v) in a.coefficients.iter().zip(&b.coefficients) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn residuals_are_orthogonal_to_design() {
        let (x, y) = noisy_data(2, 80);
        let m = fit_ols(&x, &y, None).unwrap();
        let r: Vec<f64> = x
            .iter()
            .zip(&y)
            .map(|(xi, yi)| yi - m.predict(xi))
            .collect();
        let scale: f64 = y.iter().map(|v| v.abs()).sum();
        for j in 0..3 {
            let dot: f64 = x
                .iter()
                .zip(&r)
                .map(|(xi, ri)| ri * if j == 0 { 1.0 } else { xi[j - 1] })
                .sum();
            assert!(dot.abs() < 1e-8 * scale, "column {j}: {dot}");
        }
    }

    #[test]
    fn fit_is_permutation_invariant() {
        let (x, y) = noisy_data(3, 60);
        let a = fit_ols(&x, &y, None).unwrap();
        let mut idx: Vec<usize> = (0..60).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
        let xs: Vec<Vec<f64>> = idx.iter().map(|&i| x[i].clone()).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let b = fit_ols(&xs, &ys, None).unwrap();
        for (u, v) in a.coefficients.iter().zip(&b.coefficients) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn collinear_columns_are_named() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let y: Vec<f64> = (0..6).map(|i| i as f64).collect();
        match fit_ols_named(&x, &y, None, &["ell".into(), "meals".into()]) {
            Err(Error::RankDeficient { columns }) => {
                assert!(columns.contains(&"meals".to_string()));
                assert!(columns.contains(&"ell".to_string()));
            }
            other => panic!("expected rank deficiency, got {other:?}"),
        }
        let x: Vec<Vec<f64>> = (0..6).map(|_| vec![0.0]).collect();
        assert!(matches!(
            fit_ols(&x, &y, None),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn too_few_rows_is_an_error() {
        assert!(fit_ols(&[vec![1.0, 2.0]], &[1.0], None).is_err());
    }

    #[test]
    fn logistic_recovers_separating_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<Vec<f64>> = (0..400)
            .map(|_| vec![rng.random::<f64>() * 4.0 - 2.0])
            .collect();
        let labels: Vec<f64> = x
            .iter()
            .map(|r| {
                let p1 = 1.0 / (1.0 + (-2.0 * r[0]).exp());
                f64::from(u8::from(rng.random::<f64>() < p1))
            })
            .collect();
        let m = fit_logistic(&x, &labels, 2, None).unwrap();
        assert!(m.converged);
        assert!(
            (m.coefficients[0][1] - 2.0).abs() < 0.6,
            "{:?}",
            m.coefficients
        );
        let p = m.predict_proba(&[1.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p[1] > p[0]);
    }

    #[test]
    fn logistic_probabilities_are_valid_for_three_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<Vec<f64>> = (0..300)
            .map(|_| vec![rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let labels: Vec<f64> = (0..300).map(|i| (i % 3) as f64).collect();
        let m = fit_logistic(&x, &labels, 3, None).unwrap();
        for xi in &x {
            let p = m.predict_proba(xi);
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(fit_logistic(&x, &vec![5.0; 300], 3, None).is_err());
    }
}
