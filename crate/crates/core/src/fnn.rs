//! Small feed-forward regressor for quarterly return ranking.
//!
//! One hidden ReLU layer and a sigmoid output unit, trained with Adam on
//! mean squared error. Because the output is confined to (0,1), targets
//! are mapped into that interval by an affine scaler fitted on the
//! training targets with a safety margin; predictions map back through
//! the inverse. The default hidden width equals the input width, so a
//! 21-feature dataset yields a 21-21-1 network (484 parameters).

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// Errors raised by network construction, training, and inference.
#[derive(Debug, thiserror::Error)]
pub enum FnnError {
    #[error("DimensionMismatch: expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("EmptyTrainingSet: no samples")]
    EmptyTrainingSet,
    #[error("DegenerateTargets: targets must be finite and not all equal")]
    DegenerateTargets,
    #[error("NonFiniteLoss: loss became non-finite after epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("ScalerUnset: model has no fitted target scaler; train it first")]
    ScalerUnset,
    #[error("SchemaError: {0}")]
    SchemaError(String),
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
}

/// Training hyperparameters. Defaults are the ones the pipeline uses.
#[derive(Debug, Clone)]
pub struct FnnConfig {
    /// Hidden width; `None` means "same as the input width".
    pub hidden: Option<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Fraction of the target range padded on each side by the scaler.
    pub scaler_margin: f64,
    /// Seeds both weight initialization and batch shuffling.
    pub seed: u64,
}

impl Default for FnnConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            learning_rate: 1e-3,
            epochs: 500,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            scaler_margin: 0.1,
            seed: 0,
        }
    }
}

/// Feed-forward network: `n_in -> n_hidden` ReLU, `n_hidden -> 1` sigmoid.
///
/// `w1` is row-major (`n_hidden` rows of `n_in` input weights). `scaler`
/// holds the `(lo, hi)` target range mapped onto the sigmoid's (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct FnnModel<T> {
    n_in: usize,
    n_hidden: usize,
    w1: Vec<T>,
    b1: Vec<T>,
    w2: Vec<T>,
    b2: T,
    scaler: Option<(T, T)>,
}

fn relu<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z
    } else {
        T::zero()
    }
}

/// Numerically stable logistic function: never exponentiates a positive
/// argument, so it cannot overflow.
fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Affine target scaler: pads the observed range by `margin` on each side
/// so trained outputs stay off the sigmoid's saturated tails.
/// `[-0.1, 0.3]` with margin 0.1 maps to `(-0.14, 0.34)`.
pub fn fit_target_scaler<T: Scalar>(targets: &[T], margin: f64) -> Result<(T, T), FnnError> {
    if targets.is_empty() {
        return Err(FnnError::EmptyTrainingSet);
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(FnnError::DegenerateTargets);
    }
    let mut min = targets[0];
    let mut max = targets[0];
    for &t in targets {
        min = min.min(t);
        max = max.max(t);
    }
    if min == max {
        return Err(FnnError::DegenerateTargets);
    }
    let pad = T::of(margin) * (max - min);
    Ok((min - pad, max + pad))
}

impl<T: Scalar> FnnModel<T> {
    /// Glorot-uniform initialization from a dedicated ChaCha stream:
    /// hidden-layer weights first (row-major), then output weights;
    /// biases start at zero. Limit is `sqrt(6 / (fan_in + fan_out))`.
    pub fn init(n_in: usize, n_hidden: usize, seed: u64) -> Result<Self, FnnError> {
        if n_in == 0 || n_hidden == 0 {
            return Err(FnnError::InvalidConfig(
                "layer widths must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |fan_in: usize, fan_out: usize, n: usize, rng: &mut ChaCha8Rng| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new(-limit, limit);
            (0..n).map(|_| T::of(dist.sample(rng))).collect::<Vec<T>>()
        };
        let w1 = draw(n_in, n_hidden, n_in * n_hidden, &mut rng);
        let w2 = draw(n_hidden, 1, n_hidden, &mut rng);
        Ok(Self {
            n_in,
            n_hidden,
            w1,
            b1: vec![T::zero(); n_hidden],
            w2,
            b2: T::zero(),
            scaler: None,
        })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_hidden(&self) -> usize {
        self.n_hidden
    }

    pub fn scaler(&self) -> Option<(T, T)> {
        self.scaler
    }

    pub fn set_scaler(&mut self, lo: T, hi: T) {
        self.scaler = Some((lo, hi));
    }

    /// Total trainable parameters: `n_hidden*(n_in+2) + 1`.
    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// Flat parameter accessor in `w1, b1, w2, b2` order.
    pub fn param(&self, k: usize) -> T {
        let (nw1, nb1, nw2) = (self.w1.len(), self.b1.len(), self.w2.len());
        if k < nw1 {
            self.w1[k]
        } else if k < nw1 + nb1 {
            self.b1[k - nw1]
        } else if k < nw1 + nb1 + nw2 {
            self.w2[k - nw1 - nb1]
        } else {
            self.b2
        }
    }

    pub fn set_param(&mut self, k: usize, v: T) {
        let (nw1, nb1, nw2) = (self.w1.len(), self.b1.len(), self.w2.len());
        if k < nw1 {
            self.w1[k] = v;
        } else if k < nw1 + nb1 {
            self.b1[k - nw1] = v;
        } else if k < nw1 + nb1 + nw2 {
            self.w2[k - nw1 - nb1] = v;
        } else {
            self.b2 = v;
        }
    }

    fn hidden_pre(&self, x: &[T], j: usize) -> T {
        let row = &self.w1[j * self.n_in..(j + 1) * self.n_in];
        self.b1[j] + row.iter().zip(x).map(|(&w, &v)| w * v).sum::<T>()
    }

    /// Network output in (0,1).
    pub fn forward(&self, x: &[T]) -> Result<T, FnnError> {
        if x.len() != self.n_in {
            return Err(FnnError::DimensionMismatch {
                expected: self.n_in,
                got: x.len(),
            });
        }
        let z = self.b2
            + (0..self.n_hidden)
                .map(|j| self.w2[j] * relu(self.hidden_pre(x, j)))
                .sum::<T>();
        Ok(sigmoid(z))
    }

    /// Output mapped back to return units through the fitted scaler.
    pub fn predict_return(&self, x: &[T]) -> Result<T, FnnError> {
        let (lo, hi) = self.scaler.ok_or(FnnError::ScalerUnset)?;
        Ok(lo + (hi - lo) * self.forward(x)?)
    }

    /// Flat text form; floats print in shortest round-trip notation, so
    /// [`FnnModel::from_text`] reproduces the model bit-for-bit.
    pub fn to_text(&self) -> String {
        let join = |v: &[T]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let scaler = match self.scaler {
            Some((lo, hi)) => format!("{lo} {hi}"),
            None => "none".to_string(),
        };
        format!(
            "fnn v1\nshape {} {}\nw1 {}\nb1 {}\nw2 {}\nb2 {}\nscaler {}\n",
            self.n_in,
            self.n_hidden,
            join(&self.w1),
            join(&self.b1),
            join(&self.w2),
            self.b2,
            scaler
        )
    }

    pub fn from_text(text: &str) -> Result<Self, FnnError> {
        let schema = |msg: &str| FnnError::SchemaError(msg.to_string());
        let mut lines = text.lines();
        if lines.next() != Some("fnn v1") {
            return Err(schema("expected header line `fnn v1`"));
        }
        let mut fields = |tag: &str| -> Result<Vec<String>, FnnError> {
            let line = lines
                .next()
                .ok_or_else(|| schema(&format!("missing `{tag}` line")))?;
            let mut toks = line.split_whitespace();
            if toks.next() != Some(tag) {
                return Err(schema(&format!("expected `{tag}` line")));
            }
            Ok(toks.map(String::from).collect())
        };
        let parse_all = |toks: &[String]| -> Result<Vec<T>, FnnError> {
            toks.iter()
                .map(|t| {
                    t.parse::<T>()
                        .map_err(|_| schema(&format!("bad float {t:?}")))
                })
                .collect()
        };

        let shape = fields("shape")?;
        if shape.len() != 2 {
            return Err(schema("shape line needs two integers"));
        }
        let n_in: usize = shape[0].parse().map_err(|_| schema("bad n_in"))?;
        let n_hidden: usize = shape[1].parse().map_err(|_| schema("bad n_hidden"))?;
        let w1 = parse_all(&fields("w1")?)?;
        let b1 = parse_all(&fields("b1")?)?;
        let w2 = parse_all(&fields("w2")?)?;
        let b2_toks = parse_all(&fields("b2")?)?;
        let scaler_toks = fields("scaler")?;
        if w1.len() != n_in * n_hidden
            || b1.len() != n_hidden
            || w2.len() != n_hidden
            || b2_toks.len() != 1
        {
            return Err(schema("parameter counts do not match shape"));
        }
        let scaler = match scaler_toks.as_slice() {
            [s] if s == "none" => None,
            [lo, hi] => Some((
                lo.parse::<T>().map_err(|_| schema("bad scaler lo"))?,
                hi.parse::<T>().map_err(|_| schema("bad scaler hi"))?,
            )),
            _ => return Err(schema("scaler line needs `none` or two floats")),
        };
        Ok(Self {
            n_in,
            n_hidden,
            w1,
            b1,
            w2,
            b2: b2_toks[0],
            scaler,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FnnError> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self, FnnError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Gradient of the mean-squared-error loss, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct FnnGradient<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: T,
}

impl<T: Scalar> FnnGradient<T> {
    fn zeros(model: &FnnModel<T>) -> Self {
        Self {
            w1: vec![T::zero(); model.w1.len()],
            b1: vec![T::zero(); model.b1.len()],
            w2: vec![T::zero(); model.w2.len()],
            b2: T::zero(),
        }
    }

    /// Flat view in the same order as [`FnnModel::param`].
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.w1.len() + self.b1.len() + self.w2.len() + 1);
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.push(self.b2);
        out
    }
}

fn check_rows<T: Scalar>(model: &FnnModel<T>, x: &[T], t: &[T]) -> Result<usize, FnnError> {
    let m = t.len();
    if m == 0 {
        return Err(FnnError::EmptyTrainingSet);
    }
    if x.len() != m * model.n_in {
        return Err(FnnError::DimensionMismatch {
            expected: m * model.n_in,
            got: x.len(),
        });
    }
    Ok(m)
}

/// Mean squared error of the sigmoid outputs against scaled targets
/// `t`: `(1/m) * sum (out_i - t_i)^2`.
pub fn mse_loss<T: Scalar>(model: &FnnModel<T>, x: &[T], t: &[T]) -> Result<T, FnnError> {
    let m = check_rows(model, x, t)?;
    let mut acc = T::zero();
    for (i, &ti) in t.iter().enumerate() {
        let out = model.forward(&x[i * model.n_in..(i + 1) * model.n_in])?;
        let d = out - ti;
        acc += d * d;
    }
    Ok(acc / T::from_count(m))
}

/// Accumulates the exact backpropagated gradient over the given rows,
/// normalized by the row count.
fn gradient_over_rows<T: Scalar>(
    model: &FnnModel<T>,
    x: &[T],
    t: &[T],
    rows: &[usize],
) -> FnnGradient<T> {
    let mut g = FnnGradient::zeros(model);
    let inv_m = T::one() / T::from_count(rows.len());
    let two = T::of(2.0);
    let n_in = model.n_in;
    let mut pre = vec![T::zero(); model.n_hidden];
    let mut h = vec![T::zero(); model.n_hidden];
    for &i in rows {
        let xi = &x[i * n_in..(i + 1) * n_in];
        for j in 0..model.n_hidden {
            pre[j] = model.hidden_pre(xi, j);
            h[j] = relu(pre[j]);
        }
        let z = model.b2 + model.w2.iter().zip(&h).map(|(&w, &v)| w * v).sum::<T>();
        let out = sigmoid(z);
        // d(mse)/d(out) * d(out)/dz; relu'(0) is taken as 0.
        let dz = two * inv_m * (out - t[i]) * out * (T::one() - out);
        g.b2 += dz;
        for j in 0..model.n_hidden {
            g.w2[j] += dz * h[j];
            if pre[j] > T::zero() {
                let dpre = dz * model.w2[j];
                g.b1[j] += dpre;
                let row = &mut g.w1[j * n_in..(j + 1) * n_in];
                for (gw, &xv) in row.iter_mut().zip(xi) {
                    *gw += dpre * xv;
                }
            }
        }
    }
    g
}

/// Exact gradient of [`mse_loss`] over the full sample set.
pub fn mse_gradient<T: Scalar>(
    model: &FnnModel<T>,
    x: &[T],
    t: &[T],
) -> Result<FnnGradient<T>, FnnError> {
    let m = check_rows(model, x, t)?;
    let rows: Vec<usize> = (0..m).collect();
    Ok(gradient_over_rows(model, x, t, &rows))
}

/// `|a - b| / max(|a| + |b|, 1e-8)` — the comparison used by the
/// gradient checks.
pub fn relative_error<T: Scalar>(a: T, b: T) -> T {
    (a - b).abs() / (a.abs() + b.abs()).max(T::of(1e-8))
}

/// Central-difference check of [`mse_gradient`]: returns the maximum
/// [`relative_error`] between numeric and analytic derivatives over all
/// parameters.
pub fn gradient_check<T: Scalar>(
    model: &FnnModel<T>,
    x: &[T],
    t: &[T],
    h: T,
) -> Result<T, FnnError> {
    let analytic = mse_gradient(model, x, t)?.flat();
    let mut probe = model.clone();
    let mut worst = T::zero();
    for (k, &a) in analytic.iter().enumerate() {
        let orig = model.param(k);
        probe.set_param(k, orig + h);
        let up = mse_loss(&probe, x, t)?;
        probe.set_param(k, orig - h);
        let down = mse_loss(&probe, x, t)?;
        probe.set_param(k, orig);
        let numeric = (up - down) / (T::of(2.0) * h);
        worst = worst.max(relative_error(numeric, a));
    }
    Ok(worst)
}

/// Trains a network on row-major samples `x` (width `n_in`) against raw
/// return targets `y`.
///
/// Fits the target scaler, maps targets into (0,1), and runs
/// mini-batch Adam for `epochs` passes with a seeded shuffle each epoch.
/// Returns the model (scaler set) and the full-sample loss recorded
/// after each epoch, in sigmoid units. `epochs = 0` returns the
/// initialized network untouched, scaler still fitted.
pub fn train_fnn<T: Scalar>(
    x: &[T],
    y: &[T],
    n_in: usize,
    cfg: &FnnConfig,
) -> Result<(FnnModel<T>, Vec<T>), FnnError> {
    if cfg.batch_size == 0 {
        return Err(FnnError::InvalidConfig(
            "batch_size must be positive".into(),
        ));
    }
    let n_hidden = cfg.hidden.unwrap_or(n_in);
    let mut model = FnnModel::init(n_in, n_hidden, cfg.seed)?;
    let m = check_rows(&model, x, y)?;
    let (lo, hi) = fit_target_scaler(y, cfg.scaler_margin)?;
    let t: Vec<T> = y.iter().map(|&v| (v - lo) / (hi - lo)).collect();

    let p = model.param_count();
    let mut mom = vec![T::zero(); p];
    let mut vel = vec![T::zero(); p];
    let lr = T::of(cfg.learning_rate);
    let beta1 = T::of(cfg.beta1);
    let beta2 = T::of(cfg.beta2);
    let eps = T::of(cfg.epsilon);
    let mut beta1_pow = T::one();
    let mut beta2_pow = T::one();

    // Separate stream from initialization so the draw order of weights
    // never depends on the epoch count.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..m).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let g = gradient_over_rows(&model, x, &t, chunk).flat();
            beta1_pow *= beta1;
            beta2_pow *= beta2;
            for (k, &gk) in g.iter().enumerate() {
                mom[k] = beta1 * mom[k] + (T::one() - beta1) * gk;
                vel[k] = beta2 * vel[k] + (T::one() - beta2) * gk * gk;
                let m_hat = mom[k] / (T::one() - beta1_pow);
                let v_hat = vel[k] / (T::one() - beta2_pow);
                let delta = lr * m_hat / (v_hat.sqrt() + eps);
                model.set_param(k, model.param(k) - delta);
            }
        }
        let loss = mse_loss(&model, x, &t)?;
        if !loss.is_finite() {
            return Err(FnnError::NonFiniteLoss { epoch });
        }
        losses.push(loss);
    }
    model.scaler = Some((lo, hi));
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn zero_model(n_in: usize, n_hidden: usize) -> FnnModel<f64> {
        FnnModel {
            n_in,
            n_hidden,
            w1: vec![0.0; n_in * n_hidden],
            b1: vec![0.0; n_hidden],
            w2: vec![0.0; n_hidden],
            b2: 0.0,
            scaler: None,
        }
    }

    /// Standard-normal inputs and a linear-in-features target.
    fn linear_problem(m: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(m * 3);
        let mut y = Vec::with_capacity(m);
        for _ in 0..m {
            let row: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            y.push(0.2 * row[0] - 0.1 * row[1] + 0.05 * row[2]);
            x.extend(row);
        }
        (x, y)
    }

    #[test]
    fn default_shape_has_484_params() {
        let model = FnnModel::<f64>::init(21, 21, 0).unwrap();
        assert_eq!(model.param_count(), 484);
    }

    #[test]
    fn sigmoid_matches_reference_value() {
        // One pass-through hidden unit so the output pre-activation is 2.
        let mut model = zero_model(1, 1);
        model.w1[0] = 1.0;
        model.w2[0] = 1.0;
        let out = model.forward(&[2.0]).unwrap();
        assert!((out - 0.880797).abs() < 1e-6);
        // Stability at extreme arguments: no overflow, correct limits.
        model.w1[0] = 1000.0;
        assert_eq!(model.forward(&[5.0]).unwrap(), 1.0);
        model.w2[0] = -1.0;
        assert_eq!(model.forward(&[5.0]).unwrap(), 0.0);
    }

    #[test]
    fn zero_weights_output_half() {
        let model = zero_model(4, 3);
        assert_eq!(model.forward(&[1.0, -2.0, 3.5, 0.0]).unwrap(), 0.5);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let model = zero_model(3, 2);
        assert!(matches!(
            model.forward(&[1.0, 2.0]),
            Err(FnnError::DimensionMismatch {
                expected: 3,
                got: 2
            })
        ));
    }

    #[test]
    fn scaler_example_and_midpoint_prediction() {
        let (lo, hi) = fit_target_scaler(&[-0.1f64, 0.3], 0.1).unwrap();
        assert!((lo - (-0.14)).abs() < 1e-12);
        assert!((hi - 0.34).abs() < 1e-12);
        let mut model = zero_model(2, 2);
        model.set_scaler(lo, hi);
        // Zero weights give output 0.5, i.e. the scaler midpoint.
        let pred = model.predict_return(&[3.0, -1.0]).unwrap();
        assert!((pred - 0.10).abs() < 1e-12);
    }

    #[test]
    fn scaler_rejects_degenerate_targets() {
        assert!(matches!(
            fit_target_scaler(&[0.2, 0.2, 0.2], 0.1),
            Err(FnnError::DegenerateTargets)
        ));
        assert!(matches!(
            fit_target_scaler(&[0.1, f64::NAN], 0.1),
            Err(FnnError::DegenerateTargets)
        ));
        assert!(matches!(
            fit_target_scaler::<f64>(&[], 0.1),
            Err(FnnError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn predict_without_scaler_is_an_error() {
        let model = zero_model(1, 1);
        assert!(matches!(
            model.predict_return(&[1.0]),
            Err(FnnError::ScalerUnset)
        ));
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = FnnModel::<f64>::init(5, 4, 42).unwrap();
        let b = FnnModel::<f64>::init(5, 4, 42).unwrap();
        let c = FnnModel::<f64>::init(5, 4, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.b1.iter().all(|&v| v == 0.0));
        assert_eq!(a.b2, 0.0);
        let limit = (6.0 / 9.0f64).sqrt();
        assert!(a.w1.iter().all(|w| w.abs() < limit));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..10 {
            let model = FnnModel::<f64>::init(4, 5, seed).unwrap();
            let m = 16;
            let x: Vec<f64> = (0..m * 4)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let t: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..0.9)).collect();
            let err = gradient_check(&model, &x, &t, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn gradient_check_error_shrinks_with_h() {
        let model = FnnModel::<f64>::init(3, 4, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
        let t: Vec<f64> = (0..10).map(|_| rng.gen_range(0.2..0.8)).collect();
        let coarse = gradient_check(&model, &x, &t, 1e-3).unwrap();
        let fine = gradient_check(&model, &x, &t, 1e-5).unwrap();
        assert!(
            fine < coarse,
            "central differences should tighten as h shrinks: {fine} !< {coarse}"
        );
    }

    #[test]
    fn gradient_is_zero_when_targets_equal_outputs() {
        // Fixing targets to the model's own outputs makes the analytic
        // gradient identically zero; the numeric one must agree to the
        // h^2 error floor.
        let model = FnnModel::<f64>::init(3, 3, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..24).map(|_| StandardNormal.sample(&mut rng)).collect();
        let t: Vec<f64> = (0..8)
            .map(|i| model.forward(&x[i * 3..(i + 1) * 3]).unwrap())
            .collect();
        let g = mse_gradient(&model, &x, &t).unwrap().flat();
        assert!(g.iter().all(|&v| v == 0.0));
        let mut probe = model.clone();
        for k in 0..model.param_count() {
            let orig = model.param(k);
            let h = 1e-5;
            probe.set_param(k, orig + h);
            let up = mse_loss(&probe, &x, &t).unwrap();
            probe.set_param(k, orig - h);
            let down = mse_loss(&probe, &x, &t).unwrap();
            probe.set_param(k, orig);
            assert!(((up - down) / (2.0 * h)).abs() < 1e-8);
        }
    }

    #[test]
    fn full_gradient_is_sample_order_invariant() {
        let model = FnnModel::<f64>::init(3, 4, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 20;
        let x: Vec<f64> = (0..m * 3)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let t: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..0.9)).collect();
        let forward = mse_gradient(&model, &x, &t).unwrap().flat();
        let mut rx = Vec::new();
        let mut rt = Vec::new();
        for i in (0..m).rev() {
            rx.extend_from_slice(&x[i * 3..(i + 1) * 3]);
            rt.push(t[i]);
        }
        let reversed = mse_gradient(&model, &rx, &rt).unwrap().flat();
        for (a, b) in forward.iter().zip(&reversed) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn learns_noiseless_linear_map() {
        let (x, y) = linear_problem(200, 11);
        let cfg = FnnConfig {
            hidden: Some(21),
            seed: 1,
            ..FnnConfig::default()
        };
        let (model, losses) = train_fnn(&x, &y, 3, &cfg).unwrap();
        assert_eq!(losses.len(), 500);
        assert!(
            losses[499] < losses[0],
            "loss should decrease: {} !< {}",
            losses[499],
            losses[0]
        );
        let mse: f64 = (0..200)
            .map(|i| {
                let pred = model.predict_return(&x[i * 3..(i + 1) * 3]).unwrap();
                (pred - y[i]).powi(2)
            })
            .sum::<f64>()
            / 200.0;
        assert!(mse.sqrt() < 0.01, "RMSE {} >= 0.01", mse.sqrt());
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (x, y) = linear_problem(40, 9);
        let cfg = FnnConfig {
            epochs: 20,
            seed: 123,
            ..FnnConfig::default()
        };
        let (a, la) = train_fnn(&x, &y, 3, &cfg).unwrap();
        let (b, lb) = train_fnn(&x, &y, 3, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let other = FnnConfig { seed: 124, ..cfg };
        let (c, _) = train_fnn(&x, &y, 3, &other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_epochs_returns_initialized_model_with_scaler() {
        let (x, y) = linear_problem(10, 4);
        let cfg = FnnConfig {
            epochs: 0,
            seed: 5,
            ..FnnConfig::default()
        };
        let (model, losses) = train_fnn(&x, &y, 3, &cfg).unwrap();
        assert!(losses.is_empty());
        let mut init = FnnModel::<f64>::init(3, 3, 5).unwrap();
        init.scaler = model.scaler;
        assert_eq!(model, init);
        assert!(model.scaler.is_some());
    }

    #[test]
    fn non_finite_inputs_surface_as_error() {
        let x = vec![f64::INFINITY, 1.0, 2.0, 3.0];
        let y = vec![0.1, -0.1];
        let cfg = FnnConfig {
            epochs: 3,
            ..FnnConfig::default()
        };
        let result = train_fnn(&x, &y, 2, &cfg);
        assert!(
            matches!(result, Err(FnnError::NonFiniteLoss { .. })),
            "got {result:?}"
        );
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let (x, y) = linear_problem(30, 6);
        let cfg = FnnConfig {
            epochs: 5,
            ..FnnConfig::default()
        };
        let (model, _) = train_fnn(&x, &y, 3, &cfg).unwrap();
        let text = model.to_text();
        let reloaded = FnnModel::<f64>::from_text(&text).unwrap();
        assert_eq!(model, reloaded);
        assert_eq!(text, reloaded.to_text());

        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("model.fnn");
        model.save(&path).unwrap();
        assert_eq!(FnnModel::<f64>::load(&path).unwrap(), model);
    }

    #[test]
    fn from_text_rejects_malformed_input() {
        assert!(FnnModel::<f64>::from_text("nope").is_err());
        let mut model = zero_model(2, 2).to_text();
        model = model.replace("shape 2 2", "shape 2 3");
        assert!(matches!(
            FnnModel::<f64>::from_text(&model),
            Err(FnnError::SchemaError(_))
        ));
    }
}
