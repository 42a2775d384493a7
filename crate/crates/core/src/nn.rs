//! Feed-forward network `4 -> 512 -> 512 -> 2` with tanh hidden layers.
//!
//! Training minimizes the mean squared error over the batch and both control
//! outputs, using the raw (unclamped) network output. Outputs are clamped to
//! the control bounds only at inference time.
//!
//! Weight file layout (all integers and floats little-endian):
//!
//! ```text
//! magic     8 bytes  "MPCNNW\0\0"
//! version   u32      = 1
//! n_layers  u32      = 4
//! sizes     u32 * n  = 4, 512, 512, 2
//! params    f64 * .. W1 (row-major, 512x4), b1, W2, b2, W3, b3
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledSample;
use crate::plant::{Bounds, Control, State};
use crate::seed;

pub const INPUTS: usize = 4;
pub const HIDDEN: usize = 512;
pub const OUTPUTS: usize = 2;
pub const LAYER_SIZES: [usize; 4] = [INPUTS, HIDDEN, HIDDEN, OUTPUTS];

pub const WEIGHTS_MAGIC: [u8; 8] = *b"MPCNNW\0\0";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("loss became non-finite in epoch {epoch}")]
    NumericalFailure { epoch: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed weight file: {0}")]
    Malformed(String),
    #[error("weight file has layer sizes {found:?}, expected {LAYER_SIZES:?}")]
    ShapeMismatch { found: Vec<u32> },
    #[error("weight file version {found}, expected {WEIGHTS_VERSION}")]
    VersionMismatch { found: u32 },
}

/// Weights and biases. `w1` is `512x4`, `w2` is `512x512`, `w3` is `2x512`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

impl MlpParams {
    pub fn zeros() -> Self {
        Self {
            w1: Array2::zeros((HIDDEN, INPUTS)),
            b1: Array1::zeros(HIDDEN),
            w2: Array2::zeros((HIDDEN, HIDDEN)),
            b2: Array1::zeros(HIDDEN),
            w3: Array2::zeros((OUTPUTS, HIDDEN)),
            b3: Array1::zeros(OUTPUTS),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter tensors in file order: W1, b1, W2, b2, W3, b3.
    pub fn tensors(&self) -> [&[f64]; 6] {
        const MSG: &str = "parameters are kept in standard layout";
        [
            self.w1.as_slice().expect(MSG),
            self.b1.as_slice().expect(MSG),
            self.w2.as_slice().expect(MSG),
            self.b2.as_slice().expect(MSG),
            self.w3.as_slice().expect(MSG),
            self.b3.as_slice().expect(MSG),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        const MSG: &str = "parameters are kept in standard layout";
        [
            self.w1.as_slice_mut().expect(MSG),
            self.b1.as_slice_mut().expect(MSG),
            self.w2.as_slice_mut().expect(MSG),
            self.b2.as_slice_mut().expect(MSG),
            self.w3.as_slice_mut().expect(MSG),
            self.b3.as_slice_mut().expect(MSG),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Network output before clamping.
    pub fn forward_raw(&self, s: &State) -> [f64; 2] {
        let x = s.to_array();
        let h1: Vec<f64> = (0..HIDDEN)
            .map(|i| {
                let row = self.w1.row(i);
                (self.b1[i] + (0..INPUTS).map(|j| row[j] * x[j]).sum::<f64>()).tanh()
            })
            .collect();
        let h1 = Array1::from(h1);
        let h2 = (self.w2.dot(&h1) + &self.b2).mapv(f64::tanh);
        let y = self.w3.dot(&h2) + &self.b3;
        [y[0], y[1]]
    }

    /// Network output clamped into the control bounds.
    pub fn forward(&self, s: &State, bounds: &Bounds) -> Control {
        bounds.clamp_control(Control::from_array(self.forward_raw(s)))
    }

    /// Raw outputs for a `batch x 4` input matrix.
    pub fn forward_batch_raw(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let h1 = (x.dot(&self.w1.t()) + &self.b1).mapv(f64::tanh);
        let h2 = (h1.dot(&self.w2.t()) + &self.b2).mapv(f64::tanh);
        h2.dot(&self.w3.t()) + &self.b3
    }
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
pub fn init_params(seed: u64) -> MlpParams {
    let mut rng = seed::rng(seed);
    let mut p = MlpParams::zeros();
    for w in [&mut p.w1, &mut p.w2, &mut p.w3] {
        let limit = 1.0 / (w.ncols() as f64).sqrt();
        w.mapv_inplace(|_| rng.random_range(-limit..=limit));
    }
    p
}

fn batch_arrays(batch: &[LabeledSample]) -> (Array2<f64>, Array2<f64>) {
    let mut x = Array2::zeros((batch.len(), INPUTS));
    let mut t = Array2::zeros((batch.len(), OUTPUTS));
    for (i, s) in batch.iter().enumerate() {
        x.row_mut(i).assign(&Array1::from(s.state.to_array().to_vec()));
        t[[i, 0]] = s.control.u1;
        t[[i, 1]] = s.control.u2;
    }
    (x, t)
}

/// Mean squared error over the batch and both outputs, with its gradient.
pub fn loss_and_gradients(p: &MlpParams, batch: &[LabeledSample]) -> (f64, MlpParams) {
    assert!(!batch.is_empty(), "loss needs a nonempty batch");
    let (x, t) = batch_arrays(batch);
    let n = batch.len() as f64;

    let h1 = (x.dot(&p.w1.t()) + &p.b1).mapv(f64::tanh);
    let h2 = (h1.dot(&p.w2.t()) + &p.b2).mapv(f64::tanh);
    let y = h2.dot(&p.w3.t()) + &p.b3;
    let err = &y - &t;
    let loss = err.iter().map(|e| e * e).sum::<f64>() / (OUTPUTS as f64 * n);

    // d loss / d y = 2 err / (2 n)
    let dy = err / n;
    let gw3 = dy.t().dot(&h2);
    let gb3 = dy.sum_axis(Axis(0));
    let dz2 = dy.dot(&p.w3) * h2.mapv(|h| 1.0 - h * h);
    let gw2 = dz2.t().dot(&h1);
    let gb2 = dz2.sum_axis(Axis(0));
    let dz1 = dz2.dot(&p.w2) * h1.mapv(|h| 1.0 - h * h);
    let gw1 = dz1.t().dot(&x);
    let gb1 = dz1.sum_axis(Axis(0));

    let grads = MlpParams {
        w1: gw1.as_standard_layout().to_owned(),
        b1: gb1,
        w2: gw2.as_standard_layout().to_owned(),
        b2: gb2,
        w3: gw3.as_standard_layout().to_owned(),
        b3: gb3,
    };
    (loss, grads)
}

/// Mean squared error over a dataset, evaluated in chunks.
pub fn mean_loss(p: &MlpParams, samples: &[LabeledSample]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut sum = 0.0;
    for chunk in samples.chunks(4096) {
        let (x, t) = batch_arrays(chunk);
        let y = p.forward_batch_raw(x.view());
        sum += (&y - &t).iter().map(|e| e * e).sum::<f64>();
    }
    sum / (OUTPUTS as f64 * samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 3e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidConfig(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        Ok(())
    }
}

/// Adam moment estimates for one parameter set.
#[derive(Debug, Clone)]
pub struct Adam {
    m: MlpParams,
    v: MlpParams,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            m: MlpParams::zeros(),
            v: MlpParams::zeros(),
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step(&mut self, p: &mut MlpParams, g: &MlpParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let params = p.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((pt, gt), mt), vt) in params.into_iter().zip(g.tensors()).zip(ms).zip(vs) {
            for (((w, &gr), m), v) in pt.iter_mut().zip(gt).zip(mt.iter_mut()).zip(vt.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * gr;
                *v = b2 * *v + (1.0 - b2) * gr * gr;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when there is no validation set.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLoss>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

/// Mini-batch Adam from `p`. Returns the parameters of the epoch with the
/// lowest validation loss (training loss when `val_set` is empty).
pub fn train(
    p: &MlpParams,
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    cfg: &TrainConfig,
) -> Result<(MlpParams, TrainHistory), NnError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(NnError::EmptyTrainingSet);
    }
    let mut params = p.clone();
    let mut adam = Adam::new(cfg);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, MlpParams)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::rng(seed::item(cfg.seed, epoch)));
        let mut weighted = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i]));
            let (loss, grads) = loss_and_gradients(&params, &batch);
            if !loss.is_finite() {
                return Err(NnError::NumericalFailure { epoch });
            }
            weighted += loss * chunk.len() as f64;
            adam.step(&mut params, &grads);
        }
        let train_loss = weighted / train_set.len() as f64;
        let val_loss = (!val_set.is_empty()).then(|| mean_loss(&params, val_set));
        let score = val_loss.unwrap_or(train_loss);
        if !score.is_finite() || !params.is_finite() {
            return Err(NnError::NumericalFailure { epoch });
        }
        history.push(EpochLoss { epoch, train_loss, val_loss });
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok((best_params, TrainHistory { epochs: history, best_epoch }))
}

pub fn params_to_bytes(p: &MlpParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 8 * p.num_params());
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(LAYER_SIZES.len() as u32).to_le_bytes());
    for s in LAYER_SIZES {
        out.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for t in p.tensors() {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            NnError::Malformed(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<MlpParams, NnError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != WEIGHTS_MAGIC {
        return Err(NnError::Malformed("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != WEIGHTS_VERSION {
        return Err(NnError::VersionMismatch { found: version });
    }
    let n_layers = r.u32("layer count")?;
    if n_layers > 64 {
        return Err(NnError::Malformed(format!("implausible layer count {n_layers}")));
    }
    let sizes = (0..n_layers).map(|_| r.u32("layer sizes")).collect::<Result<Vec<_>, _>>()?;
    if sizes.iter().map(|&s| s as usize).ne(LAYER_SIZES) {
        return Err(NnError::ShapeMismatch { found: sizes });
    }
    let mut p = MlpParams::zeros();
    for t in p.tensors_mut() {
        let raw = r.take(8 * t.len(), "parameters")?;
        for (x, b) in t.iter_mut().zip(raw.chunks_exact(8)) {
            *x = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(NnError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if !p.is_finite() {
        return Err(NnError::Malformed("non-finite parameter".into()));
    }
    Ok(p)
}

pub fn save_params(p: &MlpParams, path: &Path) -> Result<(), NnError> {
    fs::write(path, params_to_bytes(p)).map_err(|source| NnError::Io { path: path.to_path_buf(), source })
}

pub fn load_params(path: &Path) -> Result<MlpParams, NnError> {
    let bytes = fs::read(path).map_err(|source| NnError::Io { path: path.to_path_buf(), source })?;
    params_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(n: usize, seed_: u64) -> Vec<LabeledSample> {
        let mut rng = seed::rng(seed_);
        (0..n)
            .map(|_| LabeledSample {
                state: State::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
                control: Control::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            })
            .collect()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_params(11);
        assert_eq!(a, init_params(11));
        assert_ne!(a, init_params(12));
        assert!(a.b1.iter().chain(&a.b2).chain(&a.b3).all(|&b| b == 0.0));
        assert!(a.w1.iter().all(|w| w.abs() <= 0.5));
        let lim2 = 1.0 / (HIDDEN as f64).sqrt();
        assert!(a.w2.iter().chain(&a.w3).all(|w| w.abs() <= lim2));
        assert_eq!(a.w1.dim(), (512, 4));
        assert_eq!(a.w2.dim(), (512, 512));
        assert_eq!(a.w3.dim(), (2, 512));
    }

    #[test]
    fn zero_network_and_clamped_bias() {
        let b = Bounds::default();
        let mut p = MlpParams::zeros();
        assert_eq!(p.forward(&State::new(1.0, -1.0, 0.5, 0.2), &b), Control::ZERO);
        p.b3[0] = 12.0;
        p.b3[1] = -12.0;
        assert_eq!(p.forward(&State::ORIGIN, &b), Control::new(10.0, -10.0));
    }

    #[test]
    fn batch_forward_matches_single() {
        let p = init_params(3);
        let batch = random_batch(5, 4);
        let (x, _) = batch_arrays(&batch);
        let y = p.forward_batch_raw(x.view());
        for (i, s) in batch.iter().enumerate() {
            let single = p.forward_raw(&s.state);
            assert!((single[0] - y[[i, 0]]).abs() < 1e-12);
            assert!((single[1] - y[[i, 1]]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_network_zero_label_has_zero_loss_and_grads() {
        let p = MlpParams::zeros();
        let batch = [LabeledSample { state: State::new(0.3, 0.1, -0.2, 0.4), control: Control::ZERO }];
        let (loss, g) = loss_and_gradients(&p, &batch);
        assert_eq!(loss, 0.0);
        assert!(g.tensors().iter().all(|t| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_grads() {
        let p = init_params(5);
        let batch: Vec<LabeledSample> = random_batch(6, 1)
            .into_iter()
            .map(|s| LabeledSample { state: s.state, control: Control::from_array(p.forward_raw(&s.state)) })
            .collect();
        let (loss, g) = loss_and_gradients(&p, &batch);
        assert!(loss < 1e-28, "{loss}");
        assert!(g.tensors().iter().all(|t| t.iter().all(|x| x.abs() < 1e-13)));
    }

    #[test]
    fn adam_with_zero_gradient_is_a_no_op() {
        let cfg = TrainConfig::default();
        let mut p = init_params(2);
        let before = p.clone();
        let mut adam = Adam::new(&cfg);
        adam.step(&mut p, &MlpParams::zeros());
        assert_eq!(p, before);
    }

    #[test]
    fn adam_overfits_small_batch() {
        let cfg = TrainConfig::default();
        let batch = random_batch(32, 8);
        let mut p = init_params(9);
        let mut adam = Adam::new(&cfg);
        let (first, _) = loss_and_gradients(&p, &batch);
        let mut last = first;
        for _ in 0..50 {
            let (loss, g) = loss_and_gradients(&p, &batch);
            last = loss;
            adam.step(&mut p, &g);
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn train_rejects_empty_set() {
        let r = train(&init_params(0), &[], &[], &TrainConfig::default());
        assert!(matches!(r, Err(NnError::EmptyTrainingSet)));
    }

    #[test]
    fn divergent_learning_rate_is_a_numerical_failure() {
        let cfg = TrainConfig { learning_rate: 1e300, epochs: 3, ..Default::default() };
        let batch = random_batch(64, 3);
        let r = train(&init_params(0), &batch, &batch, &cfg);
        assert!(matches!(r, Err(NnError::NumericalFailure { .. })), "{r:?}");
    }

    #[test]
    fn weight_file_round_trip_and_errors() {
        let p = init_params(21);
        let bytes = params_to_bytes(&p);
        assert_eq!(params_from_bytes(&bytes).unwrap(), p);

        assert!(matches!(params_from_bytes(&bytes[..bytes.len() - 3]), Err(NnError::Malformed(_))));
        assert!(matches!(params_from_bytes(&bytes[..10]), Err(NnError::Malformed(_))));

        let mut v2 = bytes.clone();
        v2[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(params_from_bytes(&v2), Err(NnError::VersionMismatch { found: 2 })));

        let mut other = Vec::new();
        other.extend_from_slice(&WEIGHTS_MAGIC);
        other.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        other.extend_from_slice(&3u32.to_le_bytes());
        for s in [3u32, 512, 2] {
            other.extend_from_slice(&s.to_le_bytes());
        }
        match params_from_bytes(&other) {
            Err(NnError::ShapeMismatch { found }) => assert_eq!(found, vec![3, 512, 2]),
            r => panic!("expected shape mismatch, got {r:?}"),
        }
    }
}
