#![allow(dead_code, clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

use mpcnn::nn::{MlpParams, HIDDEN, INPUTS, OUTPUTS};
use mpcnn::{Bounds, Control, LabeledSample, State};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_inside_state(rng: &mut ChaCha8Rng) -> State {
    State::new(
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    )
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<LabeledSample> {
    (0..n)
        .map(|_| LabeledSample {
            state: random_inside_state(rng),
            control: Control::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        })
        .collect()
}

/// Plain-loop forward pass, kept separate from the library's matrix code.
pub struct Activations {
    pub z1: Vec<f64>,
    pub h1: Vec<f64>,
    pub z2: Vec<f64>,
    pub h2: Vec<f64>,
    pub out: [f64; 2],
}

pub fn oracle_activations(p: &MlpParams, s: &State) -> Activations {
    let x = s.to_array();
    let mut z1 = vec![0.0; HIDDEN];
    for i in 0..HIDDEN {
        let mut acc = p.b1[i];
        for j in 0..INPUTS {
            acc += p.w1[[i, j]] * x[j];
        }
        z1[i] = acc;
    }
    let h1: Vec<f64> = z1.iter().map(|z| z.tanh()).collect();
    let mut z2 = vec![0.0; HIDDEN];
    for i in 0..HIDDEN {
        let mut acc = p.b2[i];
        for j in 0..HIDDEN {
            acc += p.w2[[i, j]] * h1[j];
        }
        z2[i] = acc;
    }
    let h2: Vec<f64> = z2.iter().map(|z| z.tanh()).collect();
    let mut out = [0.0; 2];
    for k in 0..OUTPUTS {
        let mut acc = p.b3[k];
        for j in 0..HIDDEN {
            acc += p.w3[[k, j]] * h2[j];
        }
        out[k] = acc;
    }
    Activations { z1, h1, z2, h2, out }
}

pub fn oracle_forward(p: &MlpParams, s: &State, bounds: &Bounds) -> Control {
    let out = oracle_activations(p, s).out;
    Control::new(
        out[0].clamp(bounds.control_low[0], bounds.control_high[0]),
        out[1].clamp(bounds.control_low[1], bounds.control_high[1]),
    )
}

pub fn oracle_loss(p: &MlpParams, batch: &[LabeledSample]) -> f64 {
    let mut sum = 0.0;
    for s in batch {
        let out = oracle_activations(p, &s.state).out;
        let t = s.control.to_array();
        for k in 0..OUTPUTS {
            sum += (out[k] - t[k]).powi(2);
        }
    }
    sum / (2.0 * batch.len() as f64)
}

/// Central differences of the batch loss for every parameter, in the same
/// tensor order as `MlpParams::tensors`.
///
/// Each perturbation only touches part of the network, so the output change
/// `d+ - d-` is computed from the affected units alone and the loss difference
/// as `sum (d+ - d-) (2r + d+ + d-) / 2B`. This avoids subtracting two nearly
/// equal full losses.
pub fn central_difference_gradient(p: &MlpParams, batch: &[LabeledSample], h: f64) -> [Vec<f64>; 6] {
    let acts: Vec<Activations> = batch.iter().map(|s| oracle_activations(p, &s.state)).collect();
    let resid: Vec<[f64; 2]> = acts
        .iter()
        .zip(batch)
        .map(|(a, s)| [a.out[0] - s.control.u1, a.out[1] - s.control.u2])
        .collect();
    let inputs: Vec<[f64; 4]> = batch.iter().map(|s| s.state.to_array()).collect();
    let scale = 1.0 / (2.0 * batch.len() as f64) / (2.0 * h);

    // Loss difference from per-sample output shifts (d+, d-).
    let diff = |shifts: &dyn Fn(usize) -> ([f64; 2], [f64; 2])| -> f64 {
        let mut total = 0.0;
        for b in 0..batch.len() {
            let (dp, dm) = shifts(b);
            for k in 0..OUTPUTS {
                total += (dp[k] - dm[k]) * (2.0 * resid[b][k] + dp[k] + dm[k]);
            }
        }
        total * scale
    };

    // Output shifts when hidden-2 unit i moves from z2 to z2 + delta.
    let h2_unit_shift = |b: usize, i: usize, delta: f64| -> [f64; 2] {
        let a = &acts[b];
        let dh = (a.z2[i] + delta).tanh() - a.h2[i];
        [p.w3[[0, i]] * dh, p.w3[[1, i]] * dh]
    };

    // Output shifts when hidden-1 unit i moves from z1 to z1 + delta.
    let h1_unit_shift = |b: usize, i: usize, delta: f64| -> [f64; 2] {
        let a = &acts[b];
        let dh1 = (a.z1[i] + delta).tanh() - a.h1[i];
        let mut out = [0.0; 2];
        for m in 0..HIDDEN {
            let dh2 = (a.z2[m] + p.w2[[m, i]] * dh1).tanh() - a.h2[m];
            out[0] += p.w3[[0, m]] * dh2;
            out[1] += p.w3[[1, m]] * dh2;
        }
        out
    };

    let mut gw1 = vec![0.0; HIDDEN * INPUTS];
    let mut gb1 = vec![0.0; HIDDEN];
    for i in 0..HIDDEN {
        for j in 0..INPUTS {
            gw1[i * INPUTS + j] =
                diff(&|b| (h1_unit_shift(b, i, h * inputs[b][j]), h1_unit_shift(b, i, -h * inputs[b][j])));
        }
        gb1[i] = diff(&|b| (h1_unit_shift(b, i, h), h1_unit_shift(b, i, -h)));
    }

    let mut gw2 = vec![0.0; HIDDEN * HIDDEN];
    let mut gb2 = vec![0.0; HIDDEN];
    for i in 0..HIDDEN {
        for j in 0..HIDDEN {
            gw2[i * HIDDEN + j] =
                diff(&|b| (h2_unit_shift(b, i, h * acts[b].h1[j]), h2_unit_shift(b, i, -h * acts[b].h1[j])));
        }
        gb2[i] = diff(&|b| (h2_unit_shift(b, i, h), h2_unit_shift(b, i, -h)));
    }

    let mut gw3 = vec![0.0; OUTPUTS * HIDDEN];
    let mut gb3 = vec![0.0; OUTPUTS];
    for k in 0..OUTPUTS {
        let unit = |v: f64| if k == 0 { [v, 0.0] } else { [0.0, v] };
        for j in 0..HIDDEN {
            gw3[k * HIDDEN + j] = diff(&|b| (unit(h * acts[b].h2[j]), unit(-h * acts[b].h2[j])));
        }
        gb3[k] = diff(&|_| (unit(h), unit(-h)));
    }

    [gw1, gb1, gw2, gb2, gw3, gb3]
}

/// Denominator floor for relative errors on near-zero gradient coordinates.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Largest per-coordinate relative error between backprop and central
/// differences, with the tensor and flat index where it occurs.
pub fn gradient_check(p: &MlpParams, batch: &[LabeledSample], h: f64) -> (f64, usize, usize) {
    let (_, grads) = mpcnn::nn::loss_and_gradients(p, batch);
    let fd = central_difference_gradient(p, batch, h);
    let mut worst = (0.0, 0, 0);
    for (t, (analytic, numeric)) in grads.tensors().iter().zip(fd.iter()).enumerate() {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let e = relative_error(*a, *n);
            if !(e <= worst.0) {
                worst = (e, t, i);
            }
        }
    }
    worst
}
