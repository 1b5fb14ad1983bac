//! Oracles shared by the integration tests.

#![allow(dead_code)]

pub mod cases;
pub mod pipeline;
pub mod suites;

use neuroscan::nn::{Layer, Model, Tensor};
use neuroscan::rng::Stream;

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-6)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn random_tensor(shape: &[usize], rng: &mut Stream, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Values bounded away from zero, for inputs that pass through a ReLU.
pub fn away_from_zero(shape: &[usize], rng: &mut Stream) -> Tensor {
    let mut t = random_tensor(shape, rng, 0.05, 1.0);
    for v in t.data_mut() {
        if rng.next_f64() < 0.5 {
            *v = -*v;
        }
    }
    t
}

fn weighted_sum(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Worst relative error between the layer's backward pass and central
/// differences of `Σ r ⊙ layer(x)`, over every input and parameter entry.
pub fn check_layer(layer: &mut dyn Layer, x: &Tensor, rng: &mut Stream) -> f64 {
    let y = layer.forward(x).unwrap();
    let r = random_tensor(y.shape(), rng, -1.0, 1.0);
    for p in layer.params_mut() {
        p.grad.fill(0.0);
    }
    layer.forward_train(x).unwrap();
    let dx = layer.backward(&r).unwrap();
    let pgrads: Vec<Vec<f64>> = layer.params().iter().map(|p| p.grad.data().to_vec()).collect();

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_EPS;
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_EPS;
        let num = (weighted_sum(&layer.forward(&xp).unwrap(), &r)
            - weighted_sum(&layer.forward(&xm).unwrap(), &r))
            / (2.0 * FD_EPS);
        worst = worst.max(rel_err(dx.data()[i], num));
    }
    for (pi, grad) in pgrads.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = layer.params()[pi].value.data()[j];
            layer.params_mut()[pi].value.data_mut()[j] = orig + FD_EPS;
            let fp = weighted_sum(&layer.forward(x).unwrap(), &r);
            layer.params_mut()[pi].value.data_mut()[j] = orig - FD_EPS;
            let fm = weighted_sum(&layer.forward(x).unwrap(), &r);
            layer.params_mut()[pi].value.data_mut()[j] = orig;
            worst = worst.max(rel_err(grad[j], (fp - fm) / (2.0 * FD_EPS)));
        }
    }
    worst
}

/// Same check for a whole model, through its softmax output.
pub fn check_model(model: &mut Model, x: &Tensor, rng: &mut Stream) -> f64 {
    let y = model.forward(x).unwrap();
    let r = random_tensor(y.shape(), rng, -1.0, 1.0);
    model.zero_grad();
    model.forward_train(x).unwrap();
    let dx = model.backward(&r).unwrap();
    let pgrads: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.data().to_vec()).collect();

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_EPS;
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_EPS;
        let num = (weighted_sum(&model.forward(&xp).unwrap(), &r)
            - weighted_sum(&model.forward(&xm).unwrap(), &r))
            / (2.0 * FD_EPS);
        worst = worst.max(rel_err(dx.data()[i], num));
    }
    for (pi, grad) in pgrads.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = model.params()[pi].value.data()[j];
            model.params_mut()[pi].value.data_mut()[j] = orig + FD_EPS;
            let fp = weighted_sum(&model.forward(x).unwrap(), &r);
            model.params_mut()[pi].value.data_mut()[j] = orig - FD_EPS;
            let fm = weighted_sum(&model.forward(x).unwrap(), &r);
            model.params_mut()[pi].value.data_mut()[j] = orig;
            worst = worst.max(rel_err(grad[j], (fp - fm) / (2.0 * FD_EPS)));
        }
    }
    worst
}

/// Gives every parameter of a layer random values in `[-0.5, 0.5)`.
pub fn randomize(layer: &mut dyn Layer, rng: &mut Stream) {
    for p in layer.params_mut() {
        for v in p.value.data_mut() {
            *v = rng.uniform(-0.5, 0.5);
        }
    }
}

/// Direct six-loop cross-correlation.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oi * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}
