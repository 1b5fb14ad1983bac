//! Random gradient-check instances, one generator per layer type. Each
//! returns the worst relative error of its instance.

use super::*;
use neuroscan::nn::attention::{MultiHeadAttention, PatchEmbed, TransformerBlock};
use neuroscan::nn::layers::*;
use neuroscan::nn::{build_toy_vit, ViTConfig};

pub type Case = fn(&mut Stream) -> f64;

pub const INSTANCES: u64 = 20;

pub const ALL: &[(&str, Case)] = &[
    ("conv", conv),
    ("dense", dense),
    ("relu", relu),
    ("gelu", gelu),
    ("maxpool", maxpool),
    ("layernorm", layernorm),
    ("softmax", softmax),
    ("softmax+cross-entropy", softmax_cross_entropy),
    ("attention", attention),
    ("patch embedding", patch_embedding),
    ("transformer block", transformer_block),
    ("mean pool", mean_pool),
    ("flatten", flatten),
    ("toy vit (2 blocks, dim 8)", reduced_toy_vit),
];

/// Worst error over the standard set of instances of one case.
pub fn worst_over_instances(case: Case) -> f64 {
    (0..INSTANCES)
        .map(|i| case(&mut Stream::new(0x6772_6164).split(i)))
        .fold(0.0, f64::max)
}

fn dim(rng: &mut Stream, lo: usize, span: u64) -> usize {
    lo + rng.below(span) as usize
}

pub fn conv(rng: &mut Stream) -> f64 {
    let stride = dim(rng, 1, 2);
    let pad = dim(rng, 0, 2);
    let (c, o, h, w) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 4, 3), dim(rng, 4, 3));
    let mut layer = Conv2d::new("c", c, o, 3, stride, pad);
    randomize(&mut layer, rng);
    let x = random_tensor(&[2, c, h, w], rng, -1.0, 1.0);
    check_layer(&mut layer, &x, rng)
}

pub fn dense(rng: &mut Stream) -> f64 {
    let (i, o) = (dim(rng, 1, 6), dim(rng, 1, 6));
    let mut layer = Linear::new("l", i, o);
    randomize(&mut layer, rng);
    let x = random_tensor(&[3, i], rng, -1.0, 1.0);
    check_layer(&mut layer, &x, rng)
}

pub fn relu(rng: &mut Stream) -> f64 {
    let x = away_from_zero(&[3, 7], rng);
    check_layer(&mut Relu::default(), &x, rng)
}

pub fn gelu(rng: &mut Stream) -> f64 {
    let x = random_tensor(&[3, 7], rng, -3.0, 3.0);
    check_layer(&mut Gelu::default(), &x, rng)
}

/// Every value distinct and at least 0.01 from every other, so no window
/// has a near-tie.
fn untied(rng: &mut Stream, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut levels: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    rng.shuffle(&mut levels);
    Tensor::new(shape.to_vec(), levels).unwrap()
}

pub fn maxpool(rng: &mut Stream) -> f64 {
    let h = 2 * dim(rng, 1, 3) + dim(rng, 0, 2);
    let x = untied(rng, &[2, 2, h, 6]);
    check_layer(&mut MaxPool2::default(), &x, rng)
}

pub fn layernorm(rng: &mut Stream) -> f64 {
    let d = dim(rng, 2, 6);
    let mut layer = LayerNorm::new("n", d);
    randomize(&mut layer, rng);
    let x = random_tensor(&[2, 3, d], rng, -2.0, 2.0);
    check_layer(&mut layer, &x, rng)
}

pub fn softmax(rng: &mut Stream) -> f64 {
    let x = random_tensor(&[3, 5], rng, -3.0, 3.0);
    check_layer(&mut Softmax::default(), &x, rng)
}

/// The fused `(p - t) / B` gradient against differences of the composed loss.
pub fn softmax_cross_entropy(rng: &mut Stream) -> f64 {
    let (b, c) = (dim(rng, 1, 4), dim(rng, 2, 4));
    let z = random_tensor(&[b, c], rng, -3.0, 3.0);
    let mut t = vec![0.0; b * c];
    for row in 0..b {
        t[row * c + rng.below(c as u64) as usize] = 1.0;
    }
    let t = Tensor::new(vec![b, c], t).unwrap();
    let loss = |z: &Tensor| cross_entropy(&softmax_rows(z), &t).unwrap();
    let g = softmax_cross_entropy_grad(&softmax_rows(&z), &t).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..z.len() {
        let mut zp = z.clone();
        zp.data_mut()[i] += FD_EPS;
        let mut zm = z.clone();
        zm.data_mut()[i] -= FD_EPS;
        let num = (loss(&zp) - loss(&zm)) / (2.0 * FD_EPS);
        worst = worst.max(rel_err(g.data()[i], num));
    }
    worst
}

/// The key bias has an exactly zero gradient (it shifts every logit of a
/// query equally), so its difference quotient is pure roundoff. That entry
/// sets the worst case here and in [`transformer_block`].
pub fn attention(rng: &mut Stream) -> f64 {
    let heads = dim(rng, 1, 2);
    let t = dim(rng, 1, 4);
    let mut layer = MultiHeadAttention::new("a", 4 * heads, heads).unwrap();
    randomize(&mut layer, rng);
    let x = random_tensor(&[2, t, 4 * heads], rng, -1.0, 1.0);
    check_layer(&mut layer, &x, rng)
}

pub fn patch_embedding(rng: &mut Stream) -> f64 {
    let patch = dim(rng, 2, 2);
    let side = patch * dim(rng, 1, 2);
    let mut layer = PatchEmbed::new("p", side, patch, 1, 4).unwrap();
    randomize(&mut layer, rng);
    let x = random_tensor(&[2, 1, side, side], rng, 0.0, 1.0);
    check_layer(&mut layer, &x, rng)
}

pub fn transformer_block(rng: &mut Stream) -> f64 {
    let mut layer = TransformerBlock::new("b", 8, 2, 16).unwrap();
    randomize(&mut layer, rng);
    let x = random_tensor(&[2, 3, 8], rng, -1.0, 1.0);
    check_layer(&mut layer, &x, rng)
}

pub fn mean_pool(rng: &mut Stream) -> f64 {
    let x = random_tensor(&[2, 3, 4], rng, -1.0, 1.0);
    check_layer(&mut MeanPool::default(), &x, rng)
}

pub fn flatten(rng: &mut Stream) -> f64 {
    let x = random_tensor(&[2, 2, 3], rng, -1.0, 1.0);
    check_layer(&mut Flatten::default(), &x, rng)
}

/// Two blocks, embedding width 8, end to end through the softmax.
pub fn reduced_toy_vit(rng: &mut Stream) -> f64 {
    let config = ViTConfig {
        image_size: 6,
        patch_size: 3,
        embed_dim: 8,
        num_heads: 2,
        transformer_layers: 2,
        mlp_hidden: 16,
    };
    let mut model = build_toy_vit(&config, 3, rng.next_u64()).unwrap();
    let x = random_tensor(&[2, 1, 6, 6], rng, 0.0, 1.0);
    check_model(&mut model, &x, rng)
}
