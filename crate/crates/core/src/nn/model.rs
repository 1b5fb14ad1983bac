//! The two desk-scale architectures and the container that runs them.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::attention::{PatchEmbed, TransformerBlock};
use super::layers::{Conv2d, Flatten, Layer, LayerNorm, Linear, MaxPool2, MeanPool, Param, Relu, Softmax};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub transformer_layers: usize,
    pub mlp_hidden: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 72,
            patch_size: 3,
            embed_dim: 64,
            num_heads: 4,
            transformer_layers: 8,
            mlp_hidden: 128,
        }
    }
}

impl ViTConfig {
    /// `(image_size / patch_size)²`
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.transformer_layers == 0 || self.mlp_hidden == 0 {
            return Err(Error::invalid("transformer needs at least one layer and a non-empty MLP"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    MiniCnn { num_classes: usize, input_size: usize },
    ToyVit { num_classes: usize, config: ViTConfig },
}

impl Architecture {
    pub fn num_classes(&self) -> usize {
        match *self {
            Architecture::MiniCnn { num_classes, .. } | Architecture::ToyVit { num_classes, .. } => {
                num_classes
            }
        }
    }

    /// Per-sample input shape `[channels, height, width]`.
    pub fn input_shape(&self) -> [usize; 3] {
        match *self {
            Architecture::MiniCnn { input_size, .. } => [1, input_size, input_size],
            Architecture::ToyVit { config, .. } => [1, config.image_size, config.image_size],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::MiniCnn { .. } => "mini_cnn",
            Architecture::ToyVit { .. } => "toy_vit",
        }
    }

    /// Parses the identifier written by `Display`, e.g.
    /// `mini_cnn/classes=4/input=224`.
    pub fn parse(id: &str) -> Result<Self> {
        let mut parts = id.split('/');
        let kind = parts.next().unwrap_or_default();
        let mut fields = std::collections::BTreeMap::new();
        for part in parts {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::CheckpointFormat(format!("bad architecture field {part:?}")))?;
            let v: usize = v
                .parse()
                .map_err(|_| Error::CheckpointFormat(format!("bad architecture value {part:?}")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::CheckpointFormat(format!("architecture id {id:?} lacks {k}")))
        };
        match kind {
            "mini_cnn" => Ok(Architecture::MiniCnn {
                num_classes: get("classes")?,
                input_size: get("input")?,
            }),
            "toy_vit" => Ok(Architecture::ToyVit {
                num_classes: get("classes")?,
                config: ViTConfig {
                    image_size: get("image")?,
                    patch_size: get("patch")?,
                    embed_dim: get("dim")?,
                    num_heads: get("heads")?,
                    transformer_layers: get("layers")?,
                    mlp_hidden: get("mlp")?,
                },
            }),
            other => Err(Error::CheckpointFormat(format!("unknown architecture {other:?}"))),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::MiniCnn {
                num_classes,
                input_size,
            } => write!(f, "mini_cnn/classes={num_classes}/input={input_size}"),
            Architecture::ToyVit { num_classes, config } => write!(
                f,
                "toy_vit/classes={num_classes}/image={}/patch={}/dim={}/heads={}/layers={}/mlp={}",
                config.image_size,
                config.patch_size,
                config.embed_dim,
                config.num_heads,
                config.transformer_layers,
                config.mlp_hidden
            ),
        }
    }
}

/// An ordered stack of layers ending in a softmax.
pub struct Model {
    arch: Architecture,
    layers: Vec<Box<dyn Layer>>,
    grads_ready: bool,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("arch", &self.arch.to_string())
            .field("layers", &self.layers.iter().map(|l| l.kind()).collect::<Vec<_>>())
            .finish()
    }
}

/// Per-sample activation shapes of the MiniCNN, input first.
///
/// For a 224×224 input: `[1,224,224] → [8,224,224] → [8,112,112] →
/// [16,112,112] → [16,56,56] → [50176] → [64] → [classes]`.
pub fn mini_cnn_shapes(input_size: usize, num_classes: usize) -> Vec<Vec<usize>> {
    let (s, h, q) = (input_size, input_size / 2, input_size / 4);
    vec![
        vec![1, s, s],
        vec![8, s, s],
        vec![8, h, h],
        vec![16, h, h],
        vec![16, q, q],
        vec![16 * q * q],
        vec![64],
        vec![num_classes],
    ]
}

/// conv(8, 3×3) → relu → pool → conv(16, 3×3) → relu → pool → dense(64) →
/// relu → dense(classes) → softmax. Convolutions use stride 1, padding 1.
pub fn build_mini_cnn(num_classes: usize, input_size: usize, seed: u64) -> Result<Model> {
    if num_classes == 0 {
        return Err(Error::invalid("model needs at least one class"));
    }
    if input_size < 4 {
        return Err(Error::invalid(format!("MiniCNN input must be at least 4x4, got {input_size}")));
    }
    let flat = mini_cnn_shapes(input_size, num_classes)[5][0];
    let mut conv1 = Conv2d::new("conv1", 1, 8, 3, 1, 1);
    conv1.input_grad = false;
    let layers: Vec<Box<dyn Layer>> = vec![
        Box::new(conv1),
        Box::new(Relu::default()),
        Box::new(MaxPool2::default()),
        Box::new(Conv2d::new("conv2", 8, 16, 3, 1, 1)),
        Box::new(Relu::default()),
        Box::new(MaxPool2::default()),
        Box::new(Flatten::default()),
        Box::new(Linear::new("fc1", flat, 64)),
        Box::new(Relu::default()),
        Box::new(Linear::new("fc2", 64, num_classes)),
        Box::new(Softmax::default()),
    ];
    let mut model = Model {
        arch: Architecture::MiniCnn {
            num_classes,
            input_size,
        },
        layers,
        grads_ready: false,
    };
    model.initialize(seed);
    Ok(model)
}

/// patch embedding + positions → pre-norm transformer blocks → layer norm →
/// token mean → dense(classes) → softmax.
pub fn build_toy_vit(config: &ViTConfig, num_classes: usize, seed: u64) -> Result<Model> {
    config.validate()?;
    if num_classes == 0 {
        return Err(Error::invalid("model needs at least one class"));
    }
    let mut layers: Vec<Box<dyn Layer>> = vec![Box::new(PatchEmbed::new(
        "patch_embed",
        config.image_size,
        config.patch_size,
        1,
        config.embed_dim,
    )?)];
    for i in 0..config.transformer_layers {
        layers.push(Box::new(TransformerBlock::new(
            &format!("blocks.{i}"),
            config.embed_dim,
            config.num_heads,
            config.mlp_hidden,
        )?));
    }
    layers.push(Box::new(LayerNorm::new("norm", config.embed_dim)));
    layers.push(Box::new(MeanPool::default()));
    layers.push(Box::new(Linear::new("head", config.embed_dim, num_classes)));
    layers.push(Box::new(Softmax::default()));
    let mut model = Model {
        arch: Architecture::ToyVit {
            num_classes,
            config: *config,
        },
        layers,
        grads_ready: false,
    };
    model.initialize(seed);
    Ok(model)
}

/// Builds an architecture with zero parameters; used when loading weights.
pub fn build(arch: &Architecture, seed: u64) -> Result<Model> {
    match *arch {
        Architecture::MiniCnn {
            num_classes,
            input_size,
        } => build_mini_cnn(num_classes, input_size, seed),
        Architecture::ToyVit { num_classes, config } => build_toy_vit(&config, num_classes, seed),
    }
}

impl Model {
    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input_shape()
    }

    pub fn layers(&self) -> &[Box<dyn Layer>] {
        &self.layers
    }

    /// Multiplier on the He-uniform bound. In the transformer, projections
    /// that write into the residual stream are shrunk by `1/sqrt(2·layers)`
    /// and the classifier head by 10, so the untrained network starts close
    /// to the identity and to uniform predictions.
    fn init_gain(&self, name: &str) -> f64 {
        match self.arch {
            Architecture::ToyVit { config, .. } => {
                if name.ends_with(".attn.proj.weight") || name.ends_with(".mlp.fc2.weight") {
                    1.0 / (2.0 * config.transformer_layers as f64).sqrt()
                } else if name == "head.weight" {
                    0.1
                } else {
                    1.0
                }
            }
            Architecture::MiniCnn { .. } => 1.0,
        }
    }

    /// He-uniform weights (`U(±gain·sqrt(6 / fan_in))`), zero biases apart
    /// from the patch embedding's, unit norm scales, position embeddings
    /// `U(±0.02)`. Parameter `i` (in [`Model::params`] order) draws from
    /// `Stream::new(seed).split(i)`.
    pub fn initialize(&mut self, seed: u64) {
        let root = Stream::new(seed);
        let gains: Vec<f64> = self.params().iter().map(|p| self.init_gain(&p.name)).collect();
        for (i, p) in self.params_mut().into_iter().enumerate() {
            let mut rng = root.split(i as u64);
            let shape = p.value.shape().to_vec();
            let name = p.name.as_str();
            let data = p.value.data_mut();
            if name.ends_with(".weight") {
                let fan_in = match shape.len() {
                    4 => shape[1] * shape[2] * shape[3],
                    _ => shape[0],
                };
                let bound = gains[i] * (6.0 / fan_in as f64).sqrt();
                data.iter_mut().for_each(|v| *v = rng.uniform(-bound, bound));
            } else if name.ends_with(".pos") {
                data.iter_mut().for_each(|v| *v = rng.uniform(-0.02, 0.02));
            } else if name.ends_with(".gamma") {
                data.fill(1.0);
            } else {
                data.fill(0.0);
            }
        }
        self.center_patch_embedding();
        self.zero_grad();
    }

    /// Sets the patch-embedding bias to `-0.5·Σ_i W[i][j]`, so a flat
    /// mid-gray patch embeds to zero. Without it every flat patch embeds to
    /// a multiple of one vector and the first (scale-invariant) layer norm
    /// cannot tell dark background from bright foreground.
    fn center_patch_embedding(&mut self) {
        let mut params = self.params_mut();
        let Some(wi) = params.iter().position(|p| p.name == "patch_embed.proj.weight") else {
            return;
        };
        let w = params[wi].value.clone();
        let Some(bias) = params.iter_mut().find(|p| p.name == "patch_embed.proj.bias") else {
            return;
        };
        let out = w.shape()[1];
        let b = bias.value.data_mut();
        b.fill(0.0);
        for row in w.data().chunks_exact(out) {
            for (bj, wj) in b.iter_mut().zip(row) {
                *bj -= 0.5 * wj;
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
        self.grads_ready = false;
    }

    pub(crate) fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        let [c, h, w] = self.input_shape();
        let s = x.shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::shape(format!(
                "{} expects input [B, {c}, {h}, {w}], got {s:?}",
                self.arch.name()
            )));
        }
        Ok(())
    }

    /// Class probabilities for an NCHW batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward_train(&h)?;
        }
        Ok(h)
    }

    /// Back-propagates a gradient with respect to the output probabilities.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        self.grads_ready = true;
        Ok(g)
    }

    /// Back-propagates a gradient with respect to the pre-softmax logits.
    pub fn backward_from_logits(&mut self, grad: &Tensor) -> Result<Tensor> {
        let n = self.layers.len();
        let mut g = grad.clone();
        for layer in self.layers[..n - 1].iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        self.grads_ready = true;
        Ok(g)
    }

    /// Attention weights of every transformer block, each `[B, heads, T, T]`.
    pub fn attention_maps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_batch(x)?;
        let mut maps = Vec::new();
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward_collect(&h, &mut maps)?;
        }
        Ok(maps)
    }

    pub fn batch_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        images_to_tensor(images, self.input_shape())
    }

    pub fn predict(&self, img: &Image) -> Result<Vec<f64>> {
        Ok(self.forward(&self.batch_tensor(&[img])?)?.into_data())
    }

    /// Probability rows for many images, evaluated `chunk` at a time.
    pub fn predict_many(&self, images: &[&Image], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let c = self.num_classes();
        let mut out = Vec::with_capacity(images.len());
        for group in images.chunks(chunk.max(1)) {
            let probs = self.forward(&self.batch_tensor(group)?)?;
            out.extend(probs.data().chunks_exact(c).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

/// Stacks images into `[B, C, H, W]`, checking each against `shape`.
pub fn images_to_tensor(images: &[&Image], shape: [usize; 3]) -> Result<Tensor> {
    let [c, h, w] = shape;
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.channels() != c || img.height() != h || img.width() != w {
            return Err(Error::shape(format!(
                "image {}x{}x{} does not match model input {h}x{w}x{c}",
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        if c == 1 {
            data.extend_from_slice(img.data());
        } else {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(img.get(y, x, ch));
                    }
                }
            }
        }
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}
