//! Vision-transformer pieces: patch extraction and embedding, multi-head
//! self-attention and the pre-norm transformer block.

use rayon::prelude::*;

use super::layers::{softmax_backward_rows, softmax_in_place, Gelu, Layer, LayerNorm, Linear, Param};
use super::tensor::{matmul, matmul_acc, matmul_nt, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};
use crate::imaging::Image;

/// Non-overlapping `patch × patch` tiles in row-major grid order, each
/// flattened row-major (channels innermost). Returns `[num_patches, patch²·C]`.
pub fn patchify(img: &Image, patch: usize) -> Result<Tensor> {
    if patch == 0 || img.height() % patch != 0 || img.width() % patch != 0 {
        return Err(Error::invalid(format!(
            "{}x{} image is not divisible into {patch}x{patch} patches",
            img.height(),
            img.width()
        )));
    }
    let (gh, gw, c) = (img.height() / patch, img.width() / patch, img.channels());
    let mut out = Vec::with_capacity(img.data().len());
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                for x in 0..patch {
                    for ch in 0..c {
                        out.push(img.get(py * patch + y, px * patch + x, ch));
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, patch * patch * c], out)
}

/// Maps between an NCHW batch and `[B, T, patch²·C]` patch rows.
#[derive(Debug, Clone, Copy)]
struct PatchGrid {
    patch: usize,
    channels: usize,
    height: usize,
    width: usize,
}

impl PatchGrid {
    fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Calls `f(patch_row_offset, pixel_offset)` for every pixel of one sample.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (p, c, h, w) = (self.patch, self.channels, self.height, self.width);
        let gw = w / p;
        for t in 0..self.tokens() {
            let (py, px) = (t / gw, t % gw);
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        let dst = t * self.patch_len() + (y * p + x) * c + ch;
                        let src = (ch * h + py * p + y) * w + px * p + x;
                        f(dst, src);
                    }
                }
            }
        }
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels || s[2] != self.height || s[3] != self.width {
            return Err(Error::shape(format!(
                "patch embedding expects [B, {}, {}, {}], got {s:?}",
                self.channels, self.height, self.width
            )));
        }
        Ok(s[0])
    }

    fn gather(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.check(x)?;
        let per = self.channels * self.height * self.width;
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            let (src, dst) = (&x.data()[bi * per..][..per], &mut out[bi * per..][..per]);
            self.for_each(|d, s| dst[d] = src[s]);
        }
        Tensor::new(vec![b, self.tokens(), self.patch_len()], out)
    }

    fn scatter(&self, rows: &Tensor, b: usize) -> Result<Tensor> {
        let per = self.channels * self.height * self.width;
        let mut out = vec![0.0; rows.len()];
        for bi in 0..b {
            let (src, dst) = (&rows.data()[bi * per..][..per], &mut out[bi * per..][..per]);
            self.for_each(|d, s| dst[s] = src[d]);
        }
        Tensor::new(vec![b, self.channels, self.height, self.width], out)
    }
}

/// Patchify, project each patch linearly, add a learned position embedding.
pub struct PatchEmbed {
    grid: PatchGrid,
    proj: Linear,
    pos: Param,
    batch: Option<usize>,
}

impl PatchEmbed {
    pub fn new(prefix: &str, image_size: usize, patch: usize, channels: usize, dim: usize) -> Result<Self> {
        if patch == 0 || image_size % patch != 0 {
            return Err(Error::invalid(format!(
                "image size {image_size} is not divisible by patch size {patch}"
            )));
        }
        let grid = PatchGrid {
            patch,
            channels,
            height: image_size,
            width: image_size,
        };
        Ok(PatchEmbed {
            proj: Linear::new(&format!("{prefix}.proj"), grid.patch_len(), dim),
            pos: Param::new(format!("{prefix}.pos"), Tensor::zeros(&[grid.tokens(), dim])),
            grid,
            batch: None,
        })
    }

    pub fn tokens(&self) -> usize {
        self.grid.tokens()
    }

    fn add_pos(&self, mut y: Tensor) -> Tensor {
        let pos = self.pos.value.data();
        for chunk in y.data_mut().chunks_exact_mut(pos.len()) {
            for (v, p) in chunk.iter_mut().zip(pos) {
                *v += p;
            }
        }
        y
    }
}

impl Layer for PatchEmbed {
    fn kind(&self) -> &'static str {
        "patch_embed"
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let patches = self.grid.gather(x)?;
        Ok(self.add_pos(self.proj.forward(&patches)?))
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let patches = self.grid.gather(x)?;
        self.batch = Some(x.shape()[0]);
        let y = self.proj.forward_train(&patches)?;
        Ok(self.add_pos(y))
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let b = self
            .batch
            .ok_or_else(|| Error::State("patch_embed: backward before forward".into()))?;
        let per = self.pos.value.len();
        if grad.len() != b * per {
            return Err(Error::shape(format!("patch_embed upstream gradient {:?}", grad.shape())));
        }
        let dpos = self.pos.grad.data_mut();
        for chunk in grad.data().chunks_exact(per) {
            for (d, g) in dpos.iter_mut().zip(chunk) {
                *d += g;
            }
        }
        let drows = self.proj.backward(grad)?;
        self.grid.scatter(&drows, b)
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.proj.params();
        p.push(&self.pos);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.proj.params_mut();
        p.push(&mut self.pos);
        p
    }
}

/// Multi-head scaled dot-product self-attention over `[B, T, D]`.
pub struct MultiHeadAttention {
    heads: usize,
    dim: usize,
    qkv: Linear,
    proj: Linear,
    /// Output of the fused QKV projection, kept for backward.
    cache: Option<Tensor>,
}

/// Per (batch, head): `(q, k, v)` as `T × dh` blocks.
type HeadBlocks = (Vec<f64>, Vec<f64>, Vec<f64>);

impl MultiHeadAttention {
    pub fn new(prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!(
                "embedding width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            heads,
            dim,
            qkv: Linear::new(&format!("{prefix}.qkv"), dim, 3 * dim),
            proj: Linear::new(&format!("{prefix}.proj"), dim, dim),
            cache: None,
        })
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    fn split_heads(&self, qkv: &Tensor, b: usize, t: usize, bh: usize) -> HeadBlocks {
        let (d, dh) = (self.dim, self.head_dim());
        let (bi, h) = (bh / self.heads, bh % self.heads);
        let mut q = vec![0.0; t * dh];
        let mut k = vec![0.0; t * dh];
        let mut v = vec![0.0; t * dh];
        debug_assert!(bi < b);
        for ti in 0..t {
            let row = &qkv.data()[(bi * t + ti) * 3 * d..][..3 * d];
            q[ti * dh..(ti + 1) * dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
            k[ti * dh..(ti + 1) * dh].copy_from_slice(&row[d + h * dh..d + (h + 1) * dh]);
            v[ti * dh..(ti + 1) * dh].copy_from_slice(&row[2 * d + h * dh..2 * d + (h + 1) * dh]);
        }
        (q, k, v)
    }

    /// Row-stochastic `T × T` attention weights.
    fn probabilities(&self, q: &[f64], k: &[f64], t: usize) -> Vec<f64> {
        let dh = self.head_dim();
        let mut s = matmul_nt(q, k, t, dh, t);
        let scale = self.scale();
        for row in s.chunks_exact_mut(t) {
            row.iter_mut().for_each(|v| *v *= scale);
            softmax_in_place(row);
        }
        s
    }

    fn dims(&self, x: &Tensor) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::shape(format!(
                "attention expects [B, T, {}], got {s:?}",
                self.dim
            )));
        }
        Ok((s[0], s[1]))
    }

    /// Attention output before the output projection, plus the maps if asked.
    fn attend(&self, qkv: &Tensor, b: usize, t: usize, keep_maps: bool) -> (Tensor, Vec<Vec<f64>>) {
        let (d, dh) = (self.dim, self.head_dim());
        let results: Vec<(Vec<f64>, Option<Vec<f64>>)> = (0..b * self.heads)
            .into_par_iter()
            .map(|bh| {
                let (q, k, v) = self.split_heads(qkv, b, t, bh);
                let p = self.probabilities(&q, &k, t);
                let o = matmul(&p, &v, t, t, dh);
                (o, keep_maps.then_some(p))
            })
            .collect();
        let mut concat = vec![0.0; b * t * d];
        let mut maps = Vec::new();
        for (bh, (o, p)) in results.into_iter().enumerate() {
            let (bi, h) = (bh / self.heads, bh % self.heads);
            for ti in 0..t {
                concat[(bi * t + ti) * d + h * dh..][..dh].copy_from_slice(&o[ti * dh..(ti + 1) * dh]);
            }
            maps.extend(p);
        }
        (Tensor::new(vec![b, t, d], concat).expect("sized"), maps)
    }
}

impl Layer for MultiHeadAttention {
    fn kind(&self) -> &'static str {
        "attention"
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t) = self.dims(x)?;
        let qkv = self.qkv.forward(x)?;
        let (concat, _) = self.attend(&qkv, b, t, false);
        self.proj.forward(&concat)
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let (b, t) = self.dims(x)?;
        let qkv = self.qkv.forward_train(x)?;
        let (concat, _) = self.attend(&qkv, b, t, false);
        self.cache = Some(qkv);
        self.proj.forward_train(&concat)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let qkv = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("attention: backward before forward".into()))?;
        let (b, t) = (qkv.shape()[0], qkv.shape()[1]);
        let (d, dh, heads) = (self.dim, self.head_dim(), self.heads);
        let scale = self.scale();
        let dconcat = self.proj.backward(grad)?;

        let blocks: Vec<HeadBlocks> = (0..b * heads)
            .into_par_iter()
            .map(|bh| {
                let (bi, h) = (bh / heads, bh % heads);
                let (q, k, v) = self.split_heads(qkv, b, t, bh);
                let mut dout = vec![0.0; t * dh];
                for ti in 0..t {
                    dout[ti * dh..(ti + 1) * dh]
                        .copy_from_slice(&dconcat.data()[(bi * t + ti) * d + h * dh..][..dh]);
                }
                let p = self.probabilities(&q, &k, t);
                let mut dv = vec![0.0; t * dh];
                matmul_tn_acc(&p, &dout, t, t, dh, &mut dv);
                let dp = matmul_nt(&dout, &v, t, dh, t);
                let mut ds = softmax_backward_rows(&p, &dp, t);
                ds.iter_mut().for_each(|g| *g *= scale);
                let mut dq = vec![0.0; t * dh];
                matmul_acc(&ds, &k, t, t, dh, &mut dq);
                let mut dk = vec![0.0; t * dh];
                matmul_tn_acc(&ds, &q, t, t, dh, &mut dk);
                (dq, dk, dv)
            })
            .collect();

        let mut dqkv = vec![0.0; b * t * 3 * d];
        for (bh, (dq, dk, dv)) in blocks.into_iter().enumerate() {
            let (bi, h) = (bh / heads, bh % heads);
            for ti in 0..t {
                let row = &mut dqkv[(bi * t + ti) * 3 * d..][..3 * d];
                row[h * dh..(h + 1) * dh].copy_from_slice(&dq[ti * dh..(ti + 1) * dh]);
                row[d + h * dh..d + (h + 1) * dh].copy_from_slice(&dk[ti * dh..(ti + 1) * dh]);
                row[2 * d + h * dh..2 * d + (h + 1) * dh].copy_from_slice(&dv[ti * dh..(ti + 1) * dh]);
            }
        }
        self.qkv.backward(&Tensor::new(vec![b, t, 3 * d], dqkv)?)
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.qkv.params();
        p.extend(self.proj.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.qkv.params_mut();
        p.extend(self.proj.params_mut());
        p
    }

    /// Pushes one `[B, heads, T, T]` tensor of attention weights.
    fn forward_collect(&self, x: &Tensor, maps: &mut Vec<Tensor>) -> Result<Tensor> {
        let (b, t) = self.dims(x)?;
        let qkv = self.qkv.forward(x)?;
        let (concat, probs) = self.attend(&qkv, b, t, true);
        maps.push(Tensor::new(vec![b, self.heads, t, t], probs.concat())?);
        self.proj.forward(&concat)
    }
}

/// `x + attn(ln1(x))`, then `h + mlp(ln2(h))` with a GELU MLP.
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    fc1: Linear,
    act: Gelu,
    fc2: Linear,
}

impl TransformerBlock {
    pub fn new(prefix: &str, dim: usize, heads: usize, mlp_hidden: usize) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(&format!("{prefix}.ln1"), dim),
            attn: MultiHeadAttention::new(&format!("{prefix}.attn"), dim, heads)?,
            ln2: LayerNorm::new(&format!("{prefix}.ln2"), dim),
            fc1: Linear::new(&format!("{prefix}.mlp.fc1"), dim, mlp_hidden),
            act: Gelu::default(),
            fc2: Linear::new(&format!("{prefix}.mlp.fc2"), mlp_hidden, dim),
        })
    }

    fn run(&self, x: &Tensor, maps: Option<&mut Vec<Tensor>>) -> Result<Tensor> {
        let normed = self.ln1.forward(x)?;
        let mut h = match maps {
            Some(m) => self.attn.forward_collect(&normed, m)?,
            None => self.attn.forward(&normed)?,
        };
        h.add_assign(x)?;
        let mut out = self
            .fc2
            .forward(&self.act.forward(&self.fc1.forward(&self.ln2.forward(&h)?)?)?)?;
        out.add_assign(&h)?;
        Ok(out)
    }
}

impl Layer for TransformerBlock {
    fn kind(&self) -> &'static str {
        "transformer_block"
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, None)
    }

    fn forward_collect(&self, x: &Tensor, maps: &mut Vec<Tensor>) -> Result<Tensor> {
        self.run(x, Some(maps))
    }

    fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let normed = self.ln1.forward_train(x)?;
        let mut h = self.attn.forward_train(&normed)?;
        h.add_assign(x)?;
        let z = self.ln2.forward_train(&h)?;
        let z = self.fc1.forward_train(&z)?;
        let z = self.act.forward_train(&z)?;
        let mut out = self.fc2.forward_train(&z)?;
        out.add_assign(&h)?;
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = self.fc2.backward(grad)?;
        let g = self.act.backward(&g)?;
        let g = self.fc1.backward(&g)?;
        let mut dh = self.ln2.backward(&g)?;
        dh.add_assign(grad)?;
        let g = self.attn.backward(&dh)?;
        let mut dx = self.ln1.backward(&g)?;
        dx.add_assign(&dh)?;
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.ln1.params();
        p.extend(self.attn.params());
        p.extend(self.ln2.params());
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.ln1.params_mut();
        p.extend(self.attn.params_mut());
        p.extend(self.ln2.params_mut());
        p.extend(self.fc1.params_mut());
        p.extend(self.fc2.params_mut());
        p
    }
}
