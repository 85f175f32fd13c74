//! The captioner: a patch-embedding transformer encoder over the image and a
//! text decoder whose blocks run self-attention, then cross-attention into
//! the visual features, then an MLP. Pre-norm throughout, learned absolute
//! positions, no time input.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{AttentionSpec, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::truncated_normal;
use crate::scalar::Scalar;
use crate::vocab::{TokenId, BOS, PAD};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Bidirectional,
    Causal,
}

impl AttentionMode {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Bidirectional => "bidirectional",
            AttentionMode::Causal => "causal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl EncoderConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_height % self.patch != 0 || self.image_width % self.patch != 0 {
            return Err(Error::invalid(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                self.image_height, self.image_width, self.patch
            )));
        }
        check_heads("encoder", self.dim, self.heads)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub vocab: usize,
    pub max_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mode: AttentionMode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub mlp_ratio: usize,
}

fn check_heads(which: &str, dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::invalid(format!("{which}: dim {dim} not divisible by {heads} heads")));
    }
    Ok(())
}

impl ModelConfig {
    /// 32x32 images in 4-pixel patches, width 64, four layers on each side.
    pub fn standard(vocab: usize, mode: AttentionMode) -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                image_height: 32,
                image_width: 32,
                patch: 4,
                dim: 64,
                layers: 4,
                heads: 4,
            },
            decoder: DecoderConfig {
                vocab,
                max_len: 16,
                dim: 64,
                layers: 4,
                heads: 4,
                mode,
            },
            mlp_ratio: 4,
        }
    }

    /// Reduced width and depth for single-core experiment sweeps.
    pub fn compact(vocab: usize, mode: AttentionMode) -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                image_height: 32,
                image_width: 32,
                patch: 8,
                dim: 32,
                layers: 2,
                heads: 2,
            },
            decoder: DecoderConfig {
                vocab,
                max_len: 16,
                dim: 32,
                layers: 2,
                heads: 2,
                mode,
            },
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        check_heads("decoder", self.decoder.dim, self.decoder.heads)?;
        if self.decoder.vocab < 5 || self.decoder.max_len == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("decoder needs a vocabulary beyond the specials and a positive length"));
        }
        Ok(())
    }

    /// Names and shapes of every learnable tensor, in checkpoint order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let e = &self.encoder;
        let d = &self.decoder;
        let mut out = Vec::new();
        let mut push = |n: String, s: &[usize]| out.push((n, s.to_vec()));
        push("enc.patch.w".into(), &[e.patch_dim(), e.dim]);
        push("enc.patch.b".into(), &[e.dim]);
        push("enc.pos".into(), &[e.num_patches(), e.dim]);
        for l in 0..e.layers {
            let p = format!("enc.{l}");
            block_manifest(&mut push, &p, "attn", e.dim, e.dim);
            mlp_manifest(&mut push, &p, e.dim, self.mlp_ratio);
        }
        push("enc.ln_f.g".into(), &[e.dim]);
        push("enc.ln_f.b".into(), &[e.dim]);
        push("dec.tok".into(), &[d.vocab, d.dim]);
        push("dec.pos".into(), &[d.max_len, d.dim]);
        for l in 0..d.layers {
            let p = format!("dec.{l}");
            block_manifest(&mut push, &p, "self", d.dim, d.dim);
            block_manifest(&mut push, &p, "cross", d.dim, e.dim);
            mlp_manifest(&mut push, &p, d.dim, self.mlp_ratio);
        }
        push("dec.ln_f.g".into(), &[d.dim]);
        push("dec.ln_f.b".into(), &[d.dim]);
        push("dec.head.w".into(), &[d.dim, d.vocab]);
        push("dec.head.b".into(), &[d.vocab]);
        out
    }
}

fn block_manifest(push: &mut impl FnMut(String, &[usize]), prefix: &str, kind: &str, dim: usize, kv_dim: usize) {
    push(format!("{prefix}.{kind}.ln.g"), &[dim]);
    push(format!("{prefix}.{kind}.ln.b"), &[dim]);
    for (w, din) in [("q", dim), ("k", kv_dim), ("v", kv_dim), ("o", dim)] {
        push(format!("{prefix}.{kind}.w{w}"), &[din, dim]);
        push(format!("{prefix}.{kind}.b{w}"), &[dim]);
    }
}

fn mlp_manifest(push: &mut impl FnMut(String, &[usize]), prefix: &str, dim: usize, ratio: usize) {
    push(format!("{prefix}.mlp.ln.g"), &[dim]);
    push(format!("{prefix}.mlp.ln.b"), &[dim]);
    push(format!("{prefix}.mlp.w1"), &[dim, dim * ratio]);
    push(format!("{prefix}.mlp.b1"), &[dim * ratio]);
    push(format!("{prefix}.mlp.w2"), &[dim * ratio, dim]);
    push(format!("{prefix}.mlp.b2"), &[dim]);
}

/// Named learnable tensors of encoder and decoder, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ModelParams<T> {
    /// Truncated-normal(0.02) weights and embeddings, zero biases, unit
    /// layer-norm gains.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .manifest()
            .iter()
            .map(|(name, shape)| {
                if name.ends_with(".g") {
                    Tensor::full(shape, T::one())
                } else if name.ends_with(".b") || is_bias(name) {
                    Tensor::zeros(shape)
                } else {
                    Tensor::from_fn(shape, |_| T::of(truncated_normal(rng, INIT_STD)))
                }
            })
            .collect();
        Self::from_tensors(config.clone(), tensors)
    }

    /// Assembles parameters from tensors given in manifest order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let manifest = config.manifest();
        if manifest.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, got {}",
                manifest.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in manifest.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!("{name}: expected shape {shape:?}, got {:?}", t.shape())));
            }
        }
        let names: Vec<String> = manifest.into_iter().map(|(n, _)| n).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(ModelParams {
            config,
            names,
            tensors,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
    pub fn names(&self) -> &[String] {
        &self.names
    }
    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }
    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.names
            .iter()
            .zip(&self.tensors)
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Places every tensor on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Bound<'_, T> {
        let vars = self.tensors.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect();
        Bound { params: self, vars }
    }
}

fn is_bias(name: &str) -> bool {
    name.rsplit('.')
        .next()
        .is_some_and(|last| last.len() == 2 && last.starts_with('b'))
}

/// An RGB image with values in `[0, 1]`, stored row-major, channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape("image", &[height, width, 3], &[data.len()]));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        Ok(Image { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Encoder output for one image: `M` vectors of width `d_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures<T> {
    pub features: Tensor<T>,
}

impl<T: Scalar> VisualFeatures<T> {
    pub fn len(&self) -> usize {
        self.features.rows()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Global average pooling over the feature sequence.
pub fn pool_gap<T: Scalar>(v: &VisualFeatures<T>) -> Vec<T> {
    let (m, d) = (v.len(), v.dim());
    let mut out = vec![T::zero(); d];
    for r in 0..m {
        for (o, &x) in out.iter_mut().zip(v.features.row(r)) {
            *o += x;
        }
    }
    let inv = T::one() / T::from_usize(m.max(1));
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

/// Parameters placed on a graph, addressed by manifest name.
pub struct Bound<'a, T> {
    params: &'a ModelParams<T>,
    vars: Vec<Var>,
}

/// How the decoder is run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub mode: AttentionMode,
    /// When false the cross-attention output is forced to zero.
    pub visual: bool,
}

impl DecodeOptions {
    pub fn new(mode: AttentionMode) -> Self {
        DecodeOptions { mode, visual: true }
    }
}

impl<'a, T: Scalar> Bound<'a, T> {
    pub fn var(&self, name: &str) -> Var {
        match self.params.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    /// Leaf vars in manifest order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &'a ModelConfig {
        &self.params.config
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = g.matmul(x, self.var(w))?;
        g.add_row(y, self.var(b))
    }

    fn layer_norm(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        g.layer_norm(x, self.var(&format!("{prefix}.g")), self.var(&format!("{prefix}.b")))
    }

    /// Pre-norm attention sublayer; returns the residual branch only.
    fn attention(&self, g: &mut Graph<T>, x: Var, memory: Option<Var>, prefix: &str, spec: AttentionSpec) -> Result<Var> {
        let h = self.layer_norm(g, x, &format!("{prefix}.ln"))?;
        let kv = memory.unwrap_or(h);
        let q = self.linear(g, h, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(g, kv, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(g, kv, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let a = g.attention(q, k, v, spec)?;
        self.linear(g, a, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn mlp(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let h = self.layer_norm(g, x, &format!("{prefix}.mlp.ln"))?;
        let h = self.linear(g, h, &format!("{prefix}.mlp.w1"), &format!("{prefix}.mlp.b1"))?;
        let h = g.gelu(h);
        self.linear(g, h, &format!("{prefix}.mlp.w2"), &format!("{prefix}.mlp.b2"))
    }

    /// Encodes a batch of images into `[batch * M, d_v]` features.
    pub fn encode(&self, g: &mut Graph<T>, images: &[&Image]) -> Result<Var> {
        let cfg = &self.config().encoder;
        let m = cfg.num_patches();
        let pd = cfg.patch_dim();
        let mut patches = Vec::with_capacity(images.len() * m * pd);
        for img in images {
            if img.height != cfg.image_height || img.width != cfg.image_width {
                return Err(Error::shape(
                    "encode",
                    &[cfg.image_height, cfg.image_width],
                    &[img.height, img.width],
                ));
            }
            patchify(img, cfg.patch, &mut patches);
        }
        let batch = images.len();
        let x = g.constant(Tensor::new(&[batch * m, pd], patches)?);
        let x = self.linear(g, x, "enc.patch.w", "enc.patch.b")?;
        let pos_ids: Vec<u32> = (0..batch).flat_map(|_| 0..m as u32).collect();
        let pos = g.gather(self.var("enc.pos"), &pos_ids)?;
        let mut x = g.add(x, pos)?;
        for l in 0..cfg.layers {
            let p = format!("enc.{l}");
            let spec = AttentionSpec {
                batch,
                heads: cfg.heads,
                q_len: m,
                k_len: m,
                causal: false,
                key_mask: None,
                shared_kv: false,
            };
            let a = self.attention(g, x, None, &format!("{p}.attn"), spec)?;
            x = g.add(x, a)?;
            let f = self.mlp(g, x, &p)?;
            x = g.add(x, f)?;
        }
        self.layer_norm(g, x, "enc.ln_f")
    }

    /// Decodes `batch` token rows of equal length `n` against `memory`,
    /// which is either `[batch * M, d_v]` or a single shared `[M, d_v]`.
    /// Returns `[batch * n, K]` logits; in causal mode row `i` depends only
    /// on tokens before `i`. Pad tokens are excluded as self-attention keys.
    pub fn decode(&self, g: &mut Graph<T>, tokens: &[TokenId], batch: usize, memory: Var, opts: DecodeOptions) -> Result<Var> {
        let cfg = &self.config().decoder;
        let m = self.config().encoder.num_patches();
        if batch == 0 || tokens.len() % batch != 0 {
            return Err(Error::shape("decode", &[batch], &[tokens.len()]));
        }
        let n = tokens.len() / batch;
        if n > cfg.max_len {
            return Err(Error::invalid(format!("sequence length {n} exceeds maximum {}", cfg.max_len)));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(Error::invalid(format!("token id {bad} >= vocabulary size {}", cfg.vocab)));
        }
        let shared = g.shape(memory)[0] == m && batch != 1;
        if !shared && g.shape(memory)[0] != batch * m {
            return Err(Error::shape("decode(memory)", g.shape(memory), &[batch * m]));
        }
        // Causal mode predicts position i from tokens before i: the network
        // reads the sequence shifted right behind a BOS token.
        let shifted;
        let tokens = if opts.mode == AttentionMode::Causal {
            shifted = shift_right(tokens, batch);
            shifted.as_slice()
        } else {
            tokens
        };
        let tok = g.gather(self.var("dec.tok"), tokens)?;
        let pos_ids: Vec<u32> = (0..batch).flat_map(|_| 0..n as u32).collect();
        let pos = g.gather(self.var("dec.pos"), &pos_ids)?;
        let mut x = g.add(tok, pos)?;
        let key_mask: Vec<bool> = tokens.iter().map(|&t| t != PAD).collect();
        for l in 0..cfg.layers {
            let p = format!("dec.{l}");
            let spec = AttentionSpec {
                batch,
                heads: cfg.heads,
                q_len: n,
                k_len: n,
                causal: opts.mode == AttentionMode::Causal,
                key_mask: Some(key_mask.clone()),
                shared_kv: false,
            };
            let a = self.attention(g, x, None, &format!("{p}.self"), spec)?;
            x = g.add(x, a)?;
            if opts.visual {
                let spec = AttentionSpec {
                    batch,
                    heads: cfg.heads,
                    q_len: n,
                    k_len: m,
                    causal: false,
                    key_mask: None,
                    shared_kv: shared,
                };
                let c = self.attention(g, x, Some(memory), &format!("{p}.cross"), spec)?;
                x = g.add(x, c)?;
            }
            let f = self.mlp(g, x, &p)?;
            x = g.add(x, f)?;
        }
        let x = self.layer_norm(g, x, "dec.ln_f")?;
        self.linear(g, x, "dec.head.w", "dec.head.b")
    }
}

fn shift_right(tokens: &[TokenId], batch: usize) -> Vec<TokenId> {
    let n = tokens.len() / batch;
    let mut out = Vec::with_capacity(tokens.len());
    for row in tokens.chunks(n) {
        out.push(BOS);
        out.extend_from_slice(&row[..n - 1]);
    }
    out
}

/// Appends the `P*P*3` patch vectors of `img` in raster order of patches.
fn patchify<T: Scalar>(img: &Image, p: usize, out: &mut Vec<T>) {
    for py in 0..img.height / p {
        for px in 0..img.width / p {
            for dy in 0..p {
                let y = py * p + dy;
                let start = (y * img.width + px * p) * 3;
                out.extend(img.data[start..start + p * 3].iter().map(|&v| T::of(v as f64)));
            }
        }
    }
}

/// Encoder features of one image.
pub fn encode<T: Scalar>(image: &Image, params: &ModelParams<T>) -> Result<VisualFeatures<T>> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let v = b.encode(&mut g, &[image])?;
    Ok(VisualFeatures {
        features: g.value(v).clone(),
    })
}

/// `[N, K]` logits for one token sequence given visual features.
pub fn decode_logits<T: Scalar>(
    tokens: &[TokenId],
    v: &VisualFeatures<T>,
    params: &ModelParams<T>,
    opts: DecodeOptions,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let mem = g.constant(v.features.clone());
    let out = b.decode(&mut g, tokens, 1, mem, opts)?;
    Ok(g.value(out).clone())
}
