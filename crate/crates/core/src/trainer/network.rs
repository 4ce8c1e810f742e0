//! Tanh layer stack with an attentive pooling head, and its backward pass.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::embedding::{dot, Matrix};
use crate::error::{Error, Result};
use crate::losses::softmax;
use crate::rng;

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Flat views over a parameter set, in a fixed order.
pub trait ParamBlocks {
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for b in self.blocks_mut() {
            b.copy_from_slice(&flat[at..at + b.len()]);
            at += b.len();
        }
        Ok(())
    }

    /// Rounds every parameter through `f32`, the on-disk precision.
    fn quantize(&mut self) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    fn all_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

impl ParamBlocks for Matrix {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }
    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// out x in.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    /// `tanh(W x + b)` written into `out`.
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip(self.weight.iter_rows().zip(&self.bias)) {
            *o = (dot(row, x) + b).tanh();
        }
    }
}

/// `h^l = tanh(W_l h^(l-1) + b_l)` for `l = 1..L`, with `h^0` the input frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredEncoder {
    pub layers: Vec<DenseLayer>,
}

impl LayeredEncoder {
    pub fn zeros(input_dim: usize, hidden_dim: usize, num_layers: usize) -> Self {
        let layers = (0..num_layers)
            .map(|l| DenseLayer::zeros(if l == 0 { input_dim } else { hidden_dim }, hidden_dim))
            .collect();
        Self { layers }
    }

    /// Stand-in for a pre-trained encoder: near-identity layers (the
    /// identity padded or truncated where dimensions differ) plus Gaussian
    /// noise of `noise_std`.
    pub fn pretrained(input_dim: usize, hidden_dim: usize, num_layers: usize, noise_std: f64, seed: u64) -> Result<Self> {
        if num_layers < 2 || input_dim == 0 || hidden_dim == 0 {
            return Err(Error::BadConfig(
                "encoder needs at least two layers and positive dimensions".into(),
            ));
        }
        let mut enc = Self::zeros(input_dim, hidden_dim, num_layers);
        let mut rng = rng::stream(seed, &[0x656e_636f_6465_72]);
        for layer in &mut enc.layers {
            for r in 0..hidden_dim {
                let row = layer.weight.row_mut(r);
                for (c, w) in row.iter_mut().enumerate() {
                    let eye = if r == c { 1.0 } else { 0.0 };
                    *w = eye + noise_std * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        Ok(enc)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    /// Weights then bias of layer `l` (0-based).
    pub fn layer_flat(&self, l: usize) -> Vec<f64> {
        let layer = &self.layers[l];
        let mut out = layer.weight.as_slice().to_vec();
        out.extend_from_slice(&layer.bias);
        out
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.rows() == b.weight.rows() && a.weight.cols() == b.weight.cols()
            })
    }

    /// Index of the layer owning each entry of [`ParamBlocks::blocks`].
    pub fn block_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).flat_map(|l| [l, l]).collect()
    }
}

impl ParamBlocks for LayeredEncoder {
    fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }
    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

/// Single-query attention over frames. Keys and values are two separate
/// softmax-weighted combinations of the encoder's layer outputs; the pooled
/// value is projected to the embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentivePoolingHead {
    pub key_logits: Vec<f64>,
    pub value_logits: Vec<f64>,
    pub query: Vec<f64>,
    /// embed x hidden.
    pub projection: Matrix,
    pub bias: Vec<f64>,
}

impl AttentivePoolingHead {
    pub fn zeros(num_layers: usize, hidden_dim: usize, embed_dim: usize) -> Self {
        Self {
            key_logits: vec![0.0; num_layers],
            value_logits: vec![0.0; num_layers],
            query: vec![0.0; hidden_dim],
            projection: Matrix::zeros(embed_dim, hidden_dim),
            bias: vec![0.0; embed_dim],
        }
    }

    /// Uniform layer weights, uniform attention, Gaussian projection scaled
    /// by `1/sqrt(hidden)`.
    pub fn fresh(num_layers: usize, hidden_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut head = Self::zeros(num_layers, hidden_dim, embed_dim);
        let mut rng = rng::stream(seed, &[0x6865_6164]);
        let scale = 1.0 / (hidden_dim as f64).sqrt();
        for w in head.projection.as_mut_slice() {
            *w = scale * rng.sample::<f64, _>(StandardNormal);
        }
        head
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.rows()
    }
}

impl ParamBlocks for AttentivePoolingHead {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![
            &self.key_logits,
            &self.value_logits,
            &self.query,
            self.projection.as_slice(),
            &self.bias,
        ]
    }
    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.key_logits,
            &mut self.value_logits,
            &mut self.query,
            self.projection.as_mut_slice(),
            &mut self.bias,
        ]
    }
}

/// Encoder plus head. The stamp changes on every parameter update so a
/// cache from an older forward pass is rejected.
#[derive(Clone, Debug)]
pub struct SpeakerNet {
    pub encoder: LayeredEncoder,
    pub head: AttentivePoolingHead,
    stamp: u64,
}

impl PartialEq for SpeakerNet {
    fn eq(&self, other: &Self) -> bool {
        self.encoder == other.encoder && self.head == other.head
    }
}

/// Gradients in the shape of a [`SpeakerNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrad {
    pub encoder: LayeredEncoder,
    pub head: AttentivePoolingHead,
}

impl NetGrad {
    pub fn zeros_like(net: &SpeakerNet) -> Self {
        let enc = &net.encoder;
        Self {
            encoder: LayeredEncoder::zeros(enc.input_dim(), enc.hidden_dim(), enc.num_layers()),
            head: AttentivePoolingHead::zeros(enc.num_layers(), enc.hidden_dim(), net.head.embed_dim()),
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += alpha * y);
        }
    }
}

impl ParamBlocks for NetGrad {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut b = self.encoder.blocks();
        b.extend(self.head.blocks());
        b
    }
    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut b = self.encoder.blocks_mut();
        b.extend(self.head.blocks_mut());
        b
    }
}

impl ParamBlocks for SpeakerNet {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut b = self.encoder.blocks();
        b.extend(self.head.blocks());
        b
    }
    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.stamp = fresh_stamp();
        let mut b = self.encoder.blocks_mut();
        b.extend(self.head.blocks_mut());
        b
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    stamp: u64,
    input: Matrix,
    /// `hidden[l]` is T x H for layer `l + 1`.
    pub hidden: Vec<Matrix>,
    key_weights: Vec<f64>,
    value_weights: Vec<f64>,
    keys: Matrix,
    values: Matrix,
    /// Attention over frames.
    pub attention: Vec<f64>,
    pooled: Vec<f64>,
}

impl SpeakerNet {
    pub fn new(encoder: LayeredEncoder, head: AttentivePoolingHead) -> Result<Self> {
        if head.key_logits.len() != encoder.num_layers()
            || head.value_logits.len() != encoder.num_layers()
            || head.query.len() != encoder.hidden_dim()
            || head.projection.cols() != encoder.hidden_dim()
            || head.bias.len() != head.embed_dim()
        {
            return Err(Error::ShapeMismatch("head does not fit the encoder".into()));
        }
        for (l, layer) in encoder.layers.iter().enumerate() {
            let expected_in = if l == 0 { encoder.input_dim() } else { encoder.hidden_dim() };
            if layer.weight.rows() != encoder.hidden_dim()
                || layer.weight.cols() != expected_in
                || layer.bias.len() != encoder.hidden_dim()
            {
                return Err(Error::ShapeMismatch(format!("encoder layer {l}")));
            }
        }
        Ok(Self {
            encoder,
            head,
            stamp: fresh_stamp(),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.head.embed_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Vec<f64>, ForwardCache)> {
        if input.cols() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                got: input.cols(),
            });
        }
        let t_len = input.rows();
        if t_len == 0 {
            return Err(Error::EmptyUtterance);
        }
        let h_dim = self.encoder.hidden_dim();
        let num_layers = self.encoder.num_layers();
        let mut hidden: Vec<Matrix> = (0..num_layers).map(|_| Matrix::zeros(t_len, h_dim)).collect();
        for t in 0..t_len {
            for l in 0..num_layers {
                let (below, rest) = hidden.split_at_mut(l);
                let x = if l == 0 { input.row(t) } else { below[l - 1].row(t) };
                self.encoder.layers[l].apply(x, rest[0].row_mut(t));
            }
        }

        let key_weights = softmax(&self.head.key_logits);
        let value_weights = softmax(&self.head.value_logits);
        let mut keys = Matrix::zeros(t_len, h_dim);
        let mut values = Matrix::zeros(t_len, h_dim);
        for (l, h) in hidden.iter().enumerate() {
            for t in 0..t_len {
                let (a_k, a_v) = (key_weights[l], value_weights[l]);
                let src = h.row(t);
                keys.row_mut(t).iter_mut().zip(src).for_each(|(k, x)| *k += a_k * x);
                values.row_mut(t).iter_mut().zip(src).for_each(|(v, x)| *v += a_v * x);
            }
        }
        let scores: Vec<f64> = keys.iter_rows().map(|k| dot(&self.head.query, k)).collect();
        let attention = softmax(&scores);
        let mut pooled = vec![0.0; h_dim];
        for (w, v) in attention.iter().zip(values.iter_rows()) {
            pooled.iter_mut().zip(v).for_each(|(p, x)| *p += w * x);
        }
        let embedding: Vec<f64> = self
            .head
            .projection
            .iter_rows()
            .zip(&self.head.bias)
            .map(|(row, b)| dot(row, &pooled) + b)
            .collect();
        Ok((
            embedding,
            ForwardCache {
                stamp: self.stamp,
                input: input.clone(),
                hidden,
                key_weights,
                value_weights,
                keys,
                values,
                attention,
                pooled,
            },
        ))
    }

    pub fn embed(&self, input: &Matrix) -> Result<Vec<f64>> {
        self.forward(input).map(|(e, _)| e)
    }

    /// Gradient of a loss with respect to every parameter, given its
    /// gradient with respect to the embedding.
    pub fn backward(&self, cache: &ForwardCache, grad_embedding: &[f64]) -> Result<NetGrad> {
        if cache.stamp != self.stamp {
            return Err(Error::StaleCache);
        }
        if grad_embedding.len() != self.embed_dim() {
            return Err(Error::DimMismatch {
                expected: self.embed_dim(),
                got: grad_embedding.len(),
            });
        }
        let mut g = NetGrad::zeros_like(self);
        let h_dim = self.encoder.hidden_dim();
        let num_layers = self.encoder.num_layers();
        let t_len = cache.input.rows();

        // Projection.
        g.head.bias.copy_from_slice(grad_embedding);
        let mut g_pooled = vec![0.0; h_dim];
        for (e, (ge, row)) in grad_embedding.iter().zip(self.head.projection.iter_rows()).enumerate() {
            g.head
                .projection
                .row_mut(e)
                .iter_mut()
                .zip(&cache.pooled)
                .for_each(|(gp, u)| *gp = ge * u);
            g_pooled.iter_mut().zip(row).for_each(|(gu, p)| *gu += ge * p);
        }

        // Attention over frames.
        let g_weight: Vec<f64> = cache.values.iter_rows().map(|v| dot(&g_pooled, v)).collect();
        let mean_g: f64 = cache.attention.iter().zip(&g_weight).map(|(w, gw)| w * gw).sum();
        let g_score: Vec<f64> = cache
            .attention
            .iter()
            .zip(&g_weight)
            .map(|(w, gw)| w * (gw - mean_g))
            .collect();
        for (gs, k) in g_score.iter().zip(cache.keys.iter_rows()) {
            g.head.query.iter_mut().zip(k).for_each(|(gq, x)| *gq += gs * x);
        }

        // Layer mixing weights.
        let mut g_alpha_k = vec![0.0; num_layers];
        let mut g_alpha_v = vec![0.0; num_layers];
        for (l, h) in cache.hidden.iter().enumerate() {
            for t in 0..t_len {
                let hk = dot(&self.head.query, h.row(t));
                g_alpha_k[l] += g_score[t] * hk;
                g_alpha_v[l] += cache.attention[t] * dot(&g_pooled, h.row(t));
            }
        }
        softmax_backward(&cache.key_weights, &g_alpha_k, &mut g.head.key_logits);
        softmax_backward(&cache.value_weights, &g_alpha_v, &mut g.head.value_logits);

        // Encoder, frame by frame, top layer down.
        let mut g_h = vec![0.0; h_dim];
        let mut g_z = vec![0.0; h_dim];
        for t in 0..t_len {
            let (gs, w) = (g_score[t], cache.attention[t]);
            for l in (0..num_layers).rev() {
                let (a_k, a_v) = (cache.key_weights[l], cache.value_weights[l]);
                if l == num_layers - 1 {
                    g_h.iter_mut().for_each(|x| *x = 0.0);
                }
                for j in 0..h_dim {
                    g_h[j] += a_k * gs * self.head.query[j] + a_v * w * g_pooled[j];
                }
                let h = cache.hidden[l].row(t);
                for j in 0..h_dim {
                    g_z[j] = g_h[j] * (1.0 - h[j] * h[j]);
                }
                let x = if l == 0 { cache.input.row(t) } else { cache.hidden[l - 1].row(t) };
                let layer_g = &mut g.encoder.layers[l];
                for (j, &gz) in g_z.iter().enumerate() {
                    if gz == 0.0 {
                        continue;
                    }
                    layer_g.bias[j] += gz;
                    layer_g
                        .weight
                        .row_mut(j)
                        .iter_mut()
                        .zip(x)
                        .for_each(|(gw, xi)| *gw += gz * xi);
                }
                if l > 0 {
                    g_h.iter_mut().for_each(|x| *x = 0.0);
                    let weight = &self.encoder.layers[l].weight;
                    for (j, &gz) in g_z.iter().enumerate() {
                        if gz == 0.0 {
                            continue;
                        }
                        g_h.iter_mut().zip(weight.row(j)).for_each(|(gh, wj)| *gh += gz * wj);
                    }
                }
            }
        }
        Ok(g)
    }
}

/// Gradient through `p = softmax(a)`: `p * (g - <p, g>)`, written to `out`.
fn softmax_backward(p: &[f64], g: &[f64], out: &mut [f64]) {
    let m: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, pi), gi) in out.iter_mut().zip(p).zip(g) {
        *o = pi * (gi - m);
    }
}
