//! Encoder, decoder and pixel classifier.
//!
//! Every pixel is featurized independently (its own channels, or the 3x3
//! neighborhood with edge replication) and pushed through three stacks of
//! dense layers: the encoder, the decoder that produces the embedding, and
//! the classifier head that maps embeddings to class logits. A leaky
//! rectifier follows every layer except the embedding output and the logits.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{floor_prob, leaky_relu, softmax_rows, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{read_exact, read_u32, Tensor};

pub const MDL1_MAGIC: &[u8; 4] = b"MDL1";

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T = f32> {
    /// `[in x out]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

impl<T: Real> Dense<T> {
    /// Glorot-uniform weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| T::from_f64(rng.uniform_range(-limit, limit)))
            .collect();
        Self {
            weight: Tensor::from_parts(vec![fan_in, fan_out], w).expect("shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = crate::tensor::matmul(x, &self.weight)?;
        let out = self.fan_out();
        for row in y.data_mut().chunks_exact_mut(out) {
            for (o, &b) in row.iter_mut().zip(self.bias.data()) {
                *o = *o + b;
            }
        }
        Ok(y)
    }
}

/// Layer widths and input handling.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input_channels: usize,
    pub neighborhood: bool,
    pub encoder_widths: Vec<usize>,
    /// hidden decoder widths before the embedding layer
    pub decoder_hidden: Vec<usize>,
    pub embed_dim: usize,
    /// hidden classifier widths before the logits layer
    pub classifier_hidden: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    /// input -> 64 -> 32 | 32 -> K | K -> K -> K
    pub fn desk_default(input_channels: usize, num_classes: usize, neighborhood: bool) -> Self {
        Self {
            input_channels,
            neighborhood,
            encoder_widths: vec![64, 32],
            decoder_hidden: vec![],
            embed_dim: num_classes,
            classifier_hidden: vec![num_classes],
            num_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        if self.neighborhood {
            9 * self.input_channels
        } else {
            self.input_channels
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T = f32> {
    layers: Vec<Dense<T>>,
    n_encoder: usize,
    n_decoder: usize,
    n_classifier: usize,
    neighborhood: bool,
    num_classes: usize,
    embed_dim: usize,
}

impl<T: Real> SegModel<T> {
    pub fn init(arch: &Architecture, rng: &mut Rng) -> Result<Self> {
        if arch.num_classes < 2 || arch.embed_dim == 0 || arch.input_channels == 0 {
            return Err(Error::Usage(format!("invalid architecture {arch:?}")));
        }
        let mut layers = Vec::new();
        let mut width = arch.feature_dim();
        for &w in &arch.encoder_widths {
            layers.push(Dense::init(width, w, rng));
            width = w;
        }
        let n_encoder = layers.len();
        for &w in arch.decoder_hidden.iter().chain(std::iter::once(&arch.embed_dim)) {
            layers.push(Dense::init(width, w, rng));
            width = w;
        }
        let n_decoder = layers.len() - n_encoder;
        for &w in arch
            .classifier_hidden
            .iter()
            .chain(std::iter::once(&arch.num_classes))
        {
            layers.push(Dense::init(width, w, rng));
            width = w;
        }
        let n_classifier = layers.len() - n_encoder - n_decoder;
        Self::from_layers(
            layers,
            n_encoder,
            n_decoder,
            n_classifier,
            arch.neighborhood,
            arch.num_classes,
            arch.embed_dim,
        )
    }

    pub fn from_layers(
        layers: Vec<Dense<T>>,
        n_encoder: usize,
        n_decoder: usize,
        n_classifier: usize,
        neighborhood: bool,
        num_classes: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        if n_decoder == 0 || n_classifier == 0 || layers.len() != n_encoder + n_decoder + n_classifier
        {
            return Err(Error::dim("SegModel", "layer partition does not cover the layers"));
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::dim(
                    "SegModel",
                    format!("{} -> {} width break", pair[0].fan_out(), pair[1].fan_in()),
                ));
            }
        }
        for l in &layers {
            if l.bias.len() != l.fan_out() {
                return Err(Error::dim("SegModel", "bias width"));
            }
            if !l.weight.all_finite() || !l.bias.all_finite() {
                return Err(Error::NonFinite("model parameters"));
            }
        }
        let m = Self {
            layers,
            n_encoder,
            n_decoder,
            n_classifier,
            neighborhood,
            num_classes,
            embed_dim,
        };
        if m.decoder().last().unwrap().fan_out() != embed_dim
            || m.classifier()[0].fan_in() != embed_dim
        {
            return Err(Error::dim("SegModel", "embedding width mismatch"));
        }
        if m.classifier().last().unwrap().fan_out() != num_classes {
            return Err(Error::dim("SegModel", "classifier output != class count"));
        }
        Ok(m)
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn encoder(&self) -> &[Dense<T>] {
        &self.layers[..self.n_encoder]
    }

    pub fn decoder(&self) -> &[Dense<T>] {
        &self.layers[self.n_encoder..self.n_encoder + self.n_decoder]
    }

    pub fn classifier(&self) -> &[Dense<T>] {
        &self.layers[self.n_encoder + self.n_decoder..]
    }

    /// Index of the first classifier parameter in the flat parameter order.
    pub fn classifier_param_offset(&self) -> usize {
        2 * (self.n_encoder + self.n_decoder)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn neighborhood(&self) -> bool {
        self.neighborhood
    }

    pub fn input_channels(&self) -> usize {
        let f = self.layers[0].fan_in();
        if self.neighborhood {
            f / 9
        } else {
            f
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.layers.len()
    }

    /// Flat parameter list: weight then bias, layer by layer.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn cast<U: Real>(&self) -> SegModel<U> {
        SegModel {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            n_encoder: self.n_encoder,
            n_decoder: self.n_decoder,
            n_classifier: self.n_classifier,
            neighborhood: self.neighborhood,
            num_classes: self.num_classes,
            embed_dim: self.embed_dim,
        }
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        if images.rank() != 4 || images.shape()[3] != self.input_channels() {
            return Err(Error::dim(
                "forward_embed",
                format!(
                    "images {:?}, model expects [B,H,W,{}]",
                    images.shape(),
                    self.input_channels()
                ),
            ));
        }
        Ok(())
    }

    /// Per-pixel input features `[B*H*W x F]`.
    pub fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_images(images)?;
        Ok(pixel_features(images, self.neighborhood))
    }

    fn run_stack(layers: &[Dense<T>], mut x: Tensor<T>, relu_last: bool) -> Result<Tensor<T>> {
        let n = layers.len();
        for (i, l) in layers.iter().enumerate() {
            x = l.apply(&x)?;
            if i + 1 < n || relu_last {
                x.data_mut().iter_mut().for_each(|v| *v = leaky_relu(*v));
            }
        }
        Ok(x)
    }

    /// Embeddings for flattened pixel features.
    pub fn embed_features(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let h = Self::run_stack(self.encoder(), features.clone(), true)?;
        Self::run_stack(self.decoder(), h, false)
    }

    /// Logits for flattened embeddings `[n x embed_dim]`.
    pub fn logits(&self, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
        let last = *embeddings.shape().last().unwrap_or(&0);
        if last != self.embed_dim {
            return Err(Error::dim(
                "forward_classify",
                format!("last dim {last} != embed_dim {}", self.embed_dim),
            ));
        }
        let flat = embeddings.clone().flatten_rows();
        Self::run_stack(self.classifier(), flat, false)
    }

    /// Records the encoder and decoder on `tape`; returns the embedding node.
    pub fn embed_on_tape(&self, tape: &mut Tape<T>, features: Tensor<T>) -> Result<Var> {
        let mut x = tape.input(features);
        let stacks = self.n_encoder + self.n_decoder;
        for (i, l) in self.layers[..stacks].iter().enumerate() {
            let w = tape.param(2 * i, l.weight.clone());
            let b = tape.param(2 * i + 1, l.bias.clone());
            x = tape.linear(x, w, b)?;
            if i + 1 != stacks {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Records the classifier head on `tape`; returns the logits node.
    pub fn classify_on_tape(&self, tape: &mut Tape<T>, embeddings: Var) -> Result<Var> {
        let off = self.n_encoder + self.n_decoder;
        let mut x = embeddings;
        for (j, l) in self.classifier().iter().enumerate() {
            let i = off + j;
            let w = tape.param(2 * i, l.weight.clone());
            let b = tape.param(2 * i + 1, l.bias.clone());
            x = tape.linear(x, w, b)?;
            if j + 1 != self.n_classifier {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Flat gradient list aligned with [`SegModel::params`]; parameters that
    /// were not on the tape get zeros.
    pub fn collect_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.params()
            .iter()
            .enumerate()
            .map(|(i, p)| grads.param(i).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}

/// Pixel features from `[B,H,W,C]` images. With `neighborhood`, each pixel
/// gets its 3x3 window (edge-replicated), row-major, channels innermost.
pub fn pixel_features<T: Real>(images: &Tensor<T>, neighborhood: bool) -> Tensor<T> {
    let s = images.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if !neighborhood {
        return images.clone().reshape(&[b * h * w, c]).expect("same size");
    }
    let src = images.data();
    let mut out = Vec::with_capacity(b * h * w * 9 * c);
    for img in 0..b {
        let base = img * h * w * c;
        for r in 0..h {
            for col in 0..w {
                for dr in [-1isize, 0, 1] {
                    let rr = (r as isize + dr).clamp(0, h as isize - 1) as usize;
                    for dc in [-1isize, 0, 1] {
                        let cc = (col as isize + dc).clamp(0, w as isize - 1) as usize;
                        let at = base + (rr * w + cc) * c;
                        out.extend_from_slice(&src[at..at + c]);
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![b * h * w, 9 * c], out).expect("feature shape")
}

/// Per-pixel embeddings `[B,H,W,embed_dim]`.
pub fn forward_embed<T: Real>(model: &SegModel<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let feats = model.features(images)?;
    let z = model.embed_features(&feats)?;
    let s = images.shape();
    z.reshape(&[s[0], s[1], s[2], model.embed_dim()])
}

/// Softmax class probabilities with the leading shape of `embeddings`.
pub fn forward_classify<T: Real>(model: &SegModel<T>, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
    let logits = model.logits(embeddings)?;
    let p = softmax_rows(&logits);
    let mut shape = embeddings.shape().to_vec();
    *shape.last_mut().unwrap() = model.num_classes();
    p.reshape(&shape)
}

/// Mean of `-log p[label]` over all pixels.
pub fn cross_entropy_loss<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let k = *probs.shape().last().unwrap();
    let n = probs.len() / k;
    if labels.len() != n {
        return Err(Error::dim(
            "cross_entropy_loss",
            format!("{n} pixels, {} labels", labels.len()),
        ));
    }
    let mut total = 0f64;
    for (row, &l) in probs.data().chunks_exact(k).zip(labels) {
        if l >= k {
            return Err(Error::dim(
                "cross_entropy_loss",
                format!("label {l} out of range for {k} classes"),
            ));
        }
        total -= floor_prob(row[l].as_f64()).ln();
    }
    Ok(total / n as f64)
}

/// Row-wise argmax and max value.
pub fn argmax_rows<T: Real>(probs: &Tensor<T>) -> Vec<(usize, T)> {
    let k = *probs.shape().last().unwrap();
    probs
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            (best, row[best])
        })
        .collect()
}

impl SegModel<f32> {
    /// MDL1 checkpoint; see the crate README for the byte layout.
    pub fn write_mdl1<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MDL1_MAGIC)?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            l.weight.write_tns1(w)?;
            l.bias.write_tns1(w)?;
        }
        w.write_all(&(self.num_classes as u32).to_le_bytes())?;
        w.write_all(&(self.embed_dim as u32).to_le_bytes())?;
        for v in [
            self.n_encoder as u32,
            self.n_decoder as u32,
            self.n_classifier as u32,
            self.neighborhood as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_mdl1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_mdl1(&mut out).expect("vec write");
        out
    }

    pub fn read_mdl1<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MDL1_MAGIC {
            return Err(Error::format("MDL1", format!("bad magic {magic:02x?}")));
        }
        let n = read_u32(r)? as usize;
        if n == 0 || n > 1024 {
            return Err(Error::format("MDL1", format!("layer count {n}")));
        }
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let weight = Tensor::read_tns1(r)?;
            let bias = Tensor::read_tns1(r)?;
            layers.push(Dense { weight, bias });
        }
        let k = read_u32(r)? as usize;
        let embed = read_u32(r)? as usize;
        let ne = read_u32(r)? as usize;
        let nd = read_u32(r)? as usize;
        let nc = read_u32(r)? as usize;
        let nb = read_u32(r)? != 0;
        Self::from_layers(layers, ne, nd, nc, nb, k, embed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_mdl1_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_mdl1(&mut bytes.as_slice())
    }
}
