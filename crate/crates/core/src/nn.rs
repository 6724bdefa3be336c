//! Feed-forward classifier: a shared body of dense layers and a per-task linear head.
//!
//! All tensors are row-major `f64`. Layer `l` maps `h[l-1]` to
//! `h[l] = act(W[l] h[l-1] + b[l])`; the head produces logits `W_h h[L] + b_h`
//! which go through a softmax. Loss is mean cross-entropy over the batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Manifest, ParameterVector, TensorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `h`.
    #[inline]
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Layer sizes of the shared body. The head width is per task and lives on [`Model`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArch("input_dim must be positive".into()));
        }
        if let Some(i) = self.hidden_dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidArch(format!("hidden layer {i} has zero width")));
        }
        Ok(())
    }

    /// Width of the representation fed to the head.
    pub fn feature_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    pub fn body_manifest(&self) -> Manifest {
        let mut entries = Vec::with_capacity(2 * self.hidden_dims.len());
        let mut fan_in = self.input_dim;
        for (l, &out) in self.hidden_dims.iter().enumerate() {
            entries.push(TensorSpec::new(format!("body.{l}.weight"), vec![out, fan_in]));
            entries.push(TensorSpec::new(format!("body.{l}.bias"), vec![out]));
            fan_in = out;
        }
        Manifest::new(entries)
    }

    pub fn head_manifest(&self, n_classes: usize) -> Manifest {
        Manifest::new(vec![
            TensorSpec::new("head.weight", vec![n_classes, self.feature_dim()]),
            TensorSpec::new("head.bias", vec![n_classes]),
        ])
    }

    pub fn body_param_count(&self) -> usize {
        self.body_manifest().numel()
    }

    pub fn head_param_count(&self, n_classes: usize) -> usize {
        n_classes * (self.feature_dim() + 1)
    }

    fn max_width(&self) -> usize {
        self.hidden_dims
            .iter()
            .copied()
            .chain(std::iter::once(self.input_dim))
            .max()
            .unwrap_or(0)
    }
}

/// A body/head parameter pair bound to an architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    arch: ModelArch,
    n_classes: usize,
    body: ParameterVector,
    head: ParameterVector,
}

/// A labeled batch in row-major layout.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a [f64],
    pub labels: &'a [u32],
}

/// Deterministic initialization: scaled symmetric uniform body, zero biases, zero head.
pub fn init_model(arch: &ModelArch, n_classes: usize, seed: u64) -> Result<Model> {
    arch.validate()?;
    if n_classes == 0 {
        return Err(Error::InvalidArch("head must have at least one class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let manifest = arch.body_manifest();
    let mut body = ParameterVector::zeros(manifest.clone());
    let ranges = manifest.ranges();
    for (spec, range) in manifest.entries().iter().zip(ranges) {
        if spec.shape.len() == 2 {
            let (fan_out, fan_in) = (spec.shape[0], spec.shape[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut body.values_mut()[range] {
                *v = rng.gen_range(-limit..limit);
            }
        }
    }
    Ok(Model {
        head: ParameterVector::zeros(arch.head_manifest(n_classes)),
        arch: arch.clone(),
        n_classes,
        body,
    })
}

impl Model {
    pub fn from_parts(
        arch: ModelArch,
        n_classes: usize,
        body: ParameterVector,
        head: ParameterVector,
    ) -> Result<Self> {
        arch.validate()?;
        if body.manifest() != &arch.body_manifest() {
            return Err(Error::Shape("body manifest does not match architecture".into()));
        }
        if head.manifest() != &arch.head_manifest(n_classes) {
            return Err(Error::Shape("head manifest does not match architecture".into()));
        }
        Ok(Self {
            arch,
            n_classes,
            body,
            head,
        })
    }

    /// Wraps `body` with a freshly initialized (zero) head of `n_classes` outputs.
    pub fn with_fresh_head(arch: &ModelArch, body: ParameterVector, n_classes: usize) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::InvalidArch("head must have at least one class".into()));
        }
        Self::from_parts(
            arch.clone(),
            n_classes,
            body,
            ParameterVector::zeros(arch.head_manifest(n_classes)),
        )
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn body(&self) -> &ParameterVector {
        &self.body
    }

    pub fn head(&self) -> &ParameterVector {
        &self.head
    }

    pub fn into_parts(self) -> (ParameterVector, ParameterVector) {
        (self.body, self.head)
    }

    #[cfg(test)]
    pub(crate) fn head_mut(&mut self) -> &mut ParameterVector {
        &mut self.head
    }

    pub(crate) fn net(&self) -> Net<'_> {
        Net {
            arch: &self.arch,
            n_classes: self.n_classes,
            body: self.body.values(),
            head: self.head.values(),
        }
    }

    fn check_width(&self, features: &[f64]) -> Result<usize> {
        let d = self.arch.input_dim;
        if !features.len().is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "feature buffer of length {} is not a multiple of input_dim {d}",
                features.len()
            )));
        }
        Ok(features.len() / d)
    }

    /// Class-probability rows for every example in `features`.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<Vec<f64>>> {
        let n = self.check_width(features)?;
        let mut ws = Workspace::new(&self.arch, self.n_classes);
        let d = self.arch.input_dim;
        Ok((0..n)
            .map(|i| {
                ws.forward(self.net(), &features[i * d..(i + 1) * d]);
                ws.probs.clone()
            })
            .collect())
    }

    /// Arg-max class per example, lowest index on ties.
    pub fn predict(&self, features: &[f64]) -> Result<Vec<u32>> {
        let n = self.check_width(features)?;
        let mut ws = Workspace::new(&self.arch, self.n_classes);
        let d = self.arch.input_dim;
        Ok((0..n)
            .map(|i| {
                ws.forward(self.net(), &features[i * d..(i + 1) * d]);
                argmax(&ws.logits) as u32
            })
            .collect())
    }

    /// Mean cross-entropy on a hard-labeled batch.
    pub fn loss(&self, batch: Batch<'_>) -> Result<f64> {
        let n = self.check_batch(batch)?;
        let mut ws = Workspace::new(&self.arch, self.n_classes);
        let d = self.arch.input_dim;
        let mut total = 0.0;
        for i in 0..n {
            ws.forward(self.net(), &batch.features[i * d..(i + 1) * d]);
            total -= ws.probs[batch.labels[i] as usize].max(f64::MIN_POSITIVE).ln();
        }
        Ok(total / n as f64)
    }

    fn check_batch(&self, batch: Batch<'_>) -> Result<usize> {
        let n = self.check_width(batch.features)?;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if batch.labels.len() != n {
            return Err(Error::Shape(format!(
                "{n} feature rows but {} labels",
                batch.labels.len()
            )));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&y| y as usize >= self.n_classes) {
            return Err(Error::LabelSpace {
                head: self.n_classes,
                data: bad as usize + 1,
            });
        }
        Ok(n)
    }

    /// Gradient of the mean cross-entropy with respect to body and head.
    pub fn gradient(&self, batch: Batch<'_>) -> Result<(ParameterVector, ParameterVector)> {
        let n = self.check_batch(batch)?;
        let mut ws = Workspace::new(&self.arch, self.n_classes);
        let mut grads = Gradients::new(self.body.len(), self.head.len());
        let d = self.arch.input_dim;
        let scale = 1.0 / n as f64;
        for i in 0..n {
            let x = &batch.features[i * d..(i + 1) * d];
            ws.backprop(self.net(), x, Target::Hard(batch.labels[i]), scale, &mut grads, true);
        }
        Ok(grads.into_vectors(self))
    }

    /// Gradient against soft target distributions (one row of `n_classes` per example).
    pub fn gradient_soft(
        &self,
        features: &[f64],
        targets: &[f64],
    ) -> Result<(ParameterVector, ParameterVector)> {
        let n = self.check_width(features)?;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if targets.len() != n * self.n_classes {
            return Err(Error::Shape("target rows do not match batch".into()));
        }
        let mut ws = Workspace::new(&self.arch, self.n_classes);
        let mut grads = Gradients::new(self.body.len(), self.head.len());
        let (d, k) = (self.arch.input_dim, self.n_classes);
        let scale = 1.0 / n as f64;
        for i in 0..n {
            let x = &features[i * d..(i + 1) * d];
            let t = Target::Soft(&targets[i * k..(i + 1) * k]);
            ws.backprop(self.net(), x, t, scale, &mut grads, true);
        }
        Ok(grads.into_vectors(self))
    }

    /// Last hidden representation for every row of `features`.
    pub fn embed(&self, features: &[f64]) -> Result<Vec<f64>> {
        embed(&self.arch, &self.body, features)
    }
}

/// Runs only the body, returning `rows × feature_dim` activations.
pub fn embed(arch: &ModelArch, body: &ParameterVector, features: &[f64]) -> Result<Vec<f64>> {
    if body.manifest() != &arch.body_manifest() {
        return Err(Error::Shape("body manifest does not match architecture".into()));
    }
    let d = arch.input_dim;
    if !features.len().is_multiple_of(d) {
        return Err(Error::Shape("feature width mismatch".into()));
    }
    let n = features.len() / d;
    let f = arch.feature_dim();
    let layers = layer_offsets(arch);
    let mut out = Vec::with_capacity(n * f);
    let mut cur = Vec::with_capacity(arch.max_width());
    let mut next = Vec::with_capacity(arch.max_width());
    for i in 0..n {
        cur.clear();
        cur.extend_from_slice(&features[i * d..(i + 1) * d]);
        for layer in &layers {
            next.clear();
            let w = &body.values()[layer.weight..layer.weight + layer.rows * layer.cols];
            let b = &body.values()[layer.bias..layer.bias + layer.rows];
            for r in 0..layer.rows {
                let z = b[r] + dot(&w[r * layer.cols..(r + 1) * layer.cols], &cur);
                next.push(arch.activation.apply(z));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        out.extend_from_slice(&cur);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    weight: usize,
    bias: usize,
    rows: usize,
    cols: usize,
}

fn layer_offsets(arch: &ModelArch) -> Vec<LayerOffsets> {
    let mut offset = 0;
    let mut fan_in = arch.input_dim;
    arch.hidden_dims
        .iter()
        .map(|&out| {
            let l = LayerOffsets {
                weight: offset,
                bias: offset + out * fan_in,
                rows: out,
                cols: fan_in,
            };
            offset += out * fan_in + out;
            fan_in = out;
            l
        })
        .collect()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[derive(Clone, Copy)]
pub(crate) enum Target<'a> {
    Hard(u32),
    Soft(&'a [f64]),
}

/// Gradient accumulators with the same layout as a model's body and head.
pub(crate) struct Gradients {
    pub body: Vec<f64>,
    pub head: Vec<f64>,
}

impl Gradients {
    pub fn new(body_len: usize, head_len: usize) -> Self {
        Self {
            body: vec![0.0; body_len],
            head: vec![0.0; head_len],
        }
    }

    pub fn clear(&mut self) {
        self.body.iter_mut().for_each(|g| *g = 0.0);
        self.head.iter_mut().for_each(|g| *g = 0.0);
    }

    fn into_vectors(self, model: &Model) -> (ParameterVector, ParameterVector) {
        (
            ParameterVector::new(model.body.manifest().clone(), self.body).expect("same layout"),
            ParameterVector::new(model.head.manifest().clone(), self.head).expect("same layout"),
        )
    }
}

/// Borrowed parameters of one body/head pair.
#[derive(Clone, Copy)]
pub(crate) struct Net<'a> {
    pub arch: &'a ModelArch,
    pub n_classes: usize,
    pub body: &'a [f64],
    pub head: &'a [f64],
}

/// Per-example scratch buffers for forward and backward passes.
pub(crate) struct Workspace {
    layers: Vec<LayerOffsets>,
    /// Pre-activations per hidden layer.
    zs: Vec<Vec<f64>>,
    /// Activations per layer, `hs[0]` is the input.
    hs: Vec<Vec<f64>>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    delta: Vec<f64>,
    back: Vec<f64>,
}

impl Workspace {
    pub fn new(arch: &ModelArch, n_classes: usize) -> Self {
        let layers = layer_offsets(arch);
        let mut hs = vec![vec![0.0; arch.input_dim]];
        let mut zs = Vec::new();
        for l in &layers {
            zs.push(vec![0.0; l.rows]);
            hs.push(vec![0.0; l.rows]);
        }
        Self {
            layers,
            zs,
            hs,
            logits: vec![0.0; n_classes],
            probs: vec![0.0; n_classes],
            delta: vec![0.0; arch.max_width().max(n_classes)],
            back: vec![0.0; arch.max_width()],
        }
    }

    pub fn forward(&mut self, net: Net<'_>, x: &[f64]) {
        self.hs[0].copy_from_slice(x);
        let body = net.body;
        let act = net.arch.activation;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = &body[layer.weight..layer.weight + layer.rows * layer.cols];
            let b = &body[layer.bias..layer.bias + layer.rows];
            let (prev, rest) = self.hs.split_at_mut(l + 1);
            let input = &prev[l];
            let out = &mut rest[0];
            let z = &mut self.zs[l];
            for r in 0..layer.rows {
                z[r] = b[r] + dot(&w[r * layer.cols..(r + 1) * layer.cols], input);
                out[r] = act.apply(z[r]);
            }
        }
        let feat = self.hs.last().unwrap();
        let f = feat.len();
        let head = net.head;
        let k = net.n_classes;
        let (hw, hb) = head.split_at(k * f);
        for c in 0..k {
            self.logits[c] = hb[c] + dot(&hw[c * f..(c + 1) * f], feat);
        }
        softmax_into(&self.logits, &mut self.probs);
    }

    pub fn predict(&mut self, net: Net<'_>, x: &[f64]) -> u32 {
        self.forward(net, x);
        argmax(&self.logits) as u32
    }

    /// Accumulates `scale * dLoss/dθ` for one example into `grads`; returns the example loss.
    pub fn backprop(
        &mut self,
        net: Net<'_>,
        x: &[f64],
        target: Target<'_>,
        scale: f64,
        grads: &mut Gradients,
        with_body: bool,
    ) -> f64 {
        self.forward(net, x);
        let k = net.n_classes;
        let loss = match target {
            Target::Hard(y) => {
                for c in 0..k {
                    self.delta[c] = self.probs[c];
                }
                self.delta[y as usize] -= 1.0;
                -self.probs[y as usize].max(f64::MIN_POSITIVE).ln()
            }
            Target::Soft(t) => {
                let mut loss = 0.0;
                for c in 0..k {
                    self.delta[c] = self.probs[c] - t[c];
                    if t[c] > 0.0 {
                        loss -= t[c] * self.probs[c].max(f64::MIN_POSITIVE).ln();
                    }
                }
                loss
            }
        };
        for c in 0..k {
            self.delta[c] *= scale;
        }

        let feat = self.hs.last().unwrap();
        let f = feat.len();
        let head = net.head;
        let (gw, gb) = grads.head.split_at_mut(k * f);
        for c in 0..k {
            let dc = self.delta[c];
            gb[c] += dc;
            for (g, &h) in gw[c * f..(c + 1) * f].iter_mut().zip(feat) {
                *g += dc * h;
            }
        }
        if !with_body || self.layers.is_empty() {
            return loss;
        }

        // Gradient w.r.t. the last hidden activation.
        let back = &mut self.back[..f];
        back.iter_mut().for_each(|b| *b = 0.0);
        for c in 0..k {
            let dc = self.delta[c];
            for (b, &w) in back.iter_mut().zip(&head[c * f..(c + 1) * f]) {
                *b += dc * w;
            }
        }

        let body = net.body;
        let act = net.arch.activation;
        for l in (0..self.layers.len()).rev() {
            let layer = self.layers[l];
            let dz = &mut self.delta[..layer.rows];
            for r in 0..layer.rows {
                dz[r] = self.back[r] * act.derivative(self.zs[l][r], self.hs[l + 1][r]);
            }
            let input = &self.hs[l];
            let gw = &mut grads.body[layer.weight..layer.weight + layer.rows * layer.cols];
            for r in 0..layer.rows {
                let d = dz[r];
                if d == 0.0 {
                    continue;
                }
                for (g, &h) in gw[r * layer.cols..(r + 1) * layer.cols].iter_mut().zip(input) {
                    *g += d * h;
                }
            }
            for r in 0..layer.rows {
                grads.body[layer.bias + r] += dz[r];
            }
            if l > 0 {
                let w = &body[layer.weight..layer.weight + layer.rows * layer.cols];
                let back = &mut self.back[..layer.cols];
                back.iter_mut().for_each(|b| *b = 0.0);
                for r in 0..layer.rows {
                    let d = dz[r];
                    for (b, &wv) in back.iter_mut().zip(&w[r * layer.cols..(r + 1) * layer.cols]) {
                        *b += d * wv;
                    }
                }
            }
        }
        loss
    }
}
