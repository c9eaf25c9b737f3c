//! The siamese encoder pair: a two-layer MLP backbone followed by a
//! two-layer projection head whose output is L2-normalized onto the unit
//! sphere.
//!
//! The query branch is trained by SGD with momentum; the key branch never
//! sees gradients and instead tracks the query branch through an exponential
//! moving average. The backward pass here is written out by hand, including
//! the Jacobian of the final normalization, so gradients can be validated
//! against finite differences without a framework in the loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math::{l2_normalize, norm, Embedding, Matrix};

/// Layer widths for the backbone and projection head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub backbone_dim: usize,
    pub proj_hidden_dim: usize,
    pub contrast_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            input_dim: 32,
            hidden_dim: 64,
            backbone_dim: 32,
            proj_hidden_dim: 32,
            contrast_dim: 16,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("backbone_dim", self.backbone_dim),
            ("proj_hidden_dim", self.proj_hidden_dim),
            ("contrast_dim", self.contrast_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be > 0")));
            }
        }
        Ok(())
    }

    /// Total scalar parameter count across all four layers.
    pub fn num_params(&self) -> usize {
        let enc1 = self.hidden_dim * self.input_dim + self.hidden_dim;
        let enc2 = self.backbone_dim * self.hidden_dim + self.backbone_dim;
        let proj1 = self.proj_hidden_dim * self.backbone_dim + self.proj_hidden_dim;
        let proj2 = self.contrast_dim * self.proj_hidden_dim + self.contrast_dim;
        enc1 + enc2 + proj1 + proj2
    }
}

/// One affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Layer {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Layer {
            w: Matrix::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.w.matvec(x);
        for (yi, bi) in y.iter_mut().zip(&self.b) {
            *yi += bi;
        }
        y
    }
}

/// All parameters of one branch. The same container carries gradients and
/// optimizer velocity, which keeps the update rules to plain element-wise
/// arithmetic over matching layouts.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub enc1: Layer,
    pub enc2: Layer,
    pub proj1: Layer,
    pub proj2: Layer,
}

/// Intermediate activations kept by a traced forward pass.
#[derive(Clone, Debug)]
pub struct TraceData {
    pub input: Vec<f64>,
    pub h1_pre: Vec<f64>,
    pub h1: Vec<f64>,
    pub backbone: Vec<f64>,
    pub p1_pre: Vec<f64>,
    pub p1: Vec<f64>,
    pub raw: Vec<f64>,
    pub raw_norm: f64,
}

/// Output of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub backbone: Vec<f64>,
    pub projection: Embedding,
    pub trace: Option<TraceData>,
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

impl ModelParams {
    /// Uniform init in +-1/sqrt(fan_in) per weight matrix, zero biases.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |out_dim: usize, in_dim: usize| {
            let bound = 1.0 / (in_dim as f64).sqrt();
            Layer {
                w: Matrix::from_fn(out_dim, in_dim, |_, _| rng.random_range(-bound..bound)),
                b: vec![0.0; out_dim],
            }
        };
        Ok(ModelParams {
            dims,
            enc1: layer(dims.hidden_dim, dims.input_dim),
            enc2: layer(dims.backbone_dim, dims.hidden_dim),
            proj1: layer(dims.proj_hidden_dim, dims.backbone_dim),
            proj2: layer(dims.contrast_dim, dims.proj_hidden_dim),
        })
    }

    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        Ok(ModelParams {
            dims,
            enc1: Layer::zeros(dims.hidden_dim, dims.input_dim),
            enc2: Layer::zeros(dims.backbone_dim, dims.hidden_dim),
            proj1: Layer::zeros(dims.proj_hidden_dim, dims.backbone_dim),
            proj2: Layer::zeros(dims.contrast_dim, dims.proj_hidden_dim),
        })
    }

    /// Backbone features only: z = W2 relu(W1 x + b1) + b2.
    pub fn backbone_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dims.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "input dim {} does not match model input dim {}",
                x.len(),
                self.dims.input_dim
            )));
        }
        let h1 = relu(&self.enc1.forward(x));
        Ok(self.enc2.forward(&h1))
    }

    /// Full pass through backbone and projection head. With `keep_trace` the
    /// activations needed by [`backward`](Self::backward) are retained.
    pub fn forward(&self, x: &[f64], keep_trace: bool) -> Result<Forward> {
        if x.len() != self.dims.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "input dim {} does not match model input dim {}",
                x.len(),
                self.dims.input_dim
            )));
        }
        let h1_pre = self.enc1.forward(x);
        let h1 = relu(&h1_pre);
        let backbone = self.enc2.forward(&h1);
        let p1_pre = self.proj1.forward(&backbone);
        let p1 = relu(&p1_pre);
        let raw = self.proj2.forward(&p1);
        let projection = l2_normalize(&raw)?;
        let trace = keep_trace.then(|| TraceData {
            input: x.to_vec(),
            h1_pre,
            h1,
            backbone: backbone.clone(),
            p1_pre,
            p1,
            raw_norm: norm(&raw),
            raw,
        });
        Ok(Forward {
            backbone,
            projection,
            trace,
        })
    }

    /// Accumulate parameter gradients for one traced pass, given the loss
    /// gradient with respect to the normalized projection.
    pub fn backward(
        &self,
        trace: &TraceData,
        grad_projection: &[f64],
        grads: &mut ModelParams,
    ) -> Result<()> {
        if grad_projection.len() != self.dims.contrast_dim {
            return Err(Error::ShapeMismatch(format!(
                "projection gradient dim {} does not match contrast dim {}",
                grad_projection.len(),
                self.dims.contrast_dim
            )));
        }
        // Through u = raw / |raw|: du/draw = (I - u u^T) / |raw|
        let u: Vec<f64> = trace.raw.iter().map(|r| r / trace.raw_norm).collect();
        let ug = crate::math::dot(&u, grad_projection);
        let d_raw: Vec<f64> = grad_projection
            .iter()
            .zip(&u)
            .map(|(g, ui)| (g - ug * ui) / trace.raw_norm)
            .collect();

        // projection head, second layer
        grads.proj2.w.add_scaled_outer(&d_raw, &trace.p1, 1.0);
        for (gb, d) in grads.proj2.b.iter_mut().zip(&d_raw) {
            *gb += d;
        }
        let mut d_p1 = self.proj2.w.matvec_transpose(&d_raw);
        for (d, pre) in d_p1.iter_mut().zip(&trace.p1_pre) {
            if *pre <= 0.0 {
                *d = 0.0;
            }
        }

        // projection head, first layer
        grads.proj1.w.add_scaled_outer(&d_p1, &trace.backbone, 1.0);
        for (gb, d) in grads.proj1.b.iter_mut().zip(&d_p1) {
            *gb += d;
        }
        let d_backbone = self.proj1.w.matvec_transpose(&d_p1);

        // backbone, second layer
        grads.enc2.w.add_scaled_outer(&d_backbone, &trace.h1, 1.0);
        for (gb, d) in grads.enc2.b.iter_mut().zip(&d_backbone) {
            *gb += d;
        }
        let mut d_h1 = self.enc2.w.matvec_transpose(&d_backbone);
        for (d, pre) in d_h1.iter_mut().zip(&trace.h1_pre) {
            if *pre <= 0.0 {
                *d = 0.0;
            }
        }

        // backbone, first layer
        grads.enc1.w.add_scaled_outer(&d_h1, &trace.input, 1.0);
        for (gb, d) in grads.enc1.b.iter_mut().zip(&d_h1) {
            *gb += d;
        }
        Ok(())
    }

    fn layers(&self) -> [&Layer; 4] {
        [&self.enc1, &self.enc2, &self.proj1, &self.proj2]
    }

    fn layers_mut(&mut self) -> [&mut Layer; 4] {
        [
            &mut self.enc1,
            &mut self.enc2,
            &mut self.proj1,
            &mut self.proj2,
        ]
    }

    /// self += scale * other, layer by layer.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (mine, theirs) in self.layers_mut().into_iter().zip(other.layers()) {
            for (a, &b) in mine.w.data_mut().iter_mut().zip(theirs.w.data()) {
                *a += scale * b;
            }
            for (a, &b) in mine.b.iter_mut().zip(&theirs.b) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in self.layers_mut() {
            for a in layer.w.data_mut() {
                *a *= factor;
            }
            for a in &mut layer.b {
                *a *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers().into_iter().all(|l| {
            l.w.data().iter().all(|x| x.is_finite()) && l.b.iter().all(|x| x.is_finite())
        })
    }

    /// All parameters as one flat vector, in fixed layer order (enc1.w,
    /// enc1.b, enc2.w, enc2.b, proj1.w, proj1.b, proj2.w, proj2.b).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims.num_params());
        for layer in self.layers() {
            out.extend_from_slice(layer.w.data());
            out.extend_from_slice(&layer.b);
        }
        out
    }

    pub fn from_flat(dims: ModelDims, flat: &[f64]) -> Result<Self> {
        if flat.len() != dims.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} entries, dims need {}",
                flat.len(),
                dims.num_params()
            )));
        }
        let mut params = ModelParams::zeros(dims)?;
        let mut offset = 0;
        for layer in params.layers_mut() {
            let wn = layer.w.data().len();
            layer.w.data_mut().copy_from_slice(&flat[offset..offset + wn]);
            offset += wn;
            let bn = layer.b.len();
            layer.b.copy_from_slice(&flat[offset..offset + bn]);
            offset += bn;
        }
        Ok(params)
    }
}

/// One SGD step with classical momentum and L2 weight decay:
/// v <- momentum v + g + weight_decay theta; theta <- theta - lr v.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    velocity: &mut ModelParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "learning rate {lr} must be finite and >= 0"
        )));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidConfig(format!(
            "momentum {momentum} must lie in [0, 1)"
        )));
    }
    if !(weight_decay.is_finite() && weight_decay >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "weight decay {weight_decay} must be finite and >= 0"
        )));
    }
    for ((p, g), v) in params
        .layers_mut()
        .into_iter()
        .zip(grads.layers())
        .zip(velocity.layers_mut())
    {
        for ((pw, &gw), vw) in p
            .w
            .data_mut()
            .iter_mut()
            .zip(g.w.data())
            .zip(v.w.data_mut())
        {
            *vw = momentum * *vw + gw + weight_decay * *pw;
            *pw -= lr * *vw;
        }
        for ((pb, &gb), vb) in p.b.iter_mut().zip(&g.b).zip(v.b.iter_mut()) {
            *vb = momentum * *vb + gb + weight_decay * *pb;
            *pb -= lr * *vb;
        }
    }
    Ok(())
}

/// Momentum tracking of the key branch:
/// theta_k <- m theta_q + (1 - m) theta_k, with m in [0, 1).
///
/// Small m moves the key branch slowly toward the query branch; m = 0
/// freezes it entirely.
pub fn ema_update(params_k: &mut ModelParams, params_q: &ModelParams, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::InvalidConfig(format!(
            "momentum coefficient {m} must lie in [0, 1)"
        )));
    }
    for (k, q) in params_k.layers_mut().into_iter().zip(params_q.layers()) {
        for (kw, &qw) in k.w.data_mut().iter_mut().zip(q.w.data()) {
            *kw = m * qw + (1.0 - m) * *kw;
        }
        for (kb, &qb) in k.b.iter_mut().zip(&q.b) {
            *kb = m * qb + (1.0 - m) * *kb;
        }
    }
    Ok(())
}
