//! Small MLP encoders with hand-written backpropagation, the online/target
//! pair and the SGD optimizer.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{CmsfError, Result};
use crate::numeric::{Matrix, SeededRng};

/// Affine layer `y = W x + b` with `W` of shape `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(CmsfError::DimMismatch { expected: weight.rows(), got: bias.len() });
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// ReLU between layers, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

/// Activations recorded by a forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    /// Input to every layer (post-ReLU output of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every hidden layer.
    hidden_pre: Vec<Vec<f64>>,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(CmsfError::ShapeMismatch("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(CmsfError::ShapeMismatch(format!(
                    "layer output {} does not feed layer input {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// He-scaled Gaussian weights (`std = sqrt(2 / fan_in)`) and zero biases.
    /// `dims` lists the widths from input to output.
    pub fn init(dims: &[usize], rng: &mut SeededRng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(CmsfError::BadConfig(format!("invalid MLP widths {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| std * rng.gaussian()).collect();
                Layer::new(Matrix::from_vec(fan_out, fan_in, data)?, vec![0.0; fan_out])
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer { weight: Matrix::zeros(l.out_dim(), l.in_dim()), bias: vec![0.0; l.out_dim()] })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Layer widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(Layer::out_dim)).collect()
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.weight.shape() == b.weight.shape())
    }

    fn check_shape(&self, other: &MlpParams) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(CmsfError::ShapeMismatch(format!("{:?} vs {:?}", self.dims(), other.dims())))
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(CmsfError::DimMismatch { expected: self.num_params(), got: flat.len() });
        }
        let mut rest = flat;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weight.as_slice().len());
            l.weight.as_mut_slice().copy_from_slice(w);
            let (b, tail) = tail.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &MlpParams, scale: f64) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.as_slice().iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if x.len() != self.input_dim() {
            return Err(CmsfError::DimMismatch { expected: self.input_dim(), got: x.len() });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut hidden_pre = Vec::with_capacity(last);
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weight.matvec(&h);
            for (zi, bi) in z.iter_mut().zip(&layer.bias) {
                *zi += bi;
            }
            inputs.push(h);
            if i < last {
                h = z.iter().map(|&v| v.max(0.0)).collect();
                hidden_pre.push(z);
            } else {
                h = z;
            }
        }
        Ok((h, Tape { inputs, hidden_pre }))
    }

    /// Output only.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// Gradients of `output · grad_out` with respect to every parameter and
    /// the input.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64]) -> Result<(MlpParams, Vec<f64>)> {
        if tape.inputs.len() != self.layers.len() {
            return Err(CmsfError::ShapeMismatch("tape recorded by a different network".into()));
        }
        if grad_out.len() != self.output_dim() {
            return Err(CmsfError::DimMismatch { expected: self.output_dim(), got: grad_out.len() });
        }
        let mut grads = self.zeros_like();
        let mut g = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let gl = &mut grads.layers[i];
            gl.weight.add_outer(&g, &tape.inputs[i], 1.0);
            gl.bias.copy_from_slice(&g);
            let mut g_in = layer.weight.matvec_t(&g);
            if i > 0 {
                for (gi, &z) in g_in.iter_mut().zip(&tape.hidden_pre[i - 1]) {
                    if z <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            g = g_in;
        }
        Ok((grads, g))
    }
}

/// Widths of the encoder trunk and predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
    pub predictor_hidden: usize,
}

impl EncoderShape {
    /// `input → 64 → 32` trunk with a `32 → 64 → 32` predictor.
    pub fn desk(input: usize) -> Self {
        Self { input, hidden: 64, embed: 32, predictor_hidden: 64 }
    }

    pub fn trunk_dims(&self) -> Vec<usize> {
        vec![self.input, self.hidden, self.embed]
    }

    pub fn predictor_dims(&self) -> Vec<usize> {
        vec![self.embed, self.predictor_hidden, self.embed]
    }
}

/// Target encoder `f`, online encoder `g` and predictor `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPair {
    pub target: MlpParams,
    pub online: MlpParams,
    pub predictor: MlpParams,
    pub momentum: f64,
}

impl EncoderPair {
    /// Online and predictor drawn from `rng` (online first); the target starts
    /// as an exact copy of the online encoder.
    pub fn init(shape: &EncoderShape, momentum: f64, rng: &mut SeededRng) -> Result<Self> {
        let online = MlpParams::init(&shape.trunk_dims(), rng)?;
        let predictor = MlpParams::init(&shape.predictor_dims(), rng)?;
        Self::from_parts(online.clone(), online, predictor, momentum)
    }

    pub fn from_parts(target: MlpParams, online: MlpParams, predictor: MlpParams, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(CmsfError::BadConfig(format!("EMA momentum {momentum} outside [0, 1]")));
        }
        target.check_shape(&online)?;
        if predictor.input_dim() != online.output_dim() || predictor.output_dim() != online.output_dim() {
            return Err(CmsfError::ShapeMismatch("predictor must map the embedding space to itself".into()));
        }
        Ok(Self { target, online, predictor, momentum })
    }

    /// `θ_f ← m·θ_f + (1 − m)·θ_g`.
    pub fn momentum_update(&mut self) -> Result<()> {
        self.target.check_shape(&self.online)?;
        let m = self.momentum;
        for (t, o) in self.target.layers.iter_mut().zip(&self.online.layers) {
            for (a, b) in t.weight.as_mut_slice().iter_mut().zip(o.weight.as_slice()) {
                *a = m * *a + (1.0 - m) * b;
            }
            for (a, b) in t.bias.iter_mut().zip(&o.bias) {
                *a = m * *a + (1.0 - m) * b;
            }
        }
        Ok(())
    }
}

/// `base_lr · ½ · (1 + cos(π · step / total_steps))`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(CmsfError::BadStep { step, total: total_steps });
    }
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Cosine,
    Constant,
    /// Multiply by `factor` from `at_step` on.
    Step { at_step: u64, factor: f64 },
}

/// SGD with heavy-ball momentum; weight decay is added to the gradient of
/// weight matrices (biases are not decayed).
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<MlpParams>,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub total_steps: u64,
    pub schedule: LrSchedule,
}

impl SgdState {
    pub fn new(params: &[&MlpParams], base_lr: f64, momentum: f64, weight_decay: f64, total_steps: u64, schedule: LrSchedule) -> Self {
        Self {
            velocity: params.iter().map(|p| p.zeros_like()).collect(),
            base_lr,
            momentum,
            weight_decay,
            step: 0,
            total_steps,
            schedule,
        }
    }

    pub fn current_lr(&self) -> Result<f64> {
        match self.schedule {
            LrSchedule::Cosine => cosine_lr(self.step, self.total_steps, self.base_lr),
            LrSchedule::Constant => Ok(self.base_lr),
            LrSchedule::Step { at_step, factor } => Ok(if self.step >= at_step { self.base_lr * factor } else { self.base_lr }),
        }
    }

    /// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`, then advances the step counter.
    /// Returns the learning rate that was applied.
    pub fn step(&mut self, params: &mut [&mut MlpParams], grads: &[&MlpParams]) -> Result<f64> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(CmsfError::ShapeMismatch(format!(
                "optimizer tracks {} networks, got {} params and {} grads",
                self.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            p.check_shape(g)?;
            p.check_shape(v)?;
        }
        let lr = self.current_lr()?;
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pl, gl), vl) in p.layers.iter_mut().zip(&g.layers).zip(&mut v.layers) {
                let (pw, gw, vw) = (pl.weight.as_mut_slice(), gl.weight.as_slice(), vl.weight.as_mut_slice());
                for ((pi, gi), vi) in pw.iter_mut().zip(gw).zip(vw.iter_mut()) {
                    *vi = mu * *vi + (gi + wd * *pi);
                    *pi -= lr * *vi;
                }
                for ((pi, gi), vi) in pl.bias.iter_mut().zip(&gl.bias).zip(vl.bias.iter_mut()) {
                    *vi = mu * *vi + gi;
                    *pi -= lr * *vi;
                }
            }
        }
        self.step += 1;
        Ok(lr)
    }
}
