use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::TrainConfig;
use crate::error::{Error, Result};

/// U-Net shape: per-level widths plus input and output channel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub classes: usize,
    pub widths: Vec<usize>,
}

impl Architecture {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            in_channels: cfg.in_channels,
            classes: cfg.k_tot(),
            widths: cfg.widths.clone(),
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Spatial dimensions must be multiples of this.
    pub fn stride(&self) -> usize {
        1 << (self.levels() - 1)
    }

    /// `(name, shape)` of every tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut block = |prefix: String, cin: usize, w: usize| {
            out.push((format!("{prefix}.conv1.weight"), vec![w, cin, 3, 3]));
            out.push((format!("{prefix}.norm1.gamma"), vec![w]));
            out.push((format!("{prefix}.norm1.beta"), vec![w]));
            out.push((format!("{prefix}.conv2.weight"), vec![w, w, 3, 3]));
            out.push((format!("{prefix}.norm2.gamma"), vec![w]));
            out.push((format!("{prefix}.norm2.beta"), vec![w]));
        };
        let mut cin = self.in_channels;
        for (i, &w) in self.widths.iter().enumerate() {
            block(format!("enc{i}"), cin, w);
            cin = w;
        }
        for i in (0..self.levels() - 1).rev() {
            block(format!("dec{i}"), self.widths[i + 1] + self.widths[i], self.widths[i]);
        }
        let w0 = self.widths[0];
        out.push(("head.seg.weight".into(), vec![self.classes, w0]));
        out.push(("head.seg.bias".into(), vec![self.classes]));
        out.push(("head.rec.weight".into(), vec![self.in_channels, w0]));
        out.push(("head.rec.bias".into(), vec![self.in_channels]));
        out
    }

    pub(crate) fn enc_block(&self, level: usize) -> usize {
        6 * level
    }

    pub(crate) fn dec_block(&self, level: usize) -> usize {
        // decoder blocks are stored deepest first
        6 * self.levels() + 6 * (self.levels() - 2 - level)
    }

    pub(crate) fn head_base(&self) -> usize {
        6 * self.levels() + 6 * (self.levels() - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named parameter set of one network (trunk and both heads).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    arch: Architecture,
    tensors: Vec<ParamTensor>,
}

impl NetworkParams {
    /// He-normal convolution weights, unit norm scales, zero shifts.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let data = if name.ends_with(".gamma") {
                    vec![1.0; len]
                } else if name.ends_with(".beta") || name.ends_with(".bias") {
                    vec![0.0; len]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = if name.starts_with("head") { 1.0 } else { 2.0 };
                    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).unwrap();
                    (0..len).map(|_| normal.sample(rng) as f32).collect()
                };
                ParamTensor { name, shape, data }
            })
            .collect();
        Self {
            arch: arch.clone(),
            tensors,
        }
    }

    /// Rebuilds a parameter set from stored tensors, checking names and shapes
    /// against the architecture.
    pub fn from_tensors(arch: &Architecture, tensors: Vec<ParamTensor>) -> Result<Self> {
        let layout = arch.layout();
        if layout.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if name != &t.name || shape != &t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {name} {shape:?}",
                    t.name, t.shape
                )));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!("tensor {} has wrong length", t.name)));
            }
        }
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub(crate) fn t(&self, i: usize) -> &[f32] {
        &self.tensors[i].data
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads(self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect())
    }

    fn check_compatible(&self, other: &NetworkParams) -> Result<()> {
        if self.tensors.len() != other.tensors.len()
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|(a, b)| a.name != b.name || a.shape != b.shape)
        {
            return Err(Error::Shape("parameter sets differ in names or shapes".into()));
        }
        Ok(())
    }

    /// Largest elementwise absolute difference to `other`.
    pub fn max_abs_diff(&self, other: &NetworkParams) -> Result<f32> {
        self.check_compatible(other)?;
        Ok(self
            .tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f32::max))
    }
}

/// Gradient buffers aligned with [`NetworkParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f32>>);

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().flatten().all(|&v| v == 0.0)
    }

    pub fn dot(&self, other: &Grads) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    }
}

/// `teacher <- lambda * teacher + (1 - lambda) * student`, every tensor.
pub fn ema_update(teacher: &mut NetworkParams, student: &NetworkParams, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidValue(format!("ema lambda {lambda} outside [0, 1]")));
    }
    teacher.check_compatible(student)?;
    // s + lambda * (t - s) in f64: t - s is exact, so lambda = 0 and
    // lambda = 1 reproduce the student and the teacher bit-for-bit.
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (tv, sv) in t.data.iter_mut().zip(&s.data) {
            let (tf, sf) = (*tv as f64, *sv as f64);
            *tv = (sf + lambda * (tf - sf)) as f32;
        }
    }
    Ok(())
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- mu * v + (g + wd * theta)`, `theta <- theta - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub velocity: Grads,
}

impl Sgd {
    pub fn new(params: &NetworkParams, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr: lr as f32,
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &Grads) {
        for ((t, g), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.0)
            .zip(self.velocity.0.iter_mut())
        {
            for ((p, gi), vi) in t.data.iter_mut().zip(g).zip(v.iter_mut()) {
                let d = gi + self.weight_decay * *p;
                *vi = self.momentum * *vi + d;
                *p -= self.lr * *vi;
            }
        }
    }
}
