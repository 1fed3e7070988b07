//! Per-pixel encoder, segmentation head and probabilistic projection head.
//!
//! Every pixel sees its 3×3 neighborhood (replicate padding at the grid
//! border), flattened to 27 inputs. The encoder is a two-layer ReLU
//! perceptron; the segmentation head is linear; the projection head has two
//! branches, a mean branch ending in l2 normalization and a variance branch
//! ending in `exp(clamp(·, -10, 10))`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::{kernels, Tape, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::gaussian::DiagonalGaussian;
use crate::synthdata::{LabeledGrid, Rect, CHANNELS};

pub const PATCH: usize = 3;
pub const INPUT_DIM: usize = PATCH * PATCH * CHANNELS;
/// Bound on the variance pre-activation.
pub const LOG_VAR_BOUND: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub hidden: usize,
    pub proj_hidden: usize,
    pub embed_dim: usize,
    pub classes: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        contract!(
            self.hidden >= 1 && self.proj_hidden >= 1 && self.embed_dim >= 1 && self.classes >= 1,
            "model widths must be positive: {self:?}"
        );
        Ok(())
    }

    fn layout(&self) -> [(&'static str, [usize; 2]); PARAM_COUNT] {
        let (i, h, p, e, k) = (INPUT_DIM, self.hidden, self.proj_hidden, self.embed_dim, self.classes);
        [
            ("enc1.w", [i, h]),
            ("enc1.b", [1, h]),
            ("enc2.w", [h, h]),
            ("enc2.b", [1, h]),
            ("seg.w", [h, k]),
            ("seg.b", [1, k]),
            ("mean1.w", [h, p]),
            ("mean1.b", [1, p]),
            ("mean2.w", [p, e]),
            ("mean2.b", [1, e]),
            ("var1.w", [h, p]),
            ("var1.b", [1, p]),
            ("var2.w", [p, e]),
            ("var2.b", [1, e]),
        ]
    }
}

const PARAM_COUNT: usize = 14;
const ENC1: usize = 0;
const ENC2: usize = 2;
const SEG: usize = 4;
const MEAN1: usize = 6;
const MEAN2: usize = 8;
const VAR1: usize = 10;
const VAR2: usize = 12;
/// Tensors from this index on belong to the heads.
pub const FIRST_HEAD_PARAM: usize = SEG;

/// All weights of one network, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    shape: ModelShape,
    tensors: Vec<Tensor>,
}

impl NetworkParams {
    /// He-normal weights for ReLU layers, `1/fan_in` variance for output
    /// layers, zero biases.
    pub fn init<R: Rng + ?Sized>(shape: ModelShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let tensors = shape
            .layout()
            .iter()
            .enumerate()
            .map(|(idx, (_, dims))| {
                if dims[0] == 1 {
                    return Tensor::zeros(dims);
                }
                let gain = if matches!(idx, ENC1 | ENC2 | MEAN1 | VAR1) {
                    2.0
                } else {
                    1.0
                };
                let normal = Normal::new(0.0, (gain / dims[0] as f64).sqrt()).expect("positive std");
                let data = (0..dims[0] * dims[1]).map(|_| normal.sample(rng)).collect();
                Tensor::from_parts(dims.to_vec(), data)
            })
            .collect();
        Ok(Self { shape, tensors })
    }

    pub fn zeros(shape: ModelShape) -> Result<Self> {
        shape.validate()?;
        let tensors = shape.layout().iter().map(|(_, d)| Tensor::zeros(d)).collect();
        Ok(Self { shape, tensors })
    }

    pub fn from_tensors(shape: ModelShape, tensors: Vec<Tensor>) -> Result<Self> {
        shape.validate()?;
        let layout = shape.layout();
        contract!(
            tensors.len() == layout.len(),
            "expected {} parameter tensors, got {}",
            layout.len(),
            tensors.len()
        );
        for ((name, dims), t) in layout.iter().zip(&tensors) {
            contract!(
                t.shape() == dims,
                "{name} has shape {:?}, expected {:?}",
                t.shape(),
                dims
            );
        }
        Ok(Self { shape, tensors })
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.shape.layout().iter().map(|(n, _)| *n).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }
}

/// `beta · teacher + (1 − beta) · student`, elementwise over every tensor.
pub fn ema_teacher(student: &NetworkParams, teacher: &mut NetworkParams, beta: f64) -> Result<()> {
    contract!((0.0..=1.0).contains(&beta), "teacher momentum {beta} outside [0, 1]");
    contract!(
        student.shape == teacher.shape,
        "teacher shape {:?} differs from student {:?}",
        teacher.shape,
        student.shape
    );
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = beta * *tv + (1.0 - beta) * sv;
        }
    }
    Ok(())
}

/// Parameter leaves on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Wraps leaves recorded elsewhere, in [`NetworkParams`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// `n × 27` neighborhood features for the pixels of `rect`, centered on
/// mid-gray.
pub fn patch_features(grid: &LabeledGrid, rect: Rect) -> Vec<f64> {
    let mut out = Vec::with_capacity(rect.area() * INPUT_DIM);
    let clampy = |v: isize| v.clamp(0, grid.height as isize - 1) as usize;
    let clampx = |v: isize| v.clamp(0, grid.width as isize - 1) as usize;
    for y in rect.y..rect.y + rect.h {
        for x in rect.x..rect.x + rect.w {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let px = grid.pixel(clampy(y as isize + dy), clampx(x as isize + dx));
                    out.extend(px.iter().map(|v| v - 0.5));
                }
            }
        }
    }
    out
}

/// Probabilistic pixel embeddings, `n × dim` each.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    /// Unit-norm means.
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// l2 norm of the mean branch before normalization.
    pub raw_norm: Vec<f64>,
}

impl Embeddings {
    pub fn len(&self) -> usize {
        self.raw_norm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_norm.is_empty()
    }

    pub fn gaussian(&self, i: usize) -> Result<DiagonalGaussian> {
        let r = i * self.dim..(i + 1) * self.dim;
        DiagonalGaussian::new(self.mean[r.clone()].to_vec(), self.var[r].to_vec())
    }
}

/// Tape-free network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    /// `n × classes`.
    pub logits: Vec<f64>,
    pub embeddings: Option<Embeddings>,
}

fn check_layer(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "layer `{name}` produced a non-finite activation"
        )))
    }
}

fn dense(p: &NetworkParams, at: usize, x: &[f64], n: usize, relu: bool) -> Result<Vec<f64>> {
    let w = &p.tensors[at];
    let (k, m) = (w.shape()[0], w.shape()[1]);
    let mut y = kernels::matmul(x, n, k, w.data(), m);
    kernels::add_row_bias(&mut y, m, p.tensors[at + 1].data());
    if relu {
        kernels::relu_inplace(&mut y);
    }
    check_layer(p.shape.layout()[at].0, &y)?;
    Ok(y)
}

/// Inference forward pass. Records nothing; used for the teacher and for
/// evaluation.
pub fn forward_plain(p: &NetworkParams, x: &[f64], with_embeddings: bool) -> Result<Outputs> {
    contract!(
        x.len().is_multiple_of(INPUT_DIM),
        "input length {} is not a multiple of {INPUT_DIM}",
        x.len()
    );
    let n = x.len() / INPUT_DIM;
    let h1 = dense(p, ENC1, x, n, true)?;
    let h = dense(p, ENC2, &h1, n, true)?;
    let logits = dense(p, SEG, &h, n, false)?;
    let embeddings = if with_embeddings {
        let e = p.shape.embed_dim;
        let m1 = dense(p, MEAN1, &h, n, true)?;
        let raw = dense(p, MEAN2, &m1, n, false)?;
        let (mean, raw_norm) = kernels::l2_normalize(&raw, n, e, 1);
        let v1 = dense(p, VAR1, &h, n, true)?;
        let pre = dense(p, VAR2, &v1, n, false)?;
        let var: Vec<f64> = pre
            .iter()
            .map(|v| v.clamp(-LOG_VAR_BOUND, LOG_VAR_BOUND).exp())
            .collect();
        Some(Embeddings {
            dim: e,
            mean,
            var,
            raw_norm,
        })
    } else {
        None
    };
    Ok(Outputs { logits, embeddings })
}

/// Differentiable outputs of [`forward_tape`].
#[derive(Debug, Clone, Copy)]
pub struct TapeOutputs {
    pub logits: Var,
    /// `(mean, var)`, present when embeddings were requested.
    pub embeddings: Option<(Var, Var)>,
}

fn dense_tape(tape: &mut Tape, b: &BoundParams, at: usize, x: Var, relu: bool) -> Result<Var> {
    let y = tape.affine(x, b.vars[at], b.vars[at + 1])?;
    if relu {
        tape.relu(y)
    } else {
        Ok(y)
    }
}

/// Training forward pass on a tape.
pub fn forward_tape(tape: &mut Tape, b: &BoundParams, x: Tensor, with_embeddings: bool) -> Result<TapeOutputs> {
    let (_, cols) = x.dims2()?;
    contract!(cols == INPUT_DIM, "input has {cols} columns, expected {INPUT_DIM}");
    let x = tape.constant(x);
    let h1 = dense_tape(tape, b, ENC1, x, true)?;
    let h = dense_tape(tape, b, ENC2, h1, true)?;
    let logits = dense_tape(tape, b, SEG, h, false)?;
    let embeddings = if with_embeddings {
        let m1 = dense_tape(tape, b, MEAN1, h, true)?;
        let raw = dense_tape(tape, b, MEAN2, m1, false)?;
        let mean = tape.l2_normalize(raw, 1)?;
        let v1 = dense_tape(tape, b, VAR1, h, true)?;
        let pre = dense_tape(tape, b, VAR2, v1, false)?;
        let clamped = tape.clamp(pre, -LOG_VAR_BOUND, LOG_VAR_BOUND)?;
        Some((mean, tape.exp(clamped)?))
    } else {
        None
    };
    Ok(TapeOutputs { logits, embeddings })
}

/// Wraps row-major features as an `n × 27` tensor.
pub fn input_tensor(features: Vec<f64>) -> Result<Tensor> {
    let n = features.len() / INPUT_DIM;
    Tensor::new(vec![n, INPUT_DIM], features)
}
