//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] owns the computation graph for one forward pass. Values
//! enter as attached leaves ([`Tape::input`]) or detached constants
//! ([`Tape::constant`]); every operation appends a record, and
//! [`Tape::backward`] walks the records once in reverse, accumulating
//! gradients. Detached nodes join the forward computation but never
//! receive gradient. Calling `backward` twice without resetting doubles
//! every gradient (accumulation semantics).
//!
//! The operation set is exactly what the network and the losses need:
//! element-wise arithmetic, scalar scaling, sum/mean reductions, sqrt,
//! exp, guarded log, reciprocal, relu, sigmoid, 3x3x3 convolution,
//! 2x2x2 max pooling, nearest-neighbor upsampling, feature concatenation
//! and per-sample L2 normalization, plus an escape hatch for fused
//! operations carrying their own backward rule.

mod kernels;

pub mod check;

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::volume::{Volume, VolumeError};

pub(crate) use kernels::ConvDims;

/// Inputs below this threshold are treated as constant by the guarded
/// logarithm, so degenerate values cannot produce -inf.
pub const LOG_GUARD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GradError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("node belongs to a different tape")]
    CrossTape,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NumericalFailure { op: &'static str },
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node {
    index: usize,
    tape: u64,
}

/// Backward rule for a fused operation recorded via [`Tape::custom`].
///
/// Implementations cache whatever forward intermediates they need and
/// return one gradient volume per recorded input.
pub trait CustomVjp {
    fn name(&self) -> &'static str;
    fn backward(&self, grad_out: &Volume) -> Vec<Volume>;
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    SumAll(usize),
    SumPerSample(usize),
    MeanAll(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Recip(usize),
    Relu(usize),
    Sigmoid(usize),
    Reshape(usize),
    ConcatFeatures(usize, usize),
    Upsample3d(usize),
    MaxPool3d { input: usize, argmax: Vec<usize> },
    Conv3d { input: usize, kernel: usize, bias: usize },
    L2NormalizePerSample { input: usize, norms: Vec<f64>, epsilon: f64 },
    Custom { inputs: Vec<usize>, vjp: Box<dyn CustomVjp> },
}

struct Record {
    value: Volume,
    grad: Volume,
    op: Op,
    detached: bool,
}

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Single-threaded recording of one differentiable computation.
pub struct Tape {
    id: u64,
    records: RefCell<Vec<Record>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            records: RefCell::new(Vec::new()),
        }
    }

    /// Attached leaf: participates in backward.
    pub fn input(&self, value: Volume) -> Node {
        self.push(value, Op::Leaf, false)
    }

    /// Detached leaf: joins forward computation, receives no gradient.
    pub fn constant(&self, value: Volume) -> Node {
        self.push(value, Op::Leaf, true)
    }

    pub fn num_nodes(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn value(&self, node: Node) -> Result<Volume, GradError> {
        self.check(node)?;
        Ok(self.records.borrow()[node.index].value.clone())
    }

    pub fn value_scalar(&self, node: Node) -> Result<f64, GradError> {
        let v = self.value(node)?;
        v.as_scalar().ok_or(GradError::NonScalarLoss {
            shape: v.shape().to_vec(),
        })
    }

    pub fn grad(&self, node: Node) -> Result<Volume, GradError> {
        self.check(node)?;
        Ok(self.records.borrow()[node.index].grad.clone())
    }

    pub fn shape(&self, node: Node) -> Result<Vec<usize>, GradError> {
        self.check(node)?;
        Ok(self.records.borrow()[node.index].value.shape().to_vec())
    }

    pub fn is_detached(&self, node: Node) -> Result<bool, GradError> {
        self.check(node)?;
        Ok(self.records.borrow()[node.index].detached)
    }

    fn check(&self, node: Node) -> Result<(), GradError> {
        if node.tape != self.id || node.index >= self.records.borrow().len() {
            return Err(GradError::CrossTape);
        }
        Ok(())
    }

    fn push(&self, value: Volume, op: Op, detached: bool) -> Node {
        let grad = Volume::zeros(value.shape());
        let mut records = self.records.borrow_mut();
        records.push(Record {
            value,
            grad,
            op,
            detached,
        });
        Node {
            index: records.len() - 1,
            tape: self.id,
        }
    }

    fn finite(op: &'static str, r: Result<Volume, VolumeError>) -> Result<Volume, GradError> {
        r.map_err(|e| match e {
            VolumeError::NonFinite { .. } => GradError::NumericalFailure { op },
            other => GradError::Volume(other),
        })
    }

    fn unary(
        &self,
        op_name: &'static str,
        node: Node,
        f: impl Fn(&Volume) -> Result<Volume, VolumeError>,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Node, GradError> {
        self.check(node)?;
        let value = {
            let records = self.records.borrow();
            Self::finite(op_name, f(&records[node.index].value))?
        };
        Ok(self.push(value, op(node.index), false))
    }

    pub fn add(&self, a: Node, b: Node) -> Result<Node, GradError> {
        self.binary("add", a, b, |x, y| x.add(y), Op::Add)
    }

    pub fn sub(&self, a: Node, b: Node) -> Result<Node, GradError> {
        self.binary("sub", a, b, |x, y| x.sub(y), Op::Sub)
    }

    pub fn mul(&self, a: Node, b: Node) -> Result<Node, GradError> {
        self.binary("mul", a, b, |x, y| x.mul(y), Op::Mul)
    }

    fn binary(
        &self,
        op_name: &'static str,
        a: Node,
        b: Node,
        f: impl Fn(&Volume, &Volume) -> Result<Volume, VolumeError>,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Node, GradError> {
        self.check(a)?;
        self.check(b)?;
        let value = {
            let records = self.records.borrow();
            Self::finite(op_name, f(&records[a.index].value, &records[b.index].value))?
        };
        Ok(self.push(value, op(a.index, b.index), false))
    }

    pub fn scalar_mul(&self, node: Node, factor: f64) -> Result<Node, GradError> {
        if !factor.is_finite() {
            return Err(GradError::NumericalFailure { op: "scalar_mul" });
        }
        self.unary("scalar_mul", node, |v| v.scale(factor), |i| {
            Op::ScalarMul(i, factor)
        })
    }

    /// Adds a detached scalar constant to a scalar node.
    pub fn add_scalar(&self, node: Node, value: f64) -> Result<Node, GradError> {
        let c = self.constant(Self::finite("add_scalar", Volume::new(vec![], vec![value]))?);
        self.add(node, c)
    }

    pub fn sum_all(&self, node: Node) -> Result<Node, GradError> {
        self.unary(
            "sum_all",
            node,
            |v| Volume::new(Vec::new(), vec![v.sum_all()]),
            Op::SumAll,
        )
    }

    /// Sums every axis except the first, yielding one value per sample.
    pub fn sum_per_sample(&self, node: Node) -> Result<Node, GradError> {
        let shape = self.shape(node)?;
        if shape.len() < 2 {
            return Err(GradError::InvalidShape {
                op: "sum_per_sample",
                detail: format!("needs rank >= 2, got {shape:?}"),
            });
        }
        let axes: Vec<usize> = (1..shape.len()).collect();
        self.unary("sum_per_sample", node, |v| v.reduce_sum(&axes), Op::SumPerSample)
    }

    pub fn mean_all(&self, node: Node) -> Result<Node, GradError> {
        self.unary(
            "mean_all",
            node,
            |v| Volume::new(Vec::new(), vec![v.sum_all() / v.len() as f64]),
            Op::MeanAll,
        )
    }

    pub fn sqrt(&self, node: Node) -> Result<Node, GradError> {
        self.unary("sqrt", node, |v| v.map(f64::sqrt), Op::Sqrt)
    }

    pub fn exp(&self, node: Node) -> Result<Node, GradError> {
        self.unary("exp", node, |v| v.map(f64::exp), Op::Exp)
    }

    /// Guarded logarithm: `ln(max(x, LOG_GUARD))`.
    pub fn log(&self, node: Node) -> Result<Node, GradError> {
        self.unary("log", node, |v| v.map(|x| x.max(LOG_GUARD).ln()), Op::Log)
    }

    pub fn recip(&self, node: Node) -> Result<Node, GradError> {
        self.unary("recip", node, |v| v.map(f64::recip), Op::Recip)
    }

    pub fn relu(&self, node: Node) -> Result<Node, GradError> {
        self.unary("relu", node, |v| v.map(|x| x.max(0.0)), Op::Relu)
    }

    pub fn sigmoid(&self, node: Node) -> Result<Node, GradError> {
        self.unary("sigmoid", node, |v| v.map(stable_sigmoid), Op::Sigmoid)
    }

    pub fn reshape(&self, node: Node, shape: &[usize]) -> Result<Node, GradError> {
        self.unary("reshape", node, |v| v.reshape(shape), Op::Reshape)
    }

    /// Concatenates along the last (feature) axis; all leading extents
    /// must match.
    pub fn concat_features(&self, a: Node, b: Node) -> Result<Node, GradError> {
        let sa = self.shape(a)?;
        let sb = self.shape(b)?;
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(GradError::InvalidShape {
                op: "concat_features",
                detail: format!("incompatible shapes {sa:?} vs {sb:?}"),
            });
        }
        let ca = sa[sa.len() - 1];
        let cb = sb[sb.len() - 1];
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = ca + cb;
        let value = {
            let records = self.records.borrow();
            let va = &records[a.index].value;
            let vb = &records[b.index].value;
            let rows = va.len() / ca;
            let mut data = Vec::with_capacity(rows * (ca + cb));
            for r in 0..rows {
                data.extend_from_slice(&va.data()[r * ca..(r + 1) * ca]);
                data.extend_from_slice(&vb.data()[r * cb..(r + 1) * cb]);
            }
            Self::finite("concat_features", Volume::new(out_shape, data))?
        };
        Ok(self.push(value, Op::ConcatFeatures(a.index, b.index), false))
    }

    /// Nearest-neighbor 2x spatial upsampling of an `(n, d, h, w, c)` volume.
    pub fn upsample3d(&self, node: Node) -> Result<Node, GradError> {
        let [n, d, h, w, c] = self.dims5("upsample3d", node)?;
        let value = {
            let records = self.records.borrow();
            let data = kernels::upsample3d_forward(records[node.index].value.data(), n, d, h, w, c);
            Self::finite(
                "upsample3d",
                Volume::new(vec![n, d * 2, h * 2, w * 2, c], data),
            )?
        };
        Ok(self.push(value, Op::Upsample3d(node.index), false))
    }

    /// 2x2x2 max pooling of an `(n, d, h, w, c)` volume with even spatial
    /// extents.
    pub fn maxpool3d(&self, node: Node) -> Result<Node, GradError> {
        let [n, d, h, w, c] = self.dims5("maxpool3d", node)?;
        if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
            return Err(GradError::InvalidShape {
                op: "maxpool3d",
                detail: format!("spatial extents must be even, got ({d}, {h}, {w})"),
            });
        }
        let (value, argmax) = {
            let records = self.records.borrow();
            let (data, argmax) =
                kernels::maxpool3d_forward(records[node.index].value.data(), n, d, h, w, c);
            (
                Self::finite(
                    "maxpool3d",
                    Volume::new(vec![n, d / 2, h / 2, w / 2, c], data),
                )?,
                argmax,
            )
        };
        Ok(self.push(
            value,
            Op::MaxPool3d {
                input: node.index,
                argmax,
            },
            false,
        ))
    }

    /// 3x3x3 convolution, stride 1, zero padding 1. Input `(n, d, h, w, ci)`,
    /// kernel `(3, 3, 3, ci, co)`, bias `(co)`.
    pub fn conv3d(&self, input: Node, kernel: Node, bias: Node) -> Result<Node, GradError> {
        let [n, d, h, w, ci] = self.dims5("conv3d", input)?;
        let ks = self.shape(kernel)?;
        let bs = self.shape(bias)?;
        if ks.len() != 5 || ks[0] != 3 || ks[1] != 3 || ks[2] != 3 || ks[3] != ci {
            return Err(GradError::InvalidShape {
                op: "conv3d",
                detail: format!("kernel {ks:?} incompatible with {ci} input channels"),
            });
        }
        let co = ks[4];
        if bs != [co] {
            return Err(GradError::InvalidShape {
                op: "conv3d",
                detail: format!("bias {bs:?} must be [{co}]"),
            });
        }
        let dims = ConvDims { n, d, h, w, ci, co };
        let value = {
            let records = self.records.borrow();
            let data = kernels::conv3d_forward(
                records[input.index].value.data(),
                records[kernel.index].value.data(),
                records[bias.index].value.data(),
                &dims,
            );
            Self::finite("conv3d", Volume::new(vec![n, d, h, w, co], data))?
        };
        Ok(self.push(
            value,
            Op::Conv3d {
                input: input.index,
                kernel: kernel.index,
                bias: bias.index,
            },
            false,
        ))
    }

    /// Scales each sample block (all axes after the first) to unit L2 norm;
    /// blocks with norm below `epsilon` are scaled by `1/epsilon` instead,
    /// so zero stays zero.
    pub fn l2_normalize_per_sample(&self, node: Node, epsilon: f64) -> Result<Node, GradError> {
        let shape = self.shape(node)?;
        if shape.len() < 2 {
            return Err(GradError::InvalidShape {
                op: "l2_normalize",
                detail: format!("needs rank >= 2, got {shape:?}"),
            });
        }
        if !(epsilon > 0.0) {
            return Err(GradError::InvalidShape {
                op: "l2_normalize",
                detail: format!("epsilon must be positive, got {epsilon}"),
            });
        }
        let (value, norms) = {
            let records = self.records.borrow();
            let (data, norms) =
                normalize_blocks(records[node.index].value.data(), shape[0], epsilon);
            (
                Self::finite("l2_normalize", Volume::new(shape.clone(), data))?,
                norms,
            )
        };
        Ok(self.push(
            value,
            Op::L2NormalizePerSample {
                input: node.index,
                norms,
                epsilon,
            },
            false,
        ))
    }

    /// Records a fused operation whose backward rule lives in `vjp`.
    pub fn custom(
        &self,
        inputs: &[Node],
        value: Volume,
        vjp: Box<dyn CustomVjp>,
    ) -> Result<Node, GradError> {
        for &node in inputs {
            self.check(node)?;
        }
        if let Some(index) = value.data().iter().position(|v| !v.is_finite()) {
            let _ = index;
            return Err(GradError::NumericalFailure { op: vjp.name() });
        }
        Ok(self.push(
            value,
            Op::Custom {
                inputs: inputs.iter().map(|n| n.index).collect(),
                vjp,
            },
            false,
        ))
    }

    fn dims5(&self, op: &'static str, node: Node) -> Result<[usize; 5], GradError> {
        let shape = self.shape(node)?;
        if shape.len() != 5 {
            return Err(GradError::InvalidShape {
                op,
                detail: format!("needs rank 5, got {shape:?}"),
            });
        }
        Ok([shape[0], shape[1], shape[2], shape[3], shape[4]])
    }

    /// Propagates d(loss)/d(node) into every non-detached ancestor's grad.
    /// Gradients accumulate across calls.
    pub fn backward(&self, loss: Node) -> Result<(), GradError> {
        self.check(loss)?;
        let mut finished: Vec<(usize, Volume)> = Vec::new();
        {
            let records = self.records.borrow();
            let loss_rec = &records[loss.index];
            if loss_rec.value.len() != 1 {
                return Err(GradError::NonScalarLoss {
                    shape: loss_rec.value.shape().to_vec(),
                });
            }
            let mut adjoints: Vec<Option<Volume>> = Vec::new();
            adjoints.resize_with(records.len(), || None);
            adjoints[loss.index] = Some(Volume::filled(loss_rec.value.shape(), 1.0));
            for i in (0..=loss.index).rev() {
                let Some(g) = adjoints[i].take() else { continue };
                propagate(&records, i, &g, &mut adjoints)?;
                finished.push((i, g));
            }
        }
        let mut records = self.records.borrow_mut();
        for (i, g) in finished {
            let rec = &mut records[i];
            if rec.detached {
                continue;
            }
            rec.grad = Tape::finite("backward", rec.grad.add(&g))?;
        }
        Ok(())
    }
}

fn accumulate(
    records: &[Record],
    adjoints: &mut [Option<Volume>],
    target: usize,
    g: Volume,
) -> Result<(), GradError> {
    if records[target].detached {
        return Ok(());
    }
    match &mut adjoints[target] {
        Some(existing) => {
            *existing = Tape::finite("backward", existing.add(&g))?;
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

fn propagate(
    records: &[Record],
    index: usize,
    g: &Volume,
    adjoints: &mut [Option<Volume>],
) -> Result<(), GradError> {
    let rec = &records[index];
    let val = |i: usize| &records[i].value;
    match &rec.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(records, adjoints, *a, g.clone())?;
            accumulate(records, adjoints, *b, g.clone())?;
        }
        Op::Sub(a, b) => {
            accumulate(records, adjoints, *a, g.clone())?;
            accumulate(records, adjoints, *b, g.scale(-1.0)?)?;
        }
        Op::Mul(a, b) => {
            accumulate(records, adjoints, *a, g.mul(val(*b))?)?;
            accumulate(records, adjoints, *b, g.mul(val(*a))?)?;
        }
        Op::ScalarMul(a, c) => {
            accumulate(records, adjoints, *a, g.scale(*c)?)?;
        }
        Op::SumAll(a) => {
            let gv = g.as_scalar().expect("sum_all output is scalar");
            accumulate(records, adjoints, *a, Volume::filled(val(*a).shape(), gv))?;
        }
        Op::SumPerSample(a) => {
            let input = val(*a);
            let block = input.len() / input.shape()[0];
            let mut data = Vec::with_capacity(input.len());
            for &gv in g.data() {
                data.extend(std::iter::repeat(gv).take(block));
            }
            accumulate(
                records,
                adjoints,
                *a,
                Volume::new(input.shape().to_vec(), data)?,
            )?;
        }
        Op::MeanAll(a) => {
            let gv = g.as_scalar().expect("mean_all output is scalar") / val(*a).len() as f64;
            accumulate(records, adjoints, *a, Volume::filled(val(*a).shape(), gv))?;
        }
        Op::Sqrt(a) => {
            let gx = zip_map(g, &rec.value, |gv, y| gv * 0.5 / y)?;
            accumulate(records, adjoints, *a, gx)?;
        }
        Op::Exp(a) => {
            accumulate(records, adjoints, *a, g.mul(&rec.value)?)?;
        }
        Op::Log(a) => {
            let gx = zip_map(g, val(*a), |gv, x| if x > LOG_GUARD { gv / x } else { 0.0 })?;
            accumulate(records, adjoints, *a, gx)?;
        }
        Op::Recip(a) => {
            let gx = zip_map(g, &rec.value, |gv, y| -gv * y * y)?;
            accumulate(records, adjoints, *a, gx)?;
        }
        Op::Relu(a) => {
            let gx = zip_map(g, val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
            accumulate(records, adjoints, *a, gx)?;
        }
        Op::Sigmoid(a) => {
            let gx = zip_map(g, &rec.value, |gv, y| gv * y * (1.0 - y))?;
            accumulate(records, adjoints, *a, gx)?;
        }
        Op::Reshape(a) => {
            accumulate(records, adjoints, *a, g.reshape(val(*a).shape())?)?;
        }
        Op::ConcatFeatures(a, b) => {
            let ca = *val(*a).shape().last().unwrap();
            let cb = *val(*b).shape().last().unwrap();
            let rows = g.len() / (ca + cb);
            let mut ga = Vec::with_capacity(rows * ca);
            let mut gb = Vec::with_capacity(rows * cb);
            for row in g.data().chunks_exact(ca + cb) {
                ga.extend_from_slice(&row[..ca]);
                gb.extend_from_slice(&row[ca..]);
            }
            accumulate(records, adjoints, *a, Volume::new(val(*a).shape().to_vec(), ga)?)?;
            accumulate(records, adjoints, *b, Volume::new(val(*b).shape().to_vec(), gb)?)?;
        }
        Op::Upsample3d(a) => {
            let s = val(*a).shape();
            let gx = kernels::upsample3d_backward(g.data(), s[0], s[1], s[2], s[3], s[4]);
            accumulate(records, adjoints, *a, Volume::new(s.to_vec(), gx)?)?;
        }
        Op::MaxPool3d { input, argmax } => {
            let gx = kernels::maxpool3d_backward(g.data(), argmax, val(*input).len());
            accumulate(
                records,
                adjoints,
                *input,
                Volume::new(val(*input).shape().to_vec(), gx)?,
            )?;
        }
        Op::Conv3d {
            input,
            kernel,
            bias,
        } => {
            let s = val(*input).shape();
            let ks = val(*kernel).shape();
            let dims = ConvDims {
                n: s[0],
                d: s[1],
                h: s[2],
                w: s[3],
                ci: s[4],
                co: ks[4],
            };
            let (gx, gk, gb) =
                kernels::conv3d_backward(val(*input).data(), val(*kernel).data(), g.data(), &dims);
            accumulate(records, adjoints, *input, Volume::new(s.to_vec(), gx)?)?;
            accumulate(records, adjoints, *kernel, Volume::new(ks.to_vec(), gk)?)?;
            accumulate(records, adjoints, *bias, Volume::new(vec![dims.co], gb)?)?;
        }
        Op::L2NormalizePerSample {
            input,
            norms,
            epsilon,
        } => {
            let x = val(*input);
            let y = &rec.value;
            let block = x.len() / x.shape()[0];
            let mut gx = vec![0.0; x.len()];
            for (s, &norm) in norms.iter().enumerate() {
                let range = s * block..(s + 1) * block;
                let gs = &g.data()[range.clone()];
                let ys = &y.data()[range.clone()];
                let out = &mut gx[range];
                if norm > *epsilon {
                    let dot: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &yv) in out.iter_mut().zip(gs).zip(ys) {
                        *o = (gv - dot * yv) / norm;
                    }
                } else {
                    for (o, &gv) in out.iter_mut().zip(gs) {
                        *o = gv / *epsilon;
                    }
                }
            }
            accumulate(records, adjoints, *input, Volume::new(x.shape().to_vec(), gx)?)?;
        }
        Op::Custom { inputs, vjp } => {
            let grads = vjp.backward(g);
            debug_assert_eq!(grads.len(), inputs.len());
            for (&target, gx) in inputs.iter().zip(grads) {
                accumulate(records, adjoints, target, gx)?;
            }
        }
    }
    Ok(())
}

fn zip_map(
    a: &Volume,
    b: &Volume,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Volume, VolumeError> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Volume::new(a.shape().to_vec(), data)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-sample L2 normalization used for both tape nodes and plain
/// volumes; returns the scaled data and each sample's raw norm.
pub(crate) fn normalize_blocks(data: &[f64], samples: usize, epsilon: f64) -> (Vec<f64>, Vec<f64>) {
    let block = data.len() / samples;
    let mut out = vec![0.0; data.len()];
    let mut norms = Vec::with_capacity(samples);
    for s in 0..samples {
        let range = s * block..(s + 1) * block;
        let src = &data[range.clone()];
        let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = 1.0 / norm.max(epsilon);
        for (o, &v) in out[range].iter_mut().zip(src) {
            *o = v * scale;
        }
        norms.push(norm);
    }
    (out, norms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(shape: &[usize], data: &[f64]) -> Volume {
        Volume::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn product_rule() {
        let tape = Tape::new();
        let a = tape.input(vol(&[2], &[2.0, 3.0]));
        let b = tape.input(vol(&[2], &[5.0, 7.0]));
        let out = tape.sum_all(tape.mul(a, b).unwrap()).unwrap();
        tape.backward(out).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[5.0, 7.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn detached_input_receives_no_gradient() {
        let tape = Tape::new();
        let a = tape.input(vol(&[2], &[1.0, 2.0]));
        let c = tape.constant(vol(&[2], &[3.0, 4.0]));
        let out = tape.sum_all(tape.mul(a, c).unwrap()).unwrap();
        tape.backward(out).unwrap();
        assert_eq!(tape.grad(c).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(tape.grad(a).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn fan_in_accumulates() {
        let tape = Tape::new();
        let a = tape.input(vol(&[3], &[1.0, 2.0, 3.0]));
        let out = tape.sum_all(tape.add(a, a).unwrap()).unwrap();
        tape.backward(out).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.input(vol(&[2, 2], &[1.0, -2.0, 0.5, 4.0]));
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn quadratic_gradient_is_two_x() {
        let tape = Tape::new();
        let x = tape.input(vol(&[3], &[1.0, -2.0, 0.5]));
        let loss = tape.sum_all(tape.mul(x, x).unwrap()).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let tape = Tape::new();
        let x = tape.input(vol(&[4], &[0.0; 4]));
        let loss = tape.sum_all(tape.sigmoid(x).unwrap()).unwrap();
        tape.backward(loss).unwrap();
        for &g in tape.grad(x).unwrap().data() {
            assert!((g - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let tape = Tape::new();
        let x = tape.input(vol(&[2], &[3.0, -1.0]));
        let loss = tape.sum_all(tape.mul(x, x).unwrap()).unwrap();
        tape.backward(loss).unwrap();
        let once = tape.grad(x).unwrap();
        tape.backward(loss).unwrap();
        let twice = tape.grad(x).unwrap();
        assert_eq!(twice, once.scale(2.0).unwrap());
    }

    #[test]
    fn cross_tape_nodes_are_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.input(Volume::scalar(1.0));
        let b = t2.input(Volume::scalar(2.0));
        assert!(matches!(t1.add(a, b), Err(GradError::CrossTape)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.input(vol(&[2], &[1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(GradError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn mean_all_gradient() {
        let tape = Tape::new();
        let x = tape.input(vol(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let loss = tape.mean_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn sum_per_sample_shapes_and_gradient() {
        let tape = Tape::new();
        let x = tape.input(vol(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let per = tape.sum_per_sample(x).unwrap();
        assert_eq!(tape.value(per).unwrap().data(), &[6.0, 15.0]);
        let loss = tape.sum_all(tape.mul(per, per).unwrap()).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(
            tape.grad(x).unwrap().data(),
            &[12.0, 12.0, 12.0, 30.0, 30.0, 30.0]
        );
    }

    #[test]
    fn concat_features_splits_gradient() {
        let tape = Tape::new();
        let a = tape.input(vol(&[2, 1], &[1.0, 2.0]));
        let b = tape.input(vol(&[2, 2], &[10.0, 20.0, 30.0, 40.0]));
        let cat = tape.concat_features(a, b).unwrap();
        assert_eq!(tape.shape(cat).unwrap(), vec![2, 3]);
        assert_eq!(
            tape.value(cat).unwrap().data(),
            &[1.0, 10.0, 20.0, 2.0, 30.0, 40.0]
        );
        let w = tape.constant(vol(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let loss = tape.sum_all(tape.mul(cat, w).unwrap()).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn log_is_guarded_against_zero() {
        let tape = Tape::new();
        let x = tape.input(vol(&[2], &[0.0, 1.0]));
        let out = tape.log(x).unwrap();
        let v = tape.value(out).unwrap();
        assert!(v.data()[0].is_finite());
        assert_eq!(v.data()[1], 0.0);
        let loss = tape.sum_all(out).unwrap();
        tape.backward(loss).unwrap();
        // Below the guard the op is constant, so no gradient flows.
        assert_eq!(tape.grad(x).unwrap().data()[0], 0.0);
        assert_eq!(tape.grad(x).unwrap().data()[1], 1.0);
    }

    #[test]
    fn l2_normalize_handles_zero_blocks() {
        let tape = Tape::new();
        let x = tape.input(vol(&[2, 2], &[3.0, 4.0, 0.0, 0.0]));
        let y = tape.l2_normalize_per_sample(x, 1e-12).unwrap();
        let v = tape.value(y).unwrap();
        assert!((v.data()[0] - 0.6).abs() < 1e-15);
        assert!((v.data()[1] - 0.8).abs() < 1e-15);
        assert_eq!(&v.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_maximum() {
        let tape = Tape::new();
        let mut data = vec![0.0; 8];
        data[3] = 5.0; // position (0,1,1) of the 2x2x2 block
        let x = tape.input(vol(&[1, 2, 2, 2, 1], &data));
        let pooled = tape.maxpool3d(x).unwrap();
        assert_eq!(tape.value(pooled).unwrap().data(), &[5.0]);
        let loss = tape.sum_all(pooled).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        let mut expected = vec![0.0; 8];
        expected[3] = 1.0;
        assert_eq!(g.data(), expected.as_slice());
    }

    #[test]
    fn upsample_backward_sums_children() {
        let tape = Tape::new();
        let x = tape.input(vol(&[1, 1, 1, 1, 1], &[2.5]));
        let up = tape.upsample3d(x).unwrap();
        assert_eq!(tape.shape(up).unwrap(), vec![1, 2, 2, 2, 1]);
        assert_eq!(tape.value(up).unwrap().data(), &[2.5; 8]);
        let loss = tape.sum_all(up).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[8.0]);
    }

    #[test]
    fn conv3d_matches_brute_force() {
        // Independent route: direct triple-loop correlation on a small case.
        let tape = Tape::new();
        let n = 1;
        let (d, h, w, ci, co) = (3usize, 3usize, 3usize, 2usize, 2usize);
        let x_data: Vec<f64> = (0..n * d * h * w * ci).map(|i| (i as f64 * 0.37).sin()).collect();
        let k_data: Vec<f64> = (0..27 * ci * co).map(|i| (i as f64 * 0.11).cos()).collect();
        let b_data = vec![0.5, -0.25];
        let x = tape.input(vol(&[n, d, h, w, ci], &x_data));
        let k = tape.input(vol(&[3, 3, 3, ci, co], &k_data));
        let b = tape.input(vol(&[co], &b_data));
        let out = tape.conv3d(x, k, b).unwrap();
        let got = tape.value(out).unwrap();

        let xv = vol(&[n, d, h, w, ci], &x_data);
        let kv = vol(&[3, 3, 3, ci, co], &k_data);
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    for o in 0..co {
                        let mut acc = b_data[o];
                        for dz in 0..3usize {
                            for dy in 0..3usize {
                                for dx in 0..3usize {
                                    let (zi, yi, xi) = (
                                        z as isize + dz as isize - 1,
                                        y as isize + dy as isize - 1,
                                        xx as isize + dx as isize - 1,
                                    );
                                    if zi < 0 || yi < 0 || xi < 0 {
                                        continue;
                                    }
                                    let (zi, yi, xi) = (zi as usize, yi as usize, xi as usize);
                                    if zi >= d || yi >= h || xi >= w {
                                        continue;
                                    }
                                    for c in 0..ci {
                                        acc += xv.get(&[0, zi, yi, xi, c])
                                            * kv.get(&[dz, dy, dx, c, o]);
                                    }
                                }
                            }
                        }
                        let got_v = got.get(&[0, z, y, xx, o]);
                        assert!(
                            (got_v - acc).abs() < 1e-12,
                            "mismatch at ({z},{y},{xx},{o}): {got_v} vs {acc}"
                        );
                    }
                }
            }
        }
    }
}
