//! Minimal 3D U-Net: two pooling levels, widths 8/16/32, nearest-neighbor
//! upsampling and skip connections by feature concatenation.
//!
//! The forward pass produces per-voxel foreground probabilities and the
//! bottleneck feature map `(n, i/4, j/4, k/4, 32)`, which doubles as the
//! embedding compared across consecutive batches by the contrastive loss.
//! Optimization is plain SGD.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::grad::{GradError, Node, Tape};
use crate::rng;
use crate::volume::{Volume, VolumeError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("spatial extents must be divisible by 4, got {shape:?}")]
    IndivisibleExtent { shape: Vec<usize> },
    #[error("model input must be rank 4 (n,i,j,k) or rank 5 (n,i,j,k,c), got {shape:?}")]
    BadInputRank { shape: Vec<usize> },
    #[error("parameter shape mismatch in {layer}: {left:?} vs {right:?}")]
    ParamShapeMismatch {
        layer: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

impl From<VolumeError> for ModelError {
    fn from(e: VolumeError) -> Self {
        ModelError::Grad(GradError::Volume(e))
    }
}

/// Layer widths, in forward order.
const ENC1_OUT: usize = 8;
const ENC2_OUT: usize = 16;
const BOTTLENECK_OUT: usize = 32;
const DEC2_OUT: usize = 16;
const DEC1_OUT: usize = 8;
const HEAD_OUT: usize = 1;

/// Fixed layer order used by iteration and the checkpoint format.
pub const LAYER_NAMES: [&str; 6] = ["enc1", "enc2", "bottleneck", "dec2", "dec1", "head"];

const CHECKPOINT_MAGIC: &[u8; 8] = b"FESSCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// One 3x3x3 convolution layer: kernel `(3, 3, 3, c_in, c_out)` and bias
/// `(c_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Volume,
    pub bias: Volume,
}

impl ConvLayer {
    fn zeros(c_in: usize, c_out: usize) -> Self {
        ConvLayer {
            weight: Volume::zeros(&[3, 3, 3, c_in, c_out]),
            bias: Volume::zeros(&[c_out]),
        }
    }
}

/// All trainable tensors. The same container carries gradients, where
/// each tensor holds the derivative of the loss w.r.t. its namesake.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet3DParams {
    pub enc1: ConvLayer,
    pub enc2: ConvLayer,
    pub bottleneck: ConvLayer,
    pub dec2: ConvLayer,
    pub dec1: ConvLayer,
    pub head: ConvLayer,
}

impl UNet3DParams {
    pub fn layers(&self) -> [(&'static str, &ConvLayer); 6] {
        [
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("bottleneck", &self.bottleneck),
            ("dec2", &self.dec2),
            ("dec1", &self.dec1),
            ("head", &self.head),
        ]
    }

    pub(crate) fn layers_mut(&mut self) -> [(&'static str, &mut ConvLayer); 6] {
        [
            ("enc1", &mut self.enc1),
            ("enc2", &mut self.enc2),
            ("bottleneck", &mut self.bottleneck),
            ("dec2", &mut self.dec2),
            ("dec1", &mut self.dec1),
            ("head", &mut self.head),
        ]
    }

    /// Input channel count this parameter set expects.
    pub fn input_channels(&self) -> usize {
        self.weight_shape(0)[3]
    }

    fn weight_shape(&self, layer: usize) -> &[usize] {
        self.layers()[layer].1.weight.shape()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|(_, l)| l.weight.len() + l.bias.len())
            .sum()
    }
}

/// He-style initialization: kernel entries from a zero-mean normal with
/// variance `2 / (27 * c_in)`, biases zero. Deterministic per seed.
pub fn init_params(seed: u64, input_channels: usize) -> UNet3DParams {
    assert!(input_channels >= 1, "input_channels must be >= 1");
    let mut rng = rng::seeded(seed);
    let widths = [
        (input_channels, ENC1_OUT),
        (ENC1_OUT, ENC2_OUT),
        (ENC2_OUT, BOTTLENECK_OUT),
        (BOTTLENECK_OUT + ENC2_OUT, DEC2_OUT),
        (DEC2_OUT + ENC1_OUT, DEC1_OUT),
        (DEC1_OUT, HEAD_OUT),
    ];
    let mut layers = widths.iter().map(|&(ci, co)| {
        let fan_in = 27 * ci;
        let std = (2.0 / fan_in as f64).sqrt();
        let mut data = vec![0.0; 27 * ci * co];
        rng::fill_normal(&mut rng, &mut data);
        for v in &mut data {
            *v *= std;
        }
        ConvLayer {
            weight: Volume::new(vec![3, 3, 3, ci, co], data).expect("finite init"),
            bias: Volume::zeros(&[co]),
        }
    });
    UNet3DParams {
        enc1: layers.next().unwrap(),
        enc2: layers.next().unwrap(),
        bottleneck: layers.next().unwrap(),
        dec2: layers.next().unwrap(),
        dec1: layers.next().unwrap(),
        head: layers.next().unwrap(),
    }
}

/// Zero-valued parameter container matching `like`'s shapes.
pub fn zeros_like(like: &UNet3DParams) -> UNet3DParams {
    UNet3DParams {
        enc1: ConvLayer::zeros(like.enc1.weight.shape()[3], ENC1_OUT),
        enc2: ConvLayer::zeros(ENC1_OUT, ENC2_OUT),
        bottleneck: ConvLayer::zeros(ENC2_OUT, BOTTLENECK_OUT),
        dec2: ConvLayer::zeros(BOTTLENECK_OUT + ENC2_OUT, DEC2_OUT),
        dec1: ConvLayer::zeros(DEC2_OUT + ENC1_OUT, DEC1_OUT),
        head: ConvLayer::zeros(DEC1_OUT, HEAD_OUT),
    }
}

/// Parameter tensors registered on a tape as attached leaves.
#[derive(Debug, Clone, Copy)]
pub struct TapeParams {
    nodes: [(Node, Node); 6],
}

impl UNet3DParams {
    pub fn register(&self, tape: &Tape) -> TapeParams {
        let mut nodes = [(None, None); 6];
        for (i, (_, layer)) in self.layers().iter().enumerate() {
            nodes[i] = (
                Some(tape.input(layer.weight.clone())),
                Some(tape.input(layer.bias.clone())),
            );
        }
        TapeParams {
            nodes: nodes.map(|(w, b)| (w.unwrap(), b.unwrap())),
        }
    }
}

/// Gradients of every parameter after `backward`, in the same container
/// shape as the parameters themselves.
pub fn collect_grads(tape: &Tape, params: &TapeParams) -> Result<UNet3DParams, ModelError> {
    let mut grads: Vec<ConvLayer> = Vec::with_capacity(6);
    for &(w, b) in &params.nodes {
        grads.push(ConvLayer {
            weight: tape.grad(w)?,
            bias: tape.grad(b)?,
        });
    }
    let mut it = grads.into_iter();
    Ok(UNet3DParams {
        enc1: it.next().unwrap(),
        enc2: it.next().unwrap(),
        bottleneck: it.next().unwrap(),
        dec2: it.next().unwrap(),
        dec1: it.next().unwrap(),
        head: it.next().unwrap(),
    })
}

/// Forward-pass handles for the two outputs the trainer needs.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    /// `(n, i, j, k)` foreground probabilities in [0, 1].
    pub probs: Node,
    /// `(n, i/4, j/4, k/4, 32)` bottleneck feature map.
    pub embedding: Node,
}

/// Plain-volume forward output for inference paths.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub probs: Volume,
    pub embedding: Volume,
}

/// Runs the network on `input` (rank 4 `(n,i,j,k)` or rank 5 with a
/// trailing channel axis), recording onto `tape`.
pub fn forward(
    tape: &Tape,
    params: &TapeParams,
    input: &Volume,
) -> Result<ForwardNodes, ModelError> {
    let shape = input.shape().to_vec();
    let (n, spatial, channels) = match shape.len() {
        4 => (shape[0], [shape[1], shape[2], shape[3]], 1),
        5 => (shape[0], [shape[1], shape[2], shape[3]], shape[4]),
        _ => return Err(ModelError::BadInputRank { shape }),
    };
    if spatial.iter().any(|&e| e % 4 != 0) {
        return Err(ModelError::IndivisibleExtent { shape });
    }
    let [(e1w, e1b), (e2w, e2b), (bnw, bnb), (d2w, d2b), (d1w, d1b), (hw, hb)] = params.nodes;

    let x = tape.constant(input.clone());
    let x5 = tape.reshape(x, &[n, spatial[0], spatial[1], spatial[2], channels])?;

    let enc1 = tape.relu(tape.conv3d(x5, e1w, e1b)?)?;
    let pool1 = tape.maxpool3d(enc1)?;
    let enc2 = tape.relu(tape.conv3d(pool1, e2w, e2b)?)?;
    let pool2 = tape.maxpool3d(enc2)?;
    let embedding = tape.relu(tape.conv3d(pool2, bnw, bnb)?)?;

    let up2 = tape.upsample3d(embedding)?;
    let cat2 = tape.concat_features(up2, enc2)?;
    let dec2 = tape.relu(tape.conv3d(cat2, d2w, d2b)?)?;
    let up1 = tape.upsample3d(dec2)?;
    let cat1 = tape.concat_features(up1, enc1)?;
    let dec1 = tape.relu(tape.conv3d(cat1, d1w, d1b)?)?;

    let logits = tape.conv3d(dec1, hw, hb)?;
    let probs5 = tape.sigmoid(logits)?;
    let probs = tape.reshape(probs5, &[n, spatial[0], spatial[1], spatial[2]])?;
    Ok(ForwardNodes { probs, embedding })
}

/// Forward pass on a throwaway tape, returning plain volumes.
pub fn infer(params: &UNet3DParams, input: &Volume) -> Result<ForwardOutput, ModelError> {
    let tape = Tape::new();
    let tape_params = params.register(&tape);
    let out = forward(&tape, &tape_params, input)?;
    Ok(ForwardOutput {
        probs: tape.value(out.probs)?,
        embedding: tape.value(out.embedding)?,
    })
}

/// Plain SGD update `p <- p - lr * g` over every parameter.
pub fn sgd_step(
    params: &mut UNet3DParams,
    grads: &UNet3DParams,
    lr: f64,
) -> Result<(), ModelError> {
    let grad_layers = grads.layers();
    for (i, (name, layer)) in params.layers_mut().into_iter().enumerate() {
        let g = grad_layers[i].1;
        for (tensor, gt) in [(&mut layer.weight, &g.weight), (&mut layer.bias, &g.bias)] {
            if tensor.shape() != gt.shape() {
                return Err(ModelError::ParamShapeMismatch {
                    layer: name.to_string(),
                    left: tensor.shape().to_vec(),
                    right: gt.shape().to_vec(),
                });
            }
            for (p, &gv) in tensor.data_mut().iter_mut().zip(gt.data()) {
                *p -= lr * gv;
            }
        }
    }
    Ok(())
}

/// Writes parameters in the fixed binary layout: magic, format version,
/// then per tensor its name, rank, extents and raw little-endian f64s.
pub fn save_checkpoint(params: &UNet3DParams, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, layer) in params.layers() {
        for (suffix, tensor) in [("weight", &layer.weight), ("bias", &layer.bias)] {
            let full = format!("{name}.{suffix}");
            w.write_all(&(full.len() as u32).to_le_bytes())?;
            w.write_all(full.as_bytes())?;
            w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
            for &e in tensor.shape() {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<UNet3DParams, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(CHECKPOINT_MAGIC),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let mut tensors: Vec<Volume> = Vec::with_capacity(12);
    for name in LAYER_NAMES {
        for suffix in ["weight", "bias"] {
            let expected = format!("{name}.{suffix}");
            let len = read_u32(&mut r)? as usize;
            if len > 64 {
                return Err(ModelError::Checkpoint(format!(
                    "tensor name length {len} out of range"
                )));
            }
            let mut buf = vec![0u8; len];
            read_exact(&mut r, &mut buf)?;
            let found = String::from_utf8_lossy(&buf).to_string();
            if found != expected {
                return Err(ModelError::Checkpoint(format!(
                    "expected tensor {expected}, found {found}"
                )));
            }
            let rank = read_u32(&mut r)? as usize;
            if rank > 5 {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {expected} has rank {rank} out of range"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let count: usize = shape.iter().product();
            if count > 16 << 20 {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {expected} implausibly large ({count} elements)"
                )));
            }
            let mut data = vec![0.0; count];
            for v in &mut data {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                *v = f64::from_le_bytes(b);
            }
            let volume = Volume::new(shape, data)
                .map_err(|e| ModelError::Checkpoint(format!("tensor {expected}: {e}")))?;
            tensors.push(volume);
        }
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(ModelError::Checkpoint(
            "trailing bytes after final tensor".to_string(),
        ));
    }
    let mut it = tensors.into_iter();
    let mut next_layer = || -> ConvLayer {
        ConvLayer {
            weight: it.next().unwrap(),
            bias: it.next().unwrap(),
        }
    };
    let params = UNet3DParams {
        enc1: next_layer(),
        enc2: next_layer(),
        bottleneck: next_layer(),
        dec2: next_layer(),
        dec1: next_layer(),
        head: next_layer(),
    };
    validate_architecture(&params)?;
    Ok(params)
}

/// Checks the loaded tensors against the fixed architecture widths.
fn validate_architecture(params: &UNet3DParams) -> Result<(), ModelError> {
    let c_in = {
        let s = params.enc1.weight.shape();
        if s.len() != 5 || s[0] != 3 || s[1] != 3 || s[2] != 3 {
            return Err(ModelError::Checkpoint(format!(
                "enc1.weight has shape {s:?}, expected (3,3,3,c_in,{ENC1_OUT})"
            )));
        }
        s[3]
    };
    let expected = [
        ("enc1", c_in, ENC1_OUT),
        ("enc2", ENC1_OUT, ENC2_OUT),
        ("bottleneck", ENC2_OUT, BOTTLENECK_OUT),
        ("dec2", BOTTLENECK_OUT + ENC2_OUT, DEC2_OUT),
        ("dec1", DEC2_OUT + ENC1_OUT, DEC1_OUT),
        ("head", DEC1_OUT, HEAD_OUT),
    ];
    for ((name, ci, co), (_, layer)) in expected.iter().zip(params.layers()) {
        let ws = layer.weight.shape();
        if ws != [3, 3, 3, *ci, *co] {
            return Err(ModelError::Checkpoint(format!(
                "{name}.weight has shape {ws:?}, expected (3,3,3,{ci},{co})"
            )));
        }
        let bs = layer.bias.shape();
        if bs != [*co] {
            return Err(ModelError::Checkpoint(format!(
                "{name}.bias has shape {bs:?}, expected ({co},)"
            )));
        }
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), ModelError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ModelError::Checkpoint("file truncated".to_string())
        } else {
            ModelError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_params(5, 1);
        let b = init_params(5, 1);
        assert_eq!(a, b);
        let c = init_params(6, 1);
        assert_ne!(a, c);
    }

    #[test]
    fn enc1_kernel_variance_matches_fan_in() {
        let params = init_params(0, 1);
        let data = params.enc1.weight.data();
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64;
        let expected = 2.0 / 27.0;
        assert!(
            (var - expected).abs() < 0.2 * expected,
            "variance {var} vs expected {expected}"
        );
        assert!(params.enc1.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn forward_shape_contract() {
        let params = init_params(1, 1);
        let input = Volume::zeros(&[2, 8, 8, 8]);
        let out = infer(&params, &input).unwrap();
        assert_eq!(out.probs.shape(), &[2, 8, 8, 8]);
        assert_eq!(out.embedding.shape(), &[2, 2, 2, 2, 32]);
    }

    #[test]
    fn forward_accepts_all_valid_extents() {
        let params = init_params(2, 1);
        for e in [8usize, 12, 16] {
            let input = Volume::zeros(&[1, e, e, e]);
            let out = infer(&params, &input).unwrap();
            assert_eq!(out.probs.shape(), &[1, e, e, e]);
            assert_eq!(out.embedding.shape(), &[1, e / 4, e / 4, e / 4, 32]);
        }
    }

    #[test]
    fn forward_rejects_indivisible_extents() {
        let params = init_params(3, 1);
        let input = Volume::zeros(&[1, 6, 8, 8]);
        assert!(matches!(
            infer(&params, &input),
            Err(ModelError::IndivisibleExtent { .. })
        ));
    }

    #[test]
    fn zero_parameters_give_uniform_half_probabilities() {
        let params = zeros_like(&init_params(0, 1));
        let input = Volume::new(
            vec![1, 4, 4, 4],
            (0..64).map(|i| (i as f64 * 0.41).sin().abs()).collect(),
        )
        .unwrap();
        let out = infer(&params, &input).unwrap();
        assert!(out.probs.data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn forward_is_deterministic() {
        let params = init_params(9, 1);
        let input = Volume::new(
            vec![1, 8, 8, 8],
            (0..512).map(|i| ((i * 37 % 101) as f64) / 101.0).collect(),
        )
        .unwrap();
        let a = infer(&params, &input).unwrap();
        let b = infer(&params, &input).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.embedding, b.embedding);
    }

    #[test]
    fn sgd_step_examples() {
        let mut params = init_params(4, 1);
        let frozen = params.clone();
        let grads = init_params(8, 1);
        sgd_step(&mut params, &grads, 0.0).unwrap();
        assert_eq!(params, frozen);

        // Two identical steps equal one step at doubled rate.
        let mut twice = frozen.clone();
        sgd_step(&mut twice, &grads, 0.1).unwrap();
        sgd_step(&mut twice, &grads, 0.1).unwrap();
        let mut once = frozen.clone();
        sgd_step(&mut once, &grads, 0.2).unwrap();
        for ((_, a), (_, b)) in twice.layers().iter().zip(once.layers().iter()) {
            for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sgd_scalar_case() {
        // p = 1, g = 2, lr = 0.1 -> 0.8 on a single coordinate.
        let mut params = zeros_like(&init_params(0, 1));
        params.head.bias = Volume::new(vec![1], vec![1.0]).unwrap();
        let mut grads = zeros_like(&params);
        grads.head.bias = Volume::new(vec![1], vec![2.0]).unwrap();
        sgd_step(&mut params, &grads, 0.1).unwrap();
        assert!((params.head.bias.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = init_params(21, 1);
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(params, loaded);
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = init_params(22, 1);
        save_checkpoint(&params, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let bad_magic = path.with_extension("magic");
        let mut corrupted = bytes.clone();
        corrupted[0] = b'X';
        std::fs::write(&bad_magic, &corrupted).unwrap();
        let err = load_checkpoint(&bad_magic).unwrap_err();
        assert!(err.to_string().contains("FESSCKPT"), "{err}");

        let truncated = path.with_extension("trunc");
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&truncated).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
