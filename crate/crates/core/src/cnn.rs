//! Floating-point CNN for 8x8 thermal frames:
//! Conv3x3(valid) + BatchNorm + ReLU -> MaxPool2x2 -> FC + ReLU -> FC(1) -> sigmoid.
//!
//! The 3x3-valid / 2x2-pool geometry maps 8x8 input to a 64x3x3 feature block,
//! so the first FC layer sees exactly 64*9 = 576 features.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frameio::{IRFrame, FRAME_PIXELS, FRAME_SIDE};

pub const KERNEL: usize = 3;
pub const CONV_OUT_SIDE: usize = FRAME_SIDE - KERNEL + 1; // 6
pub const POOL_OUT_SIDE: usize = CONV_OUT_SIDE / 2; // 3

#[derive(Debug, Error)]
pub enum CnnError {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("tensor data length {data} does not match shape {shape:?}")]
    TensorLength { data: usize, shape: Vec<usize> },
    #[error("batchnorm variance + eps must be positive (channel {channel})")]
    NonPositiveVariance { channel: usize },
    #[error("input sigma must be positive")]
    NonPositiveSigma,
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad model file {path}: {reason}")]
    Format { path: String, reason: String },
}

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, CnnError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(CnnError::TensorLength {
                data: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn shape_str(&self) -> String {
        format!("{:?}", self.shape)
    }
}

/// Per-channel batch normalization parameters (inference form).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNorm {
    pub fn identity(channels: usize, eps: f64) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0 - eps; channels],
            eps,
        }
    }
}

/// Full float model, including the input standardization constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatModel {
    pub channels: usize,
    pub hidden: usize,
    /// [channels, 1, 3, 3]
    pub conv_w: Tensor,
    pub conv_b: Vec<f64>,
    pub bn: BatchNorm,
    /// [hidden, channels * 9]
    pub fc1_w: Tensor,
    pub fc1_b: Vec<f64>,
    /// [1, hidden]
    pub fc2_w: Tensor,
    /// [1]
    pub fc2_b: Vec<f64>,
    pub input_mu: f64,
    pub input_sigma: f64,
}

/// Classifier output; class is the violation flag (probability >= 0.5).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub probability: f64,
    pub class: bool,
}

impl Prediction {
    pub fn from_probability(probability: f64) -> Self {
        Self {
            probability,
            class: probability >= 0.5,
        }
    }
}

impl FloatModel {
    /// Flattened feature length entering the first FC layer.
    pub fn flat_len(&self) -> usize {
        self.channels * POOL_OUT_SIDE * POOL_OUT_SIDE
    }

    /// Random fan-in-uniform initialization with zero biases and identity BN.
    pub fn init(channels: usize, hidden: usize, mu: f64, sigma: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |fan_in: usize, len: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let flat = channels * POOL_OUT_SIDE * POOL_OUT_SIDE;
        let conv_w = uniform(KERNEL * KERNEL, channels * KERNEL * KERNEL);
        let fc1_w = uniform(flat, hidden * flat);
        let fc2_w = uniform(hidden, hidden);
        Self {
            channels,
            hidden,
            conv_w: Tensor::new(vec![channels, 1, KERNEL, KERNEL], conv_w).unwrap(),
            conv_b: vec![0.0; channels],
            bn: BatchNorm::identity(channels, 1e-3),
            fc1_w: Tensor::new(vec![hidden, flat], fc1_w).unwrap(),
            fc1_b: vec![0.0; hidden],
            fc2_w: Tensor::new(vec![1, hidden], fc2_w).unwrap(),
            fc2_b: vec![0.0],
            input_mu: mu,
            input_sigma: sigma,
        }
    }

    pub fn validate(&self) -> Result<(), CnnError> {
        let flat = self.flat_len();
        let checks: [(&'static str, &[usize], &[usize]); 3] = [
            (
                "conv_w",
                &self.conv_w.shape,
                &[self.channels, 1, KERNEL, KERNEL],
            ),
            ("fc1_w", &self.fc1_w.shape, &[self.hidden, flat]),
            ("fc2_w", &self.fc2_w.shape, &[1, self.hidden]),
        ];
        for (op, found, expected) in checks {
            if found != expected {
                return Err(CnnError::Shape {
                    op,
                    expected: format!("{expected:?}"),
                    found: format!("{found:?}"),
                });
            }
        }
        if self.conv_b.len() != self.channels
            || self.bn.gamma.len() != self.channels
            || self.bn.beta.len() != self.channels
            || self.bn.mean.len() != self.channels
            || self.bn.var.len() != self.channels
            || self.fc1_b.len() != self.hidden
            || self.fc2_b.len() != 1
        {
            return Err(CnnError::Shape {
                op: "biases",
                expected: format!("channels={}, hidden={}", self.channels, self.hidden),
                found: format!(
                    "conv_b={}, fc1_b={}, fc2_b={}",
                    self.conv_b.len(),
                    self.fc1_b.len(),
                    self.fc2_b.len()
                ),
            });
        }
        if self.input_sigma <= 0.0 {
            return Err(CnnError::NonPositiveSigma);
        }
        for (channel, &v) in self.bn.var.iter().enumerate() {
            if v + self.bn.eps <= 0.0 {
                return Err(CnnError::NonPositiveVariance { channel });
            }
        }
        Ok(())
    }

    /// Fold batch normalization into the convolution, returning a model with
    /// identity BN that computes the same function.
    pub fn fold(&self) -> Result<FloatModel, CnnError> {
        let (folded_w, folded_b) = fold_bn(&self.conv_w, &self.conv_b, &self.bn)?;
        Ok(FloatModel {
            conv_w: folded_w,
            conv_b: folded_b,
            bn: BatchNorm::identity(self.channels, self.bn.eps),
            ..self.clone()
        })
    }

    /// Standardized input pixels, (x - mu) / sigma.
    pub fn standardize(&self, frame: &IRFrame) -> [f64; FRAME_PIXELS] {
        std::array::from_fn(|i| (frame.pixels()[i] - self.input_mu) / self.input_sigma)
    }
}

/// Valid (no padding) cross-correlation with stride 1.
/// input: [1, h, w], w: [c, 1, 3, 3], b: [c] -> [c, h-2, w-2].
pub fn conv2d_valid(input: &Tensor, weights: &Tensor, bias: &[f64]) -> Result<Tensor, CnnError> {
    if input.shape.len() != 3 || input.shape[0] != 1 {
        return Err(CnnError::Shape {
            op: "conv2d_valid input",
            expected: "[1, h, w]".into(),
            found: input.shape_str(),
        });
    }
    if weights.shape.len() != 4
        || weights.shape[1] != 1
        || weights.shape[2] != KERNEL
        || weights.shape[3] != KERNEL
    {
        return Err(CnnError::Shape {
            op: "conv2d_valid weights",
            expected: format!("[c, 1, {KERNEL}, {KERNEL}]"),
            found: weights.shape_str(),
        });
    }
    let channels = weights.shape[0];
    if bias.len() != channels {
        return Err(CnnError::Shape {
            op: "conv2d_valid bias",
            expected: format!("[{channels}]"),
            found: format!("[{}]", bias.len()),
        });
    }
    let (h, w) = (input.shape[1], input.shape[2]);
    if h < KERNEL || w < KERNEL {
        return Err(CnnError::Shape {
            op: "conv2d_valid input",
            expected: format!("spatial dims >= {KERNEL}"),
            found: input.shape_str(),
        });
    }
    let (oh, ow) = (h - KERNEL + 1, w - KERNEL + 1);
    let mut out = Tensor::zeros(vec![channels, oh, ow]);
    for (c, &channel_bias) in bias.iter().enumerate() {
        let wbase = c * KERNEL * KERNEL;
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = channel_bias;
                for di in 0..KERNEL {
                    for dj in 0..KERNEL {
                        acc += weights.data[wbase + di * KERNEL + dj]
                            * input.data[(i + di) * w + (j + dj)];
                    }
                }
                out.data[c * oh * ow + i * ow + j] = acc;
            }
        }
    }
    Ok(out)
}

/// Absorb BN scale/shift into convolution weights and biases:
/// per channel c with s = gamma / sqrt(var + eps),
/// w' = s * w and b' = s * (b - mean) + beta.
pub fn fold_bn(
    conv_w: &Tensor,
    conv_b: &[f64],
    bn: &BatchNorm,
) -> Result<(Tensor, Vec<f64>), CnnError> {
    let channels = conv_w.shape[0];
    if conv_b.len() != channels || bn.gamma.len() != channels {
        return Err(CnnError::Shape {
            op: "fold_bn",
            expected: format!("[{channels}] per-channel params"),
            found: format!("conv_b={}, gamma={}", conv_b.len(), bn.gamma.len()),
        });
    }
    let per_channel = conv_w.len() / channels;
    let mut folded_w = conv_w.clone();
    let mut folded_b = vec![0.0; channels];
    for c in 0..channels {
        let denom = bn.var[c] + bn.eps;
        if denom <= 0.0 {
            return Err(CnnError::NonPositiveVariance { channel: c });
        }
        let s = bn.gamma[c] / denom.sqrt();
        for k in 0..per_channel {
            folded_w.data[c * per_channel + k] *= s;
        }
        folded_b[c] = s * (conv_b[c] - bn.mean[c]) + bn.beta[c];
    }
    Ok((folded_w, folded_b))
}

/// Apply inference-mode batch normalization per channel, in place.
pub fn batchnorm_infer(t: &mut Tensor, bn: &BatchNorm) -> Result<(), CnnError> {
    let channels = t.shape[0];
    let per_channel = t.len() / channels;
    for c in 0..channels {
        let denom = bn.var[c] + bn.eps;
        if denom <= 0.0 {
            return Err(CnnError::NonPositiveVariance { channel: c });
        }
        let inv_std = 1.0 / denom.sqrt();
        for k in 0..per_channel {
            let x = t.data[c * per_channel + k];
            t.data[c * per_channel + k] = bn.gamma[c] * (x - bn.mean[c]) * inv_std + bn.beta[c];
        }
    }
    Ok(())
}

/// Non-overlapping 2x2 max pooling, stride 2, per channel.
pub fn maxpool2x2(input: &Tensor) -> Result<Tensor, CnnError> {
    if input.shape.len() != 3 {
        return Err(CnnError::Shape {
            op: "maxpool2x2",
            expected: "[c, h, w]".into(),
            found: input.shape_str(),
        });
    }
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(CnnError::Shape {
            op: "maxpool2x2",
            expected: "even spatial dims".into(),
            found: input.shape_str(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(vec![c, oh, ow]);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for di in 0..2 {
                    for dj in 0..2 {
                        let v = input.data[ch * h * w + (2 * i + di) * w + (2 * j + dj)];
                        best = best.max(v);
                    }
                }
                out.data[ch * oh * ow + i * ow + j] = best;
            }
        }
    }
    Ok(out)
}

/// Fully connected layer: out = w . input + b, with w of shape [m, n].
pub fn fc(input: &[f64], weights: &Tensor, bias: &[f64]) -> Result<Vec<f64>, CnnError> {
    if weights.shape.len() != 2 || weights.shape[1] != input.len() || weights.shape[0] != bias.len()
    {
        return Err(CnnError::Shape {
            op: "fc",
            expected: format!("w=[{}, {}]", bias.len(), input.len()),
            found: weights.shape_str(),
        });
    }
    let n = weights.shape[1];
    let mut out = Vec::with_capacity(bias.len());
    for (i, &b) in bias.iter().enumerate() {
        let row = &weights.data[i * n..(i + 1) * n];
        let acc: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
        out.push(acc);
    }
    Ok(out)
}

pub fn relu(values: &mut [f64]) {
    for v in values.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Intermediate activations of a forward pass, used for PTQ calibration.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input_std: [f64; FRAME_PIXELS],
    /// Post-BN, post-ReLU conv output [c, 6, 6].
    pub conv_relu: Tensor,
    /// Post-ReLU hidden activations.
    pub fc1_relu: Vec<f64>,
    /// Pre-sigmoid output.
    pub logit: f64,
    pub probability: f64,
}

/// Full forward pass keeping the intermediate tensors.
pub fn forward_trace(model: &FloatModel, frame: &IRFrame) -> Result<ForwardTrace, CnnError> {
    model.validate()?;
    let input_std = model.standardize(frame);
    let input = Tensor::new(vec![1, FRAME_SIDE, FRAME_SIDE], input_std.to_vec())?;
    let mut conv = conv2d_valid(&input, &model.conv_w, &model.conv_b)?;
    batchnorm_infer(&mut conv, &model.bn)?;
    relu(&mut conv.data);
    let pooled = maxpool2x2(&conv)?;
    let mut hidden = fc(&pooled.data, &model.fc1_w, &model.fc1_b)?;
    relu(&mut hidden);
    let logit = fc(&hidden, &model.fc2_w, &model.fc2_b)?[0];
    Ok(ForwardTrace {
        input_std,
        conv_relu: conv,
        fc1_relu: hidden,
        logit,
        probability: sigmoid(logit),
    })
}

/// Classify one frame with the float model.
pub fn forward(model: &FloatModel, frame: &IRFrame) -> Result<Prediction, CnnError> {
    let trace = forward_trace(model, frame)?;
    Ok(Prediction::from_probability(trace.probability))
}

/// On-disk float model wrapper; `seed` records the training seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FloatModelFile {
    pub format: String,
    pub seed: u64,
    pub model: FloatModel,
}

pub const FLOAT_MODEL_FORMAT: &str = "ir8x8-float-v1";

pub fn save_float_model(
    path: impl AsRef<Path>,
    model: &FloatModel,
    seed: u64,
) -> Result<(), CnnError> {
    let path = path.as_ref();
    let file = FloatModelFile {
        format: FLOAT_MODEL_FORMAT.to_string(),
        seed,
        model: model.clone(),
    };
    let json = serde_json::to_string_pretty(&file).expect("model serializes");
    fs::write(path, json).map_err(|source| CnnError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_float_model(path: impl AsRef<Path>) -> Result<(FloatModel, u64), CnnError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CnnError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: FloatModelFile = serde_json::from_str(&text).map_err(|e| CnnError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if file.format != FLOAT_MODEL_FORMAT {
        return Err(CnnError::Format {
            path: path.display().to_string(),
            reason: format!("unknown format {:?}", file.format),
        });
    }
    file.model.validate().map_err(|e| CnnError::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    Ok((file.model, file.seed))
}
