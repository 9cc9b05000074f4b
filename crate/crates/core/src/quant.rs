//! Post-training 8-bit affine quantization of the folded CNN and an
//! integer-arithmetic forward pass.
//!
//! Weights are symmetric per-tensor int8 (zero point 0), activations are
//! asymmetric per-tensor int8 with the range widened to include zero, biases
//! are int32 at input_scale * weight_scale, and each layer requantizes its
//! int32 accumulators back to int8 through a fixed-point multiplier/shift
//! pair. Rounding is half-away-from-zero throughout.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnn::{
    forward_trace, sigmoid, CnnError, FloatModel, Prediction, CONV_OUT_SIDE, KERNEL, POOL_OUT_SIDE,
};
use crate::frameio::{FrameSeq, IRFrame, FRAME_SIDE};

/// Minimum representable activation range width before quantization.
pub const MIN_RANGE_WIDTH: f64 = 1e-3;

pub const QUANT_MAGIC: &[u8; 4] = b"IRQ1";

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("activation range is invalid: [{min}, {max}]")]
    BadRange { min: f64, max: f64 },
    #[error("weight tensor {0} is all zero; cannot derive a scale")]
    AllZeroWeights(&'static str),
    #[error("requant ratio {0} cannot be represented")]
    BadRatio(f64),
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad quantized model file {path}: {reason}")]
    Format { path: String, reason: String },
}

/// Affine int8 mapping: real = scale * (q - zero_point).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QParams {
    pub scale: f64,
    pub zero_point: i32,
}

impl QParams {
    /// Asymmetric parameters covering [min, max]; the range is extended to
    /// include zero and widened to at least [`MIN_RANGE_WIDTH`].
    pub fn asymmetric(min: f64, max: f64) -> Result<Self, QuantError> {
        if !min.is_finite() || !max.is_finite() || min > max {
            return Err(QuantError::BadRange { min, max });
        }
        let mut lo = min.min(0.0);
        let mut hi = max.max(0.0);
        let width = hi - lo;
        if width < MIN_RANGE_WIDTH {
            let pad = (MIN_RANGE_WIDTH - width) / 2.0;
            lo -= pad;
            hi += pad;
        }
        let scale = (hi - lo) / 255.0;
        let zero_point = -128 - (lo / scale).round() as i32;
        Ok(Self {
            scale,
            zero_point: zero_point.clamp(-128, 127),
        })
    }

    /// Symmetric parameters for a weight tensor: scale = max|w| / 127, zero
    /// point 0.
    pub fn symmetric(max_abs: f64) -> Result<Self, QuantError> {
        if !max_abs.is_finite() || max_abs <= 0.0 {
            return Err(QuantError::NonPositiveScale(max_abs));
        }
        Ok(Self {
            scale: max_abs / 127.0,
            zero_point: 0,
        })
    }
}

/// Quantize one real value: clamp(round(x / scale) + zero_point, -128, 127).
pub fn quantize_value(x: f64, q: &QParams) -> i8 {
    let v = (x / q.scale).round() + q.zero_point as f64;
    v.clamp(-128.0, 127.0) as i8
}

/// Dequantize one int8 value: scale * (v - zero_point).
pub fn dequantize_value(v: i8, q: &QParams) -> f64 {
    q.scale * (v as i32 - q.zero_point) as f64
}

/// Fixed-point approximation of a positive real ratio as
/// multiplier * 2^(-shift), with multiplier normalized into [2^30, 2^31).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Requant {
    pub multiplier: i32,
    pub shift: i32,
}

impl Requant {
    pub fn from_ratio(ratio: f64) -> Result<Self, QuantError> {
        if !ratio.is_finite() || ratio <= 0.0 {
            return Err(QuantError::BadRatio(ratio));
        }
        // Normalize ratio = f * 2^e with f in [0.5, 1); halving/doubling is exact.
        let mut f = ratio;
        let mut e = 0i32;
        while f >= 1.0 {
            f /= 2.0;
            e += 1;
        }
        while f < 0.5 {
            f *= 2.0;
            e -= 1;
        }
        let mut multiplier = (f * (1u64 << 31) as f64).round() as i64;
        if multiplier == 1 << 31 {
            multiplier = 1 << 30;
            e += 1;
        }
        let shift = 31 - e;
        if !(1..=62).contains(&shift) {
            return Err(QuantError::BadRatio(ratio));
        }
        Ok(Self {
            multiplier: multiplier as i32,
            shift,
        })
    }

    /// The real ratio this pair encodes.
    pub fn realized(&self) -> f64 {
        self.multiplier as f64 / 2f64.powi(self.shift)
    }

    /// acc * multiplier * 2^(-shift), rounding half away from zero.
    pub fn apply(&self, acc: i32) -> i32 {
        let prod = acc as i64 * self.multiplier as i64;
        let half = 1i64 << (self.shift - 1);
        let rounded = if prod >= 0 {
            (prod + half) >> self.shift
        } else {
            -((-prod + half) >> self.shift)
        };
        rounded.clamp(i32::MIN as i64, i32::MAX as i64) as i32
    }
}

/// Observed (min, max) of every quantized tensor over a calibration set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibStats {
    pub input: (f64, f64),
    pub conv_out: (f64, f64),
    pub fc1_out: (f64, f64),
    pub logit: (f64, f64),
}

fn widen(range: &mut (f64, f64), values: impl IntoIterator<Item = f64>) {
    for v in values {
        range.0 = range.0.min(v);
        range.1 = range.1.max(v);
    }
}

/// Record activation ranges of the float model over a calibration set:
/// standardized input, post-ReLU conv output, post-ReLU hidden output and
/// the pre-sigmoid logit.
pub fn calibrate(model: &FloatModel, calib: &FrameSeq) -> Result<CalibStats, QuantError> {
    if calib.is_empty() {
        return Err(QuantError::EmptyCalibration);
    }
    let empty = (f64::INFINITY, f64::NEG_INFINITY);
    let mut stats = CalibStats {
        input: empty,
        conv_out: empty,
        fc1_out: empty,
        logit: empty,
    };
    for frame in calib {
        let trace = forward_trace(model, frame)?;
        widen(&mut stats.input, trace.input_std.iter().copied());
        widen(&mut stats.conv_out, trace.conv_relu.data.iter().copied());
        widen(&mut stats.fc1_out, trace.fc1_relu.iter().copied());
        widen(&mut stats.logit, [trace.logit]);
    }
    Ok(stats)
}

/// One quantized layer: int8 weights, int32 biases at s_in * s_w, output
/// activation parameters and the accumulator requantization pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantLayer {
    pub w: Vec<i8>,
    pub w_scale: f64,
    pub b: Vec<i32>,
    pub out: QParams,
    pub requant: Requant,
}

/// Int8 model: folded conv plus the two FC layers, with the input
/// standardization constants and input quantization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    pub channels: usize,
    pub hidden: usize,
    pub input_mu: f64,
    pub input_sigma: f64,
    pub input_q: QParams,
    pub conv: QuantLayer,
    pub fc1: QuantLayer,
    pub fc2: QuantLayer,
}

fn quantize_weights(name: &'static str, data: &[f64]) -> Result<(Vec<i8>, QParams), QuantError> {
    let max_abs = data.iter().fold(0.0f64, |m, &w| m.max(w.abs()));
    if max_abs == 0.0 {
        return Err(QuantError::AllZeroWeights(name));
    }
    let q = QParams::symmetric(max_abs)?;
    let values = data.iter().map(|&w| quantize_value(w, &q)).collect();
    Ok((values, q))
}

fn quantize_biases(biases: &[f64], scale: f64) -> Vec<i32> {
    biases
        .iter()
        .map(|&b| (b / scale).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
        .collect()
}

fn quant_layer(
    name: &'static str,
    weights: &[f64],
    biases: &[f64],
    in_scale: f64,
    out_range: (f64, f64),
) -> Result<QuantLayer, QuantError> {
    let (w, wq) = quantize_weights(name, weights)?;
    let out = QParams::asymmetric(out_range.0, out_range.1)?;
    let bias_scale = in_scale * wq.scale;
    Ok(QuantLayer {
        w,
        w_scale: wq.scale,
        b: quantize_biases(biases, bias_scale),
        requant: Requant::from_ratio(bias_scale / out.scale)?,
        out,
    })
}

/// Quantize a float model against calibration statistics. Batch
/// normalization is folded into the convolution first (a no-op when the
/// model is already folded).
pub fn quantize_model(model: &FloatModel, stats: &CalibStats) -> Result<QuantModel, QuantError> {
    model.validate()?;
    let folded = model.fold()?;
    let input_q = QParams::asymmetric(stats.input.0, stats.input.1)?;
    let conv = quant_layer(
        "conv_w",
        &folded.conv_w.data,
        &folded.conv_b,
        input_q.scale,
        stats.conv_out,
    )?;
    let fc1 = quant_layer(
        "fc1_w",
        &folded.fc1_w.data,
        &folded.fc1_b,
        conv.out.scale,
        stats.fc1_out,
    )?;
    let fc2 = quant_layer(
        "fc2_w",
        &folded.fc2_w.data,
        &folded.fc2_b,
        fc1.out.scale,
        stats.logit,
    )?;
    Ok(QuantModel {
        channels: folded.channels,
        hidden: folded.hidden,
        input_mu: folded.input_mu,
        input_sigma: folded.input_sigma,
        input_q,
        conv,
        fc1,
        fc2,
    })
}

/// Int8 intermediate tensors of a quantized forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct QForwardTrace {
    pub input_q: Vec<i8>,
    pub conv_q: Vec<i8>,
    pub pool_q: Vec<i8>,
    pub fc1_q: Vec<i8>,
    pub logit_q: i8,
    pub logit: f64,
    pub probability: f64,
}

/// Integer forward pass keeping every int8 intermediate tensor.
pub fn qforward_trace(qm: &QuantModel, frame: &IRFrame) -> Result<QForwardTrace, QuantError> {
    let conv_side = CONV_OUT_SIDE;
    let pool_side = POOL_OUT_SIDE;
    let channels = qm.channels;

    // Standardize in float, then quantize once.
    let input_q: Vec<i8> = frame
        .pixels()
        .iter()
        .map(|&p| quantize_value((p - qm.input_mu) / qm.input_sigma, &qm.input_q))
        .collect();

    // Convolution: int32 accumulators over (x - zp_in) * w, bias included.
    let zp_in = qm.input_q.zero_point;
    let mut conv_q = vec![0i8; channels * conv_side * conv_side];
    for c in 0..channels {
        let wbase = c * KERNEL * KERNEL;
        for i in 0..conv_side {
            for j in 0..conv_side {
                let mut acc: i32 = qm.conv.b[c];
                for di in 0..KERNEL {
                    for dj in 0..KERNEL {
                        let x = input_q[(i + di) * FRAME_SIDE + (j + dj)] as i32 - zp_in;
                        let w = qm.conv.w[wbase + di * KERNEL + dj] as i32;
                        acc += x * w;
                    }
                }
                let q = qm.conv.requant.apply(acc) + qm.conv.out.zero_point;
                // ReLU is a clamp at the output zero point.
                conv_q[c * conv_side * conv_side + i * conv_side + j] =
                    q.clamp(qm.conv.out.zero_point, 127) as i8;
            }
        }
    }

    // Max pooling directly on int8 (scale-preserving).
    let mut pool_q = vec![0i8; channels * pool_side * pool_side];
    for c in 0..channels {
        for i in 0..pool_side {
            for j in 0..pool_side {
                let mut best = i8::MIN;
                for di in 0..2 {
                    for dj in 0..2 {
                        let v = conv_q
                            [c * conv_side * conv_side + (2 * i + di) * conv_side + (2 * j + dj)];
                        best = best.max(v);
                    }
                }
                pool_q[c * pool_side * pool_side + i * pool_side + j] = best;
            }
        }
    }

    // FC1 with ReLU clamp.
    let flat = channels * pool_side * pool_side;
    let zp_conv = qm.conv.out.zero_point;
    let mut fc1_q = vec![0i8; qm.hidden];
    for (h, out) in fc1_q.iter_mut().enumerate() {
        let mut acc: i32 = qm.fc1.b[h];
        let row = &qm.fc1.w[h * flat..(h + 1) * flat];
        for (x, w) in pool_q.iter().zip(row) {
            acc += (*x as i32 - zp_conv) * *w as i32;
        }
        let q = qm.fc1.requant.apply(acc) + qm.fc1.out.zero_point;
        *out = q.clamp(qm.fc1.out.zero_point, 127) as i8;
    }

    // FC2 produces the quantized logit (no ReLU).
    let zp_fc1 = qm.fc1.out.zero_point;
    let mut acc: i32 = qm.fc2.b[0];
    for (x, w) in fc1_q.iter().zip(&qm.fc2.w) {
        acc += (*x as i32 - zp_fc1) * *w as i32;
    }
    let logit_q = (qm.fc2.requant.apply(acc) + qm.fc2.out.zero_point).clamp(-128, 127) as i8;

    let logit = dequantize_value(logit_q, &qm.fc2.out);
    Ok(QForwardTrace {
        input_q,
        conv_q,
        pool_q,
        fc1_q,
        logit_q,
        logit,
        probability: sigmoid(logit),
    })
}

/// Classify one frame with the quantized model.
pub fn qforward(qm: &QuantModel, frame: &IRFrame) -> Result<Prediction, QuantError> {
    let trace = qforward_trace(qm, frame)?;
    Ok(Prediction::from_probability(trace.probability))
}

/// Raw tensor payload size in bytes: int8 weights plus int32 biases.
pub fn payload_bytes(qm: &QuantModel) -> usize {
    let weights = qm.conv.w.len() + qm.fc1.w.len() + qm.fc2.w.len();
    let biases = qm.conv.b.len() + qm.fc1.b.len() + qm.fc2.b.len();
    weights + 4 * biases
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerHeader {
    name: String,
    w_shape: Vec<usize>,
    w_scale: f64,
    b_len: usize,
    out_scale: f64,
    out_zero_point: i32,
    requant_multiplier: i32,
    requant_shift: i32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QuantHeader {
    format: String,
    seed: u64,
    channels: usize,
    hidden: usize,
    input_mu: f64,
    input_sigma: f64,
    input_scale: f64,
    input_zero_point: i32,
    layers: Vec<LayerHeader>,
}

const QUANT_FORMAT: &str = "ir8x8-quant-v1";

fn layer_header(name: &str, layer: &QuantLayer, w_shape: Vec<usize>) -> LayerHeader {
    LayerHeader {
        name: name.to_string(),
        w_shape,
        w_scale: layer.w_scale,
        b_len: layer.b.len(),
        out_scale: layer.out.scale,
        out_zero_point: layer.out.zero_point,
        requant_multiplier: layer.requant.multiplier,
        requant_shift: layer.requant.shift,
    }
}

/// Serialize to the IRQ1 container: magic bytes, little-endian u32 header
/// length, JSON header, then raw int8/int32 payloads in header order.
pub fn quant_model_bytes(qm: &QuantModel, seed: u64) -> Vec<u8> {
    let flat = qm.channels * POOL_OUT_SIDE * POOL_OUT_SIDE;
    let header = QuantHeader {
        format: QUANT_FORMAT.to_string(),
        seed,
        channels: qm.channels,
        hidden: qm.hidden,
        input_mu: qm.input_mu,
        input_sigma: qm.input_sigma,
        input_scale: qm.input_q.scale,
        input_zero_point: qm.input_q.zero_point,
        layers: vec![
            layer_header("conv", &qm.conv, vec![qm.channels, 1, KERNEL, KERNEL]),
            layer_header("fc1", &qm.fc1, vec![qm.hidden, flat]),
            layer_header("fc2", &qm.fc2, vec![1, qm.hidden]),
        ],
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::new();
    out.extend_from_slice(QUANT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for layer in [&qm.conv, &qm.fc1, &qm.fc2] {
        out.extend(layer.w.iter().map(|&v| v as u8));
        for &b in &layer.b {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}

pub fn save_quant_model(
    path: impl AsRef<Path>,
    qm: &QuantModel,
    seed: u64,
) -> Result<(), QuantError> {
    let path = path.as_ref();
    fs::write(path, quant_model_bytes(qm, seed)).map_err(|source| QuantError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn parse_quant_model(bytes: &[u8], path: &str) -> Result<(QuantModel, u64), QuantError> {
    let bad = |reason: &str| QuantError::Format {
        path: path.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 8 || &bytes[0..4] != QUANT_MAGIC {
        return Err(bad("missing IRQ1 magic"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(bad("truncated header"));
    }
    let header: QuantHeader = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| bad(&format!("header: {e}")))?;
    if header.format != QUANT_FORMAT {
        return Err(bad(&format!("unknown format {:?}", header.format)));
    }
    if header.layers.len() != 3 {
        return Err(bad("expected 3 layers"));
    }

    let mut offset = 8 + header_len;
    let mut layers = Vec::with_capacity(3);
    for lh in &header.layers {
        let w_len: usize = lh.w_shape.iter().product();
        let end_w = offset + w_len;
        let end_b = end_w + 4 * lh.b_len;
        if bytes.len() < end_b {
            return Err(bad(&format!("truncated payload for layer {}", lh.name)));
        }
        let w: Vec<i8> = bytes[offset..end_w].iter().map(|&v| v as i8).collect();
        let b: Vec<i32> = bytes[end_w..end_b]
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset = end_b;
        if lh.w_scale <= 0.0 || lh.out_scale <= 0.0 {
            return Err(bad(&format!("non-positive scale in layer {}", lh.name)));
        }
        if !(-128..=127).contains(&lh.out_zero_point) {
            return Err(bad(&format!(
                "zero point out of range in layer {}",
                lh.name
            )));
        }
        layers.push(QuantLayer {
            w,
            w_scale: lh.w_scale,
            b,
            out: QParams {
                scale: lh.out_scale,
                zero_point: lh.out_zero_point,
            },
            requant: Requant {
                multiplier: lh.requant_multiplier,
                shift: lh.requant_shift,
            },
        });
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    if header.input_sigma <= 0.0 || header.input_scale <= 0.0 {
        return Err(bad("non-positive input scale"));
    }

    let mut it = layers.into_iter();
    let qm = QuantModel {
        channels: header.channels,
        hidden: header.hidden,
        input_mu: header.input_mu,
        input_sigma: header.input_sigma,
        input_q: QParams {
            scale: header.input_scale,
            zero_point: header.input_zero_point,
        },
        conv: it.next().unwrap(),
        fc1: it.next().unwrap(),
        fc2: it.next().unwrap(),
    };
    Ok((qm, header.seed))
}

pub fn load_quant_model(path: impl AsRef<Path>) -> Result<(QuantModel, u64), QuantError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| QuantError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_quant_model(&bytes, &path.display().to_string())
}
