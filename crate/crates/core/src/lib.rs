//! Adaptive two-stage inference for 8x8 low-resolution thermal frames.
//!
//! The pipeline pairs a deterministic wake-up trigger (binarize pixels against
//! a background clip value, count hot pixels, compare to a threshold) with a
//! compact int8-quantized CNN that is only invoked when the trigger fires.
//! The crate also ships the float CNN definition, a from-scratch trainer with
//! gradient checking, post-training 8-bit quantization, a per-inference
//! energy/latency cost model, and the metric/threshold sweep machinery used
//! to evaluate the accuracy/energy trade-off.

pub mod cascade;
pub mod cnn;
pub mod energy;
pub mod eval;
pub mod frameio;
pub mod quant;
pub mod train;
pub mod trigger;

#[cfg(test)]
pub(crate) mod testutil;
