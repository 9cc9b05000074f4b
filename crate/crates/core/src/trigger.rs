//! Deterministic wake-up trigger: binarize a frame against a clip value
//! extracted from a window of presumed-empty frames, count hot pixels and
//! compare against a threshold.

use thiserror::Error;

use crate::frameio::{FrameSeq, IRFrame};

/// Sentinel threshold that can never be met (only 64 pixels exist).
pub const THRESHOLD_NEVER: u32 = 65;

#[derive(Debug, Error)]
pub enum TriggerError {
    #[error("window_n must be >= 1")]
    WindowTooSmall,
    #[error("pixel_threshold {0} out of range [0, {THRESHOLD_NEVER}]")]
    ThresholdRange(u32),
    #[error("expected a window of {expected} frames, got {found}")]
    WindowLength { expected: usize, found: usize },
    #[error("clip value is uninitialized")]
    ClipUninitialized,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerConfig {
    /// Number of consecutive presumed-empty frames per clip window.
    pub window_n: usize,
    /// Hot-pixel count needed to fire; 0 always fires, 65 never fires.
    pub pixel_threshold: u32,
    /// Fire on count > threshold instead of count >= threshold.
    pub strict: bool,
}

impl TriggerConfig {
    pub fn new(window_n: usize, pixel_threshold: u32) -> Result<Self, TriggerError> {
        if window_n < 1 {
            return Err(TriggerError::WindowTooSmall);
        }
        if pixel_threshold > THRESHOLD_NEVER {
            return Err(TriggerError::ThresholdRange(pixel_threshold));
        }
        Ok(Self {
            window_n,
            pixel_threshold,
            strict: false,
        })
    }
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            window_n: 8,
            pixel_threshold: 1,
            strict: false,
        }
    }
}

/// Maximum temperature over a complete window of frames.
pub fn extract_clip(window: &[IRFrame], window_n: usize) -> Result<f64, TriggerError> {
    if window.len() != window_n {
        return Err(TriggerError::WindowLength {
            expected: window_n,
            found: window.len(),
        });
    }
    Ok(window
        .iter()
        .flat_map(|f| f.pixels().iter().copied())
        .fold(f64::NEG_INFINITY, f64::max))
}

/// 64-bit mask; bit i is set iff pixels[i] > clip (strictly).
pub fn binarize(frame: &IRFrame, clip: f64) -> u64 {
    let mut mask = 0u64;
    for (i, &p) in frame.pixels().iter().enumerate() {
        if p > clip {
            mask |= 1 << i;
        }
    }
    mask
}

/// Number of pixels strictly hotter than the clip value.
pub fn hot_pixels(frame: &IRFrame, clip: f64) -> u32 {
    binarize(frame, clip).count_ones()
}

/// Whether a hot-pixel count meets the configured threshold.
pub fn fires(hot: u32, cfg: &TriggerConfig) -> bool {
    if cfg.strict {
        hot > cfg.pixel_threshold
    } else {
        hot >= cfg.pixel_threshold
    }
}

/// Trigger decision for one frame against an established clip value.
pub fn fire(frame: &IRFrame, clip: f64, cfg: &TriggerConfig) -> bool {
    fires(hot_pixels(frame, clip), cfg)
}

/// Rolling trigger state: the current clip value plus the window of
/// consecutive presumed-empty frames feeding the next clip refresh.
#[derive(Debug, Clone, Default)]
pub struct ClipState {
    clip: Option<f64>,
    window: FrameSeq,
    consecutive_empty: usize,
}

impl ClipState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clip_value(&self) -> Option<f64> {
        self.clip
    }

    pub fn consecutive_empty(&self) -> usize {
        self.consecutive_empty
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn binarize(&self, frame: &IRFrame) -> Result<u64, TriggerError> {
        let clip = self.clip.ok_or(TriggerError::ClipUninitialized)?;
        Ok(binarize(frame, clip))
    }

    pub fn fire(&self, frame: &IRFrame, cfg: &TriggerConfig) -> Result<bool, TriggerError> {
        let clip = self.clip.ok_or(TriggerError::ClipUninitialized)?;
        Ok(fire(frame, clip, cfg))
    }

    /// Advance the state by one frame. Presumed-empty frames extend the
    /// window; anything else clears it. A completed window of `window_n`
    /// consecutive empty frames refreshes the clip value and is discarded.
    pub fn update(&mut self, frame: &IRFrame, no_person: bool, cfg: &TriggerConfig) {
        if !no_person {
            self.window.clear();
            self.consecutive_empty = 0;
            return;
        }
        self.window.push(frame.clone());
        self.consecutive_empty += 1;
        if self.window.len() == cfg.window_n {
            self.clip =
                Some(extract_clip(&self.window, cfg.window_n).expect("window length just checked"));
            self.window.clear();
        }
    }
}
