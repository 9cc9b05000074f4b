//! Two-stage adaptive classifier: the wake-up trigger gates the CNN, which
//! only runs on frames with enough hot pixels. Streams are processed
//! sequentially while the trigger's clip state is maintained.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::cnn::{forward, CnnError, FloatModel, Prediction};
use crate::frameio::{to_violation_label, FrameSeq, IRFrame};
use crate::quant::{qforward, QuantError, QuantModel};
use crate::trigger::{fires, hot_pixels, ClipState, TriggerConfig};

#[derive(Debug, Error)]
pub enum CascadeError {
    #[error("input stream is empty")]
    EmptyStream,
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Where the "no person in this frame" signal for clip maintenance comes
/// from: the cascade's own trigger decision, or ground-truth labels
/// (evaluation mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipSource {
    SelfPredicted,
    GroundTruth,
}

impl fmt::Display for ClipSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClipSource::SelfPredicted => "self",
            ClipSource::GroundTruth => "truth",
        })
    }
}

impl FromStr for ClipSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "self" => Ok(ClipSource::SelfPredicted),
            "truth" => Ok(ClipSource::GroundTruth),
            other => Err(format!(
                "unknown clip source {other:?} (expected self or truth)"
            )),
        }
    }
}

/// Whether the clip keeps refreshing on every completed window or freezes
/// after the first initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClipRefresh {
    #[default]
    Online,
    Frozen,
}

/// Second-stage model, float or quantized.
#[derive(Debug, Clone)]
pub enum ModelKind {
    Float(FloatModel),
    Quant(QuantModel),
}

impl ModelKind {
    pub fn predict(&self, frame: &IRFrame) -> Result<Prediction, CascadeError> {
        match self {
            ModelKind::Float(m) => Ok(forward(m, frame)?),
            ModelKind::Quant(m) => Ok(qforward(m, frame)?),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CascadeConfig {
    pub trigger: TriggerConfig,
    pub clip_source: ClipSource,
    pub refresh: ClipRefresh,
    pub model: ModelKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TriggerOnly,
    Cnn,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::TriggerOnly => "trigger",
            Stage::Cnn => "cnn",
        })
    }
}

/// Per-frame cascade outcome. `TriggerOnly` always carries a no-violation
/// class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub violation: bool,
    pub stage: Stage,
    pub active_pixels: u32,
}

/// Decisions plus ground-truth labels over one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub decisions: Vec<Decision>,
    pub labels: Vec<bool>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }

    pub fn cnn_invocations(&self) -> usize {
        self.decisions
            .iter()
            .filter(|d| d.stage == Stage::Cnn)
            .count()
    }

    pub fn predictions(&self) -> Vec<bool> {
        self.decisions.iter().map(|d| d.violation).collect()
    }

    /// CSV with columns `frame,stage,active_pixels,pred,label`; `frame` is
    /// the 0-based stream position.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("frame,stage,active_pixels,pred,label\n");
        for (i, (d, &label)) in self.decisions.iter().zip(&self.labels).enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                i, d.stage, d.active_pixels, d.violation as u8, label as u8
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), CascadeError> {
        let path = path.as_ref();
        fs::write(path, self.to_csv_string()).map_err(|source| CascadeError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Classify one frame and advance the clip state.
///
/// While the clip is uninitialized the gate can only fire vacuously
/// (pixel_threshold 0 in non-strict mode); other thresholds treat bootstrap
/// frames as trigger-rejected. The no-person signal feeding the clip window
/// is the trigger decision itself in self-predicted mode (a CNN
/// "no-violation" may still mean one person is present) and the ground-truth
/// label in evaluation mode.
pub fn classify_frame(
    frame: &IRFrame,
    state: &mut ClipState,
    cfg: &CascadeConfig,
) -> Result<Decision, CascadeError> {
    let (fired, active_pixels) = match state.clip_value() {
        Some(clip) => {
            let hot = hot_pixels(frame, clip);
            (fires(hot, &cfg.trigger), hot)
        }
        None => (cfg.trigger.pixel_threshold == 0 && !cfg.trigger.strict, 0),
    };

    let decision = if fired {
        let pred = cfg.model.predict(frame)?;
        Decision {
            violation: pred.class,
            stage: Stage::Cnn,
            active_pixels,
        }
    } else {
        Decision {
            violation: false,
            stage: Stage::TriggerOnly,
            active_pixels,
        }
    };

    let no_person = match cfg.clip_source {
        ClipSource::SelfPredicted => decision.stage == Stage::TriggerOnly,
        ClipSource::GroundTruth => frame.person_count == 0,
    };
    let frozen = cfg.refresh == ClipRefresh::Frozen && state.clip_value().is_some();
    if !frozen {
        state.update(frame, no_person, &cfg.trigger);
    }

    Ok(decision)
}

/// Run the cascade over a whole stream from a cold start.
pub fn run(seq: &FrameSeq, cfg: &CascadeConfig) -> Result<Trace, CascadeError> {
    run_from(seq, cfg, ClipState::new())
}

/// Run the cascade starting from a given clip state. With
/// [`ClipRefresh::Frozen`] and an initialized state this evaluates the
/// stream under a clip fixed per session.
pub fn run_from(
    seq: &FrameSeq,
    cfg: &CascadeConfig,
    mut state: ClipState,
) -> Result<Trace, CascadeError> {
    if seq.is_empty() {
        return Err(CascadeError::EmptyStream);
    }
    let mut decisions = Vec::with_capacity(seq.len());
    let mut labels = Vec::with_capacity(seq.len());
    for frame in seq {
        decisions.push(classify_frame(frame, &mut state, cfg)?);
        labels.push(to_violation_label(frame.person_count));
    }
    Ok(Trace { decisions, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frameio::{synth_stream, IRFrame, SynthConfig, FRAME_PIXELS};
    use crate::testutil;
    use crate::trigger::THRESHOLD_NEVER;

    fn cfg_with(threshold: u32, clip_source: ClipSource, model: ModelKind) -> CascadeConfig {
        CascadeConfig {
            trigger: TriggerConfig::new(8, threshold).unwrap(),
            clip_source,
            refresh: ClipRefresh::Online,
            model,
        }
    }

    fn quiet_stream(len: usize, seed: u64) -> FrameSeq {
        let cfg = SynthConfig {
            empty_frame_fraction: 1.0,
            noise_sigma: 0.0,
            length: len,
            ..SynthConfig::default()
        };
        synth_stream(&cfg, seed).unwrap()
    }

    #[test]
    fn frame_at_clip_level_stays_in_stage_one() {
        let model = ModelKind::Float(testutil::random_model(4, 6, 1));
        let cfg = cfg_with(1, ClipSource::GroundTruth, model);
        let stream = quiet_stream(20, 2);
        let trace = run(&stream, &cfg).unwrap();
        // Noiseless constant background: nothing ever exceeds the clip.
        assert!(trace
            .decisions
            .iter()
            .all(|d| d.stage == Stage::TriggerOnly));
        assert!(trace.decisions.iter().all(|d| !d.violation));
        assert_eq!(trace.cnn_invocations(), 0);
    }

    #[test]
    fn threshold_zero_equals_static_cnn_frame_by_frame() {
        let model = testutil::random_model(4, 6, 3);
        let stream = testutil::separable_frames(60, 4);
        let cfg = cfg_with(
            0,
            ClipSource::SelfPredicted,
            ModelKind::Float(model.clone()),
        );
        let trace = run(&stream, &cfg).unwrap();
        assert_eq!(trace.cnn_invocations(), stream.len());
        for (frame, d) in stream.iter().zip(&trace.decisions) {
            let static_pred = forward(&model, frame).unwrap().class;
            assert_eq!(d.violation, static_pred);
            assert_eq!(d.stage, Stage::Cnn);
        }
    }

    #[test]
    fn threshold_sentinel_never_invokes_the_cnn() {
        let model = ModelKind::Float(testutil::random_model(4, 6, 5));
        let cfg = cfg_with(THRESHOLD_NEVER, ClipSource::GroundTruth, model);
        let stream = testutil::separable_frames(80, 6);
        let trace = run(&stream, &cfg).unwrap();
        assert_eq!(trace.cnn_invocations(), 0);
        assert!(trace.decisions.iter().all(|d| !d.violation));
    }

    #[test]
    fn invocation_count_monotone_in_threshold() {
        let model = ModelKind::Float(testutil::random_model(4, 6, 7));
        let stream = testutil::separable_frames(120, 8);
        let mut prev = usize::MAX;
        for threshold in 0..=THRESHOLD_NEVER {
            let cfg = cfg_with(threshold, ClipSource::GroundTruth, model.clone());
            let count = run(&stream, &cfg).unwrap().cnn_invocations();
            assert!(count <= prev, "threshold {threshold}: {count} > {prev}");
            prev = count;
        }
    }

    #[test]
    fn ground_truth_windows_only_hold_empty_frames() {
        // A hot 2-person frame arrives mid-bootstrap; in ground-truth mode
        // it must not contaminate the clip window, so the final clip comes
        // from the 8 cool empty frames alone.
        let model = ModelKind::Float(testutil::random_model(4, 6, 9));
        let cfg = cfg_with(1, ClipSource::GroundTruth, model);
        let mut stream = FrameSeq::new();
        for i in 0..4 {
            stream.push(IRFrame::new([20.0; FRAME_PIXELS], 0, 1, i).unwrap());
        }
        stream.push(IRFrame::new([40.0; FRAME_PIXELS], 2, 1, 4).unwrap());
        for i in 5..13 {
            stream.push(IRFrame::new([20.25; FRAME_PIXELS], 0, 1, i).unwrap());
        }
        let mut state = ClipState::new();
        for frame in &stream {
            classify_frame(frame, &mut state, &cfg).unwrap();
        }
        // The occupied frame cleared the window; the clip comes from the
        // 8 cool empty frames that follow it.
        assert_eq!(state.clip_value(), Some(20.25));
    }

    #[test]
    fn self_mode_bootstrap_assumes_first_window_empty() {
        let model = ModelKind::Float(testutil::random_model(4, 6, 10));
        let cfg = cfg_with(1, ClipSource::SelfPredicted, model);
        let stream = quiet_stream(8, 11);
        let mut state = ClipState::new();
        for frame in &stream {
            assert!(state.clip_value().is_none());
            classify_frame(frame, &mut state, &cfg).unwrap();
        }
        assert_eq!(state.clip_value(), Some(22.0));
    }

    #[test]
    fn frozen_refresh_keeps_the_bootstrap_clip() {
        let model = ModelKind::Float(testutil::random_model(4, 6, 12));
        let mut cfg = cfg_with(1, ClipSource::GroundTruth, model);
        cfg.refresh = ClipRefresh::Frozen;
        let mut stream = quiet_stream(8, 13);
        // Cooler empty frames afterwards would lower an online clip.
        for i in 0..16 {
            stream.push(IRFrame::new([20.0; FRAME_PIXELS], 0, 1, 8 + i).unwrap());
        }
        let mut state = ClipState::new();
        for frame in &stream {
            classify_frame(frame, &mut state, &cfg).unwrap();
        }
        assert_eq!(state.clip_value(), Some(22.0));
    }

    #[test]
    fn trace_csv_shape() {
        let model = ModelKind::Float(testutil::random_model(4, 6, 14));
        let cfg = cfg_with(1, ClipSource::GroundTruth, model);
        let stream = testutil::separable_frames(20, 15);
        let trace = run(&stream, &cfg).unwrap();
        assert_eq!(trace.len(), stream.len());
        let csv = trace.to_csv_string();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("frame,stage,active_pixels,pred,label"));
        assert_eq!(lines.count(), stream.len());
    }

    #[test]
    fn empty_stream_is_an_error() {
        let model = ModelKind::Float(testutil::random_model(4, 6, 16));
        let cfg = cfg_with(1, ClipSource::GroundTruth, model);
        assert!(matches!(
            run(&Vec::new(), &cfg),
            Err(CascadeError::EmptyStream)
        ));
    }

    #[test]
    fn quant_model_drives_the_second_stage() {
        let model = testutil::random_model(6, 8, 17);
        let calib = testutil::random_frames(30, 18);
        let stats = crate::quant::calibrate(&model, &calib).unwrap();
        let qm = crate::quant::quantize_model(&model, &stats).unwrap();
        let cfg = cfg_with(0, ClipSource::GroundTruth, ModelKind::Quant(qm.clone()));
        let stream = testutil::separable_frames(30, 19);
        let trace = run(&stream, &cfg).unwrap();
        for (frame, d) in stream.iter().zip(&trace.decisions) {
            assert_eq!(d.violation, qforward(&qm, frame).unwrap().class);
        }
    }
}
