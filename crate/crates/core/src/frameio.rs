//! Loading, generation, labeling and transforms for 8x8 IR frame sequences.
//!
//! The canonical on-disk form is a CSV with header
//! `session,frame,p0,...,p63,count` and temperatures written with two
//! fractional digits, so that write(load(f)) is byte-identical to a
//! canonically written file.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pixels per frame (8x8 array).
pub const FRAME_PIXELS: usize = 64;
/// Frame side length in pixels.
pub const FRAME_SIDE: usize = 8;
/// Sensor plausibility bounds in degrees Celsius.
pub const PIXEL_MIN_C: f64 = -20.0;
pub const PIXEL_MAX_C: f64 = 80.0;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad header: expected {expected:?}, found {found:?}")]
    Header { expected: String, found: String },
    #[error("row {row}: expected {expected} pixel columns, found {found}")]
    PixelColumns {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}, column {column}: non-numeric value {value:?}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: negative person count {value}")]
    NegativeCount { row: usize, value: i64 },
    #[error("row {row}: {source}")]
    AtRow {
        row: usize,
        #[source]
        source: Box<FrameError>,
    },
    #[error("pixel {index} out of range: {value} degC (allowed [{PIXEL_MIN_C}, {PIXEL_MAX_C}])")]
    PixelRange { index: usize, value: f64 },
    #[error("pixel {index} is not finite")]
    PixelNotFinite { index: usize },
    #[error("session id must be positive")]
    SessionZero,
    #[error("sequence is empty")]
    EmptySequence,
    #[error("session {session} not present in sequence")]
    SessionNotFound { session: u32 },
    #[error("split on session {session} produced an empty {side} set")]
    EmptySplit { side: &'static str, session: u32 },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
}

/// One 8x8 thermal frame with its ground-truth person count.
#[derive(Debug, Clone, PartialEq)]
pub struct IRFrame {
    pixels: [f64; FRAME_PIXELS],
    pub person_count: u32,
    pub session_id: u32,
    pub frame_index: u32,
}

impl IRFrame {
    pub fn new(
        pixels: [f64; FRAME_PIXELS],
        person_count: u32,
        session_id: u32,
        frame_index: u32,
    ) -> Result<Self, FrameError> {
        for (index, &value) in pixels.iter().enumerate() {
            if !value.is_finite() {
                return Err(FrameError::PixelNotFinite { index });
            }
            if !(PIXEL_MIN_C..=PIXEL_MAX_C).contains(&value) {
                return Err(FrameError::PixelRange { index, value });
            }
        }
        if session_id == 0 {
            return Err(FrameError::SessionZero);
        }
        Ok(Self {
            pixels,
            person_count,
            session_id,
            frame_index,
        })
    }

    /// Row-major 8x8 pixel values in degrees Celsius.
    pub fn pixels(&self) -> &[f64; FRAME_PIXELS] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * FRAME_SIDE + col]
    }

    pub fn max_pixel(&self) -> f64 {
        self.pixels
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Ordered sequence of frames; all transforms preserve order.
pub type FrameSeq = Vec<IRFrame>;

/// Binary activity label: true iff two or more people share the frame.
pub fn to_violation_label(person_count: u32) -> bool {
    person_count >= 2
}

/// Test-set variants: keep, duplicate or triplicate the 0-labeled frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DatasetVariant {
    Default,
    Double,
    Triple,
}

impl DatasetVariant {
    pub const ALL: [DatasetVariant; 3] = [
        DatasetVariant::Default,
        DatasetVariant::Double,
        DatasetVariant::Triple,
    ];

    /// Number of copies of each 0-labeled frame in the variant stream.
    fn copies(self) -> usize {
        match self {
            DatasetVariant::Default => 1,
            DatasetVariant::Double => 2,
            DatasetVariant::Triple => 3,
        }
    }
}

impl fmt::Display for DatasetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DatasetVariant::Default => "default",
            DatasetVariant::Double => "double",
            DatasetVariant::Triple => "triple",
        };
        f.write_str(name)
    }
}

impl FromStr for DatasetVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "default" => Ok(DatasetVariant::Default),
            "double" => Ok(DatasetVariant::Double),
            "triple" => Ok(DatasetVariant::Triple),
            other => Err(format!(
                "unknown variant {other:?} (expected default, double or triple)"
            )),
        }
    }
}

/// Parameters for the synthetic desk-scale frame generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Ambient temperature in degC.
    pub background_temp: f64,
    /// Per-pixel Gaussian noise sigma in degC.
    pub noise_sigma: f64,
    /// Peak blob temperature increase over background, degC.
    pub blob_amplitude: f64,
    /// Isotropic blob sigma in pixels.
    pub blob_sigma: f64,
    /// Probability that a frame contains no people.
    pub empty_frame_fraction: f64,
    /// Occupied frames hold 1..=max_people people, uniform.
    pub max_people: u32,
    /// Number of frames to generate.
    pub length: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            background_temp: 22.0,
            noise_sigma: 0.2,
            blob_amplitude: 3.0,
            blob_sigma: 0.9,
            empty_frame_fraction: 0.5,
            max_people: 2,
            length: 1000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), FrameError> {
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(FrameError::InvalidConfig(
                "noise_sigma must be finite and >= 0".into(),
            ));
        }
        if !self.blob_amplitude.is_finite() || self.blob_amplitude <= 0.0 {
            return Err(FrameError::InvalidConfig(
                "blob_amplitude must be finite and > 0".into(),
            ));
        }
        if !self.blob_sigma.is_finite() || self.blob_sigma <= 0.0 {
            return Err(FrameError::InvalidConfig(
                "blob_sigma must be finite and > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.empty_frame_fraction) {
            return Err(FrameError::InvalidConfig(
                "empty_frame_fraction must lie in [0, 1]".into(),
            ));
        }
        if !self.background_temp.is_finite()
            || !(PIXEL_MIN_C..=PIXEL_MAX_C).contains(&self.background_temp)
        {
            return Err(FrameError::InvalidConfig(format!(
                "background_temp must lie in [{PIXEL_MIN_C}, {PIXEL_MAX_C}]"
            )));
        }
        Ok(())
    }
}

fn canonical_header() -> String {
    let mut header = String::from("session,frame");
    for i in 0..FRAME_PIXELS {
        header.push_str(&format!(",p{i}"));
    }
    header.push_str(",count");
    header
}

/// Load a frame sequence from its canonical CSV form, in file order.
pub fn load_csv(path: impl AsRef<Path>) -> Result<FrameSeq, FrameError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| FrameError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv(&text)
}

/// Parse the canonical CSV text form. Row numbers in errors are 1-based
/// file lines (the header is line 1).
pub fn parse_csv(text: &str) -> Result<FrameSeq, FrameError> {
    let expected_header = canonical_header();
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != expected_header {
        return Err(FrameError::Header {
            expected: expected_header,
            found: header.to_string(),
        });
    }

    let mut frames = Vec::new();
    for (offset, line) in lines.enumerate() {
        let row = offset + 2;
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != FRAME_PIXELS + 3 {
            return Err(FrameError::PixelColumns {
                row,
                expected: FRAME_PIXELS,
                found: cells.len().saturating_sub(3),
            });
        }

        let session_id = parse_cell::<u32>(cells[0], row, "session")?;
        let frame_index = parse_cell::<u32>(cells[1], row, "frame")?;
        let mut pixels = [0.0; FRAME_PIXELS];
        for (i, pixel) in pixels.iter_mut().enumerate() {
            *pixel = parse_cell::<f64>(cells[2 + i], row, &format!("p{i}"))?;
        }
        let count = parse_cell::<i64>(cells[FRAME_PIXELS + 2], row, "count")?;
        if count < 0 {
            return Err(FrameError::NegativeCount { row, value: count });
        }

        let frame =
            IRFrame::new(pixels, count as u32, session_id, frame_index).map_err(|source| {
                FrameError::AtRow {
                    row,
                    source: Box::new(source),
                }
            })?;
        frames.push(frame);
    }
    Ok(frames)
}

fn parse_cell<T: FromStr>(cell: &str, row: usize, column: &str) -> Result<T, FrameError> {
    cell.parse().map_err(|_| FrameError::NonNumeric {
        row,
        column: column.to_string(),
        value: cell.to_string(),
    })
}

/// Serialize a sequence into the canonical CSV text form.
pub fn to_csv_string(seq: &[IRFrame]) -> String {
    let mut out = canonical_header();
    out.push('\n');
    for frame in seq {
        out.push_str(&format!("{},{}", frame.session_id, frame.frame_index));
        for &p in frame.pixels() {
            out.push_str(&format!(",{p:.2}"));
        }
        out.push_str(&format!(",{}\n", frame.person_count));
    }
    out
}

pub fn write_csv(path: impl AsRef<Path>, seq: &[IRFrame]) -> Result<(), FrameError> {
    let path = path.as_ref();
    fs::write(path, to_csv_string(seq)).map_err(|source| FrameError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Split into the training session and everything else, preserving order.
pub fn split_by_session(
    seq: &[IRFrame],
    train_session: u32,
) -> Result<(FrameSeq, FrameSeq), FrameError> {
    if seq.is_empty() {
        return Err(FrameError::EmptySequence);
    }
    let (train, test): (FrameSeq, FrameSeq) = seq
        .iter()
        .cloned()
        .partition(|f| f.session_id == train_session);
    if train.is_empty() {
        return Err(FrameError::SessionNotFound {
            session: train_session,
        });
    }
    if test.is_empty() {
        return Err(FrameError::EmptySplit {
            side: "test",
            session: train_session,
        });
    }
    Ok((train, test))
}

/// Build a test-set variant: 0-labeled frames are repeated `copies` times,
/// duplicates inserted adjacent to their originals.
pub fn make_variant(seq: &[IRFrame], variant: DatasetVariant) -> FrameSeq {
    let copies = variant.copies();
    let mut out = Vec::with_capacity(seq.len());
    for frame in seq {
        let n = if frame.person_count == 0 { copies } else { 1 };
        for _ in 0..n {
            out.push(frame.clone());
        }
    }
    out
}

/// Generate a deterministic synthetic stream: Gaussian pixel noise over a
/// flat background, plus one isotropic Gaussian blob per person at a random
/// sub-pixel position. Session id is 1; use [`with_session`] to retag.
pub fn synth_stream(cfg: &SynthConfig, seed: u64) -> Result<FrameSeq, FrameError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(cfg.length);
    for frame_index in 0..cfg.length {
        let empty: f64 = rng.gen();
        let people = if empty < cfg.empty_frame_fraction || cfg.max_people == 0 {
            0
        } else {
            rng.gen_range(1..=cfg.max_people)
        };

        let mut pixels = [cfg.background_temp; FRAME_PIXELS];
        for _ in 0..people {
            let cx: f64 = rng.gen_range(0.0..FRAME_SIDE as f64);
            let cy: f64 = rng.gen_range(0.0..FRAME_SIDE as f64);
            for row in 0..FRAME_SIDE {
                for col in 0..FRAME_SIDE {
                    let dy = (row as f64 + 0.5) - cy;
                    let dx = (col as f64 + 0.5) - cx;
                    let r2 = dx * dx + dy * dy;
                    pixels[row * FRAME_SIDE + col] +=
                        cfg.blob_amplitude * (-r2 / (2.0 * cfg.blob_sigma * cfg.blob_sigma)).exp();
                }
            }
        }
        for pixel in pixels.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *pixel = (*pixel + cfg.noise_sigma * z).clamp(PIXEL_MIN_C, PIXEL_MAX_C);
        }

        frames.push(IRFrame::new(pixels, people, 1, frame_index as u32).expect("in-range synth"));
    }
    Ok(frames)
}

/// Retag every frame with a new session id (> 0).
pub fn with_session(seq: &[IRFrame], session_id: u32) -> Result<FrameSeq, FrameError> {
    if session_id == 0 {
        return Err(FrameError::SessionZero);
    }
    Ok(seq
        .iter()
        .map(|f| IRFrame {
            session_id,
            ..f.clone()
        })
        .collect())
}
