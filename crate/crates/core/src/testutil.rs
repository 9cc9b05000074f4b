//! Shared helpers for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cnn::FloatModel;
use crate::frameio::{synth_stream, FrameSeq, IRFrame, SynthConfig, FRAME_PIXELS};

/// Frames with pixels uniform in [15, 35] degC and no people.
pub fn random_frames(n: usize, seed: u64) -> FrameSeq {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let pixels: [f64; FRAME_PIXELS] = std::array::from_fn(|_| rng.gen_range(15.0..35.0));
            IRFrame::new(pixels, 0, 1, i as u32).unwrap()
        })
        .collect()
}

/// Model with random weights, biases and batchnorm statistics.
pub fn random_model(channels: usize, hidden: usize, seed: u64) -> FloatModel {
    let mut model = FloatModel::init(channels, hidden, 22.0, 2.0, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for b in model.conv_b.iter_mut().chain(model.fc1_b.iter_mut()) {
        *b = rng.gen_range(-0.5..0.5);
    }
    model.fc2_b[0] = rng.gen_range(-0.5..0.5);
    for c in 0..channels {
        model.bn.gamma[c] = rng.gen_range(0.5..1.5);
        model.bn.beta[c] = rng.gen_range(-0.5..0.5);
        model.bn.mean[c] = rng.gen_range(-0.5..0.5);
        model.bn.var[c] = rng.gen_range(0.2..2.0);
    }
    model
}

/// Linearly separable two-class stream: empty frames versus 3-person frames
/// with a large temperature margin.
pub fn separable_frames(n: usize, seed: u64) -> FrameSeq {
    let cfg = SynthConfig {
        background_temp: 22.0,
        noise_sigma: 0.1,
        blob_amplitude: 5.0,
        blob_sigma: 1.0,
        empty_frame_fraction: 0.5,
        max_people: 3,
        length: 4 * n,
    };
    let mut frames: FrameSeq = synth_stream(&cfg, seed)
        .unwrap()
        .into_iter()
        .filter(|f| f.person_count == 0 || f.person_count == 3)
        .take(n)
        .collect();
    assert!(frames.len() >= n * 3 / 4, "separable stream too short");
    for (i, f) in frames.iter_mut().enumerate() {
        f.frame_index = i as u32;
    }
    frames
}
