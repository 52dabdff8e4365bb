//! Matched-resolution Gaussian noise images for the noise control context.

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BackendError, ContextKind, VisualContext};

/// Per-channel mean on the [0, 1] intensity scale.
pub const NOISE_MEAN: f64 = 0.5;
/// Per-channel standard deviation before clipping to [0, 1].
pub const NOISE_STD: f64 = 0.25;

/// Seed for one (run, resolution) pair. SplitMix64 finalizer over the packed
/// inputs so neighbouring resolutions get unrelated streams.
fn noise_seed(run_seed: u64, width: u32, height: u32) -> u64 {
    let mut z =
        run_seed ^ ((width as u64) << 32 | height as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Raw RGB8 noise pixels, row-major. A pure function of its arguments.
pub fn noise_pixels(run_seed: u64, width: u32, height: u32) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(run_seed, width, height));
    let normal = Normal::new(NOISE_MEAN, NOISE_STD).expect("valid normal parameters");
    let n = width as usize * height as usize * 3;
    (0..n)
        .map(|_| {
            let v: f64 = normal.sample(&mut rng);
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

/// PNG-encoded noise image.
pub fn noise_png(run_seed: u64, width: u32, height: u32) -> Result<Vec<u8>, BackendError> {
    let pixels = noise_pixels(run_seed, width, height);
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(&pixels, width, height, ExtendedColorType::Rgb8)
        .map_err(|e| BackendError::Precondition(format!("encoding noise image: {e}")))?;
    Ok(out)
}

/// Builds the noise counterpart of a real image context: same resolution,
/// i.i.d. clipped Gaussian pixels seeded from `run_seed`.
pub fn make_noise_context(
    real: &VisualContext,
    run_seed: u64,
) -> Result<VisualContext, BackendError> {
    if real.kind() != ContextKind::Real {
        return Err(BackendError::Precondition(format!(
            "noise context must be derived from a real image, got {}",
            real.kind()
        )));
    }
    let (w, h) = real
        .resolution()
        .ok_or_else(|| BackendError::Precondition("real image has no resolution".into()))?;
    Ok(VisualContext::noise(noise_png(run_seed, w, h)?, (w, h)))
}
