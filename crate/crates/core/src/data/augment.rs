use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SegSample;

/// Which random transforms to apply. The default applies none.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugPolicy {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
    /// Maximum relative brightness change; 0 disables.
    pub brightness: f64,
}

impl AugPolicy {
    pub fn standard() -> Self {
        Self {
            hflip: true,
            vflip: true,
            rot90: true,
            brightness: 0.1,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && !self.rot90 && self.brightness == 0.0
    }
}

fn remap(sample: &SegSample, image: Array3<f64>, mask: Array2<u8>) -> SegSample {
    SegSample {
        id: sample.id.clone(),
        image,
        mask,
        lesion_fraction: sample.lesion_fraction,
    }
}

/// Mirror left–right: pixel (r, c) ← (r, W−1−c).
pub fn flip_horizontal(sample: &SegSample) -> SegSample {
    remap(
        sample,
        sample.image.slice(s![.., ..;-1, ..]).to_owned(),
        sample.mask.slice(s![.., ..;-1]).to_owned(),
    )
}

/// Mirror top–bottom: pixel (r, c) ← (H−1−r, c).
pub fn flip_vertical(sample: &SegSample) -> SegSample {
    remap(
        sample,
        sample.image.slice(s![..;-1, .., ..]).to_owned(),
        sample.mask.slice(s![..;-1, ..]).to_owned(),
    )
}

/// Quarter turn counter-clockwise: pixel (r, c) ← (c, W−1−r).
pub fn rotate90(sample: &SegSample) -> SegSample {
    let image = sample.image.slice(s![.., ..;-1, ..]).permuted_axes([1, 0, 2]);
    let mask = sample.mask.slice(s![.., ..;-1]).reversed_axes();
    remap(
        sample,
        image.as_standard_layout().into_owned(),
        mask.as_standard_layout().into_owned(),
    )
}

/// Apply each enabled transform with probability ½ (rotation by a uniform
/// number of quarter turns). Geometric transforms act on image and mask
/// together; brightness touches only the image.
pub fn augment(sample: &SegSample, policy: &AugPolicy, seed: u64) -> SegSample {
    if policy.is_identity() {
        return sample.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sample.clone();
    if policy.hflip && rng.random_bool(0.5) {
        out = flip_horizontal(&out);
    }
    if policy.vflip && rng.random_bool(0.5) {
        out = flip_vertical(&out);
    }
    if policy.rot90 {
        for _ in 0..rng.random_range(0..4) {
            out = rotate90(&out);
        }
    }
    if policy.brightness > 0.0 {
        let f = 1.0 + rng.random_range(-policy.brightness..=policy.brightness);
        out.image.mapv_inplace(|v| (v * f).clamp(0.0, 1.0));
    }
    out
}
