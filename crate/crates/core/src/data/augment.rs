use rand::Rng;

/// Zero-pad, random crop and horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub pad: usize,
    pub flip_prob: f64,
}

impl AugmentPolicy {
    pub fn cifar() -> Self {
        Self {
            enabled: true,
            pad: 4,
            flip_prob: 0.5,
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::cifar()
        }
    }
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::cifar()
    }
}

/// Crop at `offset` = (dy, dx) from the image zero-padded by `pad`, then optionally mirror.
/// Output has the input's size.
pub fn augment_with(img: &[u8], dims: [usize; 3], pad: usize, offset: (usize, usize), flip: bool) -> Vec<u8> {
    let [c, h, w] = dims;
    assert!(offset.0 <= 2 * pad && offset.1 <= 2 * pad, "crop offset outside padded image");
    let mut out = vec![0u8; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            // source row in unpadded coordinates
            let sy = (y + offset.0) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = (xx + offset.1) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

pub fn augment(img: &[u8], dims: [usize; 3], policy: &AugmentPolicy, rng: &mut impl Rng) -> Vec<u8> {
    if !policy.enabled {
        return img.to_vec();
    }
    let dy = rng.random_range(0..=2 * policy.pad);
    let dx = rng.random_range(0..=2 * policy.pad);
    let flip = rng.random_bool(policy.flip_prob);
    augment_with(img, dims, policy.pad, (dy, dx), flip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img() -> Vec<u8> {
        (0..3 * 32 * 32).map(|i| (i * 31 % 256) as u8).collect()
    }

    #[test]
    fn centre_crop_is_identity() {
        let x = img();
        assert_eq!(augment_with(&x, [3, 32, 32], 4, (4, 4), false), x);
    }

    #[test]
    fn double_flip_is_identity() {
        let x = img();
        let once = augment_with(&x, [3, 32, 32], 4, (4, 4), true);
        assert_ne!(once, x);
        assert_eq!(augment_with(&once, [3, 32, 32], 4, (4, 4), true), x);
    }

    #[test]
    fn shifted_crop_moves_content() {
        let x = img();
        let y = augment_with(&x, [3, 32, 32], 4, (0, 0), false);
        // output (4,4) is source (0,0); the top-left band is padding
        assert_eq!(y[4 * 32 + 4], x[0]);
        assert_eq!(y[0], 0);
    }

    #[test]
    fn disabled_policy_is_identity() {
        let x = img();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&x, [3, 32, 32], &AugmentPolicy::disabled(), &mut rng), x);
    }
}
