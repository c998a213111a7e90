//! Procedural tissue textures and tumor blob geometry.
//!
//! Class identity is encoded twice, by construction: in the base color and in
//! the texture granularity. Domain transforms later move the colors around
//! while granularity survives, which is what keeps class signal and domain
//! signal separable.

use crate::img::hsv_to_rgb;

/// Hash a lattice corner to [0,1). splitmix64-style mixing.
fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let mut z = seed
        ^ (ix as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (iy as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise on a lattice with the given cell size, in [0,1).
pub fn value_noise(seed: u64, x: f64, y: f64, cell: f64) -> f64 {
    let gx = x / cell;
    let gy = y / cell;
    let ix = gx.floor() as i64;
    let iy = gy.floor() as i64;
    let fx = smoothstep(gx - ix as f64);
    let fy = smoothstep(gy - iy as f64);
    let v00 = lattice(seed, ix, iy);
    let v10 = lattice(seed, ix + 1, iy);
    let v01 = lattice(seed, ix, iy + 1);
    let v11 = lattice(seed, ix + 1, iy + 1);
    let a = v00 + (v10 - v00) * fx;
    let b = v01 + (v11 - v01) * fx;
    a + (b - a) * fy
}

/// One procedural tissue appearance: base color plus two noise octaves.
#[derive(Debug, Clone, Copy)]
pub struct TextureParams {
    pub base_hsv: (f64, f64, f64),
    /// Dominant structure size in pixels.
    pub cell_px: f64,
    /// Shading amplitude of the dominant octave.
    pub amp: f64,
    /// Amplitude of the fine octave (cell_px / 3).
    pub fine_amp: f64,
}

/// Non-tumor tissue comes in a few content variants (think stroma density)
/// so one slide's patches spread over several visual words. Content varies
/// within a WSI; the domain transform stays uniform across it.
pub const NON_TUMOR_VARIANTS: [TextureParams; 3] = [
    TextureParams {
        base_hsv: (330.0, 0.30, 0.88),
        cell_px: 6.0,
        amp: 0.22,
        fine_amp: 0.08,
    },
    TextureParams {
        base_hsv: (332.0, 0.42, 0.80),
        cell_px: 12.0,
        amp: 0.35,
        fine_amp: 0.10,
    },
    TextureParams {
        base_hsv: (316.0, 0.33, 0.93),
        cell_px: 5.0,
        amp: 0.15,
        fine_amp: 0.06,
    },
];

/// Spatial scale of the content-variant field in pixels.
pub const CONTENT_CELL_PX: f64 = 320.0;

/// Which non-tumor variant paints pixel (x, y).
pub fn content_variant(seed: u64, x: usize, y: usize) -> usize {
    let v = value_noise(seed ^ 0x00c0_ffee, x as f64, y as f64, CONTENT_CELL_PX);
    if v < 0.40 {
        0
    } else if v < 0.62 {
        1
    } else {
        2
    }
}

/// Tumor tissue: coarse, blotchy, darker purple.
pub const TUMOR_TEXTURE: TextureParams = TextureParams {
    base_hsv: (270.0, 0.55, 0.62),
    cell_px: 26.0,
    amp: 0.55,
    fine_amp: 0.12,
};

impl TextureParams {
    /// RGB in [0,1] at pixel (x, y).
    pub fn shade(&self, seed: u64, x: usize, y: usize) -> (f64, f64, f64) {
        let (h, s, v) = self.base_hsv;
        let (r, g, b) = hsv_to_rgb(h, s, v);
        let coarse = value_noise(seed, x as f64, y as f64, self.cell_px) - 0.5;
        let fine = value_noise(seed ^ 0x5bd1_e995, x as f64, y as f64, self.cell_px / 3.0) - 0.5;
        let shade = 1.0 + self.amp * coarse + self.fine_amp * fine;
        (
            (r * shade).clamp(0.0, 1.0),
            (g * shade).clamp(0.0, 1.0),
            (b * shade).clamp(0.0, 1.0),
        )
    }
}

/// A wobbly ellipse-ish tumor region. The boundary radius varies with angle
/// so blobs look organic rather than circular.
#[derive(Debug, Clone)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    /// Base radius before the global scale factor.
    pub r: f64,
    pub wobble3_amp: f64,
    pub wobble3_phase: f64,
    pub wobble5_amp: f64,
    pub wobble5_phase: f64,
}

impl Blob {
    /// Largest radius the blob can reach at the given scale.
    pub fn max_radius(&self, scale: f64) -> f64 {
        self.r * scale * (1.0 + self.wobble3_amp + self.wobble5_amp)
    }

    pub fn contains(&self, x: f64, y: f64, scale: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let d2 = dx * dx + dy * dy;
        let rmax = self.max_radius(scale);
        if d2 > rmax * rmax {
            return false;
        }
        let theta = dy.atan2(dx);
        let boundary = self.r
            * scale
            * (1.0
                + self.wobble3_amp * (3.0 * theta + self.wobble3_phase).sin()
                + self.wobble5_amp * (5.0 * theta + self.wobble5_phase).sin());
        d2 < boundary * boundary
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_noise_is_deterministic_and_bounded() {
        for i in 0..200 {
            let v = value_noise(42, i as f64 * 1.7, i as f64 * 0.9, 8.0);
            assert!((0.0..1.0).contains(&v));
            assert_eq!(v, value_noise(42, i as f64 * 1.7, i as f64 * 0.9, 8.0));
        }
    }

    #[test]
    fn blob_scale_grows_coverage() {
        let blob = Blob {
            cx: 50.0,
            cy: 50.0,
            r: 10.0,
            wobble3_amp: 0.15,
            wobble3_phase: 0.3,
            wobble5_amp: 0.1,
            wobble5_phase: 1.1,
        };
        let count = |s: f64| {
            let mut n = 0;
            for y in 0..100 {
                for x in 0..100 {
                    if blob.contains(x as f64, y as f64, s) {
                        n += 1;
                    }
                }
            }
            n
        };
        assert!(count(0.5) < count(1.0) && count(1.0) < count(2.0));
    }
}
