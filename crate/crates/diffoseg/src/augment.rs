//! Geometric and intensity augmentation applied jointly to an image and all
//! of its masks.

use diffoseg_core::MultiRaterSample;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    pub flip: bool,
    /// Quarter-turn rotations; only applied to square images.
    pub rotate90: bool,
    /// Multiply intensities by a factor drawn from `[1 - s, 1 + s]`.
    pub intensity_scale: Option<f64>,
}

impl Default for Augment {
    fn default() -> Self {
        Self { flip: true, rotate90: true, intensity_scale: Some(0.1) }
    }
}

impl Augment {
    pub const NONE: Augment = Augment { flip: false, rotate90: false, intensity_scale: None };

    /// A transformed copy. Draws a fixed number of values from `rng`
    /// regardless of which transforms are enabled.
    pub fn apply<R: Rng + ?Sized>(&self, s: &MultiRaterSample, rng: &mut R) -> MultiRaterSample {
        let flip_h = rng.random::<bool>();
        let flip_v = rng.random::<bool>();
        let turns = rng.random_range(0..4u8);
        let u = rng.random::<f64>();
        let (h, w) = (s.height, s.width);
        let turns = if self.rotate90 && h == w { turns } else { 0 };
        let (fh, fv) = if self.flip { (flip_h, flip_v) } else { (false, false) };
        // Destination (r, c) reads source index map[r * w + c].
        let map: Vec<usize> = (0..h * w)
            .map(|i| {
                let (mut r, mut c) = (i / w, i % w);
                for _ in 0..turns {
                    // Undo one counter-clockwise quarter turn (square only).
                    let (nr, nc) = (c, w - 1 - r);
                    r = nr;
                    c = nc;
                }
                if fv {
                    r = h - 1 - r;
                }
                if fh {
                    c = w - 1 - c;
                }
                r * w + c
            })
            .collect();
        let gain = self.intensity_scale.map_or(1.0, |a| 1.0 - a + 2.0 * a * u) as f32;
        let hw = h * w;
        let mut image = vec![0.0; s.image.len()];
        for ch in 0..s.channels {
            let src = &s.image[ch * hw..(ch + 1) * hw];
            for (d, &m) in image[ch * hw..(ch + 1) * hw].iter_mut().zip(&map) {
                *d = src[m] * gain;
            }
        }
        let annotations = s
            .annotations
            .iter()
            .map(|mask| map.iter().map(|&m| mask[m]).collect())
            .collect();
        MultiRaterSample { image, annotations, ..s.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize) -> MultiRaterSample {
        MultiRaterSample {
            id: "x".into(),
            channels: 1,
            height: h,
            width: w,
            image: (0..h * w).map(|i| i as f32).collect(),
            annotations: vec![(0..h * w).map(|i| (i % 3 == 0) as u8).collect(); 2],
        }
    }

    #[test]
    fn disabled_is_identity() {
        let s = sample(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(Augment::NONE.apply(&s, &mut rng), s);
        }
    }

    #[test]
    fn transforms_are_permutations_shared_by_masks() {
        let s = sample(5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let aug = Augment { intensity_scale: None, ..Default::default() };
        for _ in 0..20 {
            let t = aug.apply(&s, &mut rng);
            let mut vals: Vec<i32> = t.image.iter().map(|&v| v as i32).collect();
            vals.sort();
            assert_eq!(vals, (0..25).collect::<Vec<_>>());
            for m in &t.annotations {
                for (p, &v) in t.image.iter().enumerate() {
                    assert_eq!(m[p], (v as usize % 3 == 0) as u8);
                }
            }
        }
    }

    #[test]
    fn intensity_gain_stays_in_range() {
        let s = sample(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let aug = Augment { flip: false, rotate90: false, intensity_scale: Some(0.1) };
        for _ in 0..50 {
            let t = aug.apply(&s, &mut rng);
            let g = t.image[1] / s.image[1];
            assert!((0.9..=1.1).contains(&g));
        }
    }
}
