//! Patch crop/paste against full images and the flip/shift augmentation used
//! while training detectors.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detection::Box;
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid, Image, Patch};

/// Boxes keeping less than this fraction of their area after a shift are dropped.
pub const MIN_KEPT_AREA: f64 = 0.5;

fn window_origin(
    height: usize,
    width: usize,
    center: (usize, usize),
    size: usize,
) -> Result<(usize, usize)> {
    let y0 = center.0 as isize - (size / 2) as isize;
    let x0 = center.1 as isize - (size / 2) as isize;
    if y0 < 0 || x0 < 0 || y0 as usize + size > height || x0 as usize + size > width {
        return Err(Error::OutOfBounds {
            y: y0,
            x: x0,
            size,
            height,
            width,
        });
    }
    Ok((y0 as usize, x0 as usize))
}

/// The `size`×`size` window centered on `center = (y, x)` and its top-left origin.
pub fn crop_patch(
    image: &Image,
    center: (usize, usize),
    size: usize,
) -> Result<(Patch, (usize, usize))> {
    let (oy, ox) = window_origin(image.height(), image.width(), center, size)?;
    Ok((image.window(oy, ox, size, size)?, (oy, ox)))
}

/// Origin of the `size`×`size` window centered on `center = (y, x)`, shifted
/// as little as needed to lie inside a `height`×`width` image.
pub fn clamped_origin(
    height: usize,
    width: usize,
    center: (usize, usize),
    size: usize,
) -> Result<(usize, usize)> {
    if size > height || size > width {
        return Err(Error::OutOfBounds {
            y: 0,
            x: 0,
            size,
            height,
            width,
        });
    }
    let oy = center.0.saturating_sub(size / 2).min(height - size);
    let ox = center.1.saturating_sub(size / 2).min(width - size);
    Ok((oy, ox))
}

/// Writes `patch` into `image` at `origin`; other pixels are untouched.
pub fn paste_patch<T: Copy>(
    image: &mut Grid<T>,
    patch: &Grid<T>,
    origin: (usize, usize),
) -> Result<()> {
    let (oy, ox) = origin;
    let (h, w) = patch.dims();
    if oy + h > image.height() || ox + w > image.width() {
        return Err(Error::OutOfBounds {
            y: oy as isize,
            x: ox as isize,
            size: h.max(w),
            height: image.height(),
            width: image.width(),
        });
    }
    for y in 0..h {
        for x in 0..w {
            image.set(oy + y, ox + x, patch.get(y, x));
        }
    }
    Ok(())
}

/// An image with its boxes and any pixel-aligned masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotated {
    pub image: Image,
    pub boxes: Vec<Box>,
    pub masks: Vec<BinaryMask>,
}

/// Per-image annotation record as stored on disk. Optional arrays, when
/// present, hold one entry per box.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub image_id: String,
    #[serde(with = "box_arrays")]
    pub boxes: Vec<Box>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contours: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diameters: Option<Vec<f64>>,
}

/// Boxes as `[x_min, y_min, x_max, y_max]` arrays.
mod box_arrays {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(boxes: &[Box], s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_seq(boxes.iter().map(|b| [b.x_min, b.y_min, b.x_max, b.y_max]))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> core::result::Result<Vec<Box>, D::Error> {
        let raw: Vec<[f64; 4]> = Vec::deserialize(d)?;
        Ok(raw
            .into_iter()
            .map(|[a, b, c, e]| Box::new(a, b, c, e))
            .collect())
    }
}

impl ImageAnnotation {
    pub fn validate(&self) -> Result<()> {
        let n = self.boxes.len();
        let bad = |len: usize, what: &str| {
            Err(Error::InvalidArgument(format!(
                "{}: {len} {what} for {n} boxes",
                self.image_id
            )))
        };
        if let Some(c) = &self.contours {
            if c.len() != n {
                return bad(c.len(), "contours");
            }
        }
        if let Some(d) = &self.diameters {
            if d.len() != n {
                return bad(d.len(), "diameters");
            }
        }
        if let Some(b) = self.boxes.iter().find(|b| !b.is_valid()) {
            return Err(Error::InvalidArgument(format!(
                "{}: invalid box {b:?}",
                self.image_id
            )));
        }
        Ok(())
    }

    /// Contour of box `i` as `(x, y)` vertices.
    pub fn contour(&self, i: usize) -> Option<Vec<(f64, f64)>> {
        self.contours
            .as_ref()?
            .get(i)
            .map(|c| c.iter().map(|p| (p[0], p[1])).collect())
    }

    pub fn diameter(&self, i: usize) -> Option<f64> {
        self.diameters.as_ref()?.get(i).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub shift_prob: f64,
    /// Shifts are drawn uniformly from `-max_shift..=max_shift` per axis.
    pub max_shift: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            shift_prob: 0.5,
            max_shift: 32,
        }
    }
}

pub fn flip_annotated(a: &Annotated) -> Annotated {
    let w = a.image.width() as f64;
    Annotated {
        image: a.image.flip_horizontal(),
        boxes: a
            .boxes
            .iter()
            .map(|b| Box {
                x_min: w - b.x_max,
                x_max: w - b.x_min,
                ..*b
            })
            .collect(),
        masks: a.masks.iter().map(BinaryMask::flip_horizontal).collect(),
    }
}

/// Clips a box to the image; `None` when less than [`MIN_KEPT_AREA`] of it remains.
pub fn clip_box(b: &Box, height: usize, width: usize) -> Option<Box> {
    let c = Box {
        x_min: b.x_min.max(0.0),
        y_min: b.y_min.max(0.0),
        x_max: b.x_max.min(width as f64),
        y_max: b.y_max.min(height as f64),
        score: b.score,
    };
    (c.is_valid() && c.area() >= MIN_KEPT_AREA * b.area()).then_some(c)
}

/// Integer translation by `(dy, dx)`; uncovered pixels are zero.
pub fn shift_annotated(a: &Annotated, dy: isize, dx: isize) -> Annotated {
    let (h, w) = a.image.dims();
    Annotated {
        image: a.image.shifted(dy, dx, 0.0),
        boxes: a
            .boxes
            .iter()
            .filter_map(|b| clip_box(&b.translated(dx as f64, dy as f64), h, w))
            .collect(),
        masks: a.masks.iter().map(|m| m.shifted(dy, dx)).collect(),
    }
}

/// Random horizontal flip and random shift, each with its own probability.
pub fn traditional_augment<R: Rng + ?Sized>(
    a: &Annotated,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Annotated {
    let mut out = if rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0)) {
        flip_annotated(a)
    } else {
        a.clone()
    };
    if rng.random_bool(cfg.shift_prob.clamp(0.0, 1.0)) && cfg.max_shift > 0 {
        let m = cfg.max_shift as i64;
        let dy = rng.random_range(-m..=m) as isize;
        let dx = rng.random_range(-m..=m) as isize;
        out = shift_annotated(&out, dy, dx);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Image {
        Grid::from_fn(h, w, |y, x| ((y * w + x) % 251) as f32 / 251.0)
    }

    #[test]
    fn crop_origin_and_bounds() {
        let img = ramp(1024, 1024);
        let (p, o) = crop_patch(&img, (512, 512), 256).unwrap();
        assert_eq!(o, (384, 384));
        assert_eq!(p.dims(), (256, 256));
        assert_eq!(p.get(0, 0), img.get(384, 384));
        assert!(matches!(
            crop_patch(&img, (10, 512), 256),
            Err(Error::OutOfBounds { .. })
        ));
    }

    #[test]
    fn clamped_origin_stays_inside() {
        assert_eq!(
            clamped_origin(512, 512, (256, 256), 256).unwrap(),
            (128, 128)
        );
        assert_eq!(clamped_origin(512, 512, (10, 500), 256).unwrap(), (0, 256));
        assert!(clamped_origin(100, 512, (50, 50), 256).is_err());
    }

    #[test]
    fn paste_examples() {
        let img = ramp(64, 64);
        let mut out = img.clone();
        paste_patch(&mut out, &Grid::new(16, 16, 0.0), (0, 0)).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let expect = if y < 16 && x < 16 { 0.0 } else { img.get(y, x) };
                assert_eq!(out.get(y, x), expect);
            }
        }
        paste_patch(&mut out, &Grid::new(16, 16, 0.5), (8, 8)).unwrap();
        assert_eq!(out.get(10, 10), 0.5);
        assert_eq!(out.get(4, 4), 0.0);
        assert!(paste_patch(&mut out, &Grid::new(16, 16, 0.5), (50, 0)).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let a = Annotated {
            image: ramp(20, 30),
            boxes: alloc::vec![Box::new(2.0, 3.0, 9.0, 7.0)],
            masks: alloc::vec![BinaryMask::from_fn(20, 30, |y, x| y < 4 && x < 6)],
        };
        assert_eq!(flip_annotated(&flip_annotated(&a)), a);
        let f = flip_annotated(&a);
        assert_eq!(f.boxes[0], Box::new(21.0, 3.0, 28.0, 7.0));
        assert!(f.masks[0].get(0, 29));
    }

    #[test]
    fn shift_translates_and_drops() {
        let a = Annotated {
            image: ramp(40, 40),
            boxes: alloc::vec![
                Box::new(10.0, 10.0, 20.0, 20.0),
                Box::new(0.0, 0.0, 10.0, 10.0)
            ],
            masks: Vec::new(),
        };
        let s = shift_annotated(&a, 3, -4);
        assert_eq!(s.boxes[0], Box::new(6.0, 13.0, 16.0, 23.0));
        // second box keeps 6×10 of 10×10
        assert_eq!(s.boxes[1], Box::new(0.0, 3.0, 6.0, 13.0));
        let s = shift_annotated(&a, 0, -6);
        assert_eq!(s.boxes.len(), 1);
        assert_eq!(s.image.get(5, 0), a.image.get(5, 6));
    }

    #[test]
    fn seeded_stream_reproducible() {
        let a = Annotated {
            image: ramp(32, 32),
            boxes: alloc::vec![Box::new(10.0, 10.0, 20.0, 20.0)],
            masks: Vec::new(),
        };
        let cfg = AugmentConfig::default();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..8)
                .map(|_| traditional_augment(&a, &cfg, &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
    }

    proptest! {
        #[test]
        fn crop_paste_round_trip(cy in 8usize..56, cx in 8usize..56) {
            let img = ramp(64, 64);
            let (p, o) = crop_patch(&img, (cy, cx), 16).unwrap();
            let mut out = img.clone();
            paste_patch(&mut out, &p, o).unwrap();
            prop_assert_eq!(out, img);
        }
    }
}
