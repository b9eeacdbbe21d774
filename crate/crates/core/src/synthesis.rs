//! End-to-end nodule synthesis: shape generation, size modulation, crop,
//! texture inpainting and paste-back into a full image.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{crop_patch, paste_patch};
use crate::detection::Box;
use crate::error::{Error, Result};
use crate::grid::{to_unit, BinaryMask, Image};
use crate::mask::{clean_mask, modulate_size, upsample_nn};
use crate::shape_gan::{sample_latent, ShapeGenerator, SHAPE_SIZE};
use crate::texture_gan::{composite, synthesize_texture, TextureGenerator};

pub const PATCH_SIZE: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    /// Binarization threshold of the shape generator output.
    pub threshold: f32,
    /// Latent draws per nodule before giving up on an oversized or empty shape.
    pub shape_retries: usize,
    /// Center draws per nodule before [`Error::NoValidCropLocation`].
    pub crop_retries: usize,
    /// Keep every pixel outside the shape mask from the source image.
    pub composite: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            shape_retries: 10,
            crop_retries: 50,
            composite: true,
        }
    }
}

/// A synthesized nodule in full-image coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Insertion {
    pub image: Image,
    /// Shape mask on the full image.
    pub mask: BinaryMask,
    /// Tight bounding box of `mask`.
    pub bbox: Box,
    /// Top-left corner of the synthesized patch.
    pub origin: (usize, usize),
    pub target_diameter: f64,
}

/// Generated shape rescaled to `diameter` and centered on a patch-sized canvas.
pub fn shape_for_diameter(
    gen: &ShapeGenerator,
    z: &[f32],
    diameter: f64,
    threshold: f32,
) -> Result<BinaryMask> {
    let prob = gen.generate(z)?;
    let m = clean_mask(&prob, threshold)?;
    debug_assert_eq!(m.dims(), (SHAPE_SIZE, SHAPE_SIZE));
    let up = upsample_nn(&m, PATCH_SIZE)?;
    modulate_size(&up, diameter, PATCH_SIZE)
}

/// Draws latents until a shape of the requested size fits the patch.
pub fn sample_shape<R: Rng + ?Sized>(
    gen: &ShapeGenerator,
    diameter: f64,
    cfg: &SynthesisConfig,
    rng: &mut R,
) -> Result<BinaryMask> {
    let mut last = Error::EmptyMask;
    for _ in 0..cfg.shape_retries.max(1) {
        let z = sample_latent(gen.config.latent_dim, rng);
        match shape_for_diameter(gen, &z, diameter, cfg.threshold) {
            Ok(m) => return Ok(m),
            Err(e @ (Error::ShapeTooLarge { .. } | Error::EmptyMask | Error::DegenerateMask)) => {
                last = e
            }
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

/// Patch origin whose window keeps every shape pixel inside both the image
/// and the lung field.
///
/// Centers are drawn uniformly from lung foreground and rejected until one is
/// valid, which samples uniformly from the valid set.
pub fn find_crop_origin<R: Rng + ?Sized>(
    lung: &BinaryMask,
    shape: &BinaryMask,
    retries: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    let (h, w) = lung.dims();
    let (ph, pw) = shape.dims();
    let candidates: Vec<(usize, usize)> = lung.foreground().collect();
    let fg: Vec<(usize, usize)> = shape.foreground().collect();
    if fg.is_empty() {
        return Err(Error::EmptyMask);
    }
    if !candidates.is_empty() && ph <= h && pw <= w {
        for _ in 0..retries {
            let (cy, cx) = candidates[rng.random_range(0..candidates.len())];
            let (Some(oy), Some(ox)) = (cy.checked_sub(ph / 2), cx.checked_sub(pw / 2)) else {
                continue;
            };
            if oy + ph > h || ox + pw > w {
                continue;
            }
            if fg.iter().all(|&(y, x)| lung.get(oy + y, ox + x)) {
                return Ok((oy, ox));
            }
        }
    }
    Err(Error::NoValidCropLocation { attempts: retries })
}

/// Inpaints `shape` (patch-sized) into `image` at a lung location.
pub fn insert_nodule<R: Rng + ?Sized>(
    texture: &TextureGenerator<f32>,
    image: &Image,
    lung: &BinaryMask,
    shape: &BinaryMask,
    target_diameter: f64,
    cfg: &SynthesisConfig,
    rng: &mut R,
) -> Result<Insertion> {
    if lung.dims() != image.dims() {
        return Err(Error::SizeMismatch {
            expected: image.dims(),
            got: lung.dims(),
        });
    }
    let (oy, ox) = find_crop_origin(lung, shape, cfg.crop_retries, rng)?;
    let (ph, pw) = shape.dims();
    let (patch, origin) = crop_patch(image, (oy + ph / 2, ox + pw / 2), ph)?;
    debug_assert_eq!(origin, (oy, ox));
    let (_, out2) = synthesize_texture(texture, &patch, shape)?;
    let out2 = out2.map(to_unit);
    let synthesized = if cfg.composite {
        composite(&patch, shape, &out2)?
    } else {
        out2
    };
    let mut out = image.clone();
    paste_patch(&mut out, &synthesized, origin)?;
    let (h, w) = image.dims();
    let mask = shape.placed(h, w, oy as isize, ox as isize);
    let b = mask.bounds().ok_or(Error::EmptyMask)?;
    Ok(Insertion {
        image: out,
        bbox: Box::from_bounds(&b),
        mask,
        origin,
        target_diameter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{disk, estimate_diameter};
    use crate::shape_gan::ShapeGanConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_shape_gen() -> ShapeGenerator {
        ShapeGenerator::new(
            &ShapeGanConfig {
                base_channels: 16,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn crop_origin_keeps_shape_in_lung() {
        let lung = disk(400, 400, 200.0, 200.0, 150.0);
        let shape = disk(256, 256, 128.0, 128.0, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (oy, ox) = find_crop_origin(&lung, &shape, 50, &mut rng).unwrap();
            assert!(oy + 256 <= 400 && ox + 256 <= 400);
            assert!(shape
                .placed(400, 400, oy as isize, ox as isize)
                .is_subset_of(&lung));
        }
        let tiny = disk(400, 400, 200.0, 200.0, 3.0);
        assert_eq!(
            find_crop_origin(&tiny, &shape, 50, &mut rng),
            Err(Error::NoValidCropLocation { attempts: 50 })
        );
    }

    #[test]
    fn insertion_contract() {
        let gen = small_shape_gen();
        let tex = TextureGenerator::<f32>::new(2, 0);
        let image = crate::grid::Grid::from_fn(320, 320, |y, x| ((y + 2 * x) % 17) as f32 / 17.0);
        let lung = disk(320, 320, 160.0, 160.0, 140.0);
        let cfg = SynthesisConfig {
            shape_retries: 50,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 20.0;
        let shape = sample_shape(&gen, d, &cfg, &mut rng).unwrap();
        assert!((estimate_diameter(&shape).unwrap() - d).abs() <= 2.0);
        let ins = insert_nodule(&tex, &image, &lung, &shape, d, &cfg, &mut rng).unwrap();
        for y in 0..320 {
            for x in 0..320 {
                if !ins.mask.get(y, x) {
                    assert_eq!(ins.image.get(y, x).to_bits(), image.get(y, x).to_bits());
                }
            }
        }
        let b = ins.mask.bounds().unwrap();
        assert_eq!(ins.bbox, Box::from_bounds(&b));
        assert!(ins.mask.is_subset_of(&lung));
    }
}
