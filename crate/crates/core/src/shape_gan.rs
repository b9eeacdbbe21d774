//! DCGAN-style shape generator and discriminator trained with least-squares
//! adversarial losses.
//!
//! The generator projects a 100-dimensional latent vector to a 4×4 feature
//! map and doubles the resolution five times to reach a 128×128 probability
//! map.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::{images_to_tensor, plane};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid, Image, PATCH_SIZE};
use crate::mask::{modulate_size, resize_area};
use crate::nn::{
    Adam, BatchNorm2d, Conv2d, ConvGeom, ConvTranspose2d, Ctx, Graph, Init, Linear, ParamStore,
    Tensor, Var,
};

pub const LATENT_DIM: usize = 100;
pub const SHAPE_SIZE: usize = 128;
/// Number of stride-2 transposed convolutions (4 → 128).
pub const UPSAMPLE_LAYERS: usize = 5;
/// Diameter every training shape is normalized to before downsampling.
pub const TRAINING_DIAMETER: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeGanConfig {
    pub latent_dim: usize,
    /// Channels of the 4×4 projection; halved at every upsampling layer.
    pub base_channels: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for ShapeGanConfig {
    fn default() -> Self {
        Self {
            latent_dim: LATENT_DIM,
            base_channels: 512,
            lr_g: 1e-4,
            lr_d: 1e-5,
            batch_size: 6,
            epochs: 1000,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            checkpoint_every: 100,
            seed: 0,
        }
    }
}

impl ShapeGanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::InvalidArgument("latent_dim must be positive".into()));
        }
        if self.base_channels < 2 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "base_channels must be ≥ 2 and batch_size ≥ 1".into(),
            ));
        }
        Ok(())
    }

    fn channels(&self) -> [usize; UPSAMPLE_LAYERS + 1] {
        let mut c = [0; UPSAMPLE_LAYERS + 1];
        for (i, v) in c.iter_mut().enumerate() {
            *v = (self.base_channels >> i).max(1);
        }
        c[UPSAMPLE_LAYERS] = 1;
        c
    }
}

/// Least-squares GAN losses `(loss_D, loss_G)` for score batches.
pub fn shape_gan_losses(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, f64)> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let half_mse =
        |s: &[f64], t: f64| 0.5 * s.iter().map(|v| (v - t) * (v - t)).sum::<f64>() / s.len() as f64;
    Ok((
        half_mse(d_real, 1.0) + half_mse(d_fake, 0.0),
        half_mse(d_fake, 1.0),
    ))
}

/// Draws a standard-normal latent vector.
pub fn sample_latent<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f32> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Clone, Debug)]
pub struct ShapeGenerator {
    pub config: ShapeGanConfig,
    pub store: ParamStore<f32>,
    fc: Linear,
    bn0: BatchNorm2d,
    ups: Vec<ConvTranspose2d>,
    bns: Vec<BatchNorm2d>,
}

impl ShapeGenerator {
    pub fn new(config: &ShapeGanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = config.channels();
        let init = Init::Normal(0.02);
        let fc = Linear::new(
            &mut store,
            "g.fc",
            config.latent_dim,
            ch[0] * 16,
            false,
            init,
            &mut rng,
        );
        let bn0 = BatchNorm2d::new(&mut store, "g.bn0", ch[0]);
        let geom = ConvGeom::new(4, 2, 1, 1);
        let mut ups = Vec::new();
        let mut bns = Vec::new();
        for i in 0..UPSAMPLE_LAYERS {
            let last = i + 1 == UPSAMPLE_LAYERS;
            ups.push(ConvTranspose2d::new(
                &mut store,
                &format!("g.up{i}"),
                ch[i],
                ch[i + 1],
                geom,
                last,
                init,
                &mut rng,
            ));
            if !last {
                bns.push(BatchNorm2d::new(
                    &mut store,
                    &format!("g.bn{}", i + 1),
                    ch[i + 1],
                ));
            }
        }
        Ok(Self {
            config: config.clone(),
            store,
            fc,
            bn0,
            ups,
            bns,
        })
    }

    /// Spatial size after the projection and after each upsampling layer.
    pub fn spatial_progression(&self) -> Vec<usize> {
        let mut sizes = alloc::vec![4];
        for up in &self.ups {
            let s = *sizes.last().unwrap();
            sizes.push(up.geom.transpose_out(s));
        }
        sizes
    }

    pub(crate) fn forward(&self, g: &mut Graph<f32>, ctx: &mut Ctx<'_, f32>, z: Var) -> Var {
        let n = g.dims(z)[0];
        let c0 = self.config.channels()[0];
        let mut x = self.fc.forward(g, ctx, z);
        x = g.reshape(x, &[n, c0, 4, 4]);
        x = self.bn0.forward(g, ctx, x);
        x = g.relu(x);
        for (i, up) in self.ups.iter().enumerate() {
            x = up.forward(g, ctx, x);
            if let Some(bn) = self.bns.get(i) {
                x = bn.forward(g, ctx, x);
                x = g.relu(x);
            }
        }
        g.sigmoid(x)
    }

    fn latent_tensor(&self, zs: &[Vec<f32>]) -> Result<Tensor<f32>> {
        let d = self.config.latent_dim;
        let mut data = Vec::with_capacity(zs.len() * d);
        for z in zs {
            if z.len() != d {
                return Err(Error::BadLatentDim {
                    expected: d,
                    got: z.len(),
                });
            }
            data.extend_from_slice(z);
        }
        Ok(Tensor::from_vec(&[zs.len(), d], data))
    }

    /// 128×128 probability maps in `[0, 1]`, using running statistics.
    pub fn generate_batch(&self, zs: &[Vec<f32>]) -> Result<Vec<Image>> {
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let t = self.latent_tensor(zs)?;
        let mut g = Graph::new();
        let z = g.input(t);
        let mut ctx = Ctx::new(&self.store, false);
        let y = self.forward(&mut g, &mut ctx, z);
        let out = g.value(y);
        Ok((0..zs.len()).map(|i| plane(out, i, 0)).collect())
    }

    pub fn generate(&self, z: &[f32]) -> Result<Image> {
        Ok(self.generate_batch(&[z.to_vec()])?.remove(0))
    }
}

#[derive(Clone, Debug)]
pub struct ShapeDiscriminator {
    pub store: ParamStore<f32>,
    convs: Vec<Conv2d>,
    bns: Vec<Option<BatchNorm2d>>,
    head: Conv2d,
}

impl ShapeDiscriminator {
    pub fn new(config: &ShapeGanConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut ch = config.channels();
        ch.reverse();
        let init = Init::Normal(0.02);
        let geom = ConvGeom::new(4, 2, 1, 1);
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        for i in 0..UPSAMPLE_LAYERS {
            convs.push(Conv2d::new(
                &mut store,
                &format!("d.conv{i}"),
                ch[i],
                ch[i + 1],
                geom,
                i == 0,
                init,
                &mut rng,
            ));
            bns.push((i > 0).then(|| BatchNorm2d::new(&mut store, &format!("d.bn{i}"), ch[i + 1])));
        }
        let head = Conv2d::new(
            &mut store,
            "d.head",
            ch[UPSAMPLE_LAYERS],
            1,
            ConvGeom::new(4, 1, 0, 1),
            true,
            init,
            &mut rng,
        );
        Ok(Self {
            store,
            convs,
            bns,
            head,
        })
    }

    /// One raw score per sample, shape `[N, 1, 1, 1]`.
    pub(crate) fn forward(&self, g: &mut Graph<f32>, ctx: &mut Ctx<'_, f32>, x: Var) -> Var {
        let mut h = x;
        for (conv, bn) in self.convs.iter().zip(&self.bns) {
            h = conv.forward(g, ctx, h);
            if let Some(bn) = bn {
                h = bn.forward(g, ctx, h);
            }
            h = g.leaky_relu(h, 0.2);
        }
        self.head.forward(g, ctx, h)
    }

    pub fn score(&self, images: &[&Image]) -> Result<Vec<f32>> {
        let t = images_to_tensor(images)?;
        let mut g = Graph::new();
        let x = g.input(t);
        let mut ctx = Ctx::new(&self.store, false);
        let s = self.forward(&mut g, &mut ctx, x);
        Ok(g.value(s).data().to_vec())
    }
}

/// Normalizes a mask to the training diameter on a 256 canvas, then
/// area-resamples it to 128×128 and re-binarizes at 0.5.
pub fn preprocess_shape(mask: &BinaryMask) -> Result<Image> {
    let m = modulate_size(mask, TRAINING_DIAMETER, PATCH_SIZE)?;
    Ok(resize_area(&m, SHAPE_SIZE, SHAPE_SIZE).to_image())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeEpochLog {
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g: f64,
}

/// Alternating LSGAN optimization of the shape networks.
pub struct ShapeGanTrainer {
    pub generator: ShapeGenerator,
    pub discriminator: ShapeDiscriminator,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    rng: ChaCha8Rng,
    data: Vec<Image>,
    epoch: usize,
}

impl ShapeGanTrainer {
    /// Preprocesses every mask; fails on an empty dataset or an empty mask.
    pub fn new(masks: &[BinaryMask], config: &ShapeGanConfig) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let data = masks
            .iter()
            .map(preprocess_shape)
            .collect::<Result<Vec<_>>>()?;
        Self::from_preprocessed(data, config)
    }

    /// Uses 128×128 training images as given.
    pub fn from_preprocessed(data: Vec<Image>, config: &ShapeGanConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some(bad) = data.iter().find(|d| d.dims() != (SHAPE_SIZE, SHAPE_SIZE)) {
            return Err(Error::SizeMismatch {
                expected: (SHAPE_SIZE, SHAPE_SIZE),
                got: bad.dims(),
            });
        }
        let generator = ShapeGenerator::new(config, config.seed)?;
        let discriminator = ShapeDiscriminator::new(config, config.seed.wrapping_add(1))?;
        Ok(Self {
            generator,
            discriminator,
            opt_g: Adam::new(config.lr_g, config.adam_beta1, config.adam_beta2),
            opt_d: Adam::new(config.lr_d, config.adam_beta1, config.adam_beta2),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2)),
            data,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over the shuffled dataset; returns batch-averaged losses.
    pub fn train_epoch(&mut self) -> ShapeEpochLog {
        let cfg = self.generator.config.clone();
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut sum_d, mut sum_g, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let real: Vec<&Grid<f32>> = chunk.iter().map(|&i| &self.data[i]).collect();
            let real_t = images_to_tensor(&real).expect("training images share one size");
            let (ld, lg) = self.step(real_t);
            sum_d += ld;
            sum_g += lg;
            batches += 1;
        }
        self.epoch += 1;
        ShapeEpochLog {
            epoch: self.epoch,
            loss_d: sum_d / batches as f64,
            loss_g: sum_g / batches as f64,
        }
    }

    fn step(&mut self, real_t: Tensor<f32>) -> (f64, f64) {
        let n = real_t.dims()[0];
        let latent_dim = self.generator.config.latent_dim;
        let zs: Vec<Vec<f32>> = (0..n)
            .map(|_| sample_latent(latent_dim, &mut self.rng))
            .collect();
        let z_t = self
            .generator
            .latent_tensor(&zs)
            .expect("latent dims from config");

        // discriminator update on real and detached fake batches
        self.generator.store.set_requires_grad(false);
        self.discriminator.store.set_requires_grad(true);
        let mut g = Graph::new();
        let mut gctx = Ctx::new(&self.generator.store, true);
        let z = g.input(z_t.clone());
        let fake = self.generator.forward(&mut g, &mut gctx, z);
        let fake = g.detach(fake);
        let mut dctx = Ctx::new(&self.discriminator.store, true);
        let xr = g.input(real_t);
        let sr = self.discriminator.forward(&mut g, &mut dctx, xr);
        let sf = self.discriminator.forward(&mut g, &mut dctx, fake);
        let lr = g.lsgan_term(sr, 1.0);
        let lf = g.lsgan_term(sf, 0.0);
        let loss_d = g.add(lr, lf);
        let ld = g.value(loss_d).item() as f64;
        let grads = g.backward(loss_d);
        drop(gctx);
        let dup = dctx.finish();
        self.discriminator.store.zero_grad();
        grads.apply(&g, &mut self.discriminator.store);
        dup.apply(&mut self.discriminator.store);
        self.opt_d.step(&mut self.discriminator.store);

        // generator update through the current discriminator
        self.generator.store.set_requires_grad(true);
        self.discriminator.store.set_requires_grad(false);
        let mut g = Graph::new();
        let mut gctx = Ctx::new(&self.generator.store, true);
        let z = g.input(z_t);
        let fake = self.generator.forward(&mut g, &mut gctx, z);
        let mut dctx = Ctx::new(&self.discriminator.store, true);
        let sf = self.discriminator.forward(&mut g, &mut dctx, fake);
        let loss_g = g.lsgan_term(sf, 1.0);
        let lg = g.value(loss_g).item() as f64;
        let grads = g.backward(loss_g);
        drop(dctx);
        let gup = gctx.finish();
        self.generator.store.zero_grad();
        grads.apply(&g, &mut self.generator.store);
        gup.apply(&mut self.generator.store);
        self.opt_g.step(&mut self.generator.store);
        self.discriminator.store.set_requires_grad(true);
        (ld, lg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::disk;

    fn small() -> ShapeGanConfig {
        ShapeGanConfig {
            base_channels: 16,
            batch_size: 2,
            ..Default::default()
        }
    }

    #[test]
    fn losses_match_fixtures() {
        let (d, _) = shape_gan_losses(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(d, 0.0);
        let (_, g) = shape_gan_losses(&[1.0], &[0.5, 0.5, 0.5]).unwrap();
        assert!((g - 0.125).abs() < 1e-12);
        let (d, _) = shape_gan_losses(&[0.0], &[1.0]).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        assert_eq!(shape_gan_losses(&[], &[1.0]), Err(Error::EmptyBatch));
    }

    #[test]
    fn architecture_reaches_128() {
        let g = ShapeGenerator::new(&small(), 0).unwrap();
        assert_eq!(g.spatial_progression(), [4, 8, 16, 32, 64, 128]);
    }

    #[test]
    fn untrained_generator_contract() {
        let g = ShapeGenerator::new(&small(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = sample_latent(LATENT_DIM, &mut rng);
        let a = g.generate(&z).unwrap();
        let b = g.generate(&z).unwrap();
        assert_eq!(a.dims(), (128, 128));
        assert!(a.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a, b);
        assert_eq!(
            g.generate(&[0.0; 7]).unwrap_err(),
            Error::BadLatentDim {
                expected: 100,
                got: 7
            }
        );
    }

    #[test]
    fn discriminator_scores_one_per_sample() {
        let d = ShapeDiscriminator::new(&small(), 0).unwrap();
        let img = Grid::new(128, 128, 0.5f32);
        assert_eq!(d.score(&[&img, &img, &img]).unwrap().len(), 3);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            ShapeGanTrainer::new(&[], &small()),
            Err(Error::EmptyDataset)
        ));
        let empty = BinaryMask::new(64, 64);
        assert!(matches!(
            ShapeGanTrainer::new(&[empty], &small()),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn preprocessing_normalizes_diameter() {
        let m = disk(200, 200, 100.0, 100.0, 30.0);
        let p = preprocess_shape(&m).unwrap();
        assert_eq!(p.dims(), (128, 128));
        let bin = BinaryMask::threshold(&p, 0.5);
        let d = crate::mask::estimate_diameter(&bin).unwrap();
        assert!((d - 50.0).abs() < 2.0, "{d}");
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let masks: Vec<BinaryMask> = (0..4)
            .map(|i| disk(64, 64, 32.0, 32.0, 8.0 + i as f64))
            .collect();
        let run = || {
            let mut t = ShapeGanTrainer::new(&masks, &small()).unwrap();
            (0..2).map(|_| t.train_epoch()).collect::<Vec<_>>()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a
            .iter()
            .all(|l| l.loss_d.is_finite() && l.loss_g.is_finite()));
    }
}
