//! Coarse-to-fine gated-convolution inpainting generator, spectrally
//! normalized PatchGAN discriminator and the texture loss stack.
//!
//! Patches are `[0, 1]` at rest and `[-1, 1]` inside the networks; losses are
//! evaluated in network space.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{plane, to_tensor};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorConfig, FeatureExtractor};
use crate::grid::{to_signed, BinaryMask, Grid, Patch};
use crate::nn::{
    Activation, Adam, Conv2d, ConvGeom, Ctx, GatedConv2d, Graph, Init, ParamStore, Scalar, Tensor,
    Var,
};

/// Dilation rates of the bottleneck layers, in order.
pub const DILATIONS: [usize; 4] = [2, 4, 8, 16];
/// Number of discriminator convolutions (five stride-2, one stride-1).
pub const DISC_LAYERS: usize = 6;
const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rec1: f64,
    pub rec2: f64,
    pub perc: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec1: 1.0,
            rec2: 1.0,
            perc: 1.0,
            adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rec1, self.rec2, self.perc, self.adv];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureGanConfig {
    /// Generator width; doubled at each of the two downsamplings.
    pub base_channels: usize,
    /// Discriminator width of the first layer.
    pub disc_channels: usize,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    /// Discriminator learning rate relative to the generator's.
    pub lr_d_ratio: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Epochs over which L_rec2 must improve by `plateau_min_improvement`.
    pub plateau_window: usize,
    pub plateau_min_improvement: f64,
    pub max_epochs_per_phase: usize,
    /// Hard cap on optimizer steps over both phases.
    pub max_steps: Option<usize>,
    /// Stop as soon as the running epoch L_rec2 falls below this value.
    pub target_rec2: Option<f64>,
    pub checkpoint_every: usize,
    /// Only zero padding is implemented.
    pub padding: Padding,
    pub extractor: ExtractorConfig,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Zero,
}

impl Default for TextureGanConfig {
    fn default() -> Self {
        Self {
            base_channels: 48,
            disc_channels: 64,
            weights: LossWeights::default(),
            batch_size: 8,
            lr_phase1: 1e-4,
            lr_phase2: 1e-5,
            lr_d_ratio: 0.1,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            plateau_window: 10,
            plateau_min_improvement: 0.01,
            max_epochs_per_phase: 200,
            max_steps: None,
            target_rec2: None,
            checkpoint_every: 1000,
            padding: Padding::Zero,
            extractor: ExtractorConfig::default(),
            seed: 0,
        }
    }
}

impl TextureGanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.disc_channels == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "base_channels, disc_channels and batch_size must be positive".into(),
            ));
        }
        self.weights.validate()
    }
}

/// Static description of one gated layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub upsample_before: bool,
    pub output: bool,
}

fn stage_specs(in_ch: usize, c: usize) -> Vec<LayerSpec> {
    let l = |i, o, k, s, d, up| LayerSpec {
        in_channels: i,
        out_channels: o,
        kernel: k,
        stride: s,
        dilation: d,
        upsample_before: up,
        output: false,
    };
    let (c2, c4, half) = (2 * c, 4 * c, (c / 2).max(1));
    let mut v = vec![
        l(in_ch, c, 5, 1, 1, false),
        l(c, c2, 3, 2, 1, false),
        l(c2, c2, 3, 1, 1, false),
        l(c2, c4, 3, 2, 1, false),
        l(c4, c4, 3, 1, 1, false),
    ];
    v.extend(DILATIONS.iter().map(|&d| l(c4, c4, 3, 1, d, false)));
    v.extend([
        l(c4, c4, 3, 1, 1, false),
        l(c4, c2, 3, 1, 1, true),
        l(c2, c2, 3, 1, 1, false),
        l(c2, c, 3, 1, 1, true),
        l(c, half, 3, 1, 1, false),
    ]);
    v.push(LayerSpec {
        output: true,
        ..l(half, 1, 3, 1, 1, false)
    });
    v
}

fn spec_geom(s: &LayerSpec) -> ConvGeom {
    ConvGeom::new(
        s.kernel,
        s.stride,
        s.dilation * (s.kernel - 1) / 2,
        s.dilation,
    )
}

#[derive(Clone, Debug)]
struct Stage {
    layers: Vec<(LayerSpec, GatedConv2d)>,
}

impl Stage {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_ch: usize,
        c: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = stage_specs(in_ch, c)
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let act = if s.output {
                    Activation::Identity
                } else {
                    Activation::LeakyRelu(LEAKY_SLOPE)
                };
                let layer = GatedConv2d::new(
                    store,
                    &format!("{prefix}.{i}"),
                    s.in_channels,
                    s.out_channels,
                    spec_geom(&s),
                    act,
                    !s.output,
                    rng,
                );
                (s, layer)
            })
            .collect();
        Self { layers }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let mut h = x;
        for (spec, layer) in &self.layers {
            if spec.upsample_before {
                h = g.upsample_nearest(h, 2);
            }
            h = layer.forward(g, ctx, h);
        }
        g.tanh(h)
    }
}

/// Coarse generator `G_C` followed by refinement generator `G_R`, sharing
/// one parameter store.
#[derive(Clone, Debug)]
pub struct TextureGenerator<T> {
    pub store: ParamStore<T>,
    coarse: Stage,
    refine: Stage,
}

impl<T: Scalar> TextureGenerator<T> {
    pub fn new(base_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let coarse = Stage::new(&mut store, "coarse", 4, base_channels, &mut rng);
        let refine = Stage::new(&mut store, "refine", 4, base_channels, &mut rng);
        Self {
            store,
            coarse,
            refine,
        }
    }

    pub fn coarse_specs(&self) -> Vec<LayerSpec> {
        self.coarse.layers.iter().map(|(s, _)| *s).collect()
    }

    pub fn refine_specs(&self) -> Vec<LayerSpec> {
        self.refine.layers.iter().map(|(s, _)| *s).collect()
    }

    pub fn coarse_layers(&self) -> impl Iterator<Item = &GatedConv2d> {
        self.coarse.layers.iter().map(|(_, l)| l)
    }

    /// `(I_out1, I_out2)` for a `[N, 4, H, W]` input; `mask` is `[N, 1, H, W]`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        ctx: &mut Ctx<'_, T>,
        input: Var,
        mask: Var,
    ) -> (Var, Var) {
        let out1 = self.coarse.forward(g, ctx, input);
        let x2 = g.concat(&[out1, out1, out1, mask], 1);
        let out2 = self.refine.forward(g, ctx, x2);
        (out1, out2)
    }
}

/// Six-layer PatchGAN on `(image, mask)` pairs with spectral normalization
/// on every convolution.
#[derive(Clone, Debug)]
pub struct TextureDiscriminator<T> {
    pub store: ParamStore<T>,
    convs: Vec<Conv2d>,
}

impl<T: Scalar> TextureDiscriminator<T> {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = [
            2,
            channels,
            2 * channels,
            4 * channels,
            4 * channels,
            4 * channels,
            1,
        ];
        let convs = (0..DISC_LAYERS)
            .map(|i| {
                let geom = if i + 1 < DISC_LAYERS {
                    ConvGeom::new(5, 2, 2, 1)
                } else {
                    ConvGeom::new(3, 1, 1, 1)
                };
                let name = format!("d.{i}");
                Conv2d::new(
                    &mut store,
                    &name,
                    widths[i],
                    widths[i + 1],
                    geom,
                    true,
                    Init::FanIn,
                    &mut rng,
                )
                .spectral(&mut store, &name, &mut rng)
            })
            .collect();
        Self { store, convs }
    }

    pub fn convs(&self) -> &[Conv2d] {
        &self.convs
    }

    /// Patch scores `[N, 1, ⌈H/32⌉, ⌈W/32⌉]`.
    pub fn forward(&self, g: &mut Graph<T>, ctx: &mut Ctx<'_, T>, image: Var, mask: Var) -> Var {
        let mut h = g.concat(&[image, mask], 1);
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, ctx, h);
            if i + 1 < self.convs.len() {
                h = g.leaky_relu(h, T::lit(LEAKY_SLOPE));
            }
        }
        h
    }
}

fn check_same(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::SizeMismatch {
            expected: a,
            got: b,
        });
    }
    Ok(())
}

/// `I_orig ⊙ (1 − M) + M`: masked pixels set to the maximum intensity.
pub fn fill_masked(orig: &Patch, mask: &BinaryMask) -> Result<Patch> {
    check_same(orig.dims(), mask.dims())?;
    let (h, w) = orig.dims();
    Ok(Grid::from_fn(h, w, |y, x| {
        if mask.get(y, x) {
            1.0
        } else {
            orig.get(y, x)
        }
    }))
}

/// Four generator input planes in network space: the filled patch three
/// times, then the mask.
pub fn make_input(orig: &Patch, mask: &BinaryMask) -> Result<[Grid<f32>; 4]> {
    let filled = fill_masked(orig, mask)?.map(to_signed);
    Ok([filled.clone(), filled.clone(), filled, mask.to_image()])
}

/// `I_orig ⊙ (1 − M) + I_out2 ⊙ M`.
pub fn composite(orig: &Patch, mask: &BinaryMask, out2: &Patch) -> Result<Patch> {
    check_same(orig.dims(), mask.dims())?;
    check_same(orig.dims(), out2.dims())?;
    let (h, w) = orig.dims();
    Ok(Grid::from_fn(h, w, |y, x| {
        if mask.get(y, x) {
            out2.get(y, x)
        } else {
            orig.get(y, x)
        }
    }))
}

/// Runs both generator stages on one patch; outputs are in `[-1, 1]`.
pub fn synthesize_texture(
    gen: &TextureGenerator<f32>,
    orig: &Patch,
    mask: &BinaryMask,
) -> Result<(Patch, Patch)> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let planes = make_input(orig, mask)?;
    let input = to_tensor(&[planes.iter().collect()])?;
    let m = to_tensor(&[vec![&planes[3]]])?;
    let mut g = Graph::new();
    let (x, mv) = (g.input(input), g.input(m));
    let mut ctx = Ctx::new(&gen.store, false);
    let (o1, o2) = gen.forward(&mut g, &mut ctx, x, mv);
    Ok((plane(g.value(o1), 0, 0), plane(g.value(o2), 0, 0)))
}

/// Loss components of the texture generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TextureLosses {
    pub rec1: f64,
    pub rec2: f64,
    pub perc: f64,
    pub adv: f64,
    pub total: f64,
}

/// Graph nodes of the generator objective.
pub struct LossVars {
    pub rec1: Var,
    pub rec2: Var,
    pub perc: Var,
    pub adv: Var,
    pub total: Var,
}

/// Builds `λ1·L_rec1 + λ2·L_rec2 + λp·L_perc + λa·L_adv` in `g`.
pub fn generator_objective<T: Scalar>(
    g: &mut Graph<T>,
    out1: Var,
    out2: Var,
    gt: Var,
    fake_scores: Var,
    extractor: &FeatureExtractor<T>,
    w: &LossWeights,
) -> LossVars {
    let rec1 = g.l1(gt, out1);
    let rec2 = g.l1(gt, out2);
    let ft = extractor.taps(g, gt);
    let fo = extractor.taps(g, out2);
    let mut perc = g.l1(ft[0], fo[0]);
    for i in 1..3 {
        let d = g.l1(ft[i], fo[i]);
        perc = g.add(perc, d);
    }
    let adv = g.lsgan_term(fake_scores, T::one());
    let mut total = g.scale(rec1, T::lit(w.rec1));
    for (v, wt) in [(rec2, w.rec2), (perc, w.perc), (adv, w.adv)] {
        let s = g.scale(v, T::lit(wt));
        total = g.add(total, s);
    }
    LossVars {
        rec1,
        rec2,
        perc,
        adv,
        total,
    }
}

/// Loss breakdown for network-space patches and precomputed discriminator
/// scores on `(I_out2, M_gt)`.
pub fn texture_losses<T: Scalar>(
    out1: &Patch,
    out2: &Patch,
    gt: &Patch,
    d_fake: &[f64],
    extractor: &FeatureExtractor<T>,
    w: &LossWeights,
) -> Result<TextureLosses> {
    check_same(gt.dims(), out1.dims())?;
    check_same(gt.dims(), out2.dims())?;
    if d_fake.is_empty() {
        return Err(Error::EmptyBatch);
    }
    w.validate()?;
    let t = |p: &Patch| to_tensor(&[vec![p]]).map(|t| t.cast::<T>());
    let mut g = Graph::new();
    let (o1, o2, gv) = (g.input(t(out1)?), g.input(t(out2)?), g.input(t(gt)?));
    let s = g.input(Tensor::from_vec(
        &[d_fake.len()],
        d_fake.iter().map(|&v| T::lit(v)).collect(),
    ));
    let l = generator_objective(&mut g, o1, o2, gv, s, extractor, w);
    let v = |x: Var| g.value(x).item().to_f64().unwrap();
    Ok(TextureLosses {
        rec1: v(l.rec1),
        rec2: v(l.rec2),
        perc: v(l.perc),
        adv: v(l.adv),
        total: v(l.total),
    })
}

/// Least-squares discriminator loss `½·mean((D(real) − 1)²) + ½·mean(D(fake)²)`.
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    Ok(crate::shape_gan::shape_gan_losses(d_real, d_fake)?.0)
}

/// A real nodule patch (`[0, 1]`) with its ground-truth shape mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureSample {
    pub gt: Patch,
    pub mask: BinaryMask,
}

impl TextureSample {
    pub fn new(gt: Patch, mask: BinaryMask) -> Result<Self> {
        check_same(gt.dims(), mask.dims())?;
        Ok(Self { gt, mask })
    }
}

/// Per-step training record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureStepLog {
    pub step: usize,
    pub phase: u8,
    pub rec1: f64,
    pub rec2: f64,
    pub perc: f64,
    pub adv_g: f64,
    pub loss_d: f64,
}

/// Detects when a monitored loss improves by less than a relative margin
/// over a window of epochs.
#[derive(Clone, Debug, Default)]
pub struct Plateau {
    pub window: usize,
    pub min_improvement: f64,
    history: Vec<f64>,
}

impl Plateau {
    pub fn new(window: usize, min_improvement: f64) -> Self {
        Self {
            window,
            min_improvement,
            history: Vec::new(),
        }
    }

    /// Records an epoch value; true once the best value of the last `window`
    /// epochs is less than `min_improvement` (relative) below the best before.
    pub fn observe(&mut self, v: f64) -> bool {
        self.history.push(v);
        let n = self.history.len();
        if n <= self.window {
            return false;
        }
        let best = |s: &[f64]| s.iter().copied().fold(f64::INFINITY, f64::min);
        let before = best(&self.history[..n - self.window]);
        let recent = best(&self.history[n - self.window..]);
        before - recent < self.min_improvement * before.abs()
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }
}

/// Why training ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    TargetReached,
    Converged,
    MaxSteps,
}

struct Prepared {
    input: Tensor<f32>,
    mask: Tensor<f32>,
    gt: Tensor<f32>,
}

/// Two-phase optimization of the texture networks.
pub struct TextureGanTrainer {
    pub config: TextureGanConfig,
    pub generator: TextureGenerator<f32>,
    pub discriminator: TextureDiscriminator<f32>,
    pub extractor: FeatureExtractor<f32>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    rng: ChaCha8Rng,
    data: Vec<Prepared>,
    step: usize,
    phase: u8,
    epochs_in_phase: usize,
    plateau: Plateau,
    stopped: Option<StopReason>,
}

impl TextureGanTrainer {
    pub fn new(samples: &[TextureSample], config: &TextureGanConfig) -> Result<Self> {
        let extractor = FeatureExtractor::new(&config.extractor)?;
        Self::with_extractor(samples, config, extractor)
    }

    pub fn with_extractor(
        samples: &[TextureSample],
        config: &TextureGanConfig,
        extractor: FeatureExtractor<f32>,
    ) -> Result<Self> {
        config.validate()?;
        let first = samples.first().ok_or(Error::EmptyDataset)?;
        let size = first.gt.dims();
        let mut data = Vec::with_capacity(samples.len());
        for s in samples {
            check_same(size, s.gt.dims())?;
            check_same(size, s.mask.dims())?;
            let planes = make_input(&s.gt, &s.mask)?;
            let gt = s.gt.map(to_signed);
            data.push(Prepared {
                input: to_tensor(&[planes.iter().collect()])?,
                mask: to_tensor(&[vec![&planes[3]]])?,
                gt: to_tensor(&[vec![&gt]])?,
            });
        }
        let lr = config.lr_phase1;
        Ok(Self {
            config: config.clone(),
            generator: TextureGenerator::new(config.base_channels, config.seed),
            discriminator: TextureDiscriminator::new(
                config.disc_channels,
                config.seed.wrapping_add(1),
            ),
            extractor,
            opt_g: Adam::new(lr, config.adam_beta1, config.adam_beta2),
            opt_d: Adam::new(lr * config.lr_d_ratio, config.adam_beta1, config.adam_beta2),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2)),
            data,
            step: 0,
            phase: 1,
            epochs_in_phase: 0,
            plateau: Plateau::new(config.plateau_window, config.plateau_min_improvement),
            stopped: None,
        })
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn phase(&self) -> u8 {
        self.phase
    }

    pub fn stopped(&self) -> Option<StopReason> {
        self.stopped
    }

    pub fn learning_rates(&self) -> (f64, f64) {
        (self.opt_g.lr, self.opt_d.lr)
    }

    fn enter_phase2(&mut self) {
        self.phase = 2;
        self.epochs_in_phase = 0;
        self.plateau.reset();
        self.opt_g.lr = self.config.lr_phase2;
        self.opt_d.lr = self.config.lr_phase2 * self.config.lr_d_ratio;
    }

    /// One epoch of mini-batch steps, then the phase/stop bookkeeping.
    pub fn train_epoch(&mut self) -> Vec<TextureStepLog> {
        let mut logs = Vec::new();
        if self.stopped.is_some() {
            return logs;
        }
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(self.config.batch_size) {
            if self.config.max_steps.is_some_and(|m| self.step >= m) {
                self.stopped = Some(StopReason::MaxSteps);
                break;
            }
            logs.push(self.train_step(chunk));
        }
        if logs.is_empty() {
            return logs;
        }
        let mean_rec2 = logs.iter().map(|l| l.rec2).sum::<f64>() / logs.len() as f64;
        self.epochs_in_phase += 1;
        if self.config.target_rec2.is_some_and(|t| mean_rec2 < t) {
            self.stopped = Some(StopReason::TargetReached);
        } else if self.plateau.observe(mean_rec2)
            || self.epochs_in_phase >= self.config.max_epochs_per_phase
        {
            if self.phase == 1 {
                log::info!("texture GAN entering phase 2 after step {}", self.step);
                self.enter_phase2();
            } else {
                self.stopped = Some(StopReason::Converged);
            }
        }
        logs
    }

    fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
        let pick = |f: fn(&Prepared) -> &Tensor<f32>| {
            let parts: Vec<Tensor<f32>> = idx.iter().map(|&i| f(&self.data[i]).select(0)).collect();
            Tensor::stack(&parts)
        };
        (pick(|p| &p.input), pick(|p| &p.mask), pick(|p| &p.gt))
    }

    fn train_step(&mut self, idx: &[usize]) -> TextureStepLog {
        let (input_t, mask_t, gt_t) = self.batch(idx);

        // generator objective against the current discriminator
        self.generator.store.set_requires_grad(true);
        self.discriminator.store.set_requires_grad(false);
        let mut g = Graph::new();
        let (input, mask, gt) = (
            g.input(input_t),
            g.input(mask_t.clone()),
            g.input(gt_t.clone()),
        );
        let mut gctx = Ctx::new(&self.generator.store, true);
        let (out1, out2) = self.generator.forward(&mut g, &mut gctx, input, mask);
        let mut dctx = Ctx::new(&self.discriminator.store, false);
        let fake_scores = self.discriminator.forward(&mut g, &mut dctx, out2, mask);
        let l = generator_objective(
            &mut g,
            out1,
            out2,
            gt,
            fake_scores,
            &self.extractor,
            &self.config.weights,
        );
        let grads = g.backward(l.total);
        let value = |v: Var| g.value(v).item() as f64;
        let (rec1, rec2, perc, adv_g) = (value(l.rec1), value(l.rec2), value(l.perc), value(l.adv));
        let fake_t = g.value(out2).clone();
        drop((gctx, dctx));
        self.generator.store.zero_grad();
        grads.apply(&g, &mut self.generator.store);
        drop(g);
        self.opt_g.step(&mut self.generator.store);

        // discriminator on real and detached fake patches
        self.discriminator.store.set_requires_grad(true);
        let mut g = Graph::new();
        let (real, fake, mask) = (g.input(gt_t), g.input(fake_t), g.input(mask_t));
        let mut dctx = Ctx::new(&self.discriminator.store, true);
        let sr = self.discriminator.forward(&mut g, &mut dctx, real, mask);
        let sf = self.discriminator.forward(&mut g, &mut dctx, fake, mask);
        let lr = g.lsgan_term(sr, 1.0);
        let lf = g.lsgan_term(sf, 0.0);
        let ld = g.add(lr, lf);
        let loss_d = g.value(ld).item() as f64;
        let grads = g.backward(ld);
        let updates = dctx.finish();
        self.discriminator.store.zero_grad();
        grads.apply(&g, &mut self.discriminator.store);
        updates.apply(&mut self.discriminator.store);
        self.opt_d.step(&mut self.discriminator.store);

        self.step += 1;
        TextureStepLog {
            step: self.step,
            phase: self.phase,
            rec1,
            rec2,
            perc,
            adv_g,
            loss_d,
        }
    }

    /// Full-patch L_rec2 of every training sample, in evaluation mode.
    pub fn evaluate_rec2(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|p| {
                let mut g = Graph::new();
                let (x, m) = (g.input(p.input.clone()), g.input(p.mask.clone()));
                let gt = g.input(p.gt.clone());
                let mut ctx = Ctx::new(&self.generator.store, false);
                let (_, o2) = self.generator.forward(&mut g, &mut ctx, x, m);
                let l = g.l1(gt, o2);
                g.value(l).item() as f64
            })
            .collect()
    }
}
