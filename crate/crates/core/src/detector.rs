//! Detector interface and a small fully convolutional heatmap detector used
//! as the reference implementation behind it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{traditional_augment, Annotated, AugmentConfig};
use crate::detection::{froc_summary, Box, FrocSummary, ImageDetections};
use crate::error::{Error, Result};
use crate::grid::Image;
use crate::nn::{sigmoid, Adam, Conv2d, ConvGeom, Ctx, Graph, Init, ParamStore, Tensor, Var};

/// Optimisation settings shared by pretraining and finetuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Flip/shift augmentation applied to every sample when set.
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl DetectorTrainConfig {
    pub fn pretrain() -> Self {
        Self {
            lr: 3e-3,
            epochs: 20,
            batch_size: 8,
            augment: Some(AugmentConfig::default()),
            seed: 0,
        }
    }

    pub fn finetune() -> Self {
        Self {
            lr: 1e-4,
            epochs: 10,
            ..Self::pretrain()
        }
    }
}

/// A trainable nodule detector.
pub trait Detector {
    /// Trains from the current weights; returns the mean loss of each epoch.
    fn fit(&mut self, data: &[Annotated], cfg: &DetectorTrainConfig) -> Result<Vec<f64>>;

    /// Continues training a fitted detector.
    fn finetune(&mut self, data: &[Annotated], cfg: &DetectorTrainConfig) -> Result<Vec<f64>>;

    /// Scored boxes for one image.
    fn predict(&self, image: &Image) -> Result<Vec<Box>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapDetectorConfig {
    /// Area downsampling applied to images before the network.
    pub downsample: usize,
    pub channels: usize,
    /// Weight of the peak cell of each nodule in the heatmap loss.
    pub pos_weight: f64,
    pub max_detections: usize,
    pub min_score: f64,
    pub seed: u64,
}

impl Default for HeatmapDetectorConfig {
    fn default() -> Self {
        Self {
            downsample: 4,
            channels: 8,
            pos_weight: 100.0,
            max_detections: 10,
            min_score: 0.01,
            seed: 0,
        }
    }
}

/// Output channels: heat logit, log width, log height, x offset, y offset.
const HEAD: usize = 5;
const SLOPE: f64 = 0.1;
/// Initial heat bias, a prior of about 1% foreground.
const HEAT_PRIOR: f32 = -4.6;

/// Heatmap detector: a stride-2 stem, a dilated context stack and a 1×1 head
/// predicting nodule centers, sizes and sub-cell offsets.
#[derive(Clone, Debug)]
pub struct HeatmapDetector {
    pub config: HeatmapDetectorConfig,
    pub store: ParamStore<f32>,
    layers: Vec<Conv2d>,
    head: Conv2d,
    fitted: bool,
}

impl HeatmapDetector {
    pub fn new(config: &HeatmapDetectorConfig) -> Result<Self> {
        if config.downsample == 0 || config.channels == 0 || config.max_detections == 0 {
            return Err(Error::InvalidArgument(
                "downsample, channels and max_detections must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let specs = [
            (1, c, ConvGeom::new(3, 2, 1, 1)),
            (c, c, ConvGeom::same(3, 1)),
            (c, 2 * c, ConvGeom::same(3, 2)),
            (2 * c, 2 * c, ConvGeom::same(3, 4)),
            (2 * c, 2 * c, ConvGeom::same(3, 8)),
        ];
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, geom))| {
                Conv2d::new(
                    &mut store,
                    &format!("det.conv{i}"),
                    cin,
                    cout,
                    geom,
                    true,
                    Init::FanIn,
                    &mut rng,
                )
            })
            .collect();
        let head = Conv2d::new(
            &mut store,
            "det.head",
            2 * c,
            HEAD,
            ConvGeom::same(1, 1),
            true,
            Init::Normal(0.01),
            &mut rng,
        );
        let bias = store.find("det.head.bias").expect("head has a bias");
        store.value_mut(bias).data_mut()[0] = HEAT_PRIOR;
        Ok(Self {
            config: config.clone(),
            store,
            layers,
            head,
            fitted: false,
        })
    }

    /// Marks externally loaded weights as usable.
    pub fn set_fitted(&mut self) {
        self.fitted = true;
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    /// Image pixels per output cell.
    pub fn cell_size(&self) -> usize {
        2 * self.config.downsample
    }

    fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let s = self.cell_size();
        if !h.is_multiple_of(s) || !w.is_multiple_of(s) || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {h}×{w} must be a positive multiple of {s}"
            )));
        }
        Ok(())
    }

    fn network_input(&self, image: &Image) -> Vec<f32> {
        let d = self.config.downsample;
        let small = image.resize_area(image.height() / d, image.width() / d);
        small.as_slice().iter().map(|&v| 2.0 * v - 1.0).collect()
    }

    fn forward(&self, g: &mut Graph<f32>, ctx: &mut Ctx<'_, f32>, x: Var) -> Var {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, ctx, h);
            h = g.leaky_relu(h, SLOPE as f32);
        }
        self.head.forward(g, ctx, h)
    }

    /// Heat targets, heat weights, regression targets and regression mask for one image.
    fn targets(
        &self,
        boxes: &[Box],
        gh: usize,
        gw: usize,
    ) -> (Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>) {
        let s = self.cell_size() as f64;
        let cells = gh * gw;
        let mut heat = vec![0.0f32; cells];
        let mut peaks = Vec::new();
        let mut reg = vec![0.0f32; 4 * cells];
        let mut reg_mask = vec![0.0f32; 4 * cells];
        for b in boxes.iter().filter(|b| b.is_valid()) {
            let (cx, cy) = b.center();
            let (fx, fy) = (cx / s - 0.5, cy / s - 0.5);
            let j = (fx.round().max(0.0) as usize).min(gw - 1);
            let i = (fy.round().max(0.0) as usize).min(gh - 1);
            let sigma = (b.width().max(b.height()) / s / 3.0).max(0.5);
            for y in 0..gh {
                for x in 0..gw {
                    let d2 = (x as f64 - fx).powi(2) + (y as f64 - fy).powi(2);
                    let v = (-d2 / (2.0 * sigma * sigma)).exp() as f32;
                    let cell = &mut heat[y * gw + x];
                    *cell = cell.max(v);
                }
            }
            peaks.push(i * gw + j);
            let vals = [
                b.width().ln(),
                b.height().ln(),
                fx - j as f64,
                fy - i as f64,
            ];
            for (k, v) in vals.iter().enumerate() {
                reg[k * cells + i * gw + j] = *v as f32;
                reg_mask[k * cells + i * gw + j] = 1.0;
            }
        }
        let mut weight = vec![1.0f32; cells];
        for p in peaks {
            heat[p] = 1.0;
            weight[p] = self.config.pos_weight as f32;
        }
        (heat, weight, reg, reg_mask)
    }

    fn train(&mut self, data: &[Annotated], cfg: &DetectorTrainConfig) -> Result<Vec<f64>> {
        let first = data.first().ok_or(Error::EmptyDataset)?;
        let (h, w) = first.image.dims();
        for a in data {
            if a.image.dims() != (h, w) {
                return Err(Error::SizeMismatch {
                    expected: (h, w),
                    got: a.image.dims(),
                });
            }
        }
        self.check_size(h, w)?;
        if cfg.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        let d = self.config.downsample;
        let (ih, iw) = (h / d, w / d);
        let s = self.cell_size();
        let (gh, gw) = (h / s, w / s);
        let cells = gh * gw;
        let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let n = chunk.len();
                let mut input = Vec::with_capacity(n * ih * iw);
                let (mut heat, mut weight, mut reg, mut reg_mask) =
                    (Vec::new(), Vec::new(), Vec::new(), Vec::new());
                let mut positives = 0usize;
                for &i in chunk {
                    let sample = match &cfg.augment {
                        Some(a) => traditional_augment(&data[i], a, &mut rng),
                        None => data[i].clone(),
                    };
                    input.extend(self.network_input(&sample.image));
                    let t = self.targets(&sample.boxes, gh, gw);
                    positives += sample.boxes.iter().filter(|b| b.is_valid()).count();
                    heat.extend(t.0);
                    weight.extend(t.1);
                    reg.extend(t.2);
                    reg_mask.extend(t.3);
                }
                let mut g = Graph::new();
                let x = g.input(Tensor::from_vec(&[n, 1, ih, iw], input));
                let mut ctx = Ctx::new(&self.store, true);
                let out = self.forward(&mut g, &mut ctx, x);
                let logits = g.narrow(out, 1, 0, 1);
                let heat_loss = g.bce_with_logits(
                    logits,
                    Tensor::from_vec(&[n, 1, gh, gw], heat),
                    Tensor::from_vec(&[n, 1, gh, gw], weight),
                    (n * cells) as f32 / 100.0,
                );
                let pred = g.narrow(out, 1, 1, 4);
                let target = g.input(Tensor::from_vec(&[n, 4, gh, gw], reg));
                let diff = g.sub(pred, target);
                let diff = g.abs(diff);
                let masked = g.mul_const(diff, Tensor::from_vec(&[n, 4, gh, gw], reg_mask));
                let reg_sum = g.sum(masked);
                let reg_loss = g.scale(reg_sum, 1.0 / positives.max(1) as f32);
                let loss = g.add(heat_loss, reg_loss);
                total += g.value(loss).item() as f64;
                batches += 1;
                let grads = g.backward(loss);
                drop(ctx);
                self.store.zero_grad();
                grads.apply(&g, &mut self.store);
                drop(g);
                opt.step(&mut self.store);
            }
            let mean = total / batches.max(1) as f64;
            log::debug!("detector epoch loss {mean:.5}");
            history.push(mean);
        }
        self.fitted = true;
        Ok(history)
    }

    fn decode(&self, out: &Tensor<f32>, h: usize, w: usize) -> Vec<Box> {
        let (_, _, gh, gw) = out.nchw();
        let cells = gh * gw;
        let o = out.data();
        let s = self.cell_size() as f64;
        let heat: Vec<f32> = o[..cells].iter().map(|&v| sigmoid(v)).collect();
        let mut found = Vec::new();
        for y in 0..gh {
            for x in 0..gw {
                let v = heat[y * gw + x];
                if (v as f64) < self.config.min_score {
                    continue;
                }
                let mut peak = true;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        if (dy, dx) == (0, 0)
                            || ny < 0
                            || nx < 0
                            || ny >= gh as isize
                            || nx >= gw as isize
                        {
                            continue;
                        }
                        let nv = heat[ny as usize * gw + nx as usize];
                        // plateaus keep their first cell in raster order
                        let earlier = (dy, dx) < (0, 0);
                        if nv > v || (earlier && nv == v) {
                            peak = false;
                        }
                    }
                }
                if !peak {
                    continue;
                }
                let at = |k: usize| o[k * cells + y * gw + x] as f64;
                let bw = at(1).clamp(-10.0, 10.0).exp();
                let bh = at(2).clamp(-10.0, 10.0).exp();
                let cx = (x as f64 + 0.5 + at(3)) * s;
                let cy = (y as f64 + 0.5 + at(4)) * s;
                let b = Box::new(
                    (cx - bw / 2.0).max(0.0),
                    (cy - bh / 2.0).max(0.0),
                    (cx + bw / 2.0).min(w as f64),
                    (cy + bh / 2.0).min(h as f64),
                );
                if b.is_valid() {
                    found.push(b.scored(v as f64));
                }
            }
        }
        found.sort_by(|a, b| b.score_or_zero().total_cmp(&a.score_or_zero()));
        found.truncate(self.config.max_detections);
        found
    }
}

impl Detector for HeatmapDetector {
    fn fit(&mut self, data: &[Annotated], cfg: &DetectorTrainConfig) -> Result<Vec<f64>> {
        self.train(data, cfg)
    }

    fn finetune(&mut self, data: &[Annotated], cfg: &DetectorTrainConfig) -> Result<Vec<f64>> {
        if !self.fitted {
            return Err(Error::NotFitted);
        }
        self.train(data, cfg)
    }

    fn predict(&self, image: &Image) -> Result<Vec<Box>> {
        if !self.fitted {
            return Err(Error::NotFitted);
        }
        let (h, w) = image.dims();
        self.check_size(h, w)?;
        let d = self.config.downsample;
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(
            &[1, 1, h / d, w / d],
            self.network_input(image),
        ));
        let mut ctx = Ctx::new(&self.store, false);
        let out = self.forward(&mut g, &mut ctx, x);
        Ok(self.decode(g.value(out), h, w))
    }
}

/// Predictions paired with ground truth for every image of a set.
pub fn detect_all<D: Detector + ?Sized>(
    det: &D,
    data: &[Annotated],
) -> Result<Vec<ImageDetections>> {
    data.iter()
        .enumerate()
        .map(|(i, a)| {
            Ok(ImageDetections {
                image_id: format!("{i}"),
                predictions: det.predict(&a.image)?,
                ground_truths: a.boxes.clone(),
            })
        })
        .collect()
}

/// FROC summary of a detector on an annotated set.
pub fn evaluate_detector<D: Detector + ?Sized>(
    det: &D,
    data: &[Annotated],
    iou: f64,
    fp_max: f64,
) -> Result<FrocSummary> {
    froc_summary(&detect_all(det, data)?, iou, fp_max)
}
