//! Hard-example mining: find the nodules a detector misses, sample sizes from
//! them, synthesize matching nodules into normal images and finetune on the
//! union with real data.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Annotated, ImageAnnotation};
use crate::detection::{match_detections, threshold_at_fp_rate, DetectionRecord, FrocSummary};
use crate::detector::{detect_all, evaluate_detector, Detector, DetectorTrainConfig};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Image};
use crate::mask::{estimate_diameter, fill_polygon};
use crate::shape_gan::ShapeGenerator;
use crate::synthesis::{insert_nodule, sample_shape, SynthesisConfig};
use crate::texture_gan::TextureGenerator;

/// Operating point used to split detected from missed nodules.
pub const MINING_FP_RATE: f64 = 0.25;
pub const MATCH_IOU: f64 = 0.2;

/// Fixed-width binned view of a sample array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` ascending bin edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Bins of `width` aligned to multiples of `width`.
    pub fn new(samples: &[f64], width: f64) -> Self {
        if samples.is_empty() || !(width > 0.0) {
            return Self {
                edges: Vec::new(),
                counts: Vec::new(),
            };
        }
        let lo = (samples.iter().copied().fold(f64::INFINITY, f64::min) / width).floor();
        let hi = (samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) / width).floor();
        let bins = (hi - lo) as usize + 1;
        let mut counts = vec![0; bins];
        for &s in samples {
            let b = ((s / width).floor() - lo) as usize;
            counts[b.min(bins - 1)] += 1;
        }
        Self {
            edges: (0..=bins).map(|i| (lo + i as f64) * width).collect(),
            counts,
        }
    }
}

/// Diameters (pixels) of mined nodules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeDistribution {
    pub samples: Vec<f64>,
    pub histogram: Histogram,
}

impl AttributeDistribution {
    pub const BIN_WIDTH: f64 = 4.0;

    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDistribution);
        }
        if let Some(s) = samples.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(alloc::format!(
                "diameter {s} is not positive"
            )));
        }
        let histogram = Histogram::new(&samples, Self::BIN_WIDTH);
        Ok(Self { samples, histogram })
    }
}

/// Diameter of nodule `i`: the annotated value, else the diameter of its
/// rasterized contour.
pub fn annotated_diameter(ann: &ImageAnnotation, i: usize) -> Result<f64> {
    if let Some(d) = ann.diameter(i) {
        return Ok(d);
    }
    let contour = ann.contour(i).ok_or_else(|| {
        Error::BadParameter(alloc::format!(
            "{}: nodule {i} has no diameter or contour",
            ann.image_id
        ))
    })?;
    estimate_diameter(&rasterize_contour(&contour))
}

/// Fills a contour on a canvas just large enough to hold it.
pub fn rasterize_contour(contour: &[(f64, f64)]) -> BinaryMask {
    let x0 = contour
        .iter()
        .map(|p| p.0)
        .fold(f64::INFINITY, f64::min)
        .floor()
        - 1.0;
    let y0 = contour
        .iter()
        .map(|p| p.1)
        .fold(f64::INFINITY, f64::min)
        .floor()
        - 1.0;
    let x1 = contour
        .iter()
        .map(|p| p.0)
        .fold(f64::NEG_INFINITY, f64::max)
        .ceil()
        + 2.0;
    let y1 = contour
        .iter()
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max)
        .ceil()
        + 2.0;
    if !(x1 > x0 && y1 > y0) {
        return BinaryMask::new(1, 1);
    }
    let local: Vec<(f64, f64)> = contour.iter().map(|&(x, y)| (x - x0, y - y0)).collect();
    fill_polygon((y1 - y0) as usize, (x1 - x0) as usize, &local)
}

/// Collects the diameters of every missed ground-truth nodule. Records and
/// annotations are paired by position.
pub fn split_and_measure(
    records: &[DetectionRecord],
    annotations: &[ImageAnnotation],
) -> Result<AttributeDistribution> {
    if records.len() != annotations.len() {
        return Err(Error::DimensionMismatch(records.len(), annotations.len()));
    }
    let mut samples = Vec::new();
    for (r, a) in records.iter().zip(annotations) {
        if r.ground_truths.len() != a.boxes.len() {
            return Err(Error::DimensionMismatch(
                r.ground_truths.len(),
                a.boxes.len(),
            ));
        }
        for (i, _) in r.missed() {
            samples.push(annotated_diameter(a, i)?);
        }
    }
    if samples.is_empty() {
        return Err(Error::NoMissedNodules);
    }
    AttributeDistribution::new(samples)
}

/// `n` uniform draws with replacement from the mined samples.
pub fn sample_diameters(dist: &AttributeDistribution, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 || dist.samples.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| dist.samples[rng.random_range(0..dist.samples.len())])
        .collect())
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::TooFewSamples {
            needed: 1,
            got: a.len().min(b.len()),
        });
    }
    let sorted = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let (a, b) = (sorted(a), sorted(b));
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    Ok((d, kolmogorov_q(lambda)))
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// A normal image together with its lung field.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalImage {
    pub image: Image,
    pub lung: BinaryMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub diameters: Vec<f64>,
    /// Seed of each item's shape and crop draws.
    pub seeds: Vec<u64>,
    /// Index into the normal images for each item.
    pub targets: Vec<usize>,
}

impl AugmentationPlan {
    /// Cycles through the normals in order; seeds derive from `seed`.
    pub fn new(diameters: Vec<f64>, n_normals: usize, seed: u64) -> Result<Self> {
        if diameters.is_empty() {
            return Err(Error::InvalidArgument(
                "plan needs at least one diameter".into(),
            ));
        }
        if n_normals == 0 {
            return Err(Error::EmptyDataset);
        }
        let n = diameters.len();
        Ok(Self {
            seeds: (0..n as u64)
                .map(|i| seed.wrapping_mul(0x9e37_79b9).wrapping_add(i))
                .collect(),
            targets: (0..n).map(|i| i % n_normals).collect(),
            diameters,
        })
    }

    pub fn len(&self) -> usize {
        self.diameters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diameters.is_empty()
    }
}

/// Synthesized images with one box and one mask each. Items whose shape
/// cannot be made to fit are skipped with a warning.
pub fn synthesize_augmentation_set(
    plan: &AugmentationPlan,
    shape: &ShapeGenerator,
    texture: &TextureGenerator<f32>,
    normals: &[NormalImage],
    cfg: &SynthesisConfig,
) -> Result<Vec<Annotated>> {
    if plan.seeds.len() != plan.len() || plan.targets.len() != plan.len() {
        return Err(Error::InvalidArgument(
            "plan arrays differ in length".into(),
        ));
    }
    let mut out = Vec::with_capacity(plan.len());
    for i in 0..plan.len() {
        let normal = normals.get(plan.targets[i]).ok_or(Error::EmptyDataset)?;
        let d = plan.diameters[i];
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seeds[i]);
        let mask = match sample_shape(shape, d, cfg, &mut rng) {
            Ok(m) => m,
            Err(e @ (Error::ShapeTooLarge { .. } | Error::EmptyMask | Error::DegenerateMask)) => {
                log::warn!("skipping plan item {i} (d = {d:.1}): {e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let ins = insert_nodule(
            texture,
            &normal.image,
            &normal.lung,
            &mask,
            d,
            cfg,
            &mut rng,
        )?;
        out.push(Annotated {
            image: ins.image,
            boxes: vec![ins.bbox],
            masks: vec![ins.mask],
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HemConfig {
    /// Number of nodules to synthesize; 0 finetunes on real data only.
    pub n_synthetic: usize,
    pub seed: u64,
    /// Fixed split threshold; defaults to the score at 0.25 FPs/image on the mining set.
    pub conf_thresh: Option<f64>,
    pub finetune: DetectorTrainConfig,
    pub synthesis: SynthesisConfig,
    pub fp_max: f64,
}

impl Default for HemConfig {
    fn default() -> Self {
        Self {
            n_synthetic: 200,
            seed: 0,
            conf_thresh: None,
            finetune: DetectorTrainConfig::finetune(),
            synthesis: SynthesisConfig::default(),
            fp_max: 1.0,
        }
    }
}

/// Datasets consumed by one mining cycle.
#[derive(Clone, Copy, Debug)]
pub struct HemData<'a> {
    pub real_train: &'a [Annotated],
    pub mining: &'a [Annotated],
    /// One entry per mining image.
    pub mining_annotations: &'a [ImageAnnotation],
    pub normals: &'a [NormalImage],
    pub held_out: &'a [Annotated],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HemReport {
    pub pre: FrocSummary,
    pub post: FrocSummary,
    pub conf_thresh: f64,
    pub histogram: Histogram,
    pub diameters: Vec<f64>,
    /// True when nothing was missed and every annotated size was used instead.
    pub fallback: bool,
    pub n_real: usize,
    pub n_synthetic: usize,
}

/// One mining and finetuning cycle on a fitted detector. Returns the report
/// and the synthesized images that were added to the finetuning set.
pub fn run_hem_cycle<D: Detector + ?Sized>(
    detector: &mut D,
    data: HemData<'_>,
    shape: &ShapeGenerator,
    texture: &TextureGenerator<f32>,
    cfg: &HemConfig,
) -> Result<(HemReport, Vec<Annotated>)> {
    if data.mining.len() != data.mining_annotations.len() {
        return Err(Error::DimensionMismatch(
            data.mining.len(),
            data.mining_annotations.len(),
        ));
    }
    let pre = evaluate_detector(&*detector, data.held_out, MATCH_IOU, cfg.fp_max)?;

    let detections = detect_all(&*detector, data.mining)?;
    let conf_thresh = match cfg.conf_thresh {
        Some(t) => t,
        None => threshold_at_fp_rate(&detections, MATCH_IOU, MINING_FP_RATE)?,
    };
    let records: Vec<DetectionRecord> = detections
        .iter()
        .map(|d| match_detections(d, MATCH_IOU, conf_thresh))
        .collect();
    let (dist, fallback) = match split_and_measure(&records, data.mining_annotations) {
        Ok(d) => (d, false),
        Err(Error::NoMissedNodules) => {
            log::warn!("no missed nodules; sampling from all annotated sizes");
            let all = data
                .mining_annotations
                .iter()
                .flat_map(|a| (0..a.boxes.len()).map(move |i| annotated_diameter(a, i)))
                .collect::<Result<Vec<_>>>()?;
            (AttributeDistribution::new(all)?, true)
        }
        Err(e) => return Err(e),
    };

    let (diameters, synthetic) = if cfg.n_synthetic == 0 {
        (Vec::new(), Vec::new())
    } else {
        let diameters = sample_diameters(&dist, cfg.n_synthetic, cfg.seed)?;
        let plan = AugmentationPlan::new(diameters.clone(), data.normals.len(), cfg.seed)?;
        let synthetic =
            synthesize_augmentation_set(&plan, shape, texture, data.normals, &cfg.synthesis)?;
        (diameters, synthetic)
    };

    let mut combined = data.real_train.to_vec();
    combined.extend(synthetic.iter().cloned());
    detector.finetune(&combined, &cfg.finetune)?;
    let post = evaluate_detector(&*detector, data.held_out, MATCH_IOU, cfg.fp_max)?;
    let report = HemReport {
        pre,
        post,
        conf_thresh,
        histogram: dist.histogram,
        diameters,
        fallback,
        n_real: data.real_train.len(),
        n_synthetic: synthetic.len(),
    };
    Ok((report, synthetic))
}
