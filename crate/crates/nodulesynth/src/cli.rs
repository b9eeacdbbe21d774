//! Command-line surface. Every subcommand loads the run configuration, applies
//! its flags as overrides and calls into the core crate.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nodulesynth_core::data::{crop_patch, Annotated, ImageAnnotation};
use nodulesynth_core::detection::{froc_summary, Box, ImageDetections};
use nodulesynth_core::detector::{detect_all, Detector, HeatmapDetector};
use nodulesynth_core::grid::{to_unit, BinaryMask, Grid, Image};
use nodulesynth_core::hem::{run_hem_cycle, HemData, MATCH_IOU};
use nodulesynth_core::mask::{ellipse_axes, modulate_size};
use nodulesynth_core::metrics::evaluate_pairs;
use nodulesynth_core::shape_gan::ShapeGanTrainer;
use nodulesynth_core::synthesis::{find_crop_origin, insert_nodule, sample_shape, PATCH_SIZE};
use nodulesynth_core::texture_gan::{composite, synthesize_texture, TextureGanTrainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    load_detector, load_or_create_extractor, load_shape_generator, load_texture_generator,
    save_detector, save_shape_gan, save_texture_gan, shape_checkpoint_name,
    texture_checkpoint_name,
};
use crate::config::{cache_dir, RunConfig};
use crate::dataset::{write_phantom_dataset, Dataset, ItemKind, Manifest, ManifestItem};
use crate::error::{ConfigError, Error, Result};
use crate::io::{read_image, read_json, read_mask, write_image, write_json, write_mask};
use crate::logs::{write_shape_log, write_texture_log};

#[derive(Debug, Parser)]
#[command(
    name = "nodulesynth",
    version,
    about = "Lung nodule synthesis, evaluation and hard-example augmentation"
)]
pub struct Cli {
    /// JSON run configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set texture_gan.batch_size=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural chest phantom dataset.
    Phantom(PhantomArgs),
    /// Train the shape GAN on the nodule masks of a dataset.
    TrainShape(TrainShapeArgs),
    /// Train the texture GAN on nodule patches of a dataset.
    TrainTexture(TrainTextureArgs),
    /// Sample masks, patches or full images from trained models.
    Generate(GenerateArgs),
    /// Rescale a mask to a target diameter.
    Modulate(ModulateArgs),
    /// Measure a mask diameter, or compare generated patches with references.
    Eval(EvalArgs),
    /// Run one hard-example-mining cycle and finetune a detector.
    Augment(AugmentArgs),
    /// Summarize predictions against annotations with FROC statistics.
    Froc(FrocArgs),
    /// Pretrain the reference detector.
    TrainDetector(TrainDetectorArgs),
    /// Print the effective configuration after `--config` and `--set`.
    Config,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub normals: usize,
    #[arg(long, default_value_t = 0)]
    pub nodules: usize,
    /// Image side in pixels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainShapeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for checkpoints and the loss log.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainTextureArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenerateMode {
    Mask,
    Patch,
    Image,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub shape_ckpt: PathBuf,
    /// Needed for `patch` and `image`.
    #[arg(long)]
    pub texture_ckpt: Option<PathBuf>,
    /// Dataset providing normal images and lung masks for `patch` and `image`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GenerateMode::Mask)]
    pub mode: GenerateMode,
    /// Rows x columns, e.g. `2x3`.
    #[arg(long, default_value = "2x3")]
    pub grid: String,
    /// Diameters in pixels, assigned to columns cyclically.
    #[arg(long, value_delimiter = ',', default_value = "40,70,100")]
    pub diameters: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid PNG for `mask`/`patch`; output dataset directory for `image`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModulateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Target diameter in pixels.
    #[arg(long = "d")]
    pub diameter: f64,
    #[arg(long, default_value_t = PATCH_SIZE)]
    pub canvas: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Report the equivalent-ellipse diameter of this mask.
    #[arg(long, conflicts_with_all = ["reference", "generated"])]
    pub mask: Option<PathBuf>,
    /// Directory of reference patches.
    #[arg(long, requires = "generated")]
    pub reference: Option<PathBuf>,
    /// Directory of generated patches with the same file names.
    #[arg(long, requires = "reference")]
    pub generated: Option<PathBuf>,
    /// Directory of region masks with the same file names.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Also compute FID with the cached feature extractor.
    #[arg(long)]
    pub fid: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub detector_ckpt: PathBuf,
    #[arg(long)]
    pub shape_ckpt: PathBuf,
    #[arg(long)]
    pub texture_ckpt: PathBuf,
    /// Real training set; its normal images host the synthesized nodules.
    #[arg(long)]
    pub data: PathBuf,
    /// Set whose missed nodules are mined.
    #[arg(long)]
    pub mining: PathBuf,
    /// Set used for the before/after FROC summaries.
    #[arg(long)]
    pub held_out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FrocArgs {
    /// JSON array of `{image_id, boxes: [[x_min, y_min, x_max, y_max, score]]}`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// JSON array of annotation records.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value_t = MATCH_IOU)]
    pub iou: f64,
    #[arg(long, default_value_t = 1.0)]
    pub fp_max: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainDetectorArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset to predict on after training; writes predictions and a FROC summary next to the checkpoint.
    #[arg(long)]
    pub eval: Option<PathBuf>,
}

/// Stored prediction record; boxes are `[x_min, y_min, x_max, y_max, score]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub boxes: Vec<[f64; 5]>,
}

impl PredictionRecord {
    pub fn new(image_id: &str, boxes: &[Box]) -> Self {
        Self {
            image_id: image_id.to_string(),
            boxes: boxes
                .iter()
                .map(|b| [b.x_min, b.y_min, b.x_max, b.y_max, b.score_or_zero()])
                .collect(),
        }
    }

    pub fn boxes(&self) -> Vec<Box> {
        self.boxes
            .iter()
            .map(|&[a, b, c, d, s]| Box::new(a, b, c, d).scored(s))
            .collect()
    }
}

fn config(cli: &Cli, extra: Vec<String>) -> Result<RunConfig> {
    let mut all = cli.overrides.clone();
    all.extend(extra);
    RunConfig::load(cli.config.as_deref(), &all)
}

fn set<T: ToString>(key: &str, v: Option<T>) -> Option<String> {
    v.map(|v| format!("{key}={}", v.to_string()))
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!(
                "{}",
                serde_json::to_string_pretty(value).expect("reports serialize")
            );
            Ok(())
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Phantom(a) => phantom(&cli, a),
        Command::TrainShape(a) => train_shape(&cli, a),
        Command::TrainTexture(a) => train_texture(&cli, a),
        Command::Generate(a) => generate(&cli, a),
        Command::Modulate(a) => modulate(a),
        Command::Eval(a) => eval(&cli, a),
        Command::Augment(a) => augment(&cli, a),
        Command::Froc(a) => froc(a),
        Command::TrainDetector(a) => train_detector(&cli, a),
        Command::Config => emit(None, &config(&cli, Vec::new())?),
    }
}

fn phantom(cli: &Cli, a: &PhantomArgs) -> Result<()> {
    let cfg = config(
        cli,
        [set("phantom.seed", a.seed), set("phantom.size", a.size)]
            .into_iter()
            .flatten()
            .collect(),
    )?;
    let m = write_phantom_dataset(&a.out, &cfg.phantom, a.normals, a.nodules)?;
    log::info!("wrote {} items to {}", m.items.len(), a.out.display());
    Ok(())
}

fn train_shape(cli: &Cli, a: &TrainShapeArgs) -> Result<()> {
    let cfg = config(
        cli,
        [
            set("shape_gan.epochs", a.epochs),
            set("shape_gan.seed", a.seed),
        ]
        .into_iter()
        .flatten()
        .collect(),
    )?;
    let ds = Dataset::open(&a.data)?;
    let masks = ds.shape_masks()?;
    log::info!("training shape GAN on {} masks", masks.len());
    let mut trainer = ShapeGanTrainer::new(&masks, &cfg.shape_gan)?;
    let every = cfg.shape_gan.checkpoint_every.max(1);
    let log_path = a.out.join("shape_gan_log.csv");
    let mut logs = Vec::new();
    for _ in 0..cfg.shape_gan.epochs {
        let l = trainer.train_epoch();
        log::info!(
            "epoch {} loss_D {:.4} loss_G {:.4}",
            l.epoch,
            l.loss_d,
            l.loss_g
        );
        logs.push(l);
        if l.epoch % every == 0 || l.epoch == cfg.shape_gan.epochs {
            save_shape_gan(&a.out.join(shape_checkpoint_name(l.epoch)), &trainer)?;
            write_shape_log(&log_path, &logs)?;
        }
    }
    write_shape_log(&log_path, &logs)
}

fn train_texture(cli: &Cli, a: &TrainTextureArgs) -> Result<()> {
    let cfg = config(
        cli,
        [
            set("texture_gan.max_steps", a.steps),
            set("texture_gan.seed", a.seed),
        ]
        .into_iter()
        .flatten()
        .collect(),
    )?;
    let ds = Dataset::open(&a.data)?;
    let samples = ds.texture_samples(PATCH_SIZE)?;
    log::info!("training texture GAN on {} patches", samples.len());
    let extractor = load_or_create_extractor(&cache_dir(), &cfg.texture_gan.extractor)?;
    let mut trainer = TextureGanTrainer::with_extractor(&samples, &cfg.texture_gan, extractor)?;
    let every = cfg.texture_gan.checkpoint_every.max(1);
    let log_path = a.out.join("texture_gan_log.csv");
    let mut logs = Vec::new();
    while trainer.stopped().is_none() {
        let before = trainer.steps();
        let epoch = trainer.train_epoch();
        if epoch.is_empty() {
            break;
        }
        if let Some(l) = epoch.last() {
            log::info!("step {} phase {} L_rec2 {:.4}", l.step, l.phase, l.rec2);
        }
        logs.extend(epoch);
        if trainer.steps() / every > before / every {
            save_texture_gan(
                &a.out
                    .join(texture_checkpoint_name(trainer.phase(), trainer.steps())),
                &trainer,
            )?;
            write_texture_log(&log_path, &logs)?;
        }
    }
    log::info!("stopped: {:?}", trainer.stopped());
    save_texture_gan(
        &a.out
            .join(texture_checkpoint_name(trainer.phase(), trainer.steps())),
        &trainer,
    )?;
    write_texture_log(&log_path, &logs)
}

/// Parses `RxC`.
pub fn parse_grid(s: &str) -> std::result::Result<(usize, usize), ConfigError> {
    let bad = || ConfigError::new("grid", format!("expected ROWSxCOLS, got `{s}`"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let r: usize = r.trim().parse().map_err(|_| bad())?;
    let c: usize = c.trim().parse().map_err(|_| bad())?;
    if r == 0 || c == 0 {
        return Err(bad());
    }
    Ok((r, c))
}

fn tile_grid(tiles: &[Image], rows: usize, cols: usize, size: usize) -> Image {
    let mut out = Grid::new(rows * size, cols * size, 0.0f32);
    for (k, t) in tiles.iter().enumerate() {
        let (r, c) = (k / cols, k % cols);
        for y in 0..size.min(t.height()) {
            for x in 0..size.min(t.width()) {
                out.set(r * size + y, c * size + x, t.get(y, x));
            }
        }
    }
    out
}

/// Diameter requested and measured for one generated cell.
#[derive(Debug, Serialize)]
struct GeneratedCell {
    row: usize,
    col: usize,
    target: f64,
    measured: f64,
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Result<()> {
    let cfg = config(cli, Vec::new())?;
    let (rows, cols) = parse_grid(&a.grid)?;
    if a.diameters.is_empty() || a.diameters.iter().any(|d| !(*d > 0.0)) {
        return Err(ConfigError::new("diameters", "need positive diameters").into());
    }
    let shape = load_shape_generator(&a.shape_ckpt)?;
    let syn = &cfg.hem.synthesis;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let needs_texture = a.mode != GenerateMode::Mask;
    let texture = match (&a.texture_ckpt, needs_texture) {
        (Some(p), true) => Some(load_texture_generator(p)?),
        (None, true) => {
            return Err(
                ConfigError::new("texture_ckpt", "required for patch and image modes").into(),
            )
        }
        _ => None,
    };
    let normals = match (&a.data, needs_texture) {
        (Some(p), true) => Dataset::open(p)?.normals(),
        (None, true) => {
            return Err(ConfigError::new("data", "required for patch and image modes").into())
        }
        _ => Vec::new(),
    };
    if needs_texture && normals.is_empty() {
        return Err(
            ConfigError::new("data", "dataset has no normal image with a lung mask").into(),
        );
    }
    let mut tiles = Vec::new();
    let mut cells = Vec::new();
    let mut manifest = Manifest::new(None);
    for k in 0..rows * cols {
        let (r, c) = (k / cols, k % cols);
        let d = a.diameters[c % a.diameters.len()];
        let mask = sample_shape(&shape, d, syn, &mut rng)?;
        cells.push(GeneratedCell {
            row: r,
            col: c,
            target: d,
            measured: ellipse_axes(&mask)?.mean_diameter(),
        });
        match a.mode {
            GenerateMode::Mask => tiles.push(mask.to_image()),
            GenerateMode::Patch => {
                let n = &normals[k % normals.len()];
                let (oy, ox) = find_crop_origin(&n.lung, &mask, syn.crop_retries, &mut rng)?;
                let (patch, _) = crop_patch(
                    &n.image,
                    (oy + PATCH_SIZE / 2, ox + PATCH_SIZE / 2),
                    PATCH_SIZE,
                )?;
                let tex = texture.as_ref().expect("checked above");
                let (_, out2) = synthesize_texture(tex, &patch, &mask)?;
                tiles.push(composite(&patch, &mask, &out2.map(to_unit))?);
            }
            GenerateMode::Image => {
                let n = &normals[k % normals.len()];
                let tex = texture.as_ref().expect("checked above");
                let ins = insert_nodule(tex, &n.image, &n.lung, &mask, d, syn, &mut rng)?;
                let item = Annotated {
                    image: ins.image,
                    boxes: vec![ins.bbox],
                    masks: vec![ins.mask],
                };
                manifest.items.push(write_annotated(
                    &a.out,
                    &format!("generated_{k:05}"),
                    &item,
                    Some(&n.lung),
                    &[d],
                )?);
            }
        }
    }
    if a.mode == GenerateMode::Image {
        manifest.seal(&a.out)?;
        manifest.write(&a.out)?;
    } else {
        write_image(&a.out, &tile_grid(&tiles, rows, cols, PATCH_SIZE))?;
    }
    emit(None, &cells)
}

/// Writes an annotated image in the dataset layout.
pub fn write_annotated(
    dir: &Path,
    id: &str,
    item: &Annotated,
    lung: Option<&BinaryMask>,
    diameters: &[f64],
) -> Result<ManifestItem> {
    let image = format!("images/{id}.png");
    write_image(&dir.join(&image), &item.image)?;
    let lung_path = match lung {
        Some(l) => {
            let p = format!("lungs/{id}.png");
            write_mask(&dir.join(&p), l)?;
            Some(p)
        }
        None => None,
    };
    let mask = match item.masks.split_first() {
        Some((first, rest)) => {
            let mut union = first.clone();
            for m in rest {
                for (y, x) in m.foreground() {
                    union.set(y, x, true);
                }
            }
            let p = format!("masks/{id}.png");
            write_mask(&dir.join(&p), &union)?;
            Some(p)
        }
        None => None,
    };
    let ann = format!("annotations/{id}.json");
    write_json(
        &dir.join(&ann),
        &ImageAnnotation {
            image_id: id.to_string(),
            boxes: item.boxes.clone(),
            contours: None,
            diameters: (diameters.len() == item.boxes.len()).then(|| diameters.to_vec()),
        },
    )?;
    Ok(ManifestItem {
        id: id.to_string(),
        kind: if item.boxes.is_empty() {
            ItemKind::Normal
        } else {
            ItemKind::Nodule
        },
        image,
        lung: lung_path,
        mask,
        annotation: Some(ann),
    })
}

fn modulate(a: &ModulateArgs) -> Result<()> {
    let m = read_mask(&a.input)?;
    let out = modulate_size(&m, a.diameter, a.canvas)?;
    write_mask(&a.out, &out)?;
    emit(
        None,
        &serde_json::json!({ "target": a.diameter, "measured": ellipse_axes(&out)?.mean_diameter() }),
    )
}

fn sorted_pngs(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    if let Some(p) = &a.mask {
        let m = read_mask(p)?;
        let axes = ellipse_axes(&m)?;
        return emit(
            a.out.as_deref(),
            &serde_json::json!({ "diameter": axes.mean_diameter(), "major": axes.major, "minor": axes.minor }),
        );
    }
    let (Some(rd), Some(gd)) = (&a.reference, &a.generated) else {
        return Err(
            ConfigError::new("eval", "give --mask, or --reference with --generated").into(),
        );
    };
    let cfg = config(cli, Vec::new())?;
    let names = sorted_pngs(rd)?;
    let mut refs = Vec::new();
    let mut gens = Vec::new();
    let mut regions = Vec::new();
    for n in &names {
        let r = read_image(&rd.join(n))?;
        let g = read_image(&gd.join(n))?;
        let m = match &a.masks {
            Some(md) => read_mask(&md.join(n))?,
            None => BinaryMask::filled(r.height(), r.width()),
        };
        refs.push(r);
        gens.push(g);
        regions.push(m);
    }
    let extractor = if a.fid {
        Some(load_or_create_extractor(
            &cache_dir(),
            &cfg.texture_gan.extractor,
        )?)
    } else {
        None
    };
    let report = evaluate_pairs(
        &refs.iter().collect::<Vec<_>>(),
        &gens.iter().collect::<Vec<_>>(),
        &regions.iter().collect::<Vec<_>>(),
        extractor.as_ref(),
    )?;
    emit(a.out.as_deref(), &report)
}

fn froc(a: &FrocArgs) -> Result<()> {
    let preds: Vec<PredictionRecord> = read_json(&a.predictions)?;
    let anns: Vec<ImageAnnotation> = read_json(&a.annotations)?;
    let images = pair_predictions(&preds, &anns)?;
    emit(a.out.as_deref(), &froc_summary(&images, a.iou, a.fp_max)?)
}

/// Joins predictions to annotations by image id; unpredicted images get no boxes.
pub fn pair_predictions(
    preds: &[PredictionRecord],
    anns: &[ImageAnnotation],
) -> Result<Vec<ImageDetections>> {
    let mut by_id: std::collections::HashMap<&str, &PredictionRecord> =
        preds.iter().map(|p| (p.image_id.as_str(), p)).collect();
    let out = anns
        .iter()
        .map(|a| ImageDetections {
            image_id: a.image_id.clone(),
            predictions: by_id
                .remove(a.image_id.as_str())
                .map(|p| p.boxes())
                .unwrap_or_default(),
            ground_truths: a.boxes.clone(),
        })
        .collect();
    if let Some(id) = by_id.keys().next() {
        return Err(ConfigError::new(
            "predictions",
            format!("image `{id}` has no annotation record"),
        )
        .into());
    }
    Ok(out)
}

fn predictions_for(det: &HeatmapDetector, ds: &Dataset) -> Result<Vec<PredictionRecord>> {
    ds.items
        .iter()
        .map(|i| Ok(PredictionRecord::new(&i.id, &det.predict(&i.image)?)))
        .collect()
}

fn train_detector(cli: &Cli, a: &TrainDetectorArgs) -> Result<()> {
    let cfg = config(
        cli,
        [
            set("detector_train.epochs", a.epochs),
            set("detector_train.lr", a.lr),
        ]
        .into_iter()
        .flatten()
        .collect(),
    )?;
    let ds = Dataset::open(&a.data)?;
    let mut det = HeatmapDetector::new(&cfg.detector)?;
    let losses = det.fit(&ds.annotated(), &cfg.detector_train)?;
    log::info!("final epoch loss {:?}", losses.last());
    save_detector(&a.out, &det)?;
    if let Some(eval_dir) = &a.eval {
        let eval = Dataset::open(eval_dir)?;
        let preds = predictions_for(&det, &eval)?;
        let stem = a.out.with_extension("");
        write_json(&stem.with_extension("predictions.json"), &preds)?;
        let summary = froc_summary(
            &pair_predictions(&preds, &eval.annotations())?,
            MATCH_IOU,
            1.0,
        )?;
        write_json(&stem.with_extension("froc.json"), &summary)?;
        emit(None, &summary)?;
    }
    Ok(())
}

fn augment(cli: &Cli, a: &AugmentArgs) -> Result<()> {
    let cfg = config(
        cli,
        [set("hem.n_synthetic", a.n), set("hem.seed", a.seed)]
            .into_iter()
            .flatten()
            .collect(),
    )?;
    let mut det = load_detector(&a.detector_ckpt)?;
    let shape = load_shape_generator(&a.shape_ckpt)?;
    let texture = load_texture_generator(&a.texture_ckpt)?;
    let train = Dataset::open(&a.data)?;
    let mining = Dataset::open(&a.mining)?;
    let held_out = Dataset::open(&a.held_out)?;
    let real_train = train.annotated();
    let normals = train.normals();
    let mining_images = mining.annotated();
    let mining_annotations = mining.annotations();
    let held = held_out.annotated();
    let data = HemData {
        real_train: &real_train,
        mining: &mining_images,
        mining_annotations: &mining_annotations,
        normals: &normals,
        held_out: &held,
    };
    let (report, synthetic) = run_hem_cycle(&mut det, data, &shape, &texture, &cfg.hem)?;
    let syn_dir = a.out.join("synthetic");
    let mut manifest = Manifest::new(None);
    for (k, item) in synthetic.iter().enumerate() {
        manifest.items.push(write_annotated(
            &syn_dir,
            &format!("synthetic_{k:05}"),
            item,
            None,
            &[],
        )?);
    }
    manifest.seal(&syn_dir)?;
    manifest.write(&syn_dir)?;
    save_detector(&a.out.join("detector_finetuned.safetensors"), &det)?;
    write_json(&a.out.join("report.json"), &report)?;
    let held_preds = detect_all(&det, &held)?;
    log::info!(
        "NODE21 {:.4} -> {:.4} on {} held-out images",
        report.pre.node21_score,
        report.post.node21_score,
        held_preds.len()
    );
    emit(None, &report)
}
