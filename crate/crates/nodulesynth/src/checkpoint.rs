//! Model checkpoints as safetensors files. Each file carries its component
//! kind and configuration as header metadata so it can be rebuilt alone.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nodulesynth_core::detector::{HeatmapDetector, HeatmapDetectorConfig};
use nodulesynth_core::extractor::{ExtractorConfig, FeatureExtractor};
use nodulesynth_core::nn::{ParamStore, Scalar};
use nodulesynth_core::shape_gan::{ShapeGanConfig, ShapeGanTrainer, ShapeGenerator};
use nodulesynth_core::texture_gan::{TextureGanConfig, TextureGanTrainer, TextureGenerator};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::{atomic_write, read_bytes};

pub const SHAPE_KIND: &str = "shape_gan";
pub const TEXTURE_KIND: &str = "texture_gan";
pub const DETECTOR_KIND: &str = "heatmap_detector";
pub const EXTRACTOR_KIND: &str = "feature_extractor";

pub fn shape_checkpoint_name(epoch: usize) -> String {
    format!("shape_gan_epoch{epoch}.safetensors")
}

pub fn texture_checkpoint_name(phase: u8, step: usize) -> String {
    format!("texture_gan_phase{phase}_step{step}.safetensors")
}

/// Tensors in `f32` plus string metadata.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub tensors: HashMap<String, (Vec<usize>, Vec<f64>)>,
    pub metadata: HashMap<String, String>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        let mut c = Self::default();
        c.metadata.insert("kind".into(), kind.into());
        c
    }

    pub fn add_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, dims, values) in store.export() {
            self.tensors
                .insert(format!("{prefix}{name}"), (dims, values));
        }
    }

    pub fn set_config<C: Serialize>(&mut self, config: &C) {
        let json = serde_json::to_string(config).expect("configs serialize");
        self.metadata.insert("config".into(), json);
    }

    pub fn kind(&self) -> Option<&str> {
        self.metadata.get("kind").map(String::as_str)
    }

    fn expect_kind(&self, path: &Path, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::format(
                path,
                format!("expected a {kind} checkpoint, found {other:?}"),
            )),
        }
    }

    pub fn config<C: DeserializeOwned>(&self, path: &Path) -> Result<C> {
        let raw = self
            .metadata
            .get("config")
            .ok_or_else(|| Error::format(path, "checkpoint has no config"))?;
        serde_json::from_str(raw).map_err(|e| Error::format(path, e))
    }

    /// Loads every entry of `store` from tensors named `prefix` + entry name.
    pub fn fill_store<T: Scalar>(
        &self,
        path: &Path,
        prefix: &str,
        store: &mut ParamStore<T>,
    ) -> Result<()> {
        store
            .import(|name| {
                self.tensors
                    .get(&format!("{prefix}{name}"))
                    .map(|(d, v)| (d.as_slice(), v.clone()))
            })
            .map_err(|e| Error::format(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, (dims, v))| {
                let raw = v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
                (k.clone(), dims.clone(), raw)
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(k, dims, raw)| Ok((k.as_str(), TensorView::new(Dtype::F32, dims.clone(), raw)?)))
            .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| Error::format(path, e))?;
        let out = safetensors::serialize(views, Some(self.metadata.clone()))
            .map_err(|e| Error::format(path, e))?;
        atomic_write(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_bytes(path)?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::format(path, e))?;
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path, e))?;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::format(
                    path,
                    format!("{name}: expected F32, got {:?}", view.dtype()),
                ));
            }
            let values = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.insert(name, (view.shape().to_vec(), values));
        }
        Ok(Self {
            tensors,
            metadata: meta.metadata().clone().unwrap_or_default(),
        })
    }
}

const GEN: &str = "generator.";
const DISC: &str = "discriminator.";

pub fn save_shape_gan(path: &Path, trainer: &ShapeGanTrainer) -> Result<()> {
    let mut c = Checkpoint::new(SHAPE_KIND);
    c.set_config(&trainer.generator.config);
    c.metadata
        .insert("epoch".into(), trainer.epoch().to_string());
    c.add_store(GEN, &trainer.generator.store);
    c.add_store(DISC, &trainer.discriminator.store);
    c.save(path)
}

pub fn load_shape_generator(path: &Path) -> Result<ShapeGenerator> {
    let c = Checkpoint::load(path)?;
    c.expect_kind(path, SHAPE_KIND)?;
    let cfg: ShapeGanConfig = c.config(path)?;
    let mut g = ShapeGenerator::new(&cfg, 0)?;
    c.fill_store(path, GEN, &mut g.store)?;
    Ok(g)
}

pub fn save_texture_gan(path: &Path, trainer: &TextureGanTrainer) -> Result<()> {
    let mut c = Checkpoint::new(TEXTURE_KIND);
    c.set_config(&trainer.config);
    c.metadata
        .insert("step".into(), trainer.steps().to_string());
    c.metadata
        .insert("phase".into(), trainer.phase().to_string());
    c.add_store(GEN, &trainer.generator.store);
    c.add_store(DISC, &trainer.discriminator.store);
    c.save(path)
}

pub fn load_texture_generator(path: &Path) -> Result<TextureGenerator<f32>> {
    let c = Checkpoint::load(path)?;
    c.expect_kind(path, TEXTURE_KIND)?;
    let cfg: TextureGanConfig = c.config(path)?;
    let mut g = TextureGenerator::new(cfg.base_channels, 0);
    c.fill_store(path, GEN, &mut g.store)?;
    Ok(g)
}

pub fn save_detector(path: &Path, det: &HeatmapDetector) -> Result<()> {
    let mut c = Checkpoint::new(DETECTOR_KIND);
    c.set_config(&det.config);
    c.add_store("", &det.store);
    c.save(path)
}

pub fn load_detector(path: &Path) -> Result<HeatmapDetector> {
    let c = Checkpoint::load(path)?;
    c.expect_kind(path, DETECTOR_KIND)?;
    let cfg: HeatmapDetectorConfig = c.config(path)?;
    let mut det = HeatmapDetector::new(&cfg)?;
    c.fill_store(path, "", &mut det.store)?;
    det.set_fitted();
    Ok(det)
}

pub fn extractor_cache_path(dir: &Path, cfg: &ExtractorConfig) -> PathBuf {
    dir.join(format!(
        "extractor_w{}_s{}.safetensors",
        cfg.width_divisor, cfg.seed
    ))
}

/// Extractor weights from the cache directory, created and stored on first use.
/// Converted pretrained weights dropped at the cache path take precedence over
/// the seeded initialization.
pub fn load_or_create_extractor(
    cache: &Path,
    cfg: &ExtractorConfig,
) -> Result<FeatureExtractor<f32>> {
    let path = extractor_cache_path(cache, cfg);
    let mut ex = FeatureExtractor::new(cfg)?;
    if path.exists() {
        let c = Checkpoint::load(&path)?;
        c.expect_kind(&path, EXTRACTOR_KIND)?;
        ex.load(|name| c.tensors.get(name).map(|(d, v)| (d.as_slice(), v.clone())))
            .map_err(|e| Error::format(&path, e))?;
    } else {
        let mut c = Checkpoint::new(EXTRACTOR_KIND);
        c.set_config(cfg);
        c.add_store("", &ex.store);
        c.save(&path)?;
    }
    Ok(ex)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nodulesynth_core::grid::Grid;

    #[test]
    fn names() {
        assert_eq!(shape_checkpoint_name(12), "shape_gan_epoch12.safetensors");
        assert_eq!(
            texture_checkpoint_name(2, 400),
            "texture_gan_phase2_step400.safetensors"
        );
    }

    #[test]
    fn detector_round_trip_predicts_identically() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("det.safetensors");
        let mut det = HeatmapDetector::new(&HeatmapDetectorConfig {
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        det.set_fitted();
        save_detector(&p, &det).unwrap();
        let back = load_detector(&p).unwrap();
        let img = Grid::from_fn(64, 64, |y, x| ((y * x) % 13) as f32 / 13.0);
        use nodulesynth_core::detector::Detector;
        assert_eq!(det.predict(&img).unwrap(), back.predict(&img).unwrap());
        assert!(matches!(
            load_shape_generator(&p),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn extractor_cache_reused() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExtractorConfig {
            width_divisor: 16,
            seed: 3,
        };
        let a = load_or_create_extractor(dir.path(), &cfg).unwrap();
        assert!(extractor_cache_path(dir.path(), &cfg).exists());
        let b = load_or_create_extractor(dir.path(), &cfg).unwrap();
        assert_eq!(a.store.export(), b.store.export());
    }
}
