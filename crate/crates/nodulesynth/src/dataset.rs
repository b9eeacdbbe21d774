//! On-disk datasets: images, lung and nodule masks, annotations and a
//! manifest holding a SHA-256 of every file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nodulesynth_core::data::{Annotated, ImageAnnotation};
use nodulesynth_core::grid::{BinaryMask, Image};
use nodulesynth_core::hem::NormalImage;
use nodulesynth_core::phantom::{nodule_case, normal_case, PhantomCase, PhantomConfig};
use nodulesynth_core::texture_gan::TextureSample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{
    read_bytes, read_image, read_json, read_mask, write_image, write_json, write_mask,
};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Normal,
    Nodule,
}

/// Paths are relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub id: String,
    pub kind: ItemKind,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lung: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomConfig>,
    pub items: Vec<ManifestItem>,
    /// Relative path → lowercase hex SHA-256.
    pub checksums: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Manifest {
    pub fn new(phantom: Option<PhantomConfig>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            phantom,
            items: Vec::new(),
            checksums: BTreeMap::new(),
        }
    }

    /// Recomputes the checksum of every file referenced by an item.
    pub fn seal(&mut self, dir: &Path) -> Result<()> {
        self.checksums.clear();
        for item in &self.items {
            for rel in item.files() {
                let hash = sha256_hex(&read_bytes(&dir.join(rel))?);
                self.checksums.insert(rel.to_string(), hash);
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST), self)
    }

    /// Reads the manifest and checks every listed file against its checksum.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let m: Manifest = read_json(&path)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(
                &path,
                format!("unsupported manifest version {}", m.version),
            ));
        }
        for item in &m.items {
            for rel in item.files() {
                if !m.checksums.contains_key(rel) {
                    return Err(Error::format(&path, format!("no checksum for {rel}")));
                }
            }
        }
        for (rel, expected) in &m.checksums {
            let p = dir.join(rel);
            let found = sha256_hex(&read_bytes(&p)?);
            if &found != expected {
                return Err(Error::Checksum {
                    path: p,
                    expected: expected.clone(),
                    found,
                });
            }
        }
        Ok(m)
    }
}

impl ManifestItem {
    pub fn files(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.image.as_str())
            .chain(self.lung.as_deref())
            .chain(self.mask.as_deref())
            .chain(self.annotation.as_deref())
    }
}

/// Writes one phantom case and returns its manifest entry.
pub fn write_case(dir: &Path, case: &PhantomCase) -> Result<ManifestItem> {
    let id = &case.id;
    let nodule = !case.nodules.is_empty();
    let image = format!("images/{id}.png");
    let lung = format!("lungs/{id}.png");
    write_image(&dir.join(&image), &case.image)?;
    write_mask(&dir.join(&lung), &case.lung)?;
    let (mask, annotation) = if nodule {
        let mask = format!("masks/{id}.png");
        let ann = format!("annotations/{id}.json");
        write_mask(&dir.join(&mask), &case.nodule_mask)?;
        write_json(&dir.join(&ann), &case.annotation())?;
        (Some(mask), Some(ann))
    } else {
        (None, None)
    };
    Ok(ManifestItem {
        id: id.clone(),
        kind: if nodule {
            ItemKind::Nodule
        } else {
            ItemKind::Normal
        },
        image,
        lung: Some(lung),
        mask,
        annotation,
    })
}

/// Generates a phantom dataset under `dir`: normal cases first, then nodule
/// cases, then the manifest.
pub fn write_phantom_dataset(
    dir: &Path,
    cfg: &PhantomConfig,
    n_normal: usize,
    n_nodule: usize,
) -> Result<Manifest> {
    cfg.validate()?;
    let mut manifest = Manifest::new(Some(cfg.clone()));
    for i in 0..n_normal {
        manifest.items.push(write_case(dir, &normal_case(cfg, i)?)?);
    }
    for i in 0..n_nodule {
        manifest
            .items
            .push(write_case(dir, &nodule_case(cfg, n_normal + i)?)?);
    }
    manifest.seal(dir)?;
    manifest.write(dir)?;
    Ok(manifest)
}

/// One loaded dataset item.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub kind: ItemKind,
    pub image: Image,
    pub lung: Option<BinaryMask>,
    /// Union of nodule shapes.
    pub mask: Option<BinaryMask>,
    pub annotation: Option<ImageAnnotation>,
}

impl Item {
    pub fn boxes(&self) -> Vec<nodulesynth_core::detection::Box> {
        self.annotation
            .as_ref()
            .map(|a| a.boxes.clone())
            .unwrap_or_default()
    }

    pub fn annotated(&self) -> Annotated {
        Annotated {
            image: self.image.clone(),
            boxes: self.boxes(),
            masks: Vec::new(),
        }
    }

    /// Annotation record, empty for normal images.
    pub fn annotation_or_empty(&self) -> ImageAnnotation {
        self.annotation.clone().unwrap_or_else(|| ImageAnnotation {
            image_id: self.id.clone(),
            ..Default::default()
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub items: Vec<Item>,
}

impl Dataset {
    /// Validates checksums and loads every item.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let items = manifest
            .items
            .iter()
            .map(|it| {
                let image = read_image(&dir.join(&it.image))?;
                let lung = it
                    .lung
                    .as_ref()
                    .map(|p| read_mask(&dir.join(p)))
                    .transpose()?;
                let mask = it
                    .mask
                    .as_ref()
                    .map(|p| read_mask(&dir.join(p)))
                    .transpose()?;
                let annotation: Option<ImageAnnotation> = it
                    .annotation
                    .as_ref()
                    .map(|p| read_json(&dir.join(p)))
                    .transpose()?;
                if let Some(a) = &annotation {
                    a.validate()?;
                }
                for m in lung.iter().chain(mask.iter()) {
                    if m.dims() != image.dims() {
                        return Err(Error::format(
                            dir.join(&it.image),
                            format!(
                                "mask size {:?} differs from image {:?}",
                                m.dims(),
                                image.dims()
                            ),
                        ));
                    }
                }
                Ok(Item {
                    id: it.id.clone(),
                    kind: it.kind,
                    image,
                    lung,
                    mask,
                    annotation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            items,
        })
    }

    pub fn of_kind(&self, kind: ItemKind) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |i| i.kind == kind)
    }

    pub fn annotated(&self) -> Vec<Annotated> {
        self.items.iter().map(Item::annotated).collect()
    }

    pub fn annotations(&self) -> Vec<ImageAnnotation> {
        self.items.iter().map(Item::annotation_or_empty).collect()
    }

    /// Normal images that have a lung mask.
    pub fn normals(&self) -> Vec<NormalImage> {
        self.of_kind(ItemKind::Normal)
            .filter_map(|i| {
                Some(NormalImage {
                    image: i.image.clone(),
                    lung: i.lung.clone()?,
                })
            })
            .collect()
    }

    /// Nodule shapes cut around each annotated box from the nodule masks.
    pub fn shape_masks(&self) -> Result<Vec<BinaryMask>> {
        let mut out = Vec::new();
        for item in self.of_kind(ItemKind::Nodule) {
            let Some(mask) = &item.mask else { continue };
            for b in item.boxes() {
                let (h, w) = mask.dims();
                let y0 = (b.y_min.floor() as usize).saturating_sub(2);
                let x0 = (b.x_min.floor() as usize).saturating_sub(2);
                let y1 = ((b.y_max.ceil() as usize) + 2).min(h);
                let x1 = ((b.x_max.ceil() as usize) + 2).min(w);
                let m = mask.window(y0, x0, y1 - y0, x1 - x0)?;
                if !m.is_empty() {
                    out.push(m);
                }
            }
        }
        Ok(out)
    }

    /// `size`×`size` training pairs centered on each nodule (shifted inside
    /// the image when needed).
    pub fn texture_samples(&self, size: usize) -> Result<Vec<TextureSample>> {
        let mut out = Vec::new();
        for item in self.of_kind(ItemKind::Nodule) {
            let Some(mask) = &item.mask else { continue };
            for b in item.boxes() {
                let (cx, cy) = b.center();
                let (h, w) = item.image.dims();
                let (oy, ox) =
                    nodulesynth_core::data::clamped_origin(h, w, (cy as usize, cx as usize), size)?;
                let m = mask.window(oy, ox, size, size)?;
                if m.is_empty() {
                    continue;
                }
                out.push(TextureSample::new(
                    item.image.window(oy, ox, size, size)?,
                    m,
                )?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig {
            size: 256,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = write_phantom_dataset(a.path(), &small(), 2, 2).unwrap();
        let mb = write_phantom_dataset(b.path(), &small(), 2, 2).unwrap();
        assert_eq!(ma.checksums, mb.checksums);
        assert_eq!(
            std::fs::read(a.path().join(MANIFEST)).unwrap(),
            std::fs::read(b.path().join(MANIFEST)).unwrap()
        );
        let ds = Dataset::open(a.path()).unwrap();
        assert_eq!(ds.items.len(), 4);
        assert_eq!(ds.normals().len(), 2);
        assert_eq!(ds.shape_masks().unwrap().len(), 2);
    }

    #[test]
    fn tampering_detected() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_phantom_dataset(dir.path(), &small(), 1, 0).unwrap();
        let img = dir.path().join(&m.items[0].image);
        let mut bytes = std::fs::read(&img).unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 0xff;
        std::fs::write(&img, bytes).unwrap();
        assert!(matches!(
            Manifest::load(dir.path()),
            Err(Error::Checksum { .. })
        ));
    }
}
