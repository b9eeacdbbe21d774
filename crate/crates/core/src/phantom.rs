//! Procedural chest-radiograph phantoms: smooth body background, elliptical
//! lung fields, curved rib bands and radial-Fourier nodules with Gaussian
//! intensity profiles.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{clamped_origin, Annotated, ImageAnnotation};
use crate::detection::Box;
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid, Image, Patch};
use crate::mask::{estimate_diameter, fill_polygon};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub size: usize,
    pub body_intensity: f64,
    pub lung_intensity: f64,
    /// Lung centers as fractions of the image width; rows at `lung_center_y`.
    pub lung_center_x: [f64; 2],
    pub lung_center_y: f64,
    /// Lung semi-axes `(x, y)` as fractions of the image size.
    pub lung_semi_axes: [f64; 2],
    pub rib_count: usize,
    pub rib_amplitude: f64,
    /// Vertical sag of each rib band across a lung, as a fraction of the size.
    pub rib_curvature: f64,
    pub noise_sigma: f64,
    /// Peak added intensity of regular nodules.
    pub nodule_amplitude: [f64; 2],
    /// Gaussian width relative to the nodule radius.
    pub nodule_sigma: f64,
    pub fourier_order: usize,
    pub fourier_amplitude: f64,
    /// Diameter ranges as fractions of the image size.
    pub large_diameter: [f64; 2],
    pub small_diameter: [f64; 2],
    /// Probability that a nodule is drawn from the small, faint population.
    pub small_fraction: f64,
    /// Amplitude multiplier for small nodules.
    pub small_contrast: f64,
    pub max_nodules: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 1024,
            body_intensity: 0.62,
            lung_intensity: 0.22,
            lung_center_x: [0.29, 0.71],
            lung_center_y: 0.5,
            lung_semi_axes: [0.17, 0.33],
            rib_count: 9,
            rib_amplitude: 0.08,
            rib_curvature: 0.06,
            noise_sigma: 0.002,
            nodule_amplitude: [0.22, 0.34],
            nodule_sigma: 0.7,
            fourier_order: 3,
            fourier_amplitude: 0.12,
            large_diameter: [0.035, 0.06],
            small_diameter: [0.014, 0.022],
            small_fraction: 0.2,
            small_contrast: 0.55,
            max_nodules: 1,
            seed: 7,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.body_intensity,
            self.lung_intensity,
            self.lung_semi_axes[0],
            self.lung_semi_axes[1],
            self.nodule_sigma,
            self.large_diameter[0],
            self.small_diameter[0],
        ];
        if self.size < 32 || positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidArgument(
                "phantom geometry parameters must be positive".into(),
            ));
        }
        if self.large_diameter[0] > self.large_diameter[1]
            || self.small_diameter[0] > self.small_diameter[1]
        {
            return Err(Error::InvalidArgument(
                "diameter ranges must be ordered".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.small_fraction) || self.max_nodules == 0 {
            return Err(Error::InvalidArgument(
                "small_fraction must lie in [0, 1] and max_nodules ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

/// Ground truth of one synthetic nodule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomNodule {
    pub bbox: Box,
    /// Measured equivalent-ellipse diameter of the rasterized shape.
    pub diameter: f64,
    /// Closed contour `(x, y)` in image coordinates.
    pub contour: Vec<(f64, f64)>,
    pub small: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub id: String,
    pub image: Image,
    pub lung: BinaryMask,
    /// Union of all nodule shapes.
    pub nodule_mask: BinaryMask,
    pub nodules: Vec<PhantomNodule>,
}

impl PhantomCase {
    pub fn annotation(&self) -> ImageAnnotation {
        ImageAnnotation {
            image_id: self.id.clone(),
            boxes: self.nodules.iter().map(|n| n.bbox).collect(),
            contours: Some(
                self.nodules
                    .iter()
                    .map(|n| n.contour.iter().map(|&(x, y)| [x, y]).collect())
                    .collect(),
            ),
            diameters: Some(self.nodules.iter().map(|n| n.diameter).collect()),
        }
    }

    /// `size`×`size` window around nodule `i` (moved inside the image when
    /// needed), that nodule's shape mask on it, and the window origin.
    pub fn nodule_patch(
        &self,
        i: usize,
        size: usize,
    ) -> Result<(Patch, BinaryMask, (usize, usize))> {
        let n = self
            .nodules
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("no nodule {i}")))?;
        let (cx, cy) = n.bbox.center();
        let (oy, ox) = clamped_origin(
            self.image.height(),
            self.image.width(),
            (cy as usize, cx as usize),
            size,
        )?;
        let local: Vec<(f64, f64)> = n
            .contour
            .iter()
            .map(|&(x, y)| (x - ox as f64, y - oy as f64))
            .collect();
        Ok((
            self.image.window(oy, ox, size, size)?,
            fill_polygon(size, size, &local),
            (oy, ox),
        ))
    }

    /// Image and boxes, without per-nodule masks.
    pub fn annotated(&self) -> Annotated {
        Annotated {
            image: self.image.clone(),
            boxes: self.nodules.iter().map(|n| n.bbox).collect(),
            masks: Vec::new(),
        }
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

struct Anatomy {
    centers: [(f64, f64); 2],
    semi: [(f64, f64); 2],
    rib_phase: f64,
    tilt: f64,
}

impl Anatomy {
    fn sample(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Self {
        let s = cfg.size as f64;
        let j = |rng: &mut ChaCha8Rng, v: f64, f: f64| v * (1.0 + rng.random_range(-f..f));
        let mut centers = [(0.0, 0.0); 2];
        let mut semi = [(0.0, 0.0); 2];
        for i in 0..2 {
            centers[i] = (
                j(rng, cfg.lung_center_x[i] * s, 0.02),
                j(rng, cfg.lung_center_y * s, 0.02),
            );
            semi[i] = (
                j(rng, cfg.lung_semi_axes[0] * s, 0.04),
                j(rng, cfg.lung_semi_axes[1] * s, 0.04),
            );
        }
        Self {
            centers,
            semi,
            rib_phase: rng.random_range(0.0..2.0 * PI),
            tilt: rng.random_range(-0.05..0.05),
        }
    }

    /// Signed elliptical radius (< 1 inside) of the nearest lung.
    fn lung_radius(&self, x: f64, y: f64) -> f64 {
        (0..2)
            .map(|i| {
                let dx = (x - self.centers[i].0) / self.semi[i].0;
                let dy = (y - self.centers[i].1) / self.semi[i].1;
                (dx * dx + dy * dy).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn render(&self, cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> (Image, BinaryMask) {
        let n = cfg.size;
        let s = n as f64;
        let period = s * 0.62 / cfg.rib_count.max(1) as f64;
        let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).unwrap();
        let edge = 0.04;
        let mut lung = BinaryMask::new(n, n);
        let mut img = Grid::new(n, n, 0.0f32);
        for y in 0..n {
            let fy = y as f64;
            for x in 0..n {
                let fx = x as f64;
                let r = self.lung_radius(fx, fy);
                if r < 1.0 {
                    lung.set(y, x, true);
                }
                let body = cfg.body_intensity * (1.0 + self.tilt * (fy / s - 0.5))
                    - 0.08 * ((fx / s - 0.5) * 2.0).powi(2);
                let w = smoothstep(1.0 + edge, 1.0 - edge, r);
                let inner = cfg.lung_intensity + 0.05 * (fy / s);
                let nearest = if (fx - self.centers[0].0).abs() < (fx - self.centers[1].0).abs() {
                    0
                } else {
                    1
                };
                let lx = (fx - self.centers[nearest].0) / self.semi[nearest].0;
                let sag = cfg.rib_curvature * s * lx * lx;
                let band = 0.5 + 0.5 * (2.0 * PI * (fy - sag) / period + self.rib_phase).sin();
                let rib = cfg.rib_amplitude * band.powi(4) * (0.35 + 0.65 * w);
                let v = body * (1.0 - w) + inner * w + rib + noise.sample(rng);
                img.set(y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
        (img, lung)
    }
}

/// Radial-Fourier closed contour around the origin with mean radius `r0`.
pub fn fourier_contour(
    r0: f64,
    order: usize,
    amplitude: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(f64, f64)> {
    let coeffs: Vec<(f64, f64)> = (2..=order.max(1) + 1)
        .map(|k| {
            (
                rng.random_range(-amplitude..amplitude) / (k - 1) as f64,
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let verts = 96;
    (0..verts)
        .map(|i| {
            let t = 2.0 * PI * i as f64 / verts as f64;
            let mut r = 1.0;
            for (k, (a, phi)) in coeffs.iter().enumerate() {
                r += a * (((k + 2) as f64) * t + phi).cos();
            }
            let r = r0 * r.max(0.3);
            (r * t.cos(), r * t.sin())
        })
        .collect()
}

/// A random nodule-like shape of roughly `diameter` pixels centered on a
/// `size`×`size` canvas.
pub fn random_shape(
    size: usize,
    diameter: f64,
    order: usize,
    amplitude: f64,
    rng: &mut ChaCha8Rng,
) -> BinaryMask {
    let c = size as f64 / 2.0 - 0.5;
    let verts: Vec<(f64, f64)> = fourier_contour(diameter / 2.0, order, amplitude, rng)
        .into_iter()
        .map(|(x, y)| (x + c, y + c))
        .collect();
    fill_polygon(size, size, &verts)
}

fn case_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// Draws an image without nodules.
pub fn normal_case(cfg: &PhantomConfig, index: usize) -> Result<PhantomCase> {
    cfg.validate()?;
    let mut rng = case_rng(cfg.seed, index as u64);
    let anatomy = Anatomy::sample(cfg, &mut rng);
    let (image, lung) = anatomy.render(cfg, &mut rng);
    let n = cfg.size;
    Ok(PhantomCase {
        id: format!("normal_{index:05}"),
        image,
        lung,
        nodule_mask: BinaryMask::new(n, n),
        nodules: Vec::new(),
    })
}

/// Adds one nodule of the given diameter fully inside the lung field.
/// Returns `None` when no placement is found.
pub fn insert_nodule(
    case: &mut PhantomCase,
    cfg: &PhantomConfig,
    diameter: f64,
    amplitude: f64,
    rng: &mut ChaCha8Rng,
) -> Option<PhantomNodule> {
    let lb = case.lung.bounds()?;
    let r0 = diameter / 2.0;
    let contour = fourier_contour(r0, cfg.fourier_order, cfg.fourier_amplitude, rng);
    let reach = contour
        .iter()
        .map(|(x, y)| x.abs().max(y.abs()))
        .fold(0.0, f64::max)
        .ceil() as usize
        + 2;
    let win = 2 * reach + 1;
    let local: Vec<(f64, f64)> = contour
        .iter()
        .map(|(x, y)| (x + reach as f64, y + reach as f64))
        .collect();
    let shape = fill_polygon(win, win, &local);
    if shape.is_empty() {
        return None;
    }
    let n = case.image.height();
    for _ in 0..200 {
        let cy = rng.random_range(lb.y_min..=lb.y_max);
        let cx = rng.random_range(lb.x_min..=lb.x_max);
        if cy < reach || cx < reach || cy + reach >= n || cx + reach >= n {
            continue;
        }
        let (oy, ox) = (cy - reach, cx - reach);
        let ok = shape
            .foreground()
            .all(|(y, x)| case.lung.get(oy + y, ox + x) && !case.nodule_mask.get(oy + y, ox + x));
        if !ok {
            continue;
        }
        let sigma = cfg.nodule_sigma * r0;
        for (y, x) in shape.foreground() {
            let dy = y as f64 - reach as f64;
            let dx = x as f64 - reach as f64;
            let v = amplitude * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            let (gy, gx) = (oy + y, ox + x);
            let old = case.image.get(gy, gx) as f64;
            case.image.set(gy, gx, (old + v).clamp(0.0, 1.0) as f32);
            case.nodule_mask.set(gy, gx, true);
        }
        let b = shape.bounds().expect("non-empty shape");
        let bbox = Box::new(
            (ox + b.x_min) as f64,
            (oy + b.y_min) as f64,
            (ox + b.x_max + 1) as f64,
            (oy + b.y_max + 1) as f64,
        );
        let nodule = PhantomNodule {
            bbox,
            diameter: estimate_diameter(&shape).ok()?,
            contour: contour
                .iter()
                .map(|(x, y)| (x + cx as f64, y + cy as f64))
                .collect(),
            small: false,
        };
        case.nodules.push(nodule.clone());
        return Some(nodule);
    }
    None
}

/// Draws an image with between one and `max_nodules` nodules.
pub fn nodule_case(cfg: &PhantomConfig, index: usize) -> Result<PhantomCase> {
    let mut case = normal_case(cfg, index)?;
    case.id = format!("nodule_{index:05}");
    let mut rng = case_rng(cfg.seed ^ 0x9e37_79b9_7f4a_7c15, index as u64);
    let count = rng.random_range(1..=cfg.max_nodules);
    let s = cfg.size as f64;
    while case.nodules.len() < count {
        let small = rng.random_bool(cfg.small_fraction);
        let range = if small {
            cfg.small_diameter
        } else {
            cfg.large_diameter
        };
        let d = rng.random_range(range[0]..=range[1]) * s;
        let mut amp = rng.random_range(cfg.nodule_amplitude[0]..=cfg.nodule_amplitude[1]);
        if small {
            amp *= cfg.small_contrast;
        }
        match insert_nodule(&mut case, cfg, d, amp, &mut rng) {
            Some(_) => {
                case.nodules.last_mut().expect("just inserted").small = small;
            }
            None => break,
        }
    }
    Ok(case)
}

/// Normal cases are indexed `0..n_normal`; nodule cases continue the index
/// so every case has its own random stream.
pub fn generate_phantom_dataset(
    cfg: &PhantomConfig,
    n_normal: usize,
    n_nodule: usize,
) -> Result<Vec<PhantomCase>> {
    let mut out = Vec::with_capacity(n_normal + n_nodule);
    for i in 0..n_normal {
        out.push(normal_case(cfg, i)?);
    }
    for i in 0..n_nodule {
        out.push(nodule_case(cfg, n_normal + i)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PhantomConfig {
        PhantomConfig {
            size: 256,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_phantom_dataset(&small_cfg(), 1, 2).unwrap();
        let b = generate_phantom_dataset(&small_cfg(), 1, 2).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.nodules, y.nodules);
        }
    }

    #[test]
    fn nodules_inside_lungs_with_measured_diameter() {
        let cases = generate_phantom_dataset(&small_cfg(), 0, 6).unwrap();
        for c in &cases {
            assert!(!c.nodules.is_empty());
            assert!(c.nodule_mask.is_subset_of(&c.lung));
            for nd in &c.nodules {
                let m = fill_polygon(256, 256, &nd.contour);
                let d = estimate_diameter(&m).unwrap();
                assert!((d - nd.diameter).abs() <= 2.0, "{d} vs {}", nd.diameter);
                for (y, x) in m.foreground() {
                    assert!(c.lung.get(y, x));
                    assert!((x as f64) >= nd.bbox.x_min && (x as f64) < nd.bbox.x_max);
                }
            }
        }
    }

    #[test]
    fn intensities_in_unit_range() {
        let c = normal_case(&small_cfg(), 0).unwrap();
        assert!(c.image.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(c.lung.count() > 256 * 256 / 8);
    }

    #[test]
    fn random_shape_diameter_near_request() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_shape(128, 60.0, 3, 0.12, &mut rng);
        let d = estimate_diameter(&m).unwrap();
        assert!((d - 60.0).abs() < 8.0, "{d}");
    }
}
