//! Binary-mask morphometry and Size Modulation.
//!
//! Diameters are the mean of the major and minor axis lengths of the ellipse
//! with the same second central moments as the foreground: `4·sqrt(λ)` for
//! each eigenvalue `λ` of the population covariance of foreground pixel
//! coordinates.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid};

/// Axis lengths of the moment-equivalent ellipse.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EllipseAxes {
    pub major: f64,
    pub minor: f64,
}

impl EllipseAxes {
    pub fn mean_diameter(&self) -> f64 {
        (self.major + self.minor) / 2.0
    }
}

/// Population covariance `(var_y, var_x, cov_xy)` of foreground coordinates.
pub fn coordinate_covariance(mask: &BinaryMask) -> Result<(f64, f64, f64)> {
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let (mut sy, mut sx) = (0.0f64, 0.0f64);
    for (y, x) in mask.foreground() {
        sy += y as f64;
        sx += x as f64;
    }
    let my = sy / n as f64;
    let mx = sx / n as f64;
    let (mut vyy, mut vxx, mut vxy) = (0.0f64, 0.0f64, 0.0f64);
    for (y, x) in mask.foreground() {
        let dy = y as f64 - my;
        let dx = x as f64 - mx;
        vyy += dy * dy;
        vxx += dx * dx;
        vxy += dx * dy;
    }
    let n = n as f64;
    Ok((vyy / n, vxx / n, vxy / n))
}

pub fn ellipse_axes(mask: &BinaryMask) -> Result<EllipseAxes> {
    let (a, c, b) = coordinate_covariance(mask)?;
    let half_trace = (a + c) / 2.0;
    let disc = (((a - c) / 2.0).powi(2) + b * b).sqrt();
    let l1 = half_trace + disc;
    let l2 = (half_trace - disc).max(0.0);
    Ok(EllipseAxes {
        major: 4.0 * l1.max(0.0).sqrt(),
        minor: 4.0 * l2.sqrt(),
    })
}

/// Mean equivalent-ellipse axis length in pixels.
pub fn estimate_diameter(mask: &BinaryMask) -> Result<f64> {
    Ok(ellipse_axes(mask)?.mean_diameter())
}

/// Rescales the shape so its estimated diameter becomes `target_d`, centered on a
/// `canvas`×`canvas` grid.
///
/// The tight bounding box of the foreground is cropped, rescaled with
/// nearest-neighbor sampling by `target_d / d_init` and pasted at the canvas
/// center (rounding toward the top-left).
pub fn modulate_size(mask: &BinaryMask, target_d: f64, canvas: usize) -> Result<BinaryMask> {
    if !(target_d > 0.0) || !target_d.is_finite() {
        return Err(Error::InvalidArgument(alloc::format!(
            "target diameter must be positive, got {target_d}"
        )));
    }
    let bounds = mask.bounds().ok_or(Error::EmptyMask)?;
    let d_init = estimate_diameter(mask)?;
    if d_init <= 0.0 {
        return Err(Error::DegenerateMask);
    }
    let f = target_d / d_init;
    let crop = mask.window(bounds.y_min, bounds.x_min, bounds.height(), bounds.width())?;
    let new_h = ((crop.height() as f64 * f).round() as usize).max(1);
    let new_w = ((crop.width() as f64 * f).round() as usize).max(1);
    if new_h > canvas || new_w > canvas {
        return Err(Error::ShapeTooLarge {
            height: new_h,
            width: new_w,
            canvas,
        });
    }
    let scaled = resize_nearest(&crop, new_h, new_w);
    let top = (canvas - new_h) / 2;
    let left = (canvas - new_w) / 2;
    Ok(scaled.placed(canvas, canvas, top as isize, left as isize))
}

/// Nearest-neighbor resample sampling source pixel `floor((dst + 0.5) · src / dst_len)`.
pub fn resize_nearest(mask: &BinaryMask, out_h: usize, out_w: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let ys: Vec<usize> = (0..out_h)
        .map(|y| (((y as f64 + 0.5) * h as f64 / out_h as f64) as usize).min(h - 1))
        .collect();
    let xs: Vec<usize> = (0..out_w)
        .map(|x| (((x as f64 + 0.5) * w as f64 / out_w as f64) as usize).min(w - 1))
        .collect();
    BinaryMask::from_fn(out_h, out_w, |y, x| mask.get(ys[y], xs[x]))
}

/// Nearest-neighbor upsampling of a square mask to `size`×`size`.
pub fn upsample_nn(mask: &BinaryMask, size: usize) -> Result<BinaryMask> {
    let (h, w) = mask.dims();
    if size < h || size < w {
        return Err(Error::InvalidArgument(alloc::format!(
            "upsample target {size} is smaller than the {h}x{w} mask"
        )));
    }
    Ok(resize_nearest(mask, size, size))
}

/// Area-averaging resample followed by re-binarization at 0.5.
pub fn resize_area(mask: &BinaryMask, out_h: usize, out_w: usize) -> BinaryMask {
    let img = mask.to_image().resize_area(out_h, out_w);
    BinaryMask::threshold(&img, 0.5)
}

/// Thresholds a probability map and keeps its largest 8-connected component.
pub fn clean_mask(prob: &Grid<f32>, threshold: f32) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(alloc::format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let bin = BinaryMask::threshold(prob, threshold);
    largest_component(&bin).ok_or(Error::EmptyMask)
}

/// Component labels (0 = background, 1.. in row-major discovery order) and sizes.
pub fn label_components(mask: &BinaryMask) -> (Grid<u32>, Vec<usize>) {
    let (h, w) = mask.dims();
    let mut labels = Grid::new(h, w, 0u32);
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if !mask.get(y0, x0) || labels.get(y0, x0) != 0 {
                continue;
            }
            let label = sizes.len() as u32 + 1;
            let mut size = 0usize;
            labels.set(y0, x0, label);
            queue.push_back((y0, x0));
            while let Some((y, x)) = queue.pop_front() {
                size += 1;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let ny = y as isize + dy;
                        let nx = x as isize + dx;
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask.get(ny, nx) && labels.get(ny, nx) == 0 {
                            labels.set(ny, nx, label);
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            sizes.push(size);
        }
    }
    (labels, sizes)
}

/// Largest 8-connected component; ties go to the first one found in row-major order.
pub fn largest_component(mask: &BinaryMask) -> Option<BinaryMask> {
    let (labels, sizes) = label_components(mask);
    let mut best: Option<(usize, usize)> = None;
    for (i, &s) in sizes.iter().enumerate() {
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((i, s));
        }
    }
    let (idx, _) = best?;
    let keep = idx as u32 + 1;
    let (h, w) = mask.dims();
    Some(BinaryMask::from_fn(h, w, |y, x| labels.get(y, x) == keep))
}

/// Pixels whose centers lie within `radius` of `(cy, cx)`.
pub fn disk(height: usize, width: usize, cy: f64, cx: f64, radius: f64) -> BinaryMask {
    let r2 = radius * radius;
    BinaryMask::from_fn(height, width, |y, x| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        dy * dy + dx * dx <= r2
    })
}

/// Even-odd rasterization of a closed polygon given as `(x, y)` vertices.
/// A pixel is foreground when its center lies inside.
pub fn fill_polygon(height: usize, width: usize, vertices: &[(f64, f64)]) -> BinaryMask {
    let mut mask = BinaryMask::new(height, width);
    if vertices.len() < 3 {
        return mask;
    }
    let mut crossings = Vec::new();
    for y in 0..height {
        let py = y as f64;
        crossings.clear();
        for i in 0..vertices.len() {
            let (x0, y0) = vertices[i];
            let (x1, y1) = vertices[(i + 1) % vertices.len()];
            if (y0 <= py && y1 > py) || (y1 <= py && y0 > py) {
                crossings.push(x0 + (py - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        crossings.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
        for pair in crossings.chunks_exact(2) {
            let start = pair[0].ceil().max(0.0) as usize;
            let end = pair[1].floor();
            if end < 0.0 {
                continue;
            }
            let end = (end as usize).min(width.saturating_sub(1));
            for x in start..=end {
                if x < width && (x as f64) >= pair[0] && (x as f64) <= pair[1] {
                    mask.set(y, x, true);
                }
            }
        }
    }
    mask
}

/// Fraction of foreground in the largest component (1 for an empty mask).
pub fn largest_component_fraction(mask: &BinaryMask) -> f64 {
    let (_, sizes) = label_components(mask);
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return 1.0;
    }
    *sizes.iter().max().unwrap_or(&0) as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    /// Independent covariance oracle: explicit coordinate matrix, eigen via nalgebra.
    fn oracle_diameter(mask: &BinaryMask) -> f64 {
        let pts: Vec<(f64, f64)> = mask
            .foreground()
            .map(|(y, x)| (x as f64, y as f64))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let mut c = nalgebra::Matrix2::<f64>::zeros();
        for (x, y) in &pts {
            let v = nalgebra::Vector2::new(x - mx, y - my);
            c += v * v.transpose();
        }
        c /= n;
        let eig = c.symmetric_eigen();
        let mut ev = [eig.eigenvalues[0].max(0.0), eig.eigenvalues[1].max(0.0)];
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
        (4.0 * ev[0].sqrt() + 4.0 * ev[1].sqrt()) / 2.0
    }

    #[test]
    fn disk_radius_20_measures_about_40() {
        let m = disk(128, 128, 64.0, 64.0, 20.0);
        let d = estimate_diameter(&m).unwrap();
        assert!((d - 40.0).abs() / 40.0 < 0.03, "{d}");
        assert!((d - oracle_diameter(&m)).abs() < 1e-9 * d);
    }

    #[test]
    fn single_pixel_is_zero_diameter() {
        let mut m = BinaryMask::new(8, 8);
        m.set(3, 3, true);
        assert_eq!(estimate_diameter(&m).unwrap(), 0.0);
        assert_eq!(modulate_size(&m, 10.0, 32), Err(Error::DegenerateMask));
    }

    #[test]
    fn rectangle_matches_bruteforce_covariance() {
        let m = BinaryMask::from_fn(64, 64, |y, x| (10..20).contains(&y) && (5..45).contains(&x));
        // 10 rows x 40 cols: var_y = (10^2-1)/12, var_x = (40^2-1)/12
        let expected = (4.0 * (99.0f64 / 12.0).sqrt() + 4.0 * (1599.0f64 / 12.0).sqrt()) / 2.0;
        let d = estimate_diameter(&m).unwrap();
        assert!((d - expected).abs() < 1e-9);
        assert!((d - oracle_diameter(&m)).abs() < 1e-9);
    }

    #[test]
    fn empty_mask_errors() {
        assert_eq!(
            estimate_diameter(&BinaryMask::new(4, 4)),
            Err(Error::EmptyMask)
        );
        assert_eq!(
            modulate_size(&BinaryMask::new(4, 4), 10.0, 16),
            Err(Error::EmptyMask)
        );
    }

    #[test]
    fn modulate_disk_to_100() {
        let m = disk(128, 128, 64.0, 64.0, 20.0);
        let out = modulate_size(&m, 100.0, 256).unwrap();
        assert_eq!(out.dims(), (256, 256));
        let d = estimate_diameter(&out).unwrap();
        assert!((d - 100.0).abs() <= 2.0, "{d}");
    }

    #[test]
    fn modulate_identity_scale_only_translates() {
        let m = BinaryMask::from_fn(40, 40, |y, x| {
            let (dy, dx) = (y as f64 - 14.0, x as f64 - 17.0);
            dy * dy / 64.0 + dx * dx / 144.0 <= 1.0
        });
        let d0 = estimate_diameter(&m).unwrap();
        let out = modulate_size(&m, d0, 64).unwrap();
        let b_in = m.bounds().unwrap();
        let b_out = out.bounds().unwrap();
        assert_eq!(b_in.height(), b_out.height());
        assert_eq!(b_in.width(), b_out.width());
        let dy = b_out.y_min as isize - b_in.y_min as isize;
        let dx = b_out.x_min as isize - b_in.x_min as isize;
        assert_eq!(m.placed(64, 64, dy, dx), out);
    }

    #[test]
    fn modulate_too_large() {
        let m = BinaryMask::from_fn(256, 256, |y, x| {
            (20..220).contains(&y) && (20..220).contains(&x)
        });
        let d0 = estimate_diameter(&m).unwrap();
        match modulate_size(&m, d0 * 1.5, 256) {
            Err(Error::ShapeTooLarge { .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn upsample_examples() {
        let z = BinaryMask::new(128, 128);
        assert!(upsample_nn(&z, 256).unwrap().is_empty());
        let mut m = BinaryMask::new(2, 2);
        m.set(0, 0, true);
        let up = upsample_nn(&m, 4).unwrap();
        let expected = BinaryMask::from_fn(4, 4, |y, x| y < 2 && x < 2);
        assert_eq!(up, expected);
        assert!(upsample_nn(&m, 1).is_err());
    }

    #[test]
    fn upsampled_disk_area_quadruples() {
        let m = disk(128, 128, 63.5, 63.5, 30.0);
        let up = upsample_nn(&m, 256).unwrap();
        assert_eq!(up.count(), 4 * m.count());
    }

    #[test]
    fn clean_mask_examples() {
        let all = Grid::new(6, 6, 0.9f32);
        assert_eq!(clean_mask(&all, 0.5).unwrap(), BinaryMask::filled(6, 6));
        let none = Grid::new(6, 6, 0.1f32);
        assert_eq!(clean_mask(&none, 0.5), Err(Error::EmptyMask));
        assert!(clean_mask(&all, 1.0).is_err());

        // 50-pixel block and a 10-pixel block
        let mut g = Grid::new(20, 20, 0.0f32);
        for y in 0..5 {
            for x in 0..10 {
                g.set(y, x, 1.0);
            }
        }
        for y in 15..17 {
            for x in 12..17 {
                g.set(y, x, 1.0);
            }
        }
        let c = clean_mask(&g, 0.5).unwrap();
        assert_eq!(c.count(), 50);
        assert!(c.get(0, 0) && !c.get(15, 12));
    }

    #[test]
    fn components_are_eight_connected_and_ties_pick_first() {
        let mut m = BinaryMask::new(6, 6);
        m.set(0, 0, true);
        m.set(1, 1, true); // diagonal neighbor
        m.set(4, 4, true);
        m.set(5, 5, true);
        let (_, sizes) = label_components(&m);
        assert_eq!(sizes, vec![2, 2]);
        let l = largest_component(&m).unwrap();
        assert!(l.get(0, 0) && !l.get(4, 4));
    }

    #[test]
    fn polygon_square() {
        let m = fill_polygon(10, 10, &[(2.0, 2.0), (6.0, 2.0), (6.0, 6.0), (2.0, 6.0)]);
        // rows 2..=5 (half-open edge rule), columns 2..=6
        assert_eq!(m.count(), 4 * 5);
    }
}
