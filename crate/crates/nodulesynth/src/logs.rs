//! Loss logs as CSV.

use std::path::Path;

use nodulesynth_core::shape_gan::ShapeEpochLog;
use nodulesynth_core::texture_gan::TextureStepLog;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::atomic_write;

#[derive(Debug, Serialize)]
struct ShapeRow {
    epoch: usize,
    #[serde(rename = "loss_D")]
    loss_d: f64,
    #[serde(rename = "loss_G")]
    loss_g: f64,
}

#[derive(Debug, Serialize)]
struct TextureRow {
    step: usize,
    #[serde(rename = "L_rec1")]
    rec1: f64,
    #[serde(rename = "L_rec2")]
    rec2: f64,
    #[serde(rename = "L_perc")]
    perc: f64,
    #[serde(rename = "L_adv_G")]
    adv_g: f64,
    #[serde(rename = "L_D")]
    loss_d: f64,
}

fn write_rows<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e))?;
    atomic_write(path, &bytes)
}

/// Columns `epoch, loss_D, loss_G`.
pub fn write_shape_log(path: &Path, logs: &[ShapeEpochLog]) -> Result<()> {
    write_rows(
        path,
        logs.iter().map(|l| ShapeRow {
            epoch: l.epoch,
            loss_d: l.loss_d,
            loss_g: l.loss_g,
        }),
    )
}

/// Columns `step, L_rec1, L_rec2, L_perc, L_adv_G, L_D`.
pub fn write_texture_log(path: &Path, logs: &[TextureStepLog]) -> Result<()> {
    write_rows(
        path,
        logs.iter().map(|l| TextureRow {
            step: l.step,
            rec1: l.rec1,
            rec2: l.rec2,
            perc: l.perc,
            adv_g: l.adv_g,
            loss_d: l.loss_d,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_shape_log(
            &p,
            &[ShapeEpochLog {
                epoch: 1,
                loss_d: 0.5,
                loss_g: 0.25,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "epoch,loss_D,loss_G\n1,0.5,0.25\n");
        let p = dir.path().join("t.csv");
        write_texture_log(&p, &[]).unwrap();
        write_texture_log(
            &p,
            &[TextureStepLog {
                step: 3,
                phase: 1,
                rec1: 0.1,
                rec2: 0.2,
                perc: 0.3,
                adv_g: 0.4,
                loss_d: 0.5,
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,L_rec1,L_rec2,L_perc,L_adv_G,L_D\n3,0.1,"));
    }
}
