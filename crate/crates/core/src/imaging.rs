//! Display products: dB magnitude maps and three-beam RGB composites.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::focus::{Beam, FocusedImage, ImageGrid};

pub const DEFAULT_DYNAMIC_RANGE_DB: f64 = 40.0;

/// `20 log10(|z| / peak)` clamped to `[floor_db, 0]`, row-major like the image.
pub fn magnitude_db(img: &FocusedImage, floor_db: f64) -> Vec<f64> {
    let peak = img.pixels.iter().map(|z| z.norm()).fold(0.0, f64::max);
    db_relative(img, peak, floor_db)
}

fn db_relative(img: &FocusedImage, peak: f64, floor_db: f64) -> Vec<f64> {
    if peak == 0.0 {
        return vec![floor_db; img.pixels.len()];
    }
    img.pixels
        .iter()
        .map(|z| {
            let m = z.norm();
            if m == 0.0 {
                floor_db
            } else {
                (20.0 * (m / peak).log10()).clamp(floor_db, 0.0)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RgbComposite {
    pub grid: ImageGrid,
    /// R, G, B planes, row-major, values in `[0, 1]`.
    pub channels: [Vec<f64>; 3],
    /// Beam shown in each channel.
    pub beams: [Beam; 3],
    pub dynamic_range_db: f64,
}

/// Maps three beam images to R, G and B with one normalization shared by all
/// three, so a weak beam stays dark.
pub fn rgb_compose(images: &[FocusedImage], dynamic_range_db: f64) -> Result<RgbComposite> {
    if images.len() != 3 {
        return Err(Error::invalid(
            "images",
            format!("a composite takes exactly 3 images, got {}", images.len()),
        ));
    }
    if !(dynamic_range_db > 0.0) {
        return Err(Error::invalid("dynamic_range_db", "must be positive"));
    }
    let grid = images[0].grid;
    if images.iter().any(|i| i.grid != grid || i.pixels.len() != grid.len()) {
        return Err(Error::DimensionMismatch("composite images must share one grid".into()));
    }
    let peak = images
        .iter()
        .flat_map(|i| i.pixels.iter())
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    let channel = |img: &FocusedImage| -> Vec<f64> {
        db_relative(img, peak, -dynamic_range_db)
            .into_iter()
            .map(|db| ((db + dynamic_range_db) / dynamic_range_db).clamp(0.0, 1.0))
            .collect()
    };
    Ok(RgbComposite {
        grid,
        channels: [channel(&images[0]), channel(&images[1]), channel(&images[2])],
        beams: [images[0].beam, images[1].beam, images[2].beam],
        dynamic_range_db,
    })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rows of a row-major plane, top row first (largest `y` at the top).
fn rows_top_down(nx: usize, ny: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..ny).rev().map(move |iy| iy * nx..(iy + 1) * nx)
}

/// 8-bit binary PGM of a dB map, mapping `[floor_db, 0]` to `[0, 255]`.
pub fn write_pgm<W: Write>(db: &[f64], grid: &ImageGrid, floor_db: f64, mut out: W) -> Result<()> {
    if db.len() != grid.len() {
        return Err(Error::DimensionMismatch("dB map does not match grid".into()));
    }
    write!(out, "P5\n{} {}\n255\n", grid.nx, grid.ny)?;
    let mut bytes = Vec::with_capacity(db.len());
    for row in rows_top_down(grid.nx, grid.ny) {
        bytes.extend(db[row].iter().map(|&d| to_byte((d - floor_db) / -floor_db)));
    }
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

fn interleaved(c: &RgbComposite) -> Vec<u8> {
    let g = &c.grid;
    let mut bytes = Vec::with_capacity(3 * g.len());
    for row in rows_top_down(g.nx, g.ny) {
        for i in row {
            bytes.extend(c.channels.iter().map(|ch| to_byte(ch[i])));
        }
    }
    bytes
}

pub fn write_ppm<W: Write>(c: &RgbComposite, mut out: W) -> Result<()> {
    write!(out, "P6\n{} {}\n255\n", c.grid.nx, c.grid.ny)?;
    out.write_all(&interleaved(c))?;
    out.flush()?;
    Ok(())
}

pub fn write_png<W: Write>(c: &RgbComposite, out: W) -> Result<()> {
    use image::codecs::png::PngEncoder;
    use image::{ExtendedColorType, ImageEncoder};
    let (w, h) = (c.grid.nx as u32, c.grid.ny as u32);
    PngEncoder::new(out)
        .write_image(&interleaved(c), w, h, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Format {
            format: "png",
            reason: e.to_string(),
        })
}

/// Raw little-endian float32 magnitude grid, row-major with row 0 at `y0`.
pub fn write_magnitude_f32<W: Write>(img: &FocusedImage, mut out: W) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * img.pixels.len());
    for z in &img.pixels {
        bytes.extend_from_slice(&(z.norm() as f32).to_le_bytes());
    }
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct Sidecar<'a> {
    pub grid: &'a ImageGrid,
    pub beams: Vec<BeamInfo>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dynamic_range_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub floor_db: Option<f64>,
    pub layout: &'static str,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BeamInfo {
    pub alpha_p_rad: f64,
    pub alpha_p_deg: f64,
    pub delta_alpha_rad: f64,
    pub delta_alpha_deg: f64,
}

impl From<&Beam> for BeamInfo {
    fn from(b: &Beam) -> Self {
        BeamInfo {
            alpha_p_rad: b.alpha_p,
            alpha_p_deg: b.alpha_p.to_degrees(),
            delta_alpha_rad: b.delta_alpha,
            delta_alpha_deg: b.delta_alpha.to_degrees(),
        }
    }
}

impl<'a> Sidecar<'a> {
    pub fn for_image(img: &'a FocusedImage, layout: &'static str) -> Self {
        Sidecar {
            grid: &img.grid,
            beams: vec![BeamInfo::from(&img.beam)],
            dynamic_range_db: None,
            floor_db: None,
            layout,
        }
    }

    pub fn for_composite(c: &'a RgbComposite) -> Self {
        Sidecar {
            grid: &c.grid,
            beams: c.beams.iter().map(BeamInfo::from).collect(),
            dynamic_range_db: Some(c.dynamic_range_db),
            floor_db: None,
            layout: "rgb8, top row is max y",
        }
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self).map_err(|e| Error::Format {
            format: "json",
            reason: e.to_string(),
        })?;
        writeln!(out)?;
        Ok(())
    }
}
