//! PNG images and on-disk datasets.
//!
//! A dataset directory holds `clear/`, `hazy/` and `t/` PNG folders plus a
//! `manifest.jsonl` with one JSON record per sample. Images are 8-bit RGB;
//! transmission maps are 16-bit gray scaled by 65535.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haze::{Domain, HazeSample};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.jsonl";

/// All `*.png` files in `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    Tensor::from_fn([1, 3, h as usize, w as usize], |[_, c, y, x]| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

/// Loads any PNG as a `1×3×H×W` tensor in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn load_rgb_resized(path: &Path, height: usize, width: usize) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let img = if img.dimensions() == (width as u32, height as u32) {
        img
    } else {
        image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle)
    };
    Ok(rgb_to_tensor(&img))
}

#[inline]
fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes batch item 0 of an RGB tensor as an 8-bit PNG.
pub fn save_rgb(path: &Path, img: &Tensor) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Input("save_rgb needs 3 channels".into()));
    }
    let (h, w) = (img.height(), img.width());
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |c| quantize8(img.at([0, c, y as usize, x as usize]));
        Rgb([at(0), at(1), at(2)])
    });
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Writes one plane as an 8-bit gray PNG, min-max stretched when `normalize`.
pub fn save_gray(path: &Path, img: &Tensor, channel: usize, normalize: bool) -> Result<()> {
    let plane = img.plane(0, channel);
    let (lo, hi) = if normalize {
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo).max(1e-12) + lo)
    } else {
        (0.0, 1.0)
    };
    let w = img.width();
    let buf: GrayImage = ImageBuffer::from_fn(w as u32, img.height() as u32, |x, y| {
        let v = plane[y as usize * w + x as usize];
        Luma([quantize8((v - lo) / (hi - lo))])
    });
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Writes a `(0, 1]` map as a 16-bit gray PNG.
pub fn save_map16(path: &Path, map: &Tensor) -> Result<()> {
    let w = map.width();
    let plane = map.plane(0, 0);
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w as u32, map.height() as u32, |x, y| {
            let v = plane[y as usize * w + x as usize].clamp(0.0, 1.0);
            Luma([(v * 65535.0).round() as u16])
        });
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Reads a 16-bit map; zero codes map to the smallest representable level
/// so the result stays inside `(0, 1]`.
pub fn load_map16(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_fn(
        [1, 1, h as usize, w as usize],
        |[_, _, y, x]| (img.get_pixel(x as u32, y as u32)[0].max(1)) as f64 / 65535.0,
    ))
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: usize,
    pub seed: u64,
    pub clear: String,
    pub hazy: String,
    pub t: String,
    pub beta: f64,
    pub airlight: f64,
    pub domain: Domain,
    pub height: usize,
    pub width: usize,
}

/// Writes samples as PNG triplets plus `manifest.jsonl`.
pub fn write_dataset(dir: &Path, samples: &[HazeSample]) -> Result<Vec<ManifestRecord>> {
    for sub in ["clear", "hazy", "t"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut records = Vec::with_capacity(samples.len());
    let mut out = BufWriter::new(File::create(dir.join(MANIFEST))?);
    for s in samples {
        let name = format!("{:05}.png", s.id);
        let rec = ManifestRecord {
            id: s.id,
            seed: s.seed,
            clear: format!("clear/{name}"),
            hazy: format!("hazy/{name}"),
            t: format!("t/{name}"),
            beta: s.beta,
            airlight: s.airlight,
            domain: s.domain,
            height: s.hazy.height(),
            width: s.hazy.width(),
        };
        save_rgb(&dir.join(&rec.clear), &s.clear)?;
        save_rgb(&dir.join(&rec.hazy), &s.hazy)?;
        save_map16(&dir.join(&rec.t), &s.t)?;
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
        records.push(rec);
    }
    out.flush()?;
    Ok(records)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = dir.join(MANIFEST);
    let file = File::open(&path)
        .map_err(|e| Error::Input(format!("cannot open manifest {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

/// Loads a dataset written by [`write_dataset`]; every record must be paired.
pub fn read_dataset(dir: &Path) -> Result<Vec<HazeSample>> {
    let records = read_manifest(dir)?;
    if records.is_empty() {
        return Err(Error::Input(format!("dataset {} is empty", dir.display())));
    }
    records
        .into_iter()
        .map(|rec| {
            let clear_path = dir.join(&rec.clear);
            if !clear_path.is_file() {
                return Err(Error::Input(format!(
                    "sample {} has no clear image ({})",
                    rec.id,
                    clear_path.display()
                )));
            }
            let clear = load_rgb(&clear_path)?;
            let hazy = load_rgb(&dir.join(&rec.hazy))?;
            if clear.shape() != hazy.shape() {
                return Err(Error::Input(format!(
                    "sample {}: clear {:?} and hazy {:?} differ in shape",
                    rec.id,
                    clear.shape(),
                    hazy.shape()
                )));
            }
            let t = load_map16(&dir.join(&rec.t))?;
            Ok(HazeSample {
                id: rec.id,
                seed: rec.seed,
                clear,
                hazy,
                t,
                beta: rec.beta,
                airlight: rec.airlight,
                depth: None,
                domain: rec.domain,
            })
        })
        .collect()
}

/// Appends serialisable records as JSON lines.
pub struct JsonLines<W: Write> {
    out: W,
}

impl JsonLines<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }
}

impl<W: Write> JsonLines<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
