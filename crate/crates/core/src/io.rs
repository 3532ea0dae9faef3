//! PNG rasters and the on-disk dataset layout:
//!
//! ```text
//! <root>/images/<id>.png   8-bit grayscale
//! <root>/masks/<id>.png    8-bit grayscale, 0 or 255
//! <root>/labels.csv        id,label,split
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::cam::RgbImage;
use crate::error::{Error, Result};
use crate::phantom::{Dataset, LesionLabel, Mask, PhantomCase, ScanImage};
use crate::trainer::csv_error;

/// 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

fn encode(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut w = enc.write_header().map_err(fail)?;
    w.write_image_data(data).map_err(fail)?;
    w.finish().map_err(fail)
}

pub fn write_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    encode(path, img.width, img.height, png::ColorType::Grayscale, &img.data)
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    encode(path, img.width, img.height, png::ColorType::Rgb, &img.data)
}

/// Reads an 8-bit grayscale PNG; any other color type or depth is rejected.
pub fn read_gray_png(path: &Path) -> Result<GrayImage> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fail = |e: png::DecodingError| Error::format(path, e.to_string());
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(fail)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!("expected 8-bit grayscale, got {:?} {:?}", info.color_type, info.bit_depth),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok(GrayImage {
        width: info.width as usize,
        height: info.height as usize,
        data: buf,
    })
}

pub fn to_gray(image: &ScanImage) -> GrayImage {
    GrayImage {
        width: image.width,
        height: image.height,
        data: image.pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect(),
    }
}

pub fn save_scan_png(path: &Path, image: &ScanImage) -> Result<()> {
    write_gray_png(path, &to_gray(image))
}

pub fn load_scan_png(path: &Path, id: &str) -> Result<ScanImage> {
    let g = read_gray_png(path)?;
    Ok(ScanImage {
        width: g.width,
        height: g.height,
        pixels: g.data.iter().map(|&b| b as f32 / 255.0).collect(),
        id: id.to_string(),
    })
}

pub fn save_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    write_gray_png(
        path,
        &GrayImage {
            width: mask.width,
            height: mask.height,
            data: mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        },
    )
}

pub fn load_mask_png(path: &Path) -> Result<Mask> {
    let g = read_gray_png(path)?;
    let bits = g
        .data
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            255 => Ok(true),
            v => Err(Error::format(path, format!("mask value {v} is neither 0 nor 255"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Mask::new(g.width, g.height, bits)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Writes `dataset` under `root`, creating the directories it needs.
pub fn save_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    for dir in [&images, &masks] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let labels = root.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels).map_err(|e| csv_error(&labels, e))?;
    w.write_record(["id", "label", "split"]).map_err(|e| csv_error(&labels, e))?;
    for (split, cases) in [(Split::Train, &dataset.train), (Split::Test, &dataset.test)] {
        for c in cases {
            let id = &c.image.id;
            save_scan_png(&images.join(format!("{id}.png")), &c.image)?;
            save_mask_png(&masks.join(format!("{id}.png")), &c.mask)?;
            w.write_record([id.as_str(), c.label.as_str(), split.as_str()])
                .map_err(|e| csv_error(&labels, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&labels, e))
}

/// Reads a dataset written by [`save_dataset`]. Unknown labels or splits,
/// duplicate ids and image/mask size mismatches are errors.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let labels = root.join("labels.csv");
    let mut r = csv::Reader::from_path(&labels).map_err(|e| csv_error(&labels, e))?;
    let header = r.headers().map_err(|e| csv_error(&labels, e))?;
    if header.iter().ne(["id", "label", "split"]) {
        return Err(Error::format(&labels, "expected header id,label,split"));
    }
    let mut seen = std::collections::HashSet::new();
    let mut out = Dataset::default();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(&labels, e))?;
        let at = |reason: String| Error::format(&labels, format!("row {}: {reason}", line + 2));
        let [id, label, split] = [0, 1, 2].map(|i| rec.get(i).unwrap_or(""));
        let label: LesionLabel = label.parse().map_err(|e: Error| at(e.to_string()))?;
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(at(format!("unknown split {other:?}"))),
        };
        if id.is_empty() || id.contains(['/', '\\']) {
            return Err(at(format!("bad case id {id:?}")));
        }
        if !seen.insert(id.to_string()) {
            return Err(at(format!("duplicate case id {id}")));
        }
        let image = load_scan_png(&root.join("images").join(format!("{id}.png")), id)?;
        let mask = load_mask_png(&root.join("masks").join(format!("{id}.png")))?;
        if (mask.width, mask.height) != (image.width, image.height) {
            return Err(at(format!("mask and image sizes differ for {id}")));
        }
        let case = PhantomCase {
            image,
            mask,
            label,
            spec: None,
        };
        match split {
            Split::Train => out.train.push(case),
            Split::Test => out.test.push(case),
        }
    }
    Ok(out)
}
