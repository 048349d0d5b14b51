//! PNG/TIFF reading and writing for images, label masks and flow caches.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::{Array2, Array3};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flows::{encode_flows, FlowTarget};
use crate::mask::{InstanceMask, IntensityImage};

/// Decoded raster, interleaved samples converted to `f64`.
#[derive(Debug, Clone)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub integer: bool,
    pub data: Vec<f64>,
}

impl Raster {
    fn channel(&self, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((self.height, self.width), |(y, x)| {
            self.data[(y * self.width + x) * self.channels + c]
        })
    }

    fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

fn is_tiff(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("tif" | "tiff")
    )
}

fn read_tiff(path: &Path) -> Result<Raster> {
    use tiff::decoder::{Decoder, DecodingResult};
    use tiff::ColorType;
    let err = |e: tiff::TiffError| Error::file(path, e);
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(err)?;
    let (w, h) = dec.dimensions().map_err(err)?;
    let channels = match dec.colortype().map_err(err)? {
        ColorType::Gray(_) => 1,
        ColorType::GrayA(_) => 2,
        ColorType::RGB(_) => 3,
        ColorType::RGBA(_) => 4,
        other => return Err(Error::file(path, format!("unsupported TIFF color type {other:?}"))),
    };
    let (integer, data): (bool, Vec<f64>) = match dec.read_image().map_err(err)? {
        DecodingResult::U8(v) => (true, v.into_iter().map(f64::from).collect()),
        DecodingResult::U16(v) => (true, v.into_iter().map(f64::from).collect()),
        DecodingResult::U32(v) => (true, v.into_iter().map(f64::from).collect()),
        DecodingResult::I8(v) => (true, v.into_iter().map(f64::from).collect()),
        DecodingResult::I16(v) => (true, v.into_iter().map(f64::from).collect()),
        DecodingResult::I32(v) => (true, v.into_iter().map(f64::from).collect()),
        DecodingResult::F32(v) => (false, v.into_iter().map(f64::from).collect()),
        DecodingResult::F64(v) => (false, v),
        _ => return Err(Error::file(path, "unsupported TIFF sample format")),
    };
    let (height, width) = (h as usize, w as usize);
    if data.len() != height * width * channels {
        return Err(Error::file(path, "TIFF sample count does not match dimensions"));
    }
    Ok(Raster {
        height,
        width,
        channels,
        integer,
        data,
    })
}

fn read_other(path: &Path) -> Result<Raster> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::file(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::file(path, e))?
        .decode()
        .map_err(|e| Error::file(path, e))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, integer, data): (usize, bool, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => (1, true, b.into_raw().into_iter().map(f64::from).collect()),
        DynamicImage::ImageLuma16(b) => (1, true, b.into_raw().into_iter().map(f64::from).collect()),
        DynamicImage::ImageLumaA8(b) => (2, true, b.into_raw().into_iter().map(f64::from).collect()),
        DynamicImage::ImageLumaA16(b) => (2, true, b.into_raw().into_iter().map(f64::from).collect()),
        DynamicImage::ImageRgb8(b) => (3, true, b.into_raw().into_iter().map(f64::from).collect()),
        DynamicImage::ImageRgb16(b) => (3, true, b.into_raw().into_iter().map(f64::from).collect()),
        DynamicImage::ImageRgba8(b) => (4, true, b.into_raw().into_iter().map(f64::from).collect()),
        DynamicImage::ImageRgba16(b) => (4, true, b.into_raw().into_iter().map(f64::from).collect()),
        DynamicImage::ImageRgb32F(b) => (3, false, b.into_raw().into_iter().map(f64::from).collect()),
        DynamicImage::ImageRgba32F(b) => (4, false, b.into_raw().into_iter().map(f64::from).collect()),
        _ => return Err(Error::file(path, "unsupported pixel format")),
    };
    Ok(Raster {
        height,
        width,
        channels,
        integer,
        data,
    })
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    if is_tiff(path) {
        read_tiff(path)
    } else {
        read_other(path)
    }
}

/// Read a grayscale image as raw intensities. Multi-channel input is an error
/// unless `convert_rgb` is set, in which case the color channels are averaged
/// (alpha is dropped).
pub fn read_gray_image(path: &Path, convert_rgb: bool) -> Result<IntensityImage> {
    let r = read_raster(path)?;
    match r.channels {
        1 | 2 => Ok(r.channel(0).mapv(|v| v as f32)),
        3 | 4 if convert_rgb => Ok(Array2::from_shape_fn((r.height, r.width), |(y, x)| {
            let p = r.pixel(y, x);
            ((p[0] + p[1] + p[2]) / 3.0) as f32
        })),
        c => Err(Error::file(
            path,
            format!("expected a grayscale image, found {c} channels (enable RGB conversion to accept it)"),
        )),
    }
}

/// Read a label image. Grayscale masks must hold non-negative integers. Color
/// masks are accepted when `convert_rgb` is set: every distinct non-black
/// color becomes one instance.
pub fn read_mask(path: &Path, convert_rgb: bool) -> Result<InstanceMask> {
    let r = read_raster(path)?;
    match r.channels {
        1 | 2 => {
            let ch = r.channel(0);
            if ch.iter().any(|&v| v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64) {
                return Err(Error::file(path, "mask holds non-integer or negative labels"));
            }
            Ok(InstanceMask::new(ch.mapv(|v| v as u32)))
        }
        3 | 4 if convert_rgb => {
            if !r.integer {
                return Err(Error::file(path, "color mask must be integer-valued"));
            }
            let mut ids: HashMap<[u64; 3], u32> = HashMap::new();
            let labels = Array2::from_shape_fn((r.height, r.width), |(y, x)| {
                let p = r.pixel(y, x);
                let key = [p[0] as u64, p[1] as u64, p[2] as u64];
                if key == [0, 0, 0] {
                    return 0;
                }
                let next = ids.len() as u32 + 1;
                *ids.entry(key).or_insert(next)
            });
            Ok(InstanceMask::new(labels))
        }
        c => Err(Error::file(
            path,
            format!("expected a single-channel label image, found {c} channels"),
        )),
    }
}

/// 16-bit single-channel PNG label image.
pub fn write_mask_png(path: &Path, mask: &InstanceMask) -> Result<()> {
    if mask.max_label() > u16::MAX as u32 {
        return Err(Error::file(path, "more than 65535 labels do not fit a 16-bit PNG"));
    }
    let (h, w) = mask.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        w as u32,
        h as u32,
        mask.labels().iter().map(|&l| l as u16).collect(),
    )
    .expect("buffer size matches");
    buf.save(path).map_err(|e| Error::file(path, e))
}

/// Grayscale PNG from an image in `[0, 1]` (values are clipped).
pub fn write_image_png(path: &Path, img: &IntensityImage, bits: u8) -> Result<()> {
    let (h, w) = img.dim();
    let res = match bits {
        8 => ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(
            w as u32,
            h as u32,
            img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        )
        .expect("buffer size matches")
        .save(path),
        16 => ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(
            w as u32,
            h as u32,
            img.iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect(),
        )
        .expect("buffer size matches")
        .save(path),
        b => return Err(Error::file(path, format!("unsupported bit depth {b}"))),
    };
    res.map_err(|e| Error::file(path, e))
}

/// Three-channel 32-bit float TIFF, interleaved `(flow_y, flow_x, prob)`.
pub fn write_flows_tiff(path: &Path, flows: &FlowTarget) -> Result<()> {
    use tiff::encoder::{colortype::RGB32Float, TiffEncoder};
    let (h, w) = flows.dim();
    let mut data = Vec::with_capacity(h * w * 3);
    for ((a, b), c) in flows.flow_y.iter().zip(flows.flow_x.iter()).zip(flows.prob.iter()) {
        data.extend_from_slice(&[*a, *b, *c]);
    }
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| Error::file(path, e))?;
    enc.write_image::<RGB32Float>(w as u32, h as u32, &data)
        .map_err(|e| Error::file(path, e))
}

pub fn read_flows_tiff(path: &Path) -> Result<FlowTarget> {
    let r = read_tiff(path)?;
    if r.channels != 3 || r.integer {
        return Err(Error::file(path, "flow cache must be 3-channel float"));
    }
    let a = Array3::from_shape_fn((3, r.height, r.width), |(c, y, x)| {
        r.data[(y * r.width + x) * 3 + c] as f32
    });
    FlowTarget::from_array(&a)
}

/// SHA-256 over the mask shape and little-endian labels, hex encoded.
pub fn mask_hash(mask: &InstanceMask) -> String {
    let mut h = Sha256::new();
    let (rows, cols) = mask.dim();
    h.update((rows as u64).to_le_bytes());
    h.update((cols as u64).to_le_bytes());
    for &l in mask.labels().iter() {
        h.update(l.to_le_bytes());
    }
    hex_string(&h.finalize())
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    Ok(hex_string(&Sha256::digest(&bytes)))
}

/// Content-addressed flow cache: `<dir>/<mask hash>.tif`.
#[derive(Debug, Clone)]
pub struct FlowCache {
    dir: PathBuf,
}

impl FlowCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn path_for(&self, mask: &InstanceMask) -> PathBuf {
        self.dir.join(format!("{}.tif", mask_hash(mask)))
    }

    pub fn get_or_encode(&self, mask: &InstanceMask) -> Result<FlowTarget> {
        let path = self.path_for(mask);
        if path.exists() {
            return read_flows_tiff(&path);
        }
        let flows = encode_flows(mask);
        let tmp = path.with_extension("tif.tmp");
        write_flows_tiff(&tmp, &flows)?;
        std::fs::rename(&tmp, &path)?;
        Ok(flows)
    }
}

/// Image files (PNG/TIFF) in a directory, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
        let p = entry?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "tif" | "tiff")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
