//! Image and mask I/O plus DRIVE-style dataset discovery.
//!
//! A split directory holds three subdirectories, `images/`, `mask/` (field of
//! view) and `1st_manual/` (expert segmentation). Files are paired by the
//! integer their name starts with, so `21_training.tif`,
//! `21_training_mask.png` and `21_manual1.png` form record `21`.
//!
//! GIF is not decoded; masks distributed as GIF must be converted to PNG first.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ExtendedColorType, ImageError, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ensure_dims, BinaryMask, GrayImage, RgbImage};

pub const IMAGES_DIR: &str = "images";
pub const MASK_DIR: &str = "mask";
pub const MANUAL_DIR: &str = "1st_manual";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrayMethod {
    Green,
    Luminance,
}

impl Default for GrayMethod {
    fn default() -> Self {
        GrayMethod::Green
    }
}

impl FromStr for GrayMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "green" => Ok(GrayMethod::Green),
            "luminance" => Ok(GrayMethod::Luminance),
            other => Err(Error::Config(format!("unknown grayscale method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Test,
}

impl SplitRole {
    pub fn dir_name(self) -> &'static str {
        match self {
            SplitRole::Train => "training",
            SplitRole::Test => "test",
        }
    }
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitRole::Train => "train",
            SplitRole::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRecord {
    pub id: String,
    pub image: PathBuf,
    pub fov: PathBuf,
    pub truth: PathBuf,
}

/// An image with its field-of-view mask and expert segmentation.
#[derive(Debug, Clone)]
pub struct LoadedRecord {
    pub id: String,
    pub image: RgbImage,
    pub fov: BinaryMask,
    pub truth: BinaryMask,
}

impl DatasetRecord {
    /// Load all three files and check that their dimensions agree.
    pub fn load(&self) -> Result<LoadedRecord> {
        let inner = || -> Result<LoadedRecord> {
            let image = load_image(&self.image)?;
            let fov = load_mask(&self.fov)?;
            let truth = load_mask(&self.truth)?;
            ensure_dims(image.dims(), fov.dims())?;
            ensure_dims(image.dims(), truth.dims())?;
            Ok(LoadedRecord {
                id: self.id.clone(),
                image,
                fov,
                truth,
            })
        };
        inner().map_err(|e| e.in_record(&self.id))
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub role: SplitRole,
    pub records: Vec<DatasetRecord>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn image_error(path: &Path, err: ImageError) -> Error {
    match err {
        ImageError::IoError(source) => Error::io(path, source),
        other => Error::Format {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_error(path, e))
}

/// Load a PNG, PPM/PGM or TIFF image as RGB in `[0, 1]`.
///
/// 8-bit samples are divided by 255 and 16-bit samples by 65535. Gray inputs
/// are replicated into all three planes; alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (planes, depth) = match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => {
            let raw = img.to_rgb8();
            (split_planes(raw.as_raw(), w * h, 255.0), 8)
        }
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            let raw = img.to_rgb16();
            (split_planes(raw.as_raw(), w * h, 65535.0), 16)
        }
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unsupported sample type {:?}", other.color()),
            })
        }
    };
    RgbImage::from_planes(w, h, planes, depth)
}

fn split_planes<T: Copy + Into<f64>>(raw: &[T], n: usize, scale: f64) -> [Vec<f64>; 3] {
    let mut planes = [
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    ];
    for px in raw.chunks_exact(3) {
        for c in 0..3 {
            planes[c].push(px[c].into() / scale);
        }
    }
    planes
}

/// Load a binary mask: a pixel is set iff its rescaled sample exceeds 0.5.
///
/// Colour files are accepted only when every pixel is gray (R = G = B).
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let img = load_image(path)?;
    let (r, g, b) = (img.red(), img.green(), img.blue());
    if r.iter().zip(g).zip(b).any(|((r, g), b)| r != g || g != b) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "mask is not single-channel".into(),
        });
    }
    BinaryMask::from_vec(
        img.width(),
        img.height(),
        g.iter().map(|&v| v > 0.5).collect(),
    )
}

pub fn to_gray(img: &RgbImage, method: GrayMethod) -> GrayImage {
    let data = match method {
        GrayMethod::Green => img.green().to_vec(),
        GrayMethod::Luminance => img
            .red()
            .iter()
            .zip(img.green())
            .zip(img.blue())
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect(),
    };
    GrayImage::from_fn(img.width(), img.height(), |x, y| data[y * img.width() + x])
}

/// Reject a set of images that mixes 8-bit and 16-bit encodings.
pub fn ensure_uniform_depth<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Result<()> {
    let mut depth = None;
    for img in images {
        match depth {
            None => depth = Some(img.bit_depth()),
            Some(d) if d != img.bit_depth() => {
                return Err(Error::Config(format!(
                    "dataset mixes {d}-bit and {}-bit images",
                    img.bit_depth()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

fn save_buffer(
    path: &Path,
    buf: &[u8],
    w: usize,
    h: usize,
    color: ExtendedColorType,
) -> Result<()> {
    image::save_buffer(path, buf, w as u32, h as u32, color).map_err(|e| image_error(path, e))
}

/// Write an 8-bit gray image; the format follows the extension (png, pgm, ppm).
pub fn save_gray(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    save_buffer(
        path.as_ref(),
        &img.to_u8(),
        img.width(),
        img.height(),
        ExtendedColorType::L8,
    )
}

pub fn save_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    save_buffer(
        path.as_ref(),
        &mask.to_u8(),
        mask.width(),
        mask.height(),
        ExtendedColorType::L8,
    )
}

pub fn save_rgb(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    save_buffer(
        path.as_ref(),
        &img.to_rgb8(),
        img.width(),
        img.height(),
        ExtendedColorType::Rgb8,
    )
}

fn leading_id(name: &str) -> Option<(u64, String)> {
    let digits: String = name.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok().map(|n| (n, digits))
}

fn index_dir(dir: &Path) -> Result<BTreeMap<u64, (String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::Layout(format!(
            "missing directory {}",
            dir.display()
        )));
    }
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        let (n, text) = leading_id(&name).ok_or_else(|| {
            Error::Pairing(format!("{} has no leading record number", path.display()))
        })?;
        if let Some((_, prev)) = out.insert(n, (text, path.clone())) {
            return Err(Error::Pairing(format!(
                "record {n} appears twice: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Discover the records of one split.
///
/// `root` is either the split directory itself or a dataset root holding a
/// `training/` or `test/` subdirectory for the requested role.
pub fn discover_split(root: impl AsRef<Path>, role: SplitRole) -> Result<DatasetSplit> {
    let mut root = root.as_ref().to_path_buf();
    if !root.join(IMAGES_DIR).is_dir() && root.join(role.dir_name()).join(IMAGES_DIR).is_dir() {
        root = root.join(role.dir_name());
    }
    let images = index_dir(&root.join(IMAGES_DIR))?;
    let masks = index_dir(&root.join(MASK_DIR))?;
    let manuals = index_dir(&root.join(MANUAL_DIR))?;
    if images.is_empty() {
        return Err(Error::Layout(format!(
            "no images under {}",
            root.join(IMAGES_DIR).display()
        )));
    }
    let mut records = Vec::with_capacity(images.len());
    for (n, (id, image)) in images {
        let fov = masks
            .get(&n)
            .ok_or_else(|| Error::Pairing(format!("record {id} has no FOV mask")))?;
        let truth = manuals
            .get(&n)
            .ok_or_else(|| Error::Pairing(format!("record {id} has no manual segmentation")))?;
        records.push(DatasetRecord {
            id,
            image,
            fov: fov.1.clone(),
            truth: truth.1.clone(),
        });
    }
    Ok(DatasetSplit { role, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) {
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        bytes.extend_from_slice(rgb);
        fs::write(path, bytes).unwrap();
    }

    #[test]
    fn ppm_max_value_scales_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.ppm");
        write_ppm(&p, 1, 1, &[255, 255, 255]);
        let img = load_image(&p).unwrap();
        assert_eq!(img.dims(), (1, 1));
        assert_eq!(img.red(), &[1.0]);
        assert_eq!(img.green(), &[1.0]);
        assert_eq!(img.blue(), &[1.0]);
    }

    #[test]
    fn ppm_red_plane_divided_by_255() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("two.ppm");
        let reds = [0u8, 128, 255, 64];
        let rgb: Vec<u8> = reds.iter().flat_map(|&r| [r, 0, 0]).collect();
        write_ppm(&p, 2, 2, &rgb);
        let img = load_image(&p).unwrap();
        let expect: Vec<f64> = reds.iter().map(|&r| r as f64 / 255.0).collect();
        assert_eq!(img.red(), expect.as_slice());
    }

    #[test]
    fn pgm_sixteen_bit_uses_65535() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.pgm");
        let mut bytes = b"P5\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x80, 0x00]);
        fs::write(&p, bytes).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.bit_depth(), 16);
        assert_eq!(img.green(), &[1.0, 32768.0 / 65535.0]);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_image("/nonexistent/dir/img.png").unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err:?}");
    }

    #[test]
    fn garbage_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.png");
        fs::write(&p, b"definitely not an image").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn gif_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mask.gif");
        // 1x1 GIF89a
        let gif: &[u8] = b"GIF89a\x01\x00\x01\x00\x80\x00\x00\xff\xff\xff\x00\x00\x00!\xf9\x04\x01\x00\x00\x00\x00,\x00\x00\x00\x00\x01\x00\x01\x00\x00\x02\x02D\x01\x00;";
        fs::write(&p, gif).unwrap();
        assert!(matches!(load_mask(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn black_and_white_masks() {
        let dir = tempfile::tempdir().unwrap();
        let black = dir.path().join("b.png");
        let white = dir.path().join("w.png");
        save_mask(&black, &BinaryMask::filled(4, 3, false)).unwrap();
        save_mask(&white, &BinaryMask::filled(4, 3, true)).unwrap();
        assert_eq!(load_mask(&black).unwrap().count(), 0);
        assert_eq!(load_mask(&white).unwrap().count(), 12);
    }

    #[test]
    fn colour_mask_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        write_ppm(&p, 1, 1, &[255, 0, 0]);
        assert!(matches!(load_mask(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn gray_conversions() {
        let n = 6;
        let green =
            RgbImage::from_planes(3, 2, [vec![0.0; n], vec![1.0; n], vec![0.0; n]], 8).unwrap();
        assert!(to_gray(&green, GrayMethod::Green)
            .as_slice()
            .iter()
            .all(|&v| v == 1.0));
        assert!(to_gray(&green, GrayMethod::Luminance)
            .as_slice()
            .iter()
            .all(|&v| v == 0.587));
        let v = 0.25;
        let gray = RgbImage::from_planes(3, 2, [vec![v; n], vec![v; n], vec![v; n]], 8).unwrap();
        assert!(to_gray(&gray, GrayMethod::Green)
            .as_slice()
            .iter()
            .all(|&x| x == v));
        assert!(to_gray(&gray, GrayMethod::Luminance)
            .as_slice()
            .iter()
            .all(|&x| (x - v).abs() < 1e-15));
    }

    #[test]
    fn mixed_depth_rejected() {
        let a = RgbImage::from_planes(1, 1, [vec![0.0], vec![0.0], vec![0.0]], 8).unwrap();
        let b = RgbImage::from_planes(1, 1, [vec![0.0], vec![0.0], vec![0.0]], 16).unwrap();
        assert!(ensure_uniform_depth([&a, &a]).is_ok());
        assert!(ensure_uniform_depth([&a, &b]).is_err());
    }

    #[test]
    fn empty_root_is_layout_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            discover_split(dir.path(), SplitRole::Train),
            Err(Error::Layout(_))
        ));
    }

    #[test]
    fn discovers_and_pairs_by_leading_number() {
        let dir = tempfile::tempdir().unwrap();
        for sub in [IMAGES_DIR, MASK_DIR, MANUAL_DIR] {
            fs::create_dir(dir.path().join(sub)).unwrap();
        }
        let m = BinaryMask::filled(2, 2, true);
        for id in ["03", "01", "02"] {
            save_mask(
                dir.path().join(IMAGES_DIR).join(format!("{id}_test.png")),
                &m,
            )
            .unwrap();
            save_mask(
                dir.path()
                    .join(MASK_DIR)
                    .join(format!("{id}_test_mask.png")),
                &m,
            )
            .unwrap();
            save_mask(
                dir.path()
                    .join(MANUAL_DIR)
                    .join(format!("{id}_manual1.png")),
                &m,
            )
            .unwrap();
        }
        let split = discover_split(dir.path(), SplitRole::Test).unwrap();
        let ids: Vec<_> = split.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["01", "02", "03"]);
        let rec = split.records[1].load().unwrap();
        assert_eq!(rec.image.dims(), rec.truth.dims());

        fs::remove_file(dir.path().join(MANUAL_DIR).join("02_manual1.png")).unwrap();
        assert!(matches!(
            discover_split(dir.path(), SplitRole::Test),
            Err(Error::Pairing(_))
        ));
    }

    #[test]
    fn record_load_checks_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let rec = DatasetRecord {
            id: "7".into(),
            image: dir.path().join("i.png"),
            fov: dir.path().join("f.png"),
            truth: dir.path().join("t.png"),
        };
        save_mask(&rec.image, &BinaryMask::filled(3, 3, true)).unwrap();
        save_mask(&rec.fov, &BinaryMask::filled(3, 3, true)).unwrap();
        save_mask(&rec.truth, &BinaryMask::filled(3, 4, true)).unwrap();
        let err = rec.load().unwrap_err();
        assert!(matches!(
            err,
            Error::Record { ref source, .. } if matches!(**source, Error::DimensionMismatch { .. })
        ));
    }
}
