//! File I/O: the VMTF field format, plus PNG/PGM image and mask codecs.
//!
//! VMTF layout (all integers little-endian):
//!
//! ```text
//! offset  size  contents
//!      0     4  magic "VMTF"
//!      4     2  format version, u16 = 1
//!      6     2  channel count, u16
//!      8     4  height, u32
//!     12     4  width, u32
//!     16     -  payload: channels * height * width IEEE-754 binary32 LE,
//!               channel-major, then row-major within a channel
//! ```
//!
//! The payload is binary32, so the first write of f64 data rounds once;
//! after that, write→read→write is byte-identical and load→save→load is
//! value-exact.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{snap_unit, Image, Mask, MultiChannelField};

const MAGIC: &[u8; 4] = b"VMTF";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

/// Which plane of a color input becomes the scalar image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelSelect {
    Gray,
    Red,
    Green,
    Blue,
}

impl ChannelSelect {
    fn rgb_index(self) -> Option<usize> {
        match self {
            ChannelSelect::Gray => None,
            ChannelSelect::Red => Some(0),
            ChannelSelect::Green => Some(1),
            ChannelSelect::Blue => Some(2),
        }
    }
}

impl std::str::FromStr for ChannelSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" => Ok(ChannelSelect::Gray),
            "red" => Ok(ChannelSelect::Red),
            "green" => Ok(ChannelSelect::Green),
            "blue" => Ok(ChannelSelect::Blue),
            other => Err(Error::InvalidParam(format!(
                "unknown channel '{other}' (expected gray|red|green|blue)"
            ))),
        }
    }
}

pub fn field_to_bytes(field: &MultiChannelField) -> Result<Vec<u8>> {
    if field.channels() > u16::MAX as usize {
        return Err(Error::Format(format!(
            "{} channels exceed the u16 header field",
            field.channels()
        )));
    }
    if field.height() > u32::MAX as usize || field.width() > u32::MAX as usize {
        return Err(Error::Format(
            "image dimensions exceed u32 header fields".into(),
        ));
    }
    let mut bytes = Vec::with_capacity(HEADER_LEN + field.data().len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(field.channels() as u16).to_le_bytes());
    bytes.extend_from_slice(&(field.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&(field.width() as u32).to_le_bytes());
    for &v in field.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(bytes)
}

pub fn field_from_bytes(bytes: &[u8]) -> Result<MultiChannelField> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic bytes: expected \"VMTF\"".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}"
        )));
    }
    let channels = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let count = channels
        .checked_mul(height)
        .and_then(|n| n.checked_mul(width))
        .and_then(|n| n.checked_mul(4).map(|_| n))
        .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * 4 {
        return Err(Error::Format(format!(
            "payload holds {} values but the header implies {count}",
            payload.len() / 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    MultiChannelField::from_vec(channels, height, width, data)
}

pub fn write_field(field: &MultiChannelField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, field_to_bytes(field)?).map_err(|e| Error::io(path, e))
}

pub fn read_field(path: impl AsRef<Path>) -> Result<MultiChannelField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    field_from_bytes(&bytes)
}

/// Load a scalar intensity image from PNG, PGM, or 1-channel VMTF.
///
/// Integer inputs are divided by their type maximum (255 or 65535); VMTF
/// inputs must already lie in [0, 1]. All values are snapped to the 2^-53
/// lattice so `negate` flips are exactly invertible, then negated if asked.
pub fn load_image(path: impl AsRef<Path>, select: ChannelSelect, negate: bool) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;

    let img = if bytes.starts_with(MAGIC) {
        let field = field_from_bytes(&bytes)?;
        if field.channels() != 1 {
            return Err(Error::Format(format!(
                "{}: image files must have 1 channel, found {}",
                path.display(),
                field.channels()
            )));
        }
        let data = field.channel(0);
        if data
            .iter()
            .any(|v| !v.is_finite() || !(0.0..=1.0).contains(v))
        {
            return Err(Error::Format(format!(
                "{}: image intensities must lie in [0, 1]",
                path.display()
            )));
        }
        Image::from_vec(
            field.height(),
            field.width(),
            data.iter().map(|&v| snap_unit(v)).collect(),
        )?
    } else {
        decode_raster(path, &bytes, select)?
    };

    if img.is_empty() {
        return Err(Error::Format(format!(
            "{}: zero-sized image",
            path.display()
        )));
    }
    Ok(if negate { img.negate() } else { img })
}

fn decode_raster(path: &Path, bytes: &[u8], select: ChannelSelect) -> Result<Image> {
    use image::DynamicImage as D;

    let dynimg = image::load_from_memory(bytes).map_err(|e| Error::codec(path, e))?;
    let (h, w) = (dynimg.height() as usize, dynimg.width() as usize);

    let needs_rgb = |idx: Option<usize>| -> Result<usize> {
        idx.ok_or_else(|| {
            Error::InvalidParam(format!(
                "{}: input is color; select one of red|green|blue",
                path.display()
            ))
        })
    };
    let needs_gray = |idx: Option<usize>| -> Result<()> {
        if idx.is_some() {
            Err(Error::InvalidParam(format!(
                "{}: input is grayscale; channel select must be gray",
                path.display()
            )))
        } else {
            Ok(())
        }
    };
    let idx = select.rgb_index();

    let data: Vec<f64> = match &dynimg {
        D::ImageLuma8(img) => {
            needs_gray(idx)?;
            img.pixels()
                .map(|p| snap_unit(p.0[0] as f64 / 255.0))
                .collect()
        }
        D::ImageLuma16(img) => {
            needs_gray(idx)?;
            img.pixels()
                .map(|p| snap_unit(p.0[0] as f64 / 65535.0))
                .collect()
        }
        D::ImageRgb8(img) => {
            let c = needs_rgb(idx)?;
            img.pixels()
                .map(|p| snap_unit(p.0[c] as f64 / 255.0))
                .collect()
        }
        D::ImageRgb16(img) => {
            let c = needs_rgb(idx)?;
            img.pixels()
                .map(|p| snap_unit(p.0[c] as f64 / 65535.0))
                .collect()
        }
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported color mode {:?} (expected 8/16-bit grayscale or RGB)",
                path.display(),
                other.color()
            )))
        }
    };
    Image::from_vec(h, w, data)
}

/// Save an image as 8-bit PNG/PGM (values clamped to [0,1], then quantized)
/// or as 1-channel VMTF (binary32, no quantization beyond f32 rounding).
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match extension(path) {
        Some("vmtf") => {
            let field = MultiChannelField::from_channels(&[img])?;
            write_field(&field, path)
        }
        Some("png") | Some("pgm") => {
            let buf: Vec<u8> = img.data().iter().map(|&v| quantize8(v)).collect();
            image::save_buffer(
                path,
                &buf,
                img.width() as u32,
                img.height() as u32,
                image::ExtendedColorType::L8,
            )
            .map_err(|e| Error::codec(path, e))
        }
        _ => Err(Error::InvalidParam(format!(
            "{}: unsupported image extension (use .png, .pgm, or .vmtf)",
            path.display()
        ))),
    }
}

/// Save a mask as an 8-bit PNG/PGM with values {0, 255}.
pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    image::save_buffer(
        path,
        &buf,
        mask.width() as u32,
        mask.height() as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| Error::codec(path, e))
}

/// Load a binary mask from an 8/16-bit grayscale file; any pixel above half
/// of the type maximum counts as foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let img = load_image(path, ChannelSelect::Gray, false)?;
    let data = img.data().iter().map(|&v| (v > 0.5) as u8).collect();
    Mask::from_vec(img.height(), img.width(), data)
}

#[inline]
pub(crate) fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn extension(path: &Path) -> Option<&str> {
    path.extension().and_then(|e| e.to_str())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;
    use proptest::prelude::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        // Leak the handle so the directory outlives the test body.
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    #[test]
    fn field_roundtrip_in_memory() {
        let mut rng = Pcg32::new(1);
        let data: Vec<f64> = (0..3 * 4 * 5)
            .map(|_| rng.next_f64() as f32 as f64)
            .collect();
        let field = MultiChannelField::from_vec(3, 4, 5, data).unwrap();
        let bytes = field_to_bytes(&field).unwrap();
        let back = field_from_bytes(&bytes).unwrap();
        assert_eq!(back, field);
        // Second trip is byte-identical.
        assert_eq!(field_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn field_roundtrip_on_disk() {
        let path = tmp("f.vmtf");
        let field = MultiChannelField::from_vec(2, 2, 2, vec![0.5; 8]).unwrap();
        write_field(&field, &path).unwrap();
        assert_eq!(read_field(&path).unwrap(), field);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let field = MultiChannelField::zeros(1, 2, 2);
        let mut bytes = field_to_bytes(&field).unwrap();
        bytes[0] = b'X';
        let err = field_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        // Header says 4 channels, payload holds 3 channels' worth.
        let field = MultiChannelField::zeros(3, 10, 10);
        let mut bytes = field_to_bytes(&field).unwrap();
        bytes[6] = 4;
        let err = field_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("header implies"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let field = MultiChannelField::zeros(1, 1, 1);
        let mut bytes = field_to_bytes(&field).unwrap();
        bytes[4] = 2;
        assert!(field_from_bytes(&bytes).is_err());
    }

    #[test]
    fn png_roundtrip_is_exact_at_8_bits() {
        let path = tmp("img.png");
        let img = Image::from_fn(5, 7, |i, j| snap_unit((i * 7 + j) as f64 / 255.0));
        save_image(&img, &path).unwrap();
        let loaded = load_image(&path, ChannelSelect::Gray, false).unwrap();
        // load -> save -> load is value-exact at the stored bit depth
        save_image(&loaded, &path).unwrap();
        let again = load_image(&path, ChannelSelect::Gray, false).unwrap();
        assert_eq!(again.data(), loaded.data());
    }

    #[test]
    fn max_pixel_maps_to_one_and_negates_to_zero() {
        let path = tmp("max.png");
        image::save_buffer(&path, &[255u8, 0u8], 2, 1, image::ExtendedColorType::L8).unwrap();
        let plain = load_image(&path, ChannelSelect::Gray, false).unwrap();
        assert_eq!(plain.data(), &[1.0, 0.0]);
        let neg = load_image(&path, ChannelSelect::Gray, true).unwrap();
        assert_eq!(neg.data(), &[0.0, 1.0]);
    }

    #[test]
    fn rgb_green_channel_is_normalized() {
        let path = tmp("rgb.png");
        image::save_buffer(
            &path,
            &[10u8, 128, 200],
            1,
            1,
            image::ExtendedColorType::Rgb8,
        )
        .unwrap();
        let img = load_image(&path, ChannelSelect::Green, false).unwrap();
        assert_eq!(img.data()[0], 128.0 / 255.0);
        // gray select on a color input is a usage error
        assert!(load_image(&path, ChannelSelect::Gray, false).is_err());
    }

    #[test]
    fn double_negation_of_loaded_images_is_exact() {
        let path = tmp("gray.png");
        let pixels: Vec<u8> = (0..=255).collect();
        image::save_buffer(&path, &pixels, 16, 16, image::ExtendedColorType::L8).unwrap();
        let img = load_image(&path, ChannelSelect::Gray, false).unwrap();
        assert_eq!(img.negate().negate().data(), img.data());
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let err = load_image("/no/such/file.png", ChannelSelect::Gray, false).unwrap_err();
        assert!(err.to_string().contains("no/such/file.png"));
    }

    #[test]
    fn mask_roundtrip() {
        let path = tmp("m.png");
        let mask = Mask::from_vec(2, 3, vec![0, 1, 1, 0, 0, 1]).unwrap();
        save_mask(&mask, &path).unwrap();
        assert_eq!(load_mask(&path).unwrap(), mask);
    }

    proptest! {
        #[test]
        fn vmtf_payload_roundtrips_bitwise(values in proptest::collection::vec(-1e6f32..1e6, 1..128)) {
            let w = values.len();
            let data: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            let field = MultiChannelField::from_vec(1, 1, w, data).unwrap();
            let bytes = field_to_bytes(&field).unwrap();
            let back = field_from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &field);
            prop_assert_eq!(field_to_bytes(&back).unwrap(), bytes);
        }
    }
}
