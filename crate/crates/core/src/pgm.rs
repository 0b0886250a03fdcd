//! 8-bit grayscale PGM input and output.

use std::path::Path;

use std::fs::File;
use std::io::BufWriter;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};

use crate::error::{Error, Result};
use crate::patch_graph::GrayImage;

fn image_err(path: &Path, reason: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Read a PGM file. Anything other than 8-bit single-channel data is rejected.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let reader = ImageReader::open(path)?;
    let reader = match reader.format() {
        Some(_) => reader,
        None => {
            let mut r = reader;
            r.set_format(ImageFormat::Pnm);
            r
        }
    };
    let decoded = reader.decode().map_err(|e| image_err(path, e))?;
    if decoded.color() != ColorType::L8 {
        return Err(image_err(path, format!("expected 8-bit grayscale, found {:?}", decoded.color())));
    }
    let luma = decoded.into_luma8();
    let (w, h) = luma.dimensions();
    GrayImage::new(h as usize, w as usize, luma.into_raw()).map_err(|e| image_err(path, e))
}

/// Write a binary (P5) PGM file.
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let out = BufWriter::new(File::create(path)?);
    PnmEncoder::new(out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(img.pixels(), img.width() as u32, img.height() as u32, ExtendedColorType::L8)
        .map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_binary_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = GrayImage::new(3, 4, (0..12).map(|v| v * 20).collect()).unwrap();
        write_pgm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(read_pgm(&path).unwrap(), img);
    }

    #[test]
    fn ascii_pgm_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        std::fs::write(&path, "P2\n2 2\n255\n0 1\n2 255\n").unwrap();
        assert_eq!(read_pgm(&path).unwrap().pixels(), &[0, 1, 2, 255]);
    }

    #[test]
    fn malformed_and_colour_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.pgm");
        std::fs::write(&bad, "P5\n4 4\n255\nxy").unwrap();
        assert!(matches!(read_pgm(&bad), Err(Error::Image { .. })));
        let rgb = dir.path().join("c.ppm");
        std::fs::write(&rgb, b"P6\n1 1\n255\n\x01\x02\x03").unwrap();
        assert!(matches!(read_pgm(&rgb), Err(Error::Image { .. })));
    }
}
