//! Image raster type, lossless PNG I/O and the center-crop preprocessing step.
//!
//! Intensities live in `[0, 1]` everywhere inside the crate. The 0..=255 byte
//! scale only exists at the PNG boundary.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Smallest side accepted by the preprocessing and generator stages.
pub const MIN_PIPELINE_SIDE: usize = 8;

/// H×W×C raster, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidParameter(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds an image from arbitrary reals, clamping each into `[0, 1]`.
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f64>,
    ) -> Result<Self> {
        for v in &mut data {
            if !v.is_finite() {
                return Err(Error::NonFinite("pixel".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(height, width, channels, data)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.shape() == other.shape()
    }

    /// Extracts one channel as a row-major H×W plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// Mean absolute per-element difference.
    pub fn mean_abs_diff(&self, other: &ImageTensor) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }
}

/// Maps a unit-scale value to a byte with round-half-up.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_png_reader(BufReader::new(file))
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    decode_png_reader(Cursor::new(bytes))
}

fn decode_png_reader<R: std::io::BufRead + std::io::Seek>(reader: R) -> Result<ImageTensor> {
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::PngDecode(e.to_string()))?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedPng(format!("bit depth {depth:?}")));
    }
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::UnsupportedPng(format!("color type {other:?}"))),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::PngDecode("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::PngDecode(e.to_string()))?;
    let (width, height) = (frame.width as usize, frame.height as usize);
    let row = width * channels;
    let mut data = Vec::with_capacity(height * row);
    for y in 0..height {
        let start = y * frame.line_size;
        data.extend(buf[start..start + row].iter().map(|&b| b as f64 / 255.0));
    }
    ImageTensor::new(height, width, channels, data)
}

pub fn encode_png(img: &ImageTensor) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_png(img, &mut out)?;
    Ok(out)
}

fn write_png<W: Write>(img: &ImageTensor, w: W) -> Result<()> {
    let mut encoder = png::Encoder::new(w, img.width as u32, img.height as u32);
    encoder.set_color(if img.channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::PngEncode(e.to_string()))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::PngEncode(e.to_string()))?;
    writer.finish().map_err(|e| Error::PngEncode(e.to_string()))
}

pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_png(img, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Largest centered square. Odd leftovers go to the bottom/right, so the
/// window leans top-left.
pub fn center_crop(img: &ImageTensor) -> ImageTensor {
    let side = img.height.min(img.width);
    let y0 = (img.height - side) / 2;
    let x0 = (img.width - side) / 2;
    let mut data = Vec::with_capacity(side * side * img.channels);
    for y in y0..y0 + side {
        let start = img.index(y, x0, 0);
        data.extend_from_slice(&img.data[start..start + side * img.channels]);
    }
    ImageTensor {
        height: side,
        width: side,
        channels: img.channels,
        data,
    }
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> ImageTensor {
    if out_h == img.height && out_w == img.width {
        return img.clone();
    }
    let c = img.channels;
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    let sample = |coord: f64, n: usize| -> (usize, usize, f64) {
        let p = coord.clamp(0.0, (n - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, p - lo as f64)
    };
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = sample((oy as f64 + 0.5) * sy - 0.5, img.height);
        for ox in 0..out_w {
            let (x0, x1, fx) = sample((ox as f64 + 0.5) * sx - 0.5, img.width);
            for ch in 0..c {
                let top = img.get(y0, x0, ch) * (1.0 - fx) + img.get(y0, x1, ch) * fx;
                let bot = img.get(y1, x0, ch) * (1.0 - fx) + img.get(y1, x1, ch) * fx;
                data.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor {
        height: out_h,
        width: out_w,
        channels: c,
        data,
    }
}

/// Stand-in for face alignment: crop the centered square, then resize.
pub fn center_crop_resize(img: &ImageTensor, size: usize) -> Result<ImageTensor> {
    if size < MIN_PIPELINE_SIDE {
        return Err(Error::InvalidParameter(format!(
            "target size {size} is below {MIN_PIPELINE_SIDE}"
        )));
    }
    let side = img.height.min(img.width);
    if size > side {
        return Err(Error::InvalidParameter(format!(
            "target size {size} exceeds the centered square side {side}"
        )));
    }
    let square = center_crop(img);
    Ok(resize_bilinear(&square, size, size))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_raw_png(
        path: &Path,
        w: u32,
        h: u32,
        color: png::ColorType,
        depth: png::BitDepth,
        bytes: &[u8],
    ) {
        let file = File::create(path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut wr = enc.write_header().unwrap();
        wr.write_image_data(bytes).unwrap();
    }

    #[test]
    fn load_maps_bytes_to_unit_scale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        write_raw_png(&p, 2, 2, png::ColorType::Rgb, png::BitDepth::Eight, &[255; 12]);
        let img = load_image(&p).unwrap();
        assert_eq!(img.shape(), (2, 2, 3));
        assert!(img.data().iter().all(|&v| v == 1.0));

        write_raw_png(&p, 2, 2, png::ColorType::Grayscale, png::BitDepth::Eight, &[0; 4]);
        let img = load_image(&p).unwrap();
        assert_eq!(img.shape(), (2, 2, 1));
        assert!(img.data().iter().all(|&v| v == 0.0));

        write_raw_png(&p, 2, 2, png::ColorType::Grayscale, png::BitDepth::Eight, &[128; 4]);
        let img = load_image(&p).unwrap();
        assert_eq!(img.get(0, 0, 0), 128.0 / 255.0);
        assert!((img.get(1, 1, 0) - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn load_rejects_alpha_and_sixteen_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgba.png");
        write_raw_png(&p, 2, 2, png::ColorType::Rgba, png::BitDepth::Eight, &[9; 16]);
        assert!(matches!(load_image(&p), Err(Error::UnsupportedPng(_))));

        let p = dir.path().join("g16.png");
        write_raw_png(&p, 2, 2, png::ColorType::Grayscale, png::BitDepth::Sixteen, &[9; 8]);
        assert!(matches!(load_image(&p), Err(Error::UnsupportedPng(_))));

        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn save_rounds_half_up() {
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        let img = ImageTensor::filled(3, 2, 3, 1.0).unwrap();
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn save_to_unwritable_path_fails() {
        let img = ImageTensor::filled(8, 8, 1, 0.3).unwrap();
        let err = save_image(&img, "/nonexistent-dir/x/y.png").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn crop_resize_identity_at_target_size() {
        let data: Vec<f64> = (0..16 * 16 * 3).map(|i| (i % 17) as f64 / 16.0).collect();
        let img = ImageTensor::new(16, 16, 3, data).unwrap();
        assert_eq!(center_crop_resize(&img, 16).unwrap(), img);
    }

    #[test]
    fn crop_keeps_central_columns() {
        // 8×16: the central 8 columns are 4..12.
        let data: Vec<f64> = (0..8 * 16).map(|i| (i % 16) as f64 / 15.0).collect();
        let img = ImageTensor::new(8, 16, 1, data).unwrap();
        let out = center_crop_resize(&img, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.get(y, x, 0), img.get(y, x + 4, 0));
            }
        }
        // odd leftover leans top-left
        let img = ImageTensor::new(9, 8, 1, (0..72).map(|i| (i / 8) as f64 / 8.0).collect())
            .unwrap();
        let out = center_crop(&img);
        assert_eq!(out.get(0, 0, 0), 0.0);
    }

    #[test]
    fn downscale_checkerboard_averages() {
        let n = 16;
        let data: Vec<f64> = (0..n * n)
            .map(|i| ((i / n + i % n) % 2) as f64)
            .collect();
        let img = ImageTensor::new(n, n, 1, data).unwrap();
        let out = center_crop_resize(&img, 8).unwrap();
        for y in 1..7 {
            for x in 1..7 {
                assert!((out.get(y, x, 0) - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn crop_resize_rejects_small_or_oversized_targets() {
        let img = ImageTensor::filled(16, 16, 1, 0.2).unwrap();
        assert!(center_crop_resize(&img, 7).is_err());
        assert!(center_crop_resize(&img, 17).is_err());
    }

    proptest! {
        #[test]
        fn png_round_trip_within_half_step(
            h in 1usize..12, w in 1usize..12, rgb in any::<bool>(), seed in any::<u64>()
        ) {
            let c = if rgb { 3 } else { 1 };
            let mut s = seed;
            let data: Vec<f64> = (0..h * w * c).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            }).collect();
            let img = ImageTensor::new(h, w, c, data).unwrap();
            let back = decode_png(&encode_png(&img).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), img.shape());
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
            }
        }

        #[test]
        fn crop_resize_square_and_bounded(h in 8usize..40, w in 8usize..40, size in 8usize..40) {
            let img = ImageTensor::new(h, w, 1, (0..h * w).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()).unwrap();
            match center_crop_resize(&img, size) {
                Ok(out) => {
                    prop_assert_eq!(out.shape(), (size, size, 1));
                    prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
                }
                Err(_) => prop_assert!(size > h.min(w)),
            }
        }
    }
}
