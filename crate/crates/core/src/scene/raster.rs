use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;

use super::BBox;

const INLINE_PREFIX: &str = "rgb8:";

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("malformed inline image: {0}")]
    Inline(String),
    #[error("image {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("png decode {path}: {message}")]
    Png { path: PathBuf, message: String },
    #[error("pixel buffer has {got} bytes, expected {expected}")]
    BufferSize { got: usize, expected: usize },
}

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage { width, height, data: vec![0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        RgbImage { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self, RasterError> {
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(RasterError::BufferSize { got: data.len(), expected });
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixel rectangle `[px0, px1) x [py0, py1)` covering a normalized box,
    /// snapped outward to whole pixels and at least one pixel wide.
    pub fn pixel_rect(&self, b: &BBox) -> (usize, usize, usize, usize) {
        let snap = |lo: f64, hi: f64, n: usize| {
            let nf = n as f64;
            let mut a = ((lo * nf) + 1e-9).floor().clamp(0.0, nf - 1.0) as usize;
            let mut z = ((hi * nf) - 1e-9).ceil().clamp(0.0, nf) as usize;
            if z <= a {
                z = (a + 1).min(n);
                a = z - 1;
            }
            (a, z)
        };
        let (px0, px1) = snap(b.x0, b.x1, self.width);
        let (py0, py1) = snap(b.y0, b.y1, self.height);
        (px0, py0, px1, py1)
    }

    /// Crop to the pixel-snapped region of `b`; returns the image and the
    /// normalized frame actually cropped.
    pub fn crop(&self, b: &BBox) -> (RgbImage, BBox) {
        let (px0, py0, px1, py1) = self.pixel_rect(b);
        let (w, h) = (px1 - px0, py1 - py0);
        let mut out = RgbImage::new(w, h);
        for y in 0..h {
            let src = ((py0 + y) * self.width + px0) * 3;
            let dst = y * w * 3;
            out.data[dst..dst + w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        let frame = BBox::new(
            px0 as f64 / self.width as f64,
            py0 as f64 / self.height as f64,
            px1 as f64 / self.width as f64,
            py1 as f64 / self.height as f64,
        );
        (out, frame)
    }

    /// Nearest-neighbour resize.
    pub fn resize_nearest(&self, width: usize, height: usize) -> RgbImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = RgbImage::new(width, height);
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                let sx = (x * self.width) / width;
                out.put(x, y, self.get(sx, sy));
            }
        }
        out
    }

    pub fn mirror_horizontal(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.put(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    pub fn to_inline(&self) -> String {
        format!("{INLINE_PREFIX}{}x{}:{}", self.width, self.height, B64.encode(&self.data))
    }

    pub fn from_inline(s: &str) -> Result<Self, RasterError> {
        let bad = |m: &str| RasterError::Inline(m.to_string());
        let rest = s.strip_prefix(INLINE_PREFIX).ok_or_else(|| bad("missing rgb8: prefix"))?;
        let (dims, payload) = rest.split_once(':').ok_or_else(|| bad("missing payload"))?;
        let (w, h) = dims.split_once('x').ok_or_else(|| bad("dimensions must be WxH"))?;
        let w: usize = w.parse().map_err(|_| bad("bad width"))?;
        let h: usize = h.parse().map_err(|_| bad("bad height"))?;
        let data = B64.decode(payload).map_err(|e| RasterError::Inline(e.to_string()))?;
        RgbImage::from_raw(w, h, data)
    }

    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        let file = File::open(path).map_err(|source| RasterError::Io { path: path.into(), source })?;
        let png_err = |e: png::DecodingError| RasterError::Png { path: path.into(), message: e.to_string() };
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(png_err)?;
        let size = reader.output_buffer_size().ok_or_else(|| RasterError::Png {
            path: path.into(),
            message: "image too large".into(),
        })?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(png_err)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let mut data = Vec::with_capacity(w * h * 3);
        for px in buf[..info.buffer_size()].chunks_exact(channels) {
            match channels {
                1 | 2 => data.extend_from_slice(&[px[0], px[0], px[0]]),
                _ => data.extend_from_slice(&px[..3]),
            }
        }
        RgbImage::from_raw(w, h, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        let io_err = |source| RasterError::Io { path: path.into(), source };
        let file = File::create(path).map_err(io_err)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let enc_err = |e: png::EncodingError| RasterError::Png { path: path.into(), message: e.to_string() };
        let mut w = enc.write_header().map_err(enc_err)?;
        w.write_image_data(&self.data).map_err(enc_err)?;
        Ok(())
    }
}

/// Where an image's pixels live.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageRef {
    Inline(RgbImage),
    File(PathBuf),
}

impl ImageRef {
    pub fn parse(s: &str) -> Result<Self, RasterError> {
        if s.starts_with(INLINE_PREFIX) {
            Ok(ImageRef::Inline(RgbImage::from_inline(s)?))
        } else {
            Ok(ImageRef::File(PathBuf::from(s)))
        }
    }

    pub fn to_field(&self) -> String {
        match self {
            ImageRef::Inline(img) => img.to_inline(),
            ImageRef::File(p) => p.display().to_string(),
        }
    }

    pub fn load(&self) -> Result<RgbImage, RasterError> {
        match self {
            ImageRef::Inline(img) => Ok(img.clone()),
            ImageRef::File(p) => RgbImage::load_png(p),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> RgbImage {
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.put(x, y, [x as u8, y as u8, (x * y) as u8]);
            }
        }
        img
    }

    #[test]
    fn inline_round_trip() {
        let img = gradient(5, 3);
        let s = img.to_inline();
        assert!(s.starts_with("rgb8:5x3:"));
        assert_eq!(RgbImage::from_inline(&s).unwrap(), img);
        assert!(RgbImage::from_inline("rgb8:2x2:AAAA").is_err());
    }

    #[test]
    fn crop_snaps_to_pixels() {
        let img = gradient(8, 8);
        let (c, frame) = img.crop(&BBox::new(0.25, 0.5, 0.75, 1.0));
        assert_eq!((c.width(), c.height()), (4, 4));
        assert_eq!(c.get(0, 0), img.get(2, 4));
        assert_eq!(frame, BBox::new(0.25, 0.5, 0.75, 1.0));
        let (full, f) = img.crop(&BBox::FULL);
        assert_eq!(full, img);
        assert_eq!(f, BBox::FULL);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = gradient(7, 4);
        img.save_png(&path).unwrap();
        assert_eq!(RgbImage::load_png(&path).unwrap(), img);
        let r = ImageRef::parse(path.to_str().unwrap()).unwrap();
        assert_eq!(r.load().unwrap(), img);
    }

    #[test]
    fn resize_and_mirror() {
        let img = gradient(4, 4);
        let big = img.resize_nearest(8, 8);
        assert_eq!(big.get(7, 7), img.get(3, 3));
        assert_eq!(img.mirror_horizontal().get(0, 1), img.get(3, 1));
    }
}
