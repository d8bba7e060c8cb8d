//! Single-channel images, boxes and the binary graymap (P5) codec.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel intensity grid stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Copies the `w`×`h` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::Shape(format!(
                "crop {w}x{h}+{x}+{y} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(w * h);
        for row in y..y + h {
            let start = row * self.width + x;
            out.extend_from_slice(&self.data[start..start + w]);
        }
        Image::from_vec(w, h, out)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            out.data[y * self.width..(y + 1) * self.width].reverse();
        }
        out
    }

    pub fn flip_vertical(&self) -> Image {
        let mut out = Vec::with_capacity(self.data.len());
        for y in (0..self.height).rev() {
            out.extend_from_slice(&self.data[y * self.width..(y + 1) * self.width]);
        }
        Image {
            width: self.width,
            height: self.height,
            data: out,
        }
    }

    /// Quantizes to 8 bits, rounding to nearest after clamping to `[0,1]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Image> {
        Image::from_vec(
            width,
            height,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    /// Encodes as a binary portable graymap with maximum value 255.
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_u8());
        out
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> std::result::Result<Image, String> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if fields[0] != "P5" {
            return Err(format!("unsupported magic {:?}", fields[0]));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header {s:?}: {e}"));
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        let raster = bytes.get(pos..pos + w * h).ok_or("truncated raster")?;
        Image::from_u8(w, h, raster).map_err(|e| e.to_string())
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_pgm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::from_pgm_bytes(&bytes).map_err(|m| Error::format(path, m))
    }
}

/// Axis-aligned box in pixel units, `(x, y)` being the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: Option<f64>,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox {
            x,
            y,
            w,
            h,
            score: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px <= self.x + self.w && py >= self.y && py <= self.y + self.h
    }

    /// Clips the box to `[0,width]×[0,height]`, collapsing to zero size when outside.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = (self.x + self.w).clamp(0.0, width);
        let y1 = (self.y + self.h).clamp(0.0, height);
        BBox {
            x: x0,
            y: y0,
            w: (x1 - x0).max(0.0),
            h: (y1 - y0).max(0.0),
            score: self.score,
        }
    }

    /// Text form used by manifests and review files: `x,y,w,h` or `x,y,w,h,score`.
    pub fn to_tuple(&self) -> String {
        match self.score {
            Some(s) => format!("{},{},{},{},{}", self.x, self.y, self.w, self.h, s),
            None => format!("{},{},{},{}", self.x, self.y, self.w, self.h),
        }
    }

    pub fn parse_tuple(text: &str) -> std::result::Result<BBox, String> {
        let parts: Vec<&str> = text.split(',').collect();
        if parts.len() != 4 && parts.len() != 5 {
            return Err(format!("expected 4 or 5 comma-separated values in {text:?}"));
        }
        let mut vals = [0.0; 5];
        for (slot, p) in vals.iter_mut().zip(&parts) {
            *slot = p
                .trim()
                .parse::<f64>()
                .map_err(|e| format!("bad number {p:?}: {e}"))?;
        }
        let b = BBox::new(vals[0], vals[1], vals[2], vals[3]);
        Ok(if parts.len() == 5 { b.with_score(vals[4]) } else { b })
    }
}

/// A stack of equally sized images stored contiguously, `n × height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Batch {
    pub fn zeros(n: usize, height: usize, width: usize) -> Self {
        Batch {
            n,
            height,
            width,
            data: vec![0.0; n * height * width],
        }
    }

    pub fn from_images(images: &[Image]) -> Result<Batch> {
        let first = images
            .first()
            .ok_or_else(|| Error::Size("empty image batch".into()))?;
        let (w, h) = (first.width(), first.height());
        let mut data = Vec::with_capacity(images.len() * w * h);
        for img in images {
            if img.width() != w || img.height() != h {
                return Err(Error::Shape("images in a batch must share a size".into()));
            }
            data.extend_from_slice(img.data());
        }
        Ok(Batch {
            n: images.len(),
            height: h,
            width: w,
            data,
        })
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width
    }

    pub fn to_images(&self) -> Vec<Image> {
        self.data
            .chunks(self.image_len().max(1))
            .take(self.n)
            .map(|c| Image::from_vec(self.width, self.height, c.to_vec()).expect("chunk size"))
            .collect()
    }
}
