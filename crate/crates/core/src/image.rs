//! `ImageArray`: CHW images with pixels in `[-1, 1]`, plus PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::autograd::Graph;
use crate::error::{validation, Error, Result};
use crate::tensor::{Elem, Tensor};

/// A `channels × height × width` image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageArray {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageArray {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// `[channels, height, width]`.
    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Rejects non-finite or out-of-range pixels.
    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(validation(format!("non-finite pixel value {v}")));
        }
        if let Some(v) = self.data.iter().find(|v| v.abs() > 1.0 + 1e-6) {
            return Err(validation(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(())
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
        self
    }

    /// Bilinear resize (half-pixel centers); identity when the size already matches.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![1, self.channels, self.height, self.width], self.data.clone()));
        let y = g.resize_bilinear(x, height, width);
        Self {
            channels: self.channels,
            height,
            width,
            data: g.value(y).data().to_vec(),
        }
    }

    pub fn from_tensor<T: Elem>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::Dimension(format!("expected CHW tensor, got {s:?}")));
        }
        Self::new(s[0], s[1], s[2], t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    /// Stacks images into an `[N, C, H, W]` tensor.
    pub fn batch<T: Elem>(images: &[&ImageArray]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| validation("cannot batch zero images"))?;
        let dims = first.dims();
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.dims() != dims {
                return Err(Error::Dimension(format!(
                    "image {:?} in a batch of {:?}",
                    img.dims(),
                    dims
                )));
            }
            data.extend(img.data.iter().map(|&v| T::cast_from(v as f64)));
        }
        Ok(Tensor::new(vec![images.len(), dims[0], dims[1], dims[2]], data))
    }

    /// Splits an `[N, C, H, W]` tensor into images.
    pub fn unbatch<T: Elem>(t: &Tensor<T>) -> Result<Vec<ImageArray>> {
        if t.shape().len() != 4 {
            return Err(Error::Dimension(format!("expected NCHW tensor, got {:?}", t.shape())));
        }
        (0..t.shape()[0]).map(|i| Self::from_tensor(&t.row(i))).collect()
    }

    /// Pixel `v` maps to `round((v + 1) · 127.5)`, clamped to `[0, 255]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = self.at(ch, y, x).clamp(-1.0, 1.0);
                    out.push(((v + 1.0) * 127.5).round() as u8);
                }
            }
        }
        out
    }

    /// Inverse of [`ImageArray::to_bytes`] for interleaved HWC bytes.
    pub fn from_bytes(channels: usize, height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != channels * height * width {
            return Err(Error::Dimension("byte count does not match image size".into()));
        }
        let mut img = Self::zeros(channels, height, width);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..channels {
                    let b = bytes[(y * width + x) * channels + ch];
                    img.set(ch, y, x, b as f32 / 127.5 - 1.0);
                }
            }
        }
        Ok(img)
    }

    /// Writes an 8-bit PNG (grayscale for one channel, RGB for three).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(Error::Dimension(format!("cannot write a {c}-channel PNG"))),
        };
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width as u32, self.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&self.to_bytes()).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
        Ok(())
    }

    /// Reads an 8-bit PNG as an RGB image (grayscale is replicated, alpha dropped).
    pub fn load_png(path: &Path) -> Result<Self> {
        let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(png_err)?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Format("PNG too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(png_err)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let src_ch = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => return Err(Error::Format("unexpanded indexed PNG".into())),
        };
        let mut rgb = Vec::with_capacity(w * h * 3);
        for px in buf[..w * h * src_ch].chunks(src_ch) {
            match src_ch {
                1 | 2 => rgb.extend_from_slice(&[px[0]; 3]),
                _ => rgb.extend_from_slice(&px[..3]),
            }
        }
        Self::from_bytes(3, h, w, &rgb)
    }
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("png: {e}"))
}
