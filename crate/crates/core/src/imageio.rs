//! Float images plus PNG (8-bit, for viewing) and PFM (32-bit float) files.

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::diffcore::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error("malformed pfm: {0}")]
    Pfm(String),
    #[error("buffer of {got} values does not fit {width}x{height}x{channels}")]
    Size { width: usize, height: usize, channels: usize, got: usize },
}

/// Row-major interleaved image with values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != width * height * channels {
            return Err(ImageError::Size {
                width,
                height,
                channels,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// `[H, W, C]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, self.channels], self.data.clone()).expect("consistent image buffer")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, ImageError> {
        match t.shape() {
            [h, w, c] => Self::new(*w, *h, *c, t.data().to_vec()),
            [h, w] => Self::new(*w, *h, 1, t.data().to_vec()),
            _ => Err(ImageError::Size {
                width: 0,
                height: 0,
                channels: 0,
                got: t.numel(),
            }),
        }
    }

    /// 0.299R + 0.587G + 0.114B per pixel.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self.data.chunks(self.channels).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes: Vec<u8> = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes).expect("sized buffer").save(path)?,
            3 => image::RgbImage::from_raw(w, h, bytes).expect("sized buffer").save(path)?,
            c => {
                return Err(ImageError::Size {
                    width: self.width,
                    height: self.height,
                    channels: c,
                    got: self.data.len(),
                })
            }
        }
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Self::new(w as usize, h as usize, 3, data)
    }

    /// Little-endian PFM ("PF" for 3 channels, "Pf" for 1), rows stored bottom to top.
    pub fn write_pfm(&self, path: &Path) -> Result<(), ImageError> {
        let tag = match self.channels {
            1 => "Pf",
            3 => "PF",
            c => return Err(ImageError::Pfm(format!("{c} channels"))),
        };
        let mut out = Vec::with_capacity(32 + self.data.len() * 4);
        write!(out, "{tag}\n{} {}\n-1.0\n", self.width, self.height)?;
        let row = self.width * self.channels;
        for y in (0..self.height).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_pfm(path: &Path) -> Result<Self, ImageError> {
        let mut reader = BufReader::new(fs::File::open(path)?);
        let mut header = Vec::new();
        while header.len() < 3 {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(ImageError::Pfm("truncated header".into()));
            }
            header.extend(line.split_whitespace().map(str::to_owned));
        }
        let channels = match header[0].as_str() {
            "PF" => 3,
            "Pf" => 1,
            other => return Err(ImageError::Pfm(format!("bad tag {other:?}"))),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| ImageError::Pfm(format!("bad dimension {s:?}")));
        let (width, height) = (parse(&header[1])?, parse(&header[2])?);
        let mut scale_line = String::new();
        if header.len() > 3 {
            scale_line = header[3].clone();
        } else {
            reader.read_line(&mut scale_line)?;
        }
        let scale: f64 = scale_line.trim().parse().map_err(|_| ImageError::Pfm(format!("bad scale {scale_line:?}")))?;
        let mut raw = Vec::new();
        reader.read_to_end(&mut raw)?;
        let row = width * channels;
        if raw.len() != row * height * 4 {
            return Err(ImageError::Pfm(format!("expected {} data bytes, found {}", row * height * 4, raw.len())));
        }
        let value = |b: &[u8]| {
            let arr = [b[0], b[1], b[2], b[3]];
            if scale < 0.0 {
                f32::from_le_bytes(arr) as f64
            } else {
                f32::from_be_bytes(arr) as f64
            }
        };
        let mut data = vec![0.0; row * height];
        for (file_row, chunk) in raw.chunks(row * 4).enumerate() {
            let y = height - 1 - file_row;
            for (i, b) in chunk.chunks(4).enumerate() {
                data[y * row + i] = value(b);
            }
        }
        Self::new(width, height, channels, data)
    }
}
