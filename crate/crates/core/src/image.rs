//! RGB float images and the portable binary formats used on disk.

use std::io::{self, BufRead, BufReader, Read, Write};

use crate::autodiff::Tensor;

/// Row-major `height × width × 3` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_tensor(t: &Tensor) -> Option<Self> {
        match t.shape() {
            [h, w, 3] => Some(Self {
                width: *w,
                height: *h,
                data: t.data().to_vec(),
            }),
            _ => None,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 3], self.data.clone()).expect("sized")
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "image sizes differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Peak signal-to-noise ratio in dB for unit peak; `inf` for identical images.
    pub fn psnr(&self, other: &Image) -> f64 {
        let mse = self.mse(other);
        if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        }
    }

    /// Binary PPM (P6), 8 bits per channel, values clamped to `[0, 1]`.
    pub fn write_ppm(&self, mut w: impl Write) -> io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)
    }

    /// Little-endian portable float map (`PF`), stored bottom row first.
    pub fn write_pfm(&self, mut w: impl Write) -> io::Result<()> {
        write!(w, "PF\n{} {}\n-1.0\n", self.width, self.height)?;
        for y in (0..self.height).rev() {
            let row = &self.data[y * self.width * 3..(y + 1) * self.width * 3];
            for v in row {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_pfm(r: impl Read) -> io::Result<Self> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim() != "PF" {
            return Err(bad("not an RGB portable float map"));
        }
        line.clear();
        r.read_line(&mut line)?;
        let dims: Vec<usize> = line
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad("bad dimensions")))
            .collect::<Result<_, _>>()?;
        let [width, height] = dims[..] else {
            return Err(bad("bad dimensions"));
        };
        line.clear();
        r.read_line(&mut line)?;
        let scale: f64 = line.trim().parse().map_err(|_| bad("bad scale"))?;
        if scale >= 0.0 {
            return Err(bad("only little-endian float maps are supported"));
        }
        let mut raw = vec![0u8; width * height * 3 * 4];
        r.read_exact(&mut raw)?;
        let mut data = vec![0.0; width * height * 3];
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
            let (file_row, rest) = (i / (width * 3), i % (width * 3));
            let y = height - 1 - file_row;
            data[y * width * 3 + rest] = v;
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }
}
