use std::fs;
use std::path::Path;

use super::ImageDims;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"RSVT";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 3 * 4;

/// H×W×C multispectral image, row-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    dims: ImageDims,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(dims: ImageDims, data: Vec<f32>) -> Result<Self> {
        if dims.height == 0 || dims.width == 0 || dims.channels < 3 {
            return Err(Error::BadConfig(format!("invalid image dims {dims:?}")));
        }
        if data.len() != dims.height * dims.width * dims.channels {
            return Err(Error::shape(
                "image",
                format!("{dims:?} needs {} values, got {}", dims.height * dims.width * dims.channels, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::BadConfig(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let c = self.dims.channels;
        let at = (y * self.dims.width + x) * c;
        &self.data[at..at + c]
    }

    /// Non-overlapping `patch`×`patch` tiles flattened (row, col, channel) into
    /// the rows of a P × (patch·patch·C) matrix, tiles in raster order.
    pub fn patches<T: Real>(&self, patch: usize) -> Result<Tensor<T>> {
        let ImageDims {
            height,
            width,
            channels,
        } = self.dims;
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::shape(
                "patches",
                format!("{height}x{width} image with patch size {patch}"),
            ));
        }
        let (ph, pw) = (height / patch, width / patch);
        let cols = patch * patch * channels;
        let mut out = Vec::with_capacity(ph * pw * cols);
        for py in 0..ph {
            for px in 0..pw {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = (y * width + px * patch) * channels;
                    out.extend(
                        self.data[start..start + patch * channels]
                            .iter()
                            .map(|&v| T::from_f64_lossy(v as f64)),
                    );
                }
            }
        }
        Tensor::new(vec![ph * pw, cols], out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(3);
        for d in [self.dims.height, self.dims.width, self.dims.channels] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        if bytes[6] != 3 {
            return Err(bad(format!("expected 3 dimensions, got {}", bytes[6])));
        }
        let dim = |i: usize| {
            let at = 7 + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
        };
        let dims = ImageDims {
            height: dim(0),
            width: dim(1),
            channels: dim(2),
        };
        let n = dims
            .height
            .checked_mul(dims.width)
            .and_then(|v| v.checked_mul(dims.channels))
            .ok_or_else(|| bad("dimension overflow".into()))?;
        if bytes.len() != HEADER_LEN + 4 * n {
            return Err(bad(format!(
                "payload is {} bytes, {dims:?} needs {}",
                bytes.len() - HEADER_LEN,
                4 * n
            )));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(dims, data).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img() -> ImageTensor {
        let dims = ImageDims {
            height: 4,
            width: 4,
            channels: 3,
        };
        ImageTensor::new(dims, (0..48).map(|i| i as f32 / 48.0).collect()).unwrap()
    }

    #[test]
    fn header_layout() {
        let b = img().to_bytes();
        assert_eq!(&b[..4], b"RSVT");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 3);
        assert_eq!(&b[7..19], &[4, 0, 0, 0, 4, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(b.len(), 19 + 48 * 4);
    }

    #[test]
    fn bytes_round_trip() {
        let i = img();
        assert_eq!(ImageTensor::from_bytes(&i.to_bytes(), Path::new("x")).unwrap(), i);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut b = img().to_bytes();
        assert!(matches!(
            ImageTensor::from_bytes(&b[..b.len() - 1], Path::new("x")),
            Err(Error::Format { .. })
        ));
        b[0] = b'X';
        assert!(matches!(
            ImageTensor::from_bytes(&b, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn patch_layout() {
        let p = img().patches::<f32>(2).unwrap();
        assert_eq!(p.shape(), &[4, 12]);
        // first patch: pixels (0,0),(0,1),(1,0),(1,1)
        let i = img();
        let expect: Vec<f32> = [i.pixel(0, 0), i.pixel(0, 1), i.pixel(1, 0), i.pixel(1, 1)].concat();
        assert_eq!(p.row(0), &expect[..]);
        // second patch starts at column 2
        assert_eq!(&p.row(1)[..3], i.pixel(0, 2));
        assert!(img().patches::<f32>(3).is_err());
    }
}
