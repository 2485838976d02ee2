//! Binary PGM (P5) images, 8- or 16-bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::LabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major samples.
    pub pixels: Vec<u16>,
}

fn header_tokens(bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    let mut tokens = Vec::with_capacity(4);
    let mut i = 0;
    while tokens.len() < 4 {
        match bytes.get(i) {
            None => return Err(Error::Format("PGM header truncated".into())),
            Some(b'#') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => i += 1,
            Some(_) => {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                let tok = std::str::from_utf8(&bytes[start..i]).unwrap_or("");
                if tokens.is_empty() {
                    if tok != "P5" {
                        return Err(Error::Format(format!("not a binary PGM (magic '{tok}')")));
                    }
                    tokens.push(0);
                } else {
                    tokens.push(tok.parse().map_err(|_| Error::Format(format!("bad PGM header field '{tok}'")))?);
                }
            }
        }
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((tokens, i + 1))
}

impl Pgm {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (t, start) = header_tokens(bytes)?;
        let (width, height, maxval) = (t[1], t[2], t[3]);
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(Error::Format(format!("bad PGM dimensions {width}x{height} maxval {maxval}")));
        }
        let bpp = if maxval < 256 { 1 } else { 2 };
        let n = width * height;
        let raster = bytes.get(start..).unwrap_or(&[]);
        if raster.len() < n * bpp {
            return Err(Error::Format(format!("PGM raster has {} bytes, need {}", raster.len(), n * bpp)));
        }
        let pixels: Vec<u16> = if bpp == 1 {
            raster[..n].iter().map(|&b| b as u16).collect()
        } else {
            raster[..2 * n].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        };
        if let Some(&bad) = pixels.iter().find(|&&p| p as usize > maxval) {
            return Err(Error::Format(format!("PGM sample {bad} exceeds maxval {maxval}")));
        }
        Ok(Pgm { width, height, maxval: maxval as u16, pixels })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.pixels.iter().map(|&p| p as u8));
        } else {
            out.extend(self.pixels.iter().flat_map(|p| p.to_be_bytes()));
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path)?).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::File::create(path)?.write_all(&self.encode())?;
        Ok(())
    }

    /// Intensities scaled to `[0, 1]` as a 1×1×H×W tensor.
    pub fn to_image(&self) -> Tensor {
        let m = self.maxval as f64;
        Tensor::new(vec![1, 1, self.height, self.width], self.pixels.iter().map(|&p| p as f64 / m).collect())
            .expect("consistent shape")
    }

    /// Quantises a 1×1×H×W image in `[0, 1]` (values outside are clipped).
    pub fn from_image(image: &Tensor, maxval: u16) -> Result<Self> {
        let s = image.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 1 {
            return Err(Error::shape("pgm", format!("expected a 1×1×H×W image, got {s:?}")));
        }
        if maxval == 0 {
            return Err(Error::invalid("maxval must be positive"));
        }
        let m = maxval as f64;
        let pixels = image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * m).round() as u16).collect();
        Ok(Pgm { width: s[3], height: s[2], maxval, pixels })
    }

    pub fn to_labels(&self) -> LabelMap {
        LabelMap::new(self.height, self.width, self.pixels.iter().map(|&p| p as u32).collect())
            .expect("consistent shape")
    }

    pub fn from_labels(labels: &LabelMap) -> Result<Self> {
        let max = labels.data.iter().copied().max().unwrap_or(0);
        if max > u16::MAX as u32 {
            return Err(Error::invalid(format!("label {max} does not fit a 16-bit PGM")));
        }
        Ok(Pgm {
            width: labels.width,
            height: labels.height,
            maxval: if max < 256 { 255 } else { u16::MAX },
            pixels: labels.data.iter().map(|&l| l as u16).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_round_trip_with_comment() {
        let bytes = b"P5\n# made by hand\n3 2\n255\n\x00\x10\x20\x30\x40\xff";
        let p = Pgm::decode(bytes).unwrap();
        assert_eq!((p.width, p.height, p.maxval), (3, 2, 255));
        assert_eq!(p.pixels, vec![0, 16, 32, 48, 64, 255]);
        assert_eq!(Pgm::decode(&p.encode()).unwrap(), p);
    }

    #[test]
    fn sixteen_bit_is_big_endian() {
        let p = Pgm { width: 2, height: 1, maxval: 1000, pixels: vec![1, 513] };
        let enc = p.encode();
        assert_eq!(&enc[enc.len() - 4..], &[0, 1, 2, 1]);
        assert_eq!(Pgm::decode(&enc).unwrap(), p);
    }

    #[test]
    fn rejects_malformed_files() {
        assert!(Pgm::decode(b"P2\n1 1\n255\n0").is_err());
        assert!(Pgm::decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(Pgm::decode(b"P5\n1 1\n10\n\x20").is_err());
        assert!(Pgm::decode(b"P5\n1").is_err());
    }

    #[test]
    fn image_quantisation() {
        let img = Tensor::new(vec![1, 1, 1, 3], vec![0.0, 0.5, 1.2]).unwrap();
        let p = Pgm::from_image(&img, 255).unwrap();
        assert_eq!(p.pixels, vec![0, 128, 255]);
        let back = p.to_image();
        assert!((back.data()[1] - 128.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn labels_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let path = dir.path().join("seg.pgm");
        Pgm::from_labels(&labels).unwrap().write(&path).unwrap();
        assert_eq!(Pgm::read(&path).unwrap().to_labels(), labels);
    }
}
