//! Pixel correspondence maps between two views and their on-disk form.
//!
//! The binary layout (little-endian) is:
//!
//! ```text
//! b"OXCR"  u32 height  u32 width
//! height*width records of { i32 target_row, i32 target_col, u8 valid }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"OXCR";

/// Per-pixel map from view-1 coordinates to view-2 coordinates.
///
/// Coordinates are `(row, col)`. `valid` is false for pixels whose
/// correspondence leaves the target frame or is occluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrespondenceMap {
    height: usize,
    width: usize,
    target: Vec<(i32, i32)>,
    valid: Vec<bool>,
}

impl CorrespondenceMap {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            target: vec![(0, 0); height * width],
            valid: vec![false; height * width],
        }
    }

    pub fn identity(height: usize, width: usize) -> Self {
        let mut map = Self::new(height, width);
        for r in 0..height {
            for c in 0..width {
                map.set(r, c, (r as i32, c as i32), true);
            }
        }
        map
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    #[inline]
    pub fn target(&self, row: usize, col: usize) -> (i32, i32) {
        self.target[row * self.width + col]
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    /// Target coordinates of a valid pixel, `None` otherwise.
    pub fn valid_target(&self, row: usize, col: usize) -> Option<(usize, usize)> {
        let i = row * self.width + col;
        self.valid[i].then(|| (self.target[i].0 as usize, self.target[i].1 as usize))
    }

    pub fn set(&mut self, row: usize, col: usize, target: (i32, i32), valid: bool) {
        let i = row * self.width + col;
        if valid {
            debug_assert!(
                target.0 >= 0
                    && (target.0 as usize) < self.height
                    && target.1 >= 0
                    && (target.1 as usize) < self.width,
                "valid target {target:?} outside {}x{}",
                self.height,
                self.width
            );
        }
        self.target[i] = target;
        self.valid[i] = valid;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.valid_count() as f64 / self.len() as f64
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + self.len() * 9);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        for (t, v) in self.target.iter().zip(&self.valid) {
            buf.extend_from_slice(&t.0.to_le_bytes());
            buf.extend_from_slice(&t.1.to_le_bytes());
            buf.push(u8::from(*v));
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read, origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            path: origin.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing OXCR header"));
        }
        let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = height * width;
        if bytes.len() != 12 + n * 9 {
            return Err(bad("body length does not match header dimensions"));
        }
        let mut map = Self::new(height, width);
        for (i, rec) in bytes[12..].chunks_exact(9).enumerate() {
            let row = i32::from_le_bytes(rec[0..4].try_into().unwrap());
            let col = i32::from_le_bytes(rec[4..8].try_into().unwrap());
            let valid = match rec[8] {
                0 => false,
                1 => true,
                _ => return Err(bad("valid flag must be 0 or 1")),
            };
            if valid && (row < 0 || col < 0 || row as usize >= height || col as usize >= width) {
                return Err(bad("valid target outside frame"));
            }
            map.target[i] = (row, col);
            map.valid[i] = valid;
        }
        Ok(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::read_from(std::io::BufReader::new(file), path.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_little_endian() {
        let mut map = CorrespondenceMap::new(1, 2);
        map.set(0, 1, (0, 0), true);
        let mut buf = Vec::new();
        map.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"OXCR");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(&buf[8..12], &[2, 0, 0, 0]);
        assert_eq!(buf.len(), 12 + 2 * 9);
        assert_eq!(buf[12 + 8], 0);
        assert_eq!(buf[12 + 9 + 8], 1);
    }

    #[test]
    fn rejects_truncated_body() {
        let map = CorrespondenceMap::identity(3, 3);
        let mut buf = Vec::new();
        map.write_to(&mut buf).unwrap();
        buf.pop();
        let err = CorrespondenceMap::read_from(&buf[..], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    proptest! {
        #[test]
        fn binary_round_trip(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut map = CorrespondenceMap::new(h, w);
            let mut s = seed;
            for r in 0..h {
                for c in 0..w {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let valid = s >> 63 == 1;
                    let t = if valid {
                        (((s >> 8) % h as u64) as i32, ((s >> 24) % w as u64) as i32)
                    } else {
                        (-((s >> 40) as i32 % 7), 100)
                    };
                    map.set(r, c, t, valid);
                }
            }
            let mut buf = Vec::new();
            map.write_to(&mut buf).unwrap();
            let back = CorrespondenceMap::read_from(&buf[..], Path::new("mem")).unwrap();
            prop_assert_eq!(back, map);
        }
    }
}
