//! OTFD dataset container, CIFAR import, augmentation and mini-batching.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "OTFD" | version u32 | count u32 | channels u8 | height u16 | width u16 | num_classes u16
//!        | mean f32 × C | std f32 × C
//! count × ( label u16 | C·H·W pixel bytes, channel-major )
//! ```

mod augment;
mod batch;
mod cifar;
mod synth;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub use augment::{augment, augment_with, AugmentPolicy};
pub use batch::{minibatches, Batch, Minibatches};
pub use cifar::{decode_cifar, import_cifar, import_cifar_split, CifarVariant};
pub use synth::{synthetic, SyntheticSpec};

pub const MAGIC: &[u8; 4] = b"OTFD";
pub const VERSION: u32 = 1;

pub const SVHN_TRAIN_COUNT: usize = 73_257;
pub const SVHN_TEST_COUNT: usize = 26_032;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl DatasetHeader {
    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn encoded_len(&self) -> usize {
        4 + 4 + 4 + 1 + 2 + 2 + 2 + 8 * self.channels
    }
}

/// In-memory dataset: `u16` labels and raw `u8` pixels, channel-major per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    header: DatasetHeader,
    labels: Vec<u16>,
    pixels: Vec<u8>,
}

impl Dataset {
    /// Builds a dataset whose normalization statistics come from its own pixels.
    pub fn new(
        dims: [usize; 3],
        num_classes: usize,
        labels: Vec<u16>,
        pixels: Vec<u8>,
    ) -> Result<Self> {
        let mut ds = Self::with_stats(dims, num_classes, labels, pixels, Vec::new(), Vec::new())?;
        let (mean, std) = ds.compute_stats()?;
        ds.header.mean = mean;
        ds.header.std = std;
        Ok(ds)
    }

    /// Builds a dataset with externally supplied normalization statistics
    /// (empty vectors are accepted only transiently by [`Dataset::new`]).
    pub fn with_stats(
        dims: [usize; 3],
        num_classes: usize,
        labels: Vec<u16>,
        pixels: Vec<u8>,
        mean: Vec<f32>,
        std: Vec<f32>,
    ) -> Result<Self> {
        let [channels, height, width] = dims;
        if channels == 0 || channels > u8::MAX as usize || height == 0 || width == 0 {
            return Err(Error::Param(format!("invalid image dims {dims:?}")));
        }
        if height > u16::MAX as usize || width > u16::MAX as usize || num_classes > u16::MAX as usize {
            return Err(Error::Param("image dims or class count exceed u16".into()));
        }
        let header = DatasetHeader {
            count: labels.len(),
            channels,
            height,
            width,
            num_classes,
            mean,
            std,
        };
        if pixels.len() != labels.len() * header.image_len() {
            return Err(Error::shape(
                "dataset",
                "pixel bytes",
                labels.len() * header.image_len(),
                pixels.len(),
            ));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= num_classes) {
            return Err(Error::Data {
                offset: (header.encoded_len() + i * (2 + header.image_len())) as u64,
                msg: format!("label {l} out of range for {num_classes} classes"),
            });
        }
        let ds = Self {
            header,
            labels,
            pixels,
        };
        if !ds.header.std.is_empty() {
            ds.check_stats()?;
        }
        Ok(ds)
    }

    fn check_stats(&self) -> Result<()> {
        let c = self.header.channels;
        if self.header.mean.len() != c || self.header.std.len() != c {
            return Err(Error::shape("dataset", "normalization stats", c, self.header.std.len()));
        }
        if let Some(s) = self.header.std.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Param(format!("channel std must be positive, got {s}")));
        }
        Ok(())
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.header.channels, self.header.height, self.header.width]
    }

    pub fn num_classes(&self) -> usize {
        self.header.num_classes
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.header.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Per-channel mean and std of `v / 255` over every pixel.
    pub fn compute_stats(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        if self.is_empty() {
            return Err(Error::Param("cannot compute statistics of an empty dataset".into()));
        }
        let c = self.header.channels;
        let plane = self.header.height * self.header.width;
        let mut sum = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for img in self.pixels.chunks_exact(c * plane) {
            for ch in 0..c {
                for &p in &img[ch * plane..(ch + 1) * plane] {
                    let v = p as f64 / 255.0;
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = (self.len() * plane) as f64;
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for ch in 0..c {
            let m = sum[ch] / n;
            let var = (sq[ch] / n - m * m).max(0.0);
            mean.push(m as f32);
            // A constant channel would divide by zero; fall back to unit scale.
            std.push(if var > 1e-12 { var.sqrt() as f32 } else { 1.0 });
        }
        Ok((mean, std))
    }

    /// Replaces the normalization statistics, e.g. with those of a training split.
    pub fn set_stats(&mut self, mean: Vec<f32>, std: Vec<f32>) -> Result<()> {
        let old = (
            std::mem::replace(&mut self.header.mean, mean),
            std::mem::replace(&mut self.header.std, std),
        );
        if let Err(e) = self.check_stats() {
            (self.header.mean, self.header.std) = old;
            return Err(e);
        }
        Ok(())
    }

    /// Records at `indices`, keeping this dataset's statistics.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let n = self.header.image_len();
        let mut labels = Vec::with_capacity(indices.len());
        let mut pixels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            labels.push(self.labels[i]);
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            header: DatasetHeader {
                count: labels.len(),
                ..self.header.clone()
            },
            labels,
            pixels,
        }
    }

    /// Keeps only records of `classes`, relabelled to their position in `classes`.
    pub fn filter_classes(&self, classes: &[usize]) -> Result<Dataset> {
        if classes.len() < 2 {
            return Err(Error::Param("need at least two classes".into()));
        }
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.label(i)))
            .collect();
        let mut out = self.subset(&keep);
        for l in &mut out.labels {
            *l = classes.iter().position(|&c| c == *l as usize).unwrap() as u16;
        }
        out.header.num_classes = classes.len();
        Ok(out)
    }

    /// First `n` records of each class in turn until `total` are collected.
    pub fn take_balanced(&self, total: usize) -> Dataset {
        let k = self.num_classes();
        let per = total.div_ceil(k);
        let mut seen = vec![0usize; k];
        let mut keep = Vec::with_capacity(total);
        for i in 0..self.len() {
            if keep.len() == total {
                break;
            }
            let l = self.label(i);
            if seen[l] < per {
                seen[l] += 1;
                keep.push(i);
            }
        }
        self.subset(&keep)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(h.encoded_len() + self.len() * (2 + h.image_len()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(h.count as u32).to_le_bytes());
        out.push(h.channels as u8);
        out.extend_from_slice(&(h.height as u16).to_le_bytes());
        out.extend_from_slice(&(h.width as u16).to_le_bytes());
        out.extend_from_slice(&(h.num_classes as u16).to_le_bytes());
        for v in h.mean.iter().chain(&h.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..self.len() {
            out.extend_from_slice(&self.labels[i].to_le_bytes());
            out.extend_from_slice(self.image(i));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Data {
                offset: 0,
                msg: "bad magic, expected OTFD".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data {
                offset: 4,
                msg: format!("unsupported container version {version}"),
            });
        }
        let count = r.u32()? as usize;
        let channels = r.take(1)?[0] as usize;
        let height = r.u16()? as usize;
        let width = r.u16()? as usize;
        let num_classes = r.u16()? as usize;
        let mut stats = Vec::with_capacity(2 * channels);
        for _ in 0..2 * channels {
            stats.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
        }
        let std = stats.split_off(channels);
        let image_len = channels * height * width;
        let body = bytes.len() - r.pos;
        if body != count * (2 + image_len) {
            return Err(Error::Data {
                offset: r.pos as u64,
                msg: format!(
                    "header declares {count} records of {} bytes but {body} bytes follow",
                    2 + image_len
                ),
            });
        }
        let mut labels = Vec::with_capacity(count);
        let mut pixels = Vec::with_capacity(count * image_len);
        for _ in 0..count {
            labels.push(r.u16()?);
            pixels.extend_from_slice(r.take(image_len)?);
        }
        Dataset::with_stats([channels, height, width], num_classes, labels, pixels, stats, std)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checks the record count of a pre-converted SVHN split.
    pub fn check_svhn(&self, train: bool) -> Result<()> {
        let want = if train { SVHN_TRAIN_COUNT } else { SVHN_TEST_COUNT };
        if self.len() != want {
            return Err(Error::Data {
                offset: 8,
                msg: format!("SVHN {} split must hold {want} records, found {}", if train { "train" } else { "test" }, self.len()),
            });
        }
        if self.num_classes() != 10 {
            return Err(Error::Data {
                offset: 17,
                msg: format!("SVHN has 10 classes, header says {}", self.num_classes()),
            });
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Data {
                offset: self.pos as u64,
                msg: format!("truncated: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        let pixels: Vec<u8> = (0..3 * 2 * 2 * 3).map(|i| (i * 7 % 256) as u8).collect();
        Dataset::new([2, 2, 3], 4, vec![0, 3, 1], pixels).unwrap()
    }

    #[test]
    fn container_round_trip_is_bit_stable() {
        let ds = small();
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = small().to_bytes();
        let err = Dataset::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Data { offset, .. } if offset > 0), "{err}");
        assert!(Dataset::from_bytes(b"NOPE").is_err());
    }

    #[test]
    fn rejects_out_of_range_label() {
        assert!(Dataset::new([1, 1, 1], 2, vec![2], vec![0]).is_err());
    }

    #[test]
    fn filter_relabels() {
        let ds = small().filter_classes(&[3, 1]).unwrap();
        assert_eq!(ds.labels(), &[0, 1]);
        assert_eq!(ds.num_classes(), 2);
    }

    #[test]
    fn svhn_count_check() {
        assert!(small().check_svhn(true).is_err());
    }
}
