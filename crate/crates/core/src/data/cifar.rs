use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

use super::Dataset;

const IMAGE_BYTES: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    /// Records carry a coarse and a fine label byte; the fine label is used.
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        self.label_bytes() + IMAGE_BYTES
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    /// Standard file names of the train and test splits.
    pub fn split_files(self, dir: &Path) -> (Vec<PathBuf>, Vec<PathBuf>) {
        match self {
            CifarVariant::Cifar10 => (
                (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
                vec![dir.join("test_batch.bin")],
            ),
            CifarVariant::Cifar100 => (vec![dir.join("train.bin")], vec![dir.join("test.bin")]),
        }
    }
}

impl FromStr for CifarVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(CifarVariant::Cifar10),
            "cifar100" => Ok(CifarVariant::Cifar100),
            _ => Err(Error::Param(format!("unknown CIFAR variant `{s}` (cifar10|cifar100)"))),
        }
    }
}

/// Decodes raw CIFAR records into `(labels, pixels)`. `base` offsets error positions.
pub fn decode_cifar(variant: CifarVariant, bytes: &[u8], base: u64) -> Result<(Vec<u16>, Vec<u8>)> {
    let rec = variant.record_len();
    if !bytes.len().is_multiple_of(rec) {
        let whole = bytes.len() / rec * rec;
        return Err(Error::Data {
            offset: base + whole as u64,
            msg: format!(
                "trailing {} bytes do not form a {rec}-byte record",
                bytes.len() - whole
            ),
        });
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[variant.label_bytes() - 1];
        if label as usize >= variant.num_classes() {
            return Err(Error::Data {
                offset: base + (i * rec) as u64,
                msg: format!("label {label} out of range"),
            });
        }
        labels.push(label as u16);
        pixels.extend_from_slice(&r[variant.label_bytes()..]);
    }
    Ok((labels, pixels))
}

/// Imports and concatenates raw CIFAR files; statistics come from the imported pixels.
pub fn import_cifar(variant: CifarVariant, files: &[PathBuf]) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for path in files {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (l, p) = decode_cifar(variant, &bytes, 0).map_err(|e| match e {
            Error::Data { offset, msg } => Error::Data {
                offset,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })?;
        labels.extend(l);
        pixels.extend(p);
    }
    if labels.is_empty() {
        return Err(Error::Data {
            offset: 0,
            msg: "no records found".into(),
        });
    }
    Dataset::new([3, 32, 32], variant.num_classes(), labels, pixels)
}

/// Imports both splits; the test split inherits the training statistics.
pub fn import_cifar_split(variant: CifarVariant, dir: &Path) -> Result<(Dataset, Dataset)> {
    let (train_files, test_files) = variant.split_files(dir);
    let train = import_cifar(variant, &train_files)?;
    let mut test = import_cifar(variant, &test_files)?;
    test.set_stats(train.header().mean.clone(), train.header().std.clone())?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar100_uses_fine_label() {
        let mut rec = vec![7u8, 42];
        rec.extend((0..IMAGE_BYTES).map(|i| (i % 251) as u8));
        let (labels, pixels) = decode_cifar(CifarVariant::Cifar100, &rec, 0).unwrap();
        assert_eq!(labels, vec![42]);
        assert_eq!(pixels[..], rec[2..]);
    }

    #[test]
    fn partial_record_reports_offset() {
        let bytes = vec![0u8; 3073 + 10];
        match decode_cifar(CifarVariant::Cifar10, &bytes, 0) {
            Err(Error::Data { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("{other:?}"),
        }
    }
}
