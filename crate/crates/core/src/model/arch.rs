use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::ConvGeometry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Vgg,
    ResNet,
    Wrn,
    Tiny,
}

/// Architecture identifier plus classifier size and input geometry.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchSpec {
    pub family: Family,
    pub depth: usize,
    /// WRN widen factor; 1 for other families.
    pub widen: usize,
    pub num_classes: usize,
    /// Input `[C, H, W]`.
    pub input: [usize; 3],
}

pub const SUPPORTED: &[&str] = &[
    "vgg13bn", "vgg16bn", "vgg19bn", "resnet18", "resnet34", "resnet50", "wrn10-10", "wrn16-8",
    "wrn28-6", "wrn40-4", "tiny4", "tiny5", "tiny6", "tiny7", "tiny8", "tiny9", "tiny10",
];

impl ArchSpec {
    pub fn parse(id: &str, num_classes: usize) -> Result<Self> {
        let unsupported = || Error::UnsupportedArch {
            name: id.to_string(),
            supported: SUPPORTED.join(", "),
        };
        let lower = id.trim().to_ascii_lowercase();
        let (family, depth, widen) = if let Some(rest) = lower.strip_prefix("vgg") {
            let d = rest.trim_end_matches("bn").trim_end_matches('-').trim_end_matches('_');
            (Family::Vgg, d.parse().map_err(|_| unsupported())?, 1)
        } else if let Some(rest) = lower.strip_prefix("resnet") {
            (Family::ResNet, rest.parse().map_err(|_| unsupported())?, 1)
        } else if let Some(rest) = lower.strip_prefix("wrn") {
            let rest = rest.trim_start_matches('-');
            let (d, k) = rest.split_once('-').ok_or_else(unsupported)?;
            (
                Family::Wrn,
                d.parse().map_err(|_| unsupported())?,
                k.parse().map_err(|_| unsupported())?,
            )
        } else if let Some(rest) = lower.strip_prefix("tiny") {
            let rest = rest.trim_start_matches('-');
            (Family::Tiny, rest.parse().map_err(|_| unsupported())?, 1)
        } else {
            return Err(unsupported());
        };
        let spec = Self {
            family,
            depth,
            widen,
            num_classes,
            input: [3, 32, 32],
        };
        if !spec.is_supported() {
            return Err(unsupported());
        }
        if num_classes < 2 {
            return Err(Error::Param(format!("num_classes must be >= 2, got {num_classes}")));
        }
        Ok(spec)
    }

    pub fn with_input(mut self, channels: usize, height: usize, width: usize) -> Self {
        self.input = [channels, height, width];
        self
    }

    pub fn is_supported(&self) -> bool {
        match self.family {
            Family::Vgg => matches!(self.depth, 13 | 16 | 19) && self.widen == 1,
            Family::ResNet => matches!(self.depth, 18 | 34 | 50) && self.widen == 1,
            Family::Wrn => matches!(
                (self.depth, self.widen),
                (10, 10) | (16, 8) | (28, 6) | (40, 4)
            ),
            Family::Tiny => (4..=10).contains(&self.depth) && self.widen == 1,
        }
    }

    /// Every supported spec with the given class count.
    pub fn all(num_classes: usize) -> Vec<ArchSpec> {
        SUPPORTED
            .iter()
            .map(|id| ArchSpec::parse(id, num_classes).expect("listed spec parses"))
            .collect()
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            Family::Vgg => write!(f, "vgg{}bn", self.depth),
            Family::ResNet => write!(f, "resnet{}", self.depth),
            Family::Wrn => write!(f, "wrn{}-{}", self.depth, self.widen),
            Family::Tiny => write!(f, "tiny{}", self.depth),
        }
    }
}

/// Which filter shape every spatial convolution takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FilterMode {
    /// N×N, padding (1, 1).
    Teacher,
    /// 1×N, padding (0, 1).
    RowStudent,
    /// N×1, padding (1, 0).
    Column,
}

impl FilterMode {
    pub const ALL: [FilterMode; 3] = [FilterMode::Teacher, FilterMode::RowStudent, FilterMode::Column];

    pub fn geometry(self, stride: usize) -> ConvGeometry {
        match self {
            FilterMode::Teacher => ConvGeometry::square(),
            FilterMode::RowStudent => ConvGeometry::row(),
            FilterMode::Column => ConvGeometry::column(),
        }
        .with_stride(stride)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FilterMode::Teacher => "teacher",
            FilterMode::RowStudent => "row_student",
            FilterMode::Column => "column",
        }
    }
}

impl FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" | "square" => Ok(FilterMode::Teacher),
            "row_student" | "row" | "student" => Ok(FilterMode::RowStudent),
            "column" | "col" => Ok(FilterMode::Column),
            _ => Err(Error::Param(format!(
                "unknown filter mode `{s}` (teacher|row_student|column)"
            ))),
        }
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How VGG pooling layers are rewritten for on-the-fly execution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum SurgeryMode {
    /// First and last max-pools stay; interior pools become stride-2 on the preceding conv.
    #[default]
    KeepEdgePools,
    /// Every pool becomes a stride-2 conv. Makes VGG students streamable.
    ReplaceAllPools,
    /// Every pool becomes a stride-2 conv, and the first and last convs keep the N×N filter.
    KeepEdgeConvs,
}

impl FromStr for SurgeryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keep_edge_pools" => Ok(SurgeryMode::KeepEdgePools),
            "replace_all_pools" => Ok(SurgeryMode::ReplaceAllPools),
            "keep_edge_convs" => Ok(SurgeryMode::KeepEdgeConvs),
            _ => Err(Error::Param(format!(
                "unknown surgery mode `{s}` (keep_edge_pools|replace_all_pools|keep_edge_convs)"
            ))),
        }
    }
}

impl fmt::Display for SurgeryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SurgeryMode::KeepEdgePools => "keep_edge_pools",
            SurgeryMode::ReplaceAllPools => "replace_all_pools",
            SurgeryMode::KeepEdgeConvs => "keep_edge_convs",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_cli_identifiers() {
        let s = ArchSpec::parse("vgg16bn", 10).unwrap();
        assert_eq!((s.family, s.depth), (Family::Vgg, 16));
        let s = ArchSpec::parse("wrn28-6", 100).unwrap();
        assert_eq!((s.family, s.depth, s.widen), (Family::Wrn, 28, 6));
        assert_eq!(ArchSpec::parse("tiny6", 2).unwrap().depth, 6);
        assert_eq!(ArchSpec::parse("resnet50", 10).unwrap().to_string(), "resnet50");
        for id in SUPPORTED {
            assert_eq!(ArchSpec::parse(id, 10).unwrap().to_string(), *id);
        }
    }

    #[test]
    fn unsupported_lists_supported_set() {
        for bad in ["vgg11", "resnet101", "wrn28-10", "tiny3", "tiny11", "alexnet"] {
            let err = ArchSpec::parse(bad, 10).unwrap_err();
            assert!(err.to_string().contains("resnet18"), "{err}");
        }
    }
}
