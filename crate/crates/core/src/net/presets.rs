//! Desk-scale stand-ins for the residual and plain convolutional backbones.

use serde::{Deserialize, Serialize};

use super::{build_network, ModuleSpec, NetworkGraph};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    MiniResnet,
    MiniVgg,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini-resnet" => Ok(Preset::MiniResnet),
            "mini-vgg" => Ok(Preset::MiniVgg),
            other => Err(Error::invalid(format!("unknown preset '{other}'"))),
        }
    }
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::MiniResnet => "mini-resnet",
            Preset::MiniVgg => "mini-vgg",
        }
    }

    pub fn modules(self, image_size: usize, classes: usize) -> Result<Vec<ModuleSpec>> {
        if image_size < 8 || image_size % 8 != 0 {
            return Err(Error::invalid(format!(
                "preset {} needs an image size divisible by 8, got {image_size}",
                self.name()
            )));
        }
        Ok(match self {
            Preset::MiniResnet => mini_resnet(image_size, classes),
            Preset::MiniVgg => mini_vgg(classes),
        })
    }

    pub fn build(self, image_size: usize, classes: usize, seed: u64) -> Result<NetworkGraph> {
        build_network(&[1, image_size, image_size], &self.modules(image_size, classes)?, seed)
    }
}

fn conv(out_channels: usize, stride: usize) -> ModuleSpec {
    ModuleSpec::Conv2d {
        out_channels,
        kernel: 3,
        stride,
        padding: 1,
    }
}

/// 24 modules, two residual stages, three downsamples (strided conv, max pool,
/// global average pool).
fn mini_resnet(image_size: usize, classes: usize) -> Vec<ModuleSpec> {
    use ModuleSpec::*;
    vec![
        conv(8, 1), // 0
        BatchNorm,
        ReLU, // 2
        conv(8, 1),
        BatchNorm,
        ReLU,
        conv(8, 1),
        BatchNorm,
        ResidualAdd { source: 2 }, // 8
        ReLU,
        conv(16, 2), // 10, downsample
        BatchNorm,
        ReLU, // 12
        conv(16, 1),
        BatchNorm,
        ResidualAdd { source: 12 }, // 15
        ReLU,
        MaxPool { window: 2 }, // 17, downsample
        conv(32, 1),
        BatchNorm,
        ReLU,
        AvgPool { window: image_size / 4 }, // 21, downsample to 1x1
        Flatten,
        Dense { out_features: classes },
    ]
}

/// 15 modules, no batch norm, three max-pool downsamples.
fn mini_vgg(classes: usize) -> Vec<ModuleSpec> {
    use ModuleSpec::*;
    vec![
        conv(8, 1),
        ReLU,
        conv(8, 1),
        ReLU,
        MaxPool { window: 2 },
        conv(16, 1),
        ReLU,
        MaxPool { window: 2 },
        conv(16, 1),
        ReLU,
        MaxPool { window: 2 },
        Flatten,
        Dense { out_features: 32 },
        ReLU,
        Dense { out_features: classes },
    ]
}
