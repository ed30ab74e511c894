//! Named reference architectures sized for desk-scale image tasks.

use super::{ArchitectureSpec, Layer};
use crate::error::{Result, SnnError};
use crate::tensor::ops::ConvSpec;

/// Five weight layers: three 3x3 convolutions with pooling plus two linear
/// layers, dropout throughout.
pub fn vgg5(input: (usize, usize, usize), classes: usize) -> Result<ArchitectureSpec> {
    let (c, _, _) = input;
    ArchitectureSpec::new(
        input,
        classes,
        vec![
            Layer::Conv(ConvSpec::new(12, c, 3, 1, 1)),
            Layer::AvgPool { k: 2 },
            Layer::Dropout { rate: 0.15 },
            Layer::Conv(ConvSpec::new(24, 12, 3, 1, 1)),
            Layer::AvgPool { k: 2 },
            Layer::Dropout { rate: 0.15 },
            Layer::Conv(ConvSpec::new(24, 24, 3, 1, 1)),
            Layer::Dropout { rate: 0.15 },
            Layer::Linear { out: 128 },
            Layer::Dropout { rate: 0.15 },
            Layer::Linear { out: classes },
        ],
    )
}

/// Eight weight layers: a pre-processing stack of three 3x3 stride-1
/// convolutions with dropout between, then two residual basic blocks with
/// identity shortcuts, then the output layer. Block thresholds stay at 1.
pub fn resnet8_lite(input: (usize, usize, usize), classes: usize) -> Result<ArchitectureSpec> {
    let (c, _, _) = input;
    ArchitectureSpec::new(
        input,
        classes,
        vec![
            Layer::Conv(ConvSpec::new(16, c, 3, 1, 1)),
            Layer::Dropout { rate: 0.1 },
            Layer::Conv(ConvSpec::new(16, 16, 3, 1, 1)),
            Layer::Dropout { rate: 0.1 },
            Layer::Conv(ConvSpec::new(16, 16, 3, 1, 1)),
            Layer::AvgPool { k: 2 },
            Layer::ResidualBlock { channels: 16 },
            Layer::AvgPool { k: 2 },
            Layer::ResidualBlock { channels: 16 },
            Layer::Linear { out: classes },
        ],
    )
}

/// Look up an architecture preset by name.
pub fn preset(name: &str, input: (usize, usize, usize), classes: usize) -> Result<ArchitectureSpec> {
    match name {
        "vgg5" => vgg5(input, classes),
        "resnet8-lite" => resnet8_lite(input, classes),
        other => Err(SnnError::Config(format!(
            "unknown architecture preset '{other}' (available: vgg5, resnet8-lite)"
        ))),
    }
}
