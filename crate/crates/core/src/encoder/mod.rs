//! Block-processing self-attention encoder.
//!
//! Audio is cut into center chunks; each chunk attends to a left history,
//! itself, and a short right look-ahead. Context altering moves the leading
//! part of a base-length segment into the left history so that a short chunk
//! keeps the base segment's receptive field. An optional one-hot domain vector
//! is appended to the input of every layer.

mod model;
mod plan;
mod streaming;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use model::Encoder;
pub use plan::{AttentionMask, ContextPlan, Segment, plan_contexts};
pub use streaming::StreamingEncoder;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainId {
    VCmd,
    Dictation,
}

impl DomainId {
    pub const ALL: [DomainId; 2] = [DomainId::VCmd, DomainId::Dictation];

    pub fn vector(self) -> DomainVector {
        DomainVector(self)
    }

    pub fn index(self) -> usize {
        match self {
            DomainId::VCmd => 0,
            DomainId::Dictation => 1,
        }
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainId::VCmd => "vcmd",
            DomainId::Dictation => "dictation",
        })
    }
}

impl FromStr for DomainId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vcmd" => Ok(DomainId::VCmd),
            "dictation" | "dict" => Ok(DomainId::Dictation),
            other => Err(Error::InvalidInput(format!("unknown domain `{other}`"))),
        }
    }
}

/// One-hot domain indicator: VCmd → `[1, 0]`, Dictation → `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DomainVector(pub DomainId);

impl DomainVector {
    pub const LEN: usize = 2;

    pub fn one_hot(self) -> [f64; 2] {
        match self.0 {
            DomainId::VCmd => [1.0, 0.0],
            DomainId::Dictation => [0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn: usize,
    pub dropout: f64,
    /// Raw feature dimension at the 10 ms input rate.
    pub feature_dim: usize,
    pub stack: usize,
    pub stride: usize,
    pub input_frame_ms: f64,
    pub domain_vector: bool,
    /// Learned absolute positions wrap modulo this length.
    pub max_positions: usize,
}

impl EncoderConfig {
    /// Desk-scale default: 4 layers, 4 heads, width 64, 60 ms frames.
    pub fn toy() -> Self {
        Self {
            layers: 4,
            heads: 4,
            width: 64,
            ffn: 128,
            dropout: 0.1,
            feature_dim: 8,
            stack: 6,
            stride: 6,
            input_frame_ms: 10.0,
            domain_vector: false,
            max_positions: 512,
        }
    }

    /// The full-size shape (10 layers, 8 heads, 512 wide, 2048 FFN, 80-dim input).
    pub fn paper() -> Self {
        Self {
            layers: 10,
            heads: 8,
            width: 512,
            ffn: 2048,
            dropout: 0.1,
            feature_dim: 80,
            stack: 6,
            stride: 6,
            input_frame_ms: 10.0,
            domain_vector: false,
            max_positions: 2048,
        }
    }

    pub fn with_domain_vector(mut self, on: bool) -> Self {
        self.domain_vector = on;
        self
    }

    /// Duration of one stacked encoder frame.
    pub fn frame_ms(&self) -> f64 {
        self.input_frame_ms * self.stride as f64
    }

    pub fn stacked_dim(&self) -> usize {
        self.feature_dim * self.stack
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::InvalidInput(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.stack != self.stride || self.stack == 0 {
            return Err(Error::InvalidInput(format!(
                "stacking factor {} must equal stride {}",
                self.stack, self.stride
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidInput(format!("dropout {}", self.dropout)));
        }
        Ok(())
    }
}

/// Concatenate `factor` consecutive raw frames every `stride` frames.
///
/// Output length is `ceil(len / stride)`; the final window is zero-padded.
pub fn stack_features(raw: &Tensor, factor: usize, stride: usize) -> Result<Tensor> {
    if raw.shape().len() != 2 || raw.rows() == 0 {
        return Err(Error::InvalidInput("stacking needs a non-empty frames × dim matrix".into()));
    }
    if factor == 0 || stride == 0 {
        return Err(Error::InvalidInput("stacking factor and stride must be positive".into()));
    }
    let (n, dim) = (raw.rows(), raw.cols());
    let out_len = n.div_ceil(stride);
    let mut data = vec![0.0; out_len * factor * dim];
    for j in 0..out_len {
        for w in 0..factor {
            let src = j * stride + w;
            if src < n {
                let dst = (j * factor + w) * dim;
                data[dst..dst + dim].copy_from_slice(raw.row_slice(src));
            }
        }
    }
    Tensor::matrix(out_len, factor * dim, data)
}

/// Append the one-hot domain vector to every row of a block.
pub fn inject_domain_vector(block: &Tensor, domain: Option<DomainVector>, enabled: bool) -> Result<Tensor> {
    match (enabled, domain) {
        (false, None) => Ok(block.clone()),
        (false, Some(_)) => Err(Error::InvalidInput(
            "domain vector supplied but the encoder was built without one".into(),
        )),
        (true, None) => Err(Error::InvalidInput("encoder expects a domain vector".into())),
        (true, Some(d)) => {
            let (rows, cols) = (block.rows(), block.cols());
            let mut data = Vec::with_capacity(rows * (cols + DomainVector::LEN));
            for r in 0..rows {
                data.extend_from_slice(block.row_slice(r));
                data.extend_from_slice(&d.one_hot());
            }
            Tensor::matrix(rows, cols + DomainVector::LEN, data)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|i| i as f64 + 1.0).collect()).unwrap()
    }

    #[test]
    fn twelve_frames_stack_to_two() {
        let s = stack_features(&ramp(12, 8), 6, 6).unwrap();
        assert_eq!(s.shape(), &[2, 48]);
        assert_eq!(s.row_slice(1)[0], 6.0 * 8.0 + 1.0);
    }

    #[test]
    fn thirteen_frames_pad_the_last_window() {
        let raw = ramp(13, 8);
        let s = stack_features(&raw, 6, 6).unwrap();
        assert_eq!(s.shape(), &[3, 48]);
        let last = s.row_slice(2);
        assert_eq!(&last[..8], raw.row_slice(12));
        assert!(last[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_input_stacks_to_constant() {
        let raw = Tensor::full(vec![18, 8], 0.25);
        let s = stack_features(&raw, 6, 6).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn empty_input_rejected() {
        assert!(stack_features(&Tensor::zeros(vec![0, 8]), 6, 6).is_err());
    }

    #[test]
    fn domain_vector_suffixes() {
        let b = ramp(3, 4);
        let v = inject_domain_vector(&b, Some(DomainId::VCmd.vector()), true).unwrap();
        assert_eq!(v.cols(), 6);
        assert_eq!(&v.row_slice(2)[4..], &[1.0, 0.0]);
        let d = inject_domain_vector(&b, Some(DomainId::Dictation.vector()), true).unwrap();
        assert_eq!(&d.row_slice(0)[4..], &[0.0, 1.0]);
        assert!(inject_domain_vector(&b, Some(DomainId::VCmd.vector()), false).is_err());
        assert!(inject_domain_vector(&b, None, true).is_err());
        assert_eq!(inject_domain_vector(&b, None, false).unwrap(), b);
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::toy().validate().is_ok());
        assert!(EncoderConfig::paper().validate().is_ok());
        let mut c = EncoderConfig::toy();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::toy();
        c.stride = 4;
        assert!(c.validate().is_err());
        assert_eq!(EncoderConfig::toy().frame_ms(), 60.0);
    }
}

#[cfg(test)]
mod forward_tests;
