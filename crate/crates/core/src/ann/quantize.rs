//! Per-vector affine 8-bit scalar quantization with asymmetric scoring: the
//! query stays at full precision, documents are scored from their codes.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantization {
    None,
    #[default]
    Scalar8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarCode {
    pub min: f32,
    pub scale: f32,
    pub codes: Vec<u8>,
}

/// `value ≈ min + scale * code`, with `scale = (max - min) / 255`.
pub fn quantize(v: &[f32]) -> ScalarCode {
    let (min, max) = v.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if v.is_empty() {
        return ScalarCode { min: 0.0, scale: 0.0, codes: Vec::new() };
    }
    let scale = (max - min) / 255.0;
    let codes = if scale > 0.0 {
        v.iter().map(|&x| ((x - min) / scale).round().clamp(0.0, 255.0) as u8).collect()
    } else {
        vec![0; v.len()]
    };
    ScalarCode { min, scale, codes }
}

pub fn dequantize(code: &ScalarCode) -> Vec<f32> {
    code.codes.iter().map(|&c| code.min + code.scale * c as f32).collect()
}

/// `dot(query, dequantize(code))` without materializing the vector.
#[inline]
pub fn asymmetric_dot(query: &[f32], query_sum: f32, min: f32, scale: f32, codes: &[u8]) -> f32 {
    let raw: f32 = query.iter().zip(codes).map(|(&q, &c)| q * c as f32).sum();
    min * query_sum + scale * raw
}

impl Quantization {
    /// What the approximate scan sees for `v`.
    pub fn reconstruct(self, v: &[f32]) -> Vec<f32> {
        match self {
            Quantization::None => v.to_vec(),
            Quantization::Scalar8 => dequantize(&quantize(v)),
        }
    }

    pub(crate) fn tag(self) -> u32 {
        match self {
            Quantization::None => 0,
            Quantization::Scalar8 => 1,
        }
    }

    pub(crate) fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Quantization::None),
            1 => Some(Quantization::Scalar8),
            _ => None,
        }
    }
}
