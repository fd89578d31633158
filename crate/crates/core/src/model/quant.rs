//! Symmetric signed 4-bit per-group weight quantization.

use crate::autodiff::Tensor;
use crate::error::{shape_err, Result};

pub const CODE_MIN: i8 = -8;
pub const CODE_MAX: i8 = 7;

/// Frozen linear weight stored as 4-bit codes (one `i8` per code) with one
/// scale per `group_size` consecutive entries of each output row.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLinear {
    rows: usize,
    cols: usize,
    group_size: usize,
    codes: Vec<i8>,
    scales: Vec<f32>,
    bias: Option<Vec<f32>>,
}

impl QuantizedLinear {
    /// Rebuilds a quantized weight from stored parts (checkpoint loading).
    pub fn from_parts(
        rows: usize,
        cols: usize,
        group_size: usize,
        codes: Vec<i8>,
        scales: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Result<Self> {
        if group_size == 0 || cols % group_size != 0 {
            return Err(shape_err("quantize", format!("group size {group_size} vs row length {cols}")));
        }
        if codes.len() != rows * cols || scales.len() != rows * cols / group_size {
            return Err(shape_err(
                "quantize",
                format!("{} codes / {} scales for a {rows}x{cols} weight", codes.len(), scales.len()),
            ));
        }
        if codes.iter().any(|c| !(CODE_MIN..=CODE_MAX).contains(c)) {
            return Err(shape_err("quantize", "code outside the signed 4-bit range"));
        }
        if bias.as_ref().is_some_and(|b| b.len() != rows) {
            return Err(shape_err("quantize", "bias length does not match rows"));
        }
        Ok(Self {
            rows,
            cols,
            group_size,
            codes,
            scales,
            bias,
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn bias(&self) -> Option<&[f32]> {
        self.bias.as_deref()
    }

    pub fn max_scale(&self) -> f32 {
        self.scales.iter().fold(0.0, |m, &s| m.max(s))
    }
}

/// Quantizes a `[rows, cols]` matrix with `scale = max|w| / 7` per group.
/// All-zero groups get scale 1.0 and zero codes.
pub fn quantize_weights(w: &Tensor, group_size: usize) -> Result<QuantizedLinear> {
    let (rows, cols) = w.dims2("quantize")?;
    if group_size == 0 || cols % group_size != 0 {
        return Err(shape_err(
            "quantize",
            format!("group size {group_size} does not divide row length {cols}"),
        ));
    }
    let mut codes = Vec::with_capacity(w.numel());
    let mut scales = Vec::with_capacity(w.numel() / group_size);
    for group in w.data().chunks_exact(group_size) {
        let max_abs = group.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let scale = if max_abs > 0.0 { max_abs / CODE_MAX as f32 } else { 1.0 };
        scales.push(scale);
        codes.extend(
            group
                .iter()
                .map(|&v| (v / scale).round().clamp(CODE_MIN as f32, CODE_MAX as f32) as i8),
        );
    }
    Ok(QuantizedLinear {
        rows,
        cols,
        group_size,
        codes,
        scales,
        bias: None,
    })
}

/// `codes * scale`, group by group.
pub fn dequantize(q: &QuantizedLinear) -> Tensor {
    let mut data = Vec::with_capacity(q.codes.len());
    for (group, &scale) in q.codes.chunks_exact(q.group_size).zip(&q.scales) {
        data.extend(group.iter().map(|&c| c as f32 * scale));
    }
    Tensor::new(vec![q.rows, q.cols], data).expect("codes cover the weight")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_round_trip_to_zeros() {
        let w = Tensor::zeros(&[4, 64]);
        let q = quantize_weights(&w, 32).unwrap();
        assert!(q.scales().iter().all(|&s| s == 1.0));
        assert!(q.codes().iter().all(|&c| c == 0));
        assert_eq!(dequantize(&q), w);
    }

    #[test]
    fn linspace_group() {
        // -0.7 ..= 0.7 in 7 points; scale 0.1, codes -7, -5, -2, 0, 2, 5, 7.
        let data: Vec<f32> = (0..7).map(|i| -0.7 + 1.4 * i as f32 / 6.0).collect();
        let w = Tensor::new(vec![1, 7], data.clone()).unwrap();
        let q = quantize_weights(&w, 7).unwrap();
        assert!((q.scales()[0] - 0.1).abs() < 1e-7);
        assert_eq!(q.codes(), &[-7, -5, -2, 0, 2, 5, 7]);
        let back = dequantize(&q);
        for (a, b) in back.data().iter().zip(&data) {
            assert!((a - b).abs() <= 0.05);
        }
    }

    #[test]
    fn group_must_divide_row() {
        let w = Tensor::zeros(&[2, 10]);
        assert!(quantize_weights(&w, 4).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_within_half_scale(
            vals in proptest::collection::vec(-1.0f32..1.0, 64),
            group in prop_oneof![Just(4usize), Just(8), Just(16), Just(32)],
        ) {
            let w = Tensor::new(vec![2, 32], vals).unwrap();
            let q = quantize_weights(&w, group).unwrap();
            let back = dequantize(&q);
            for (i, (a, b)) in back.data().iter().zip(w.data()).enumerate() {
                let scale = q.scales()[i / group];
                prop_assert!((a - b).abs() <= scale / 2.0 * (1.0 + 1e-5));
            }
            prop_assert!(q.codes().iter().all(|c| (CODE_MIN..=CODE_MAX).contains(c)));
        }
    }
}
