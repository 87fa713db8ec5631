//! Half-precision storage conversion.
//!
//! Values beyond the binary16 range saturate to ±65504 instead of becoming
//! infinities; the number of clamped values is reported back so callers can
//! surface a warning.

pub use half::f16;

/// Largest finite binary16 magnitude.
pub const HALF_MAX: f32 = 65504.0;

#[derive(Clone, Debug, PartialEq)]
pub struct HalfEncoded {
    pub values: Vec<f16>,
    /// How many inputs were outside the representable range.
    pub clamped: usize,
}

/// Round-to-nearest-even conversion with saturation.
pub fn to_half(values: &[f32]) -> HalfEncoded {
    let mut clamped = 0;
    let values = values
        .iter()
        .map(|&v| {
            if v.abs() > HALF_MAX {
                clamped += 1;
                f16::from_f32(v.clamp(-HALF_MAX, HALF_MAX))
            } else {
                f16::from_f32(v)
            }
        })
        .collect();
    HalfEncoded { values, clamped }
}

pub fn from_half(values: &[f16]) -> Vec<f32> {
    values.iter().map(|v| v.to_f32()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Bit-level binary16 decoder, independent of the `half` crate.
    fn decode_bits(bits: u16) -> f64 {
        let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
        let exp = ((bits >> 10) & 0x1f) as i32;
        let frac = (bits & 0x3ff) as f64;
        match exp {
            0 => sign * frac * 2f64.powi(-24),
            31 => sign * f64::INFINITY,
            e => sign * (1.0 + frac / 1024.0) * 2f64.powi(e - 15),
        }
    }

    #[test]
    fn one_is_exact() {
        let h = to_half(&[1.0]);
        assert_eq!(h.values[0].to_bits(), 0x3c00);
        assert_eq!(from_half(&h.values), vec![1.0]);
        assert_eq!(h.clamped, 0);
    }

    #[test]
    fn point_one_rounds_to_nearest_representable() {
        let h = to_half(&[0.1]);
        let decoded = decode_bits(h.values[0].to_bits());
        assert!(((decoded - 0.1f32 as f64) / 0.1).abs() <= 2f64.powi(-11));
        // No other binary16 value is closer.
        let bits = h.values[0].to_bits();
        for neighbour in [bits - 1, bits + 1] {
            assert!((decode_bits(neighbour) - 0.1f32 as f64).abs() >= (decoded - 0.1f32 as f64).abs());
        }
    }

    #[test]
    fn overflow_saturates_and_is_counted() {
        let h = to_half(&[70000.0, -1e9, 3.0]);
        assert_eq!(from_half(&h.values), vec![65504.0, -65504.0, 3.0]);
        assert_eq!(h.clamped, 2);
    }

    proptest! {
        #[test]
        fn roundtrip_relative_error_bounded(mag in 6.2e-5f32..65504.0, neg in any::<bool>()) {
            let v = if neg { -mag } else { mag };
            let h = to_half(&[v]);
            let back = from_half(&h.values)[0];
            prop_assert_eq!(back as f64, decode_bits(h.values[0].to_bits()));
            prop_assert!(((back - v) / v).abs() as f64 <= 2f64.powi(-11));
        }
    }
}
