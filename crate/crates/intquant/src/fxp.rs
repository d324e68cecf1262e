//! Signed fixed-point arithmetic with hardware shifter semantics.
//!
//! Values are stored as raw integer units scaled by `2^frac_bits`. Right
//! shifts are arithmetic (floor, sign-propagating), multiplication truncates
//! after the fractional down-shift, and every operation saturates to the
//! format's range instead of wrapping, setting a sticky flag in the
//! caller-supplied [`FxStatus`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FxError {
    #[error("format mismatch: {0} vs {1}")]
    FormatMismatch(FxFormat, FxFormat),
    #[error("invalid format: total_bits {total}, frac_bits {frac} (need 0 < frac_bits < total_bits <= 63)")]
    BadFormat { total: u32, frac: u32 },
    #[error("msb position is undefined for a non-positive value")]
    NonPositive,
}

/// Bit layout of a signed fixed-point word: `total_bits` including sign,
/// of which the low `frac_bits` are fractional.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct FxFormat {
    total_bits: u32,
    frac_bits: u32,
}

impl std::fmt::Display for FxFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Q{}.{}", self.total_bits - self.frac_bits, self.frac_bits)
    }
}

impl FxFormat {
    /// Default format for kernel-internal arithmetic: 32-bit word, 16
    /// fractional bits.
    pub const Q16_16: FxFormat = FxFormat {
        total_bits: 32,
        frac_bits: 16,
    };

    pub fn new(total_bits: u32, frac_bits: u32) -> Result<Self, FxError> {
        if frac_bits == 0 || frac_bits >= total_bits || total_bits > 63 {
            return Err(FxError::BadFormat {
                total: total_bits,
                frac: frac_bits,
            });
        }
        Ok(FxFormat {
            total_bits,
            frac_bits,
        })
    }

    pub fn total_bits(self) -> u32 {
        self.total_bits
    }

    pub fn frac_bits(self) -> u32 {
        self.frac_bits
    }

    /// Scaling factor `2^frac_bits` in raw units per 1.0.
    pub fn scale(self) -> i64 {
        1i64 << self.frac_bits
    }

    pub fn max_raw(self) -> i64 {
        (1i64 << (self.total_bits - 1)) - 1
    }

    pub fn min_raw(self) -> i64 {
        -(1i64 << (self.total_bits - 1))
    }

    /// One step of the fixed-point grid as a real number.
    pub fn ulp(self) -> f64 {
        1.0 / self.scale() as f64
    }
}

/// Sticky per-call status flags. One instance per logical computation;
/// never shared across concurrent calls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FxStatus {
    /// Set when any intermediate saturated to the format range.
    pub overflow: bool,
}

/// A fixed-point scalar: raw integer units plus the format that scales them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FxValue {
    raw: i64,
    fmt: FxFormat,
}

impl FxValue {
    pub fn zero(fmt: FxFormat) -> FxValue {
        FxValue { raw: 0, fmt }
    }

    pub fn one(fmt: FxFormat) -> FxValue {
        FxValue {
            raw: fmt.scale(),
            fmt,
        }
    }

    /// Wraps raw units, saturating to the representable range.
    pub fn from_raw(raw: i64, fmt: FxFormat, status: &mut FxStatus) -> FxValue {
        Self::clamp128(raw as i128, fmt, status)
    }

    /// Encodes a real number with round-half-away-from-zero.
    pub fn from_real(v: f64, fmt: FxFormat, status: &mut FxStatus) -> FxValue {
        if !v.is_finite() {
            status.overflow = true;
            let raw = if v.is_sign_negative() {
                fmt.min_raw()
            } else {
                fmt.max_raw()
            };
            return FxValue { raw, fmt };
        }
        let scaled = (v * fmt.scale() as f64).round();
        if scaled > fmt.max_raw() as f64 {
            status.overflow = true;
            FxValue {
                raw: fmt.max_raw(),
                fmt,
            }
        } else if scaled < fmt.min_raw() as f64 {
            status.overflow = true;
            FxValue {
                raw: fmt.min_raw(),
                fmt,
            }
        } else {
            FxValue {
                raw: scaled as i64,
                fmt,
            }
        }
    }

    pub fn from_int(i: i64, fmt: FxFormat, status: &mut FxStatus) -> FxValue {
        Self::clamp128((i as i128) << fmt.frac_bits, fmt, status)
    }

    pub fn to_real(self) -> f64 {
        self.raw as f64 / self.fmt.scale() as f64
    }

    pub fn raw(self) -> i64 {
        self.raw
    }

    pub fn format(self) -> FxFormat {
        self.fmt
    }

    fn clamp128(wide: i128, fmt: FxFormat, status: &mut FxStatus) -> FxValue {
        let raw = if wide > fmt.max_raw() as i128 {
            status.overflow = true;
            fmt.max_raw()
        } else if wide < fmt.min_raw() as i128 {
            status.overflow = true;
            fmt.min_raw()
        } else {
            wide as i64
        };
        FxValue { raw, fmt }
    }

    fn check_fmt(self, other: FxValue) -> Result<(), FxError> {
        if self.fmt != other.fmt {
            Err(FxError::FormatMismatch(self.fmt, other.fmt))
        } else {
            Ok(())
        }
    }

    pub fn add(self, other: FxValue, status: &mut FxStatus) -> Result<FxValue, FxError> {
        self.check_fmt(other)?;
        Ok(Self::clamp128(
            self.raw as i128 + other.raw as i128,
            self.fmt,
            status,
        ))
    }

    pub fn sub(self, other: FxValue, status: &mut FxStatus) -> Result<FxValue, FxError> {
        self.check_fmt(other)?;
        Ok(Self::clamp128(
            self.raw as i128 - other.raw as i128,
            self.fmt,
            status,
        ))
    }

    /// Fixed-point product: double-width multiply, then arithmetic right
    /// shift by `frac_bits` (truncating toward −∞).
    pub fn mul(self, other: FxValue, status: &mut FxStatus) -> Result<FxValue, FxError> {
        self.check_fmt(other)?;
        let wide = (self.raw as i128 * other.raw as i128) >> self.fmt.frac_bits;
        Ok(Self::clamp128(wide, self.fmt, status))
    }

    /// Arithmetic right shift: sign-propagating, floor semantics.
    pub fn shr(self, n: u32) -> FxValue {
        let n = n.min(63);
        FxValue {
            raw: self.raw >> n,
            fmt: self.fmt,
        }
    }

    /// Left shift with saturation.
    pub fn shl(self, n: u32, status: &mut FxStatus) -> FxValue {
        if n >= 64 {
            // any nonzero value saturates at this point
            return if self.raw == 0 {
                self
            } else {
                Self::clamp128(
                    if self.raw > 0 { i128::MAX } else { i128::MIN },
                    self.fmt,
                    status,
                )
            };
        }
        Self::clamp128((self.raw as i128) << n, self.fmt, status)
    }

    /// Smallest integer ≥ value, as a plain integer.
    pub fn ceil_int(self) -> i64 {
        let scale = self.fmt.scale() as i128;
        ((self.raw as i128 + (scale - 1)) >> self.fmt.frac_bits) as i64
    }

    /// MSB index of the value, i.e. `floor(log2(value))`. Defined for
    /// strictly positive values only.
    pub fn msb_pos(self) -> Result<i32, FxError> {
        if self.raw <= 0 {
            return Err(FxError::NonPositive);
        }
        let msb_raw = 63 - self.raw.leading_zeros() as i32;
        Ok(msb_raw - self.fmt.frac_bits as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const Q: FxFormat = FxFormat::Q16_16;

    fn fx(v: f64) -> FxValue {
        let mut st = FxStatus::default();
        let out = FxValue::from_real(v, Q, &mut st);
        assert!(!st.overflow, "unexpected saturation encoding {v}");
        out
    }

    #[test]
    fn from_real_grid_examples() {
        assert_eq!(fx(1.0).raw(), 65536);
        assert_eq!(fx(0.998).raw(), 65405);
        assert_eq!(fx(-1.4375).raw(), -94208);
    }

    #[test]
    fn from_real_saturates_and_flags() {
        let mut st = FxStatus::default();
        let v = FxValue::from_real(1e9, Q, &mut st);
        assert_eq!(v.raw(), Q.max_raw());
        assert!(st.overflow);

        let mut st = FxStatus::default();
        let v = FxValue::from_real(-1e9, Q, &mut st);
        assert_eq!(v.raw(), Q.min_raw());
        assert!(st.overflow);
    }

    #[test]
    fn shr_is_arithmetic() {
        let mut st = FxStatus::default();
        let neg_one_raw = FxValue::from_raw(-1, Q, &mut st);
        assert_eq!(neg_one_raw.shr(1).raw(), -1);
        assert_eq!(fx(-1.0).shr(4).raw(), -4096);
        assert_eq!(fx(-1.0).shr(4).to_real(), -0.0625);
    }

    #[test]
    fn mul_examples() {
        let mut st = FxStatus::default();
        let p = fx(1.5).mul(fx(2.0), &mut st).unwrap();
        assert_eq!(p, fx(3.0));
        assert!(!st.overflow);
    }

    #[test]
    fn mul_saturates_with_flag() {
        let mut st = FxStatus::default();
        let big = fx(30000.0);
        let p = big.mul(big, &mut st).unwrap();
        assert_eq!(p.raw(), Q.max_raw());
        assert!(st.overflow);
    }

    #[test]
    fn format_mismatch_is_an_error() {
        let mut st = FxStatus::default();
        let a = fx(1.0);
        let b = FxValue::from_real(1.0, FxFormat::new(32, 20).unwrap(), &mut st);
        assert!(matches!(a.add(b, &mut st), Err(FxError::FormatMismatch(_, _))));
    }

    #[test]
    fn ceil_examples() {
        assert_eq!(fx(-1.4375).ceil_int(), -1);
        assert_eq!(fx(0.0).ceil_int(), 0);
        assert_eq!(fx(-0.0001).ceil_int(), 0);
        assert_eq!(fx(2.0).ceil_int(), 2);
        assert_eq!(fx(-3.0).ceil_int(), -3);
    }

    #[test]
    fn msb_examples() {
        assert_eq!(fx(1.0).msb_pos().unwrap(), 0);
        assert_eq!(fx(8.0).msb_pos().unwrap(), 3);
        assert_eq!(fx(1.5).msb_pos().unwrap(), 0);
        assert_eq!(fx(0.5).msb_pos().unwrap(), -1);
        assert!(fx(0.0).msb_pos().is_err());
        assert!(fx(-2.0).msb_pos().is_err());
    }

    #[test]
    fn bad_format_rejected() {
        assert!(FxFormat::new(32, 0).is_err());
        assert!(FxFormat::new(16, 16).is_err());
        assert!(FxFormat::new(64, 16).is_err());
        assert!(FxFormat::new(32, 16).is_ok());
    }

    proptest! {
        #[test]
        fn shr_matches_floor_division(raw in -(1i64 << 31)..(1i64 << 31) - 1, n in 0u32..20) {
            let mut st = FxStatus::default();
            let a = FxValue::from_raw(raw, Q, &mut st);
            let shifted = a.shr(n);
            let expect = (raw as f64 / (1u64 << n) as f64).floor();
            prop_assert_eq!(shifted.raw() as f64, expect);
        }

        #[test]
        fn round_trip_on_grid(raw in -(1i64 << 31)..(1i64 << 31) - 1) {
            let mut st = FxStatus::default();
            let a = FxValue::from_raw(raw, Q, &mut st);
            let back = FxValue::from_real(a.to_real(), Q, &mut st);
            prop_assert_eq!(a, back);
            prop_assert!(!st.overflow);
        }

        #[test]
        fn add_agrees_with_exact_when_in_range(a in -1_000_000i64..1_000_000, b in -1_000_000i64..1_000_000) {
            let mut st = FxStatus::default();
            let x = FxValue::from_raw(a, Q, &mut st);
            let y = FxValue::from_raw(b, Q, &mut st);
            let s = x.add(y, &mut st).unwrap();
            prop_assert_eq!(s.raw(), a + b);
            prop_assert!(!st.overflow);
        }

        #[test]
        fn saturation_never_wraps(a in any::<i32>(), b in any::<i32>()) {
            let mut st = FxStatus::default();
            let x = FxValue::from_raw(a as i64, Q, &mut st);
            let y = FxValue::from_raw(b as i64, Q, &mut st);
            let s = x.add(y, &mut st).unwrap();
            prop_assert!(s.raw() <= Q.max_raw() && s.raw() >= Q.min_raw());
            let exact = a as i64 + b as i64;
            if exact > Q.max_raw() || exact < Q.min_raw() {
                prop_assert!(st.overflow);
                prop_assert!(s.raw() == Q.max_raw() || s.raw() == Q.min_raw());
            } else {
                prop_assert_eq!(s.raw(), exact);
            }
        }
    }
}
