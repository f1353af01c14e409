//! Soft syndrome, hinge syndrome loss and binary cross-entropy on the soft codeword.

use serde::{Deserialize, Serialize};

use crate::bits::BitVector;
use crate::decoder::sign;
use crate::polar::PolarCode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Label-free hinge loss on the frozen-bit soft syndrome.
    Syndrome,
    /// Binary cross-entropy against the transmitted codeword.
    Bce,
}

impl LossKind {
    pub fn needs_labels(self) -> bool {
        matches!(self, LossKind::Bce)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Syndrome => "syndrome",
            LossKind::Bce => "bce",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "syndrome" | "synd" => Ok(LossKind::Syndrome),
            "bce" => Ok(LossKind::Bce),
            other => Err(format!("unknown loss `{other}` (syndrome|bce)")),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Soft syndrome of one parity row: the smallest magnitude in the row
/// (first occurrence on ties), the sign product, and the resulting value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftCheck {
    pub argmin: usize,
    pub sign_product: f64,
    pub value: f64,
}

pub fn soft_check(s: &[f64], support: &[usize]) -> SoftCheck {
    let mut argmin = support[0];
    let mut min = f64::INFINITY;
    let mut prod = 1.0;
    for &j in support {
        let a = s[j].abs();
        if a < min {
            min = a;
            argmin = j;
        }
        prod *= sign(s[j]);
    }
    SoftCheck {
        argmin,
        sign_product: prod,
        value: prod * min,
    }
}

/// `softsynd(s)_i = min_{j∈M(i)} |s_j| · ∏_{j∈M(i)} sign(s_j)`, one entry per frozen bit.
pub fn soft_syndrome(s: &[f64], code: &PolarCode) -> Vec<f64> {
    assert_eq!(s.len(), code.n());
    code.row_supports()
        .iter()
        .map(|m| soft_check(s, m).value)
        .collect()
}

/// Mean over parity rows of `max(1 − softsynd_i, 0)`.
pub fn syndrome_loss(s: &[f64], code: &PolarCode) -> f64 {
    hinge_mean(&soft_syndrome(s, code))
}

/// `(1/len) Σ max(1 − v, 0)` over soft-syndrome rows.
pub fn hinge_mean(rows: &[f64]) -> f64 {
    rows.iter().map(|&v| (1.0 - v).max(0.0)).sum::<f64>() / rows.len() as f64
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−(1/N) Σ [c log g(−s) + (1−c) log(1 − g(−s))]`, written as
/// `c·softplus(s) + (1−c)·softplus(−s)` per bit.
pub fn bce_loss(c: &BitVector, s: &[f64]) -> f64 {
    assert_eq!(c.len(), s.len());
    let total: f64 = s
        .iter()
        .zip(c.iter())
        .map(|(&v, bit)| if bit { softplus(v) } else { softplus(-v) })
        .sum();
    total / s.len() as f64
}

/// Loss of one frame. `labels` is only read for [`LossKind::Bce`].
pub fn frame_loss(kind: LossKind, s: &[f64], code: &PolarCode, labels: Option<&BitVector>) -> Option<f64> {
    match kind {
        LossKind::Syndrome => Some(syndrome_loss(s, code)),
        LossKind::Bce => labels.map(|c| bce_loss(c, s)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::hard_codeword;
    use proptest::prelude::*;

    fn code84() -> PolarCode {
        PolarCode::construct(8, 4, 0.5).unwrap()
    }

    #[test]
    fn soft_check_example() {
        let chk = soft_check(&[3.0, -2.0, 5.0], &[0, 1, 2]);
        assert_eq!(chk.value, -2.0);
        assert_eq!(chk.argmin, 1);
        let tie = soft_check(&[2.0, -2.0], &[0, 1]);
        assert_eq!(tie.argmin, 0);
    }

    #[test]
    fn syndrome_examples() {
        let code = code84();
        assert!(soft_syndrome(&[10.0; 8], &code).iter().all(|&v| v == 10.0));
        assert_eq!(syndrome_loss(&[10.0; 8], &code), 0.0);
        assert_eq!(syndrome_loss(&[0.0; 8], &code), 1.0);
        assert_eq!(soft_syndrome(&[0.0; 8], &code), vec![0.0; 4]);
    }

    #[test]
    fn single_negative_row() {
        assert_eq!(hinge_mean(&[-2.0, 1.0, 1.0, 1.0]), 3.0 / 4.0);
        assert_eq!(hinge_mean(&[1.0, 5.0]), 0.0);
        assert_eq!(hinge_mean(&[0.5, 0.0]), 0.75);
    }

    #[test]
    fn bce_examples() {
        let c0 = BitVector::from_bits(&[0]).unwrap();
        assert!((bce_loss(&c0, &[0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(&c0, &[800.0]) < 1e-300);
        let c = BitVector::from_bits(&[0, 1]).unwrap();
        let expected = -(sigmoid(2.0)).ln();
        assert!((bce_loss(&c, &[2.0, -2.0]) - expected).abs() < 1e-15);
        assert!((expected - 0.126_928_011_042_972_6).abs() < 1e-15);
        // finite even at extreme inputs
        assert!(bce_loss(&c, &[-1e4, 1e4]).is_finite());
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("syndrome".parse::<LossKind>().unwrap(), LossKind::Syndrome);
        assert_eq!("BCE".parse::<LossKind>().unwrap(), LossKind::Bce);
        assert!("mse".parse::<LossKind>().is_err());
        assert!(frame_loss(LossKind::Bce, &[0.0; 8], &code84(), None).is_none());
    }

    #[test]
    fn sign_pattern_matches_hard_syndrome() {
        let code = code84();
        // every sign pattern at N=8, magnitudes 1..8
        for w in 0..256u32 {
            let s: Vec<f64> = (0..8)
                .map(|j| {
                    let mag = (j + 1) as f64;
                    if (w >> j) & 1 == 1 { -mag } else { mag }
                })
                .collect();
            let synd = code.syndrome(&hard_codeword(&s)).unwrap();
            for (i, v) in soft_syndrome(&s, &code).iter().enumerate() {
                assert_eq!(*v < 0.0, synd.get(i));
            }
        }
    }

    proptest! {
        #[test]
        fn zero_loss_implies_valid(s in proptest::collection::vec(-5.0f64..5.0, 8)) {
            let code = code84();
            let loss = syndrome_loss(&s, &code);
            // each hinge term is at most 1 + max|s|
            prop_assert!((0.0..=6.0).contains(&loss));
            let all_ge_1 = soft_syndrome(&s, &code).iter().all(|&v| v >= 1.0);
            prop_assert_eq!(loss == 0.0, all_ge_1);
            if loss == 0.0 {
                prop_assert!(code.syndrome(&hard_codeword(&s)).unwrap().is_zero());
            }
        }

        #[test]
        fn scaling_valid_patterns_never_increases_loss(
            bits in proptest::collection::vec(0u8..2, 4),
            mags in proptest::collection::vec(0.01f64..3.0, 8),
            l1 in 0.1f64..4.0,
            l2 in 0.1f64..4.0,
        ) {
            let code = code84();
            let c = code.encode(&BitVector::from_bits(&bits).unwrap()).unwrap();
            let s: Vec<f64> = c.iter().zip(&mags).map(|(b, m)| if b { -m } else { *m }).collect();
            let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
            let at = |l: f64| syndrome_loss(&s.iter().map(|v| v * l).collect::<Vec<_>>(), &code);
            prop_assert!(at(hi) <= at(lo) + 1e-12);
        }

        #[test]
        fn bce_is_non_negative(bits in proptest::collection::vec(0u8..2, 8), s in proptest::collection::vec(-40.0f64..40.0, 8)) {
            let c = BitVector::from_bits(&bits).unwrap();
            prop_assert!(bce_loss(&c, &s) > 0.0);
        }
    }
}
