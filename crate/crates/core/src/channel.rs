//! BPSK over AWGN and the channel LLR.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bits::BitVector;
use crate::error::{Error, Result};

/// Seedable generator used for every random draw in the crate.
pub type SimRng = ChaCha8Rng;

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn substream(seed: u64, stream: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// How an SNR figure in dB maps to the noise variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnrConvention {
    /// Eb/N0: `σ² = 1 / (2·R·10^{snr/10})`.
    #[default]
    Ebn0,
    /// Es/N0: `σ² = 1 / (2·10^{snr/10})`.
    Esn0,
}

impl std::str::FromStr for SnrConvention {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ebn0" => Ok(SnrConvention::Ebn0),
            "esn0" => Ok(SnrConvention::Esn0),
            other => Err(format!("unknown SNR convention `{other}` (ebn0|esn0)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelParams {
    pub snr_db: f64,
    pub rate: f64,
    pub sigma: f64,
    pub sigma_sq: f64,
}

impl ChannelParams {
    pub fn from_snr(snr_db: f64, rate: f64, convention: SnrConvention) -> Result<Self> {
        if !(rate > 0.0 && rate < 1.0) {
            return Err(Error::Config(format!("code rate {rate} outside (0, 1)")));
        }
        if !snr_db.is_finite() {
            return Err(Error::Config(format!("SNR {snr_db} dB is not finite")));
        }
        let linear = 10f64.powf(snr_db / 10.0);
        let sigma_sq = match convention {
            SnrConvention::Ebn0 => 1.0 / (2.0 * rate * linear),
            SnrConvention::Esn0 => 1.0 / (2.0 * linear),
        };
        Ok(ChannelParams {
            snr_db,
            rate,
            sigma: sigma_sq.sqrt(),
            sigma_sq,
        })
    }
}

/// Eb/N0 mapping.
pub fn sigma_from_snr(snr_db: f64, rate: f64) -> Result<ChannelParams> {
    ChannelParams::from_snr(snr_db, rate, SnrConvention::Ebn0)
}

/// `x = 1 − 2c`.
pub fn bpsk_modulate(c: &BitVector) -> Vec<f64> {
    c.iter().map(|b| if b { -1.0 } else { 1.0 }).collect()
}

/// `c = 0.5 − 0.5·sign(x)` with `sign(0) = +1`.
pub fn bpsk_demodulate(x: &[f64]) -> BitVector {
    let bits: Vec<bool> = x.iter().map(|&v| v < 0.0).collect();
    BitVector::from_bools(&bits)
}

/// `y = x + n`, `n ~ N(0, σ²)` i.i.d.
pub fn transmit<R: Rng + ?Sized>(x: &[f64], params: &ChannelParams, rng: &mut R) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            v + params.sigma * n
        })
        .collect()
}

/// `llr = 2y/σ²`; positive values favour bit 0.
pub fn llr_from_observation(y: &[f64], params: &ChannelParams) -> Vec<f64> {
    let scale = 2.0 / params.sigma_sq;
    y.iter().map(|&v| scale * v).collect()
}

/// One transmitted frame.
#[derive(Clone, Debug)]
pub struct Frame {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub llr: Vec<f64>,
}

impl Frame {
    pub fn simulate<R: Rng + ?Sized>(c: &BitVector, params: &ChannelParams, rng: &mut R) -> Self {
        let x = bpsk_modulate(c);
        let y = transmit(&x, params, rng);
        let llr = llr_from_observation(&y, params);
        Frame { x, y, llr }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modulation() {
        let c = BitVector::from_bits(&[0, 1, 0]).unwrap();
        assert_eq!(bpsk_modulate(&c), vec![1.0, -1.0, 1.0]);
        assert_eq!(bpsk_demodulate(&bpsk_modulate(&c)), c);
        assert!(bpsk_modulate(&BitVector::zeros(5)).iter().all(|&v| v == 1.0));
        assert_eq!(bpsk_demodulate(&[0.0, -0.0, -1e-300]).to_bytes(), vec![0, 0, 1]);
    }

    #[test]
    fn snr_mapping() {
        let p = sigma_from_snr(0.0, 0.5).unwrap();
        assert_eq!(p.sigma_sq, 1.0);
        let p = sigma_from_snr(3.0103, 0.5).unwrap();
        assert!((p.sigma_sq - 0.5).abs() < 1e-4);
        let es = ChannelParams::from_snr(0.0, 0.5, SnrConvention::Esn0).unwrap();
        assert_eq!(es.sigma_sq, 0.5);
        let mut prev = f64::INFINITY;
        for tenth in -20..80 {
            let p = sigma_from_snr(tenth as f64 / 10.0, 0.5).unwrap();
            assert!(p.sigma_sq < prev);
            assert!((p.sigma * p.sigma - p.sigma_sq).abs() < 1e-15);
            prev = p.sigma_sq;
        }
        assert!(sigma_from_snr(1.0, 1.0).is_err());
        assert!(sigma_from_snr(1.0, 0.0).is_err());
    }

    #[test]
    fn llr_examples() {
        let p1 = ChannelParams { snr_db: 0.0, rate: 0.5, sigma: 1.0, sigma_sq: 1.0 };
        assert_eq!(llr_from_observation(&[1.0], &p1), vec![2.0]);
        let p2 = ChannelParams { snr_db: 0.0, rate: 0.5, sigma: 0.5f64.sqrt(), sigma_sq: 0.5 };
        assert_eq!(llr_from_observation(&[-0.5], &p2), vec![-2.0]);
        let y = [0.3, -1.2, 2.5];
        let scaled: Vec<f64> = y.iter().map(|v| 3.0 * v).collect();
        for (a, b) in llr_from_observation(&scaled, &p2)
            .iter()
            .zip(llr_from_observation(&y, &p2))
        {
            assert!((a - 3.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_and_seeded() {
        let p = ChannelParams { snr_db: 300.0, rate: 0.5, sigma: 0.0, sigma_sq: 1e-30 };
        let x = [1.0, -1.0, 1.0];
        let mut rng = substream(1, 0);
        assert_eq!(transmit(&x, &p, &mut rng), x.to_vec());

        let p = sigma_from_snr(1.0, 0.5).unwrap();
        let a = transmit(&x, &p, &mut substream(42, 3));
        let b = transmit(&x, &p, &mut substream(42, 3));
        let c = transmit(&x, &p, &mut substream(42, 4));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn noise_statistics() {
        let p = sigma_from_snr(1.0, 0.5).unwrap();
        let x = vec![1.0; 100_000];
        let y = transmit(&x, &p, &mut substream(7, 0));
        let n: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
        let mean = n.iter().sum::<f64>() / n.len() as f64;
        let var = n.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n.len() - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var / p.sigma_sq - 1.0).abs() < 0.02, "var {var} vs {}", p.sigma_sq);
    }

    #[test]
    fn noiseless_sign_consistency() {
        let c = BitVector::from_bits(&[1, 0, 0, 1, 1]).unwrap();
        let p = sigma_from_snr(2.0, 0.5).unwrap();
        let x = bpsk_modulate(&c);
        let llr = llr_from_observation(&x, &p);
        assert_eq!(bpsk_demodulate(&llr), c);
    }
}
