//! Trainable scaling weights and their checkpoint file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "polar-nnbp-weights";
pub const CHECKPOINT_VERSION: u32 = 1;

/// α for L columns `1..=n` and β for R columns `2..=n+1`, one value per graph node.
/// Shared by every BP iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingWeights {
    len: usize,
    stages: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl ScalingWeights {
    /// All-ones weights: conventional min-sum BP.
    pub fn ones(block_len: usize) -> Self {
        assert!(block_len >= 2 && block_len.is_power_of_two());
        let stages = block_len.trailing_zeros() as usize;
        ScalingWeights {
            len: block_len,
            stages,
            alpha: vec![1.0; stages * block_len],
            beta: vec![1.0; stages * block_len],
        }
    }

    pub fn from_parts(block_len: usize, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if block_len < 2 || !block_len.is_power_of_two() {
            return Err(Error::BlockLength(block_len));
        }
        let stages = block_len.trailing_zeros() as usize;
        let expected = stages * block_len;
        for (what, v) in [("alpha", &alpha), ("beta", &beta)] {
            if v.len() != expected {
                return Err(Error::Length {
                    what,
                    expected,
                    actual: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Checkpoint(format!("non-finite {what} entry")));
            }
        }
        Ok(ScalingWeights {
            len: block_len,
            stages,
            alpha,
            beta,
        })
    }

    pub fn block_len(&self) -> usize {
        self.len
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.alpha.len() + self.beta.len()
    }

    /// α of L column `stage ∈ 1..=n`.
    #[inline]
    pub fn alpha_stage(&self, stage: usize) -> &[f64] {
        let s = (stage - 1) * self.len;
        &self.alpha[s..s + self.len]
    }

    /// β of R column `stage ∈ 2..=n+1`.
    #[inline]
    pub fn beta_stage(&self, stage: usize) -> &[f64] {
        let s = (stage - 2) * self.len;
        &self.beta[s..s + self.len]
    }

    /// Stage-major flattened α.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_mut(&mut self) -> &mut [f64] {
        &mut self.alpha
    }

    pub fn beta_mut(&mut self) -> &mut [f64] {
        &mut self.beta
    }

    /// Parameter `p` in the order α then β.
    pub fn param(&self, p: usize) -> f64 {
        if p < self.alpha.len() {
            self.alpha[p]
        } else {
            self.beta[p - self.alpha.len()]
        }
    }

    pub fn param_mut(&mut self, p: usize) -> &mut f64 {
        let na = self.alpha.len();
        if p < na {
            &mut self.alpha[p]
        } else {
            &mut self.beta[p - na]
        }
    }

    /// Human-readable name of parameter `p`, e.g. `alpha[2][5]`.
    pub fn param_name(&self, p: usize) -> String {
        let na = self.alpha.len();
        if p < na {
            format!("alpha[{}][{}]", p / self.len + 1, p % self.len)
        } else {
            let q = p - na;
            format!("beta[{}][{}]", q / self.len + 2, q % self.len)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().chain(&self.beta).all(|v| v.is_finite())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    #[serde(rename = "N")]
    block_len: usize,
    n: usize,
    #[serde(rename = "T")]
    iterations: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

/// Weights together with the iteration count they were trained for.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iterations: usize,
    pub weights: ScalingWeights,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            block_len: self.weights.block_len(),
            n: self.weights.stages(),
            iterations: self.iterations,
            alpha: self.weights.alpha.clone(),
            beta: self.weights.beta.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format `{}`", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", file.version)));
        }
        if file.block_len != 1usize.checked_shl(file.n as u32).unwrap_or(0) {
            return Err(Error::Checkpoint(format!(
                "N={} inconsistent with n={}",
                file.block_len, file.n
            )));
        }
        let weights = ScalingWeights::from_parts(file.block_len, file.alpha, file.beta)?;
        Ok(Checkpoint {
            iterations: file.iterations,
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn indexing() {
        let w = ScalingWeights::ones(8);
        assert_eq!(w.num_params(), 48);
        assert_eq!(w.param_name(0), "alpha[1][0]");
        assert_eq!(w.param_name(23), "alpha[3][7]");
        assert_eq!(w.param_name(24), "beta[2][0]");
        assert_eq!(w.param_name(47), "beta[4][7]");
        assert_eq!(w.alpha_stage(3).len(), 8);
        assert_eq!(w.beta_stage(4).len(), 8);
    }

    #[test]
    fn rejects_bad_checkpoints() {
        assert!(ScalingWeights::from_parts(8, vec![1.0; 24], vec![1.0; 23]).is_err());
        assert!(ScalingWeights::from_parts(8, vec![f64::NAN; 24], vec![1.0; 24]).is_err());
        let good = Checkpoint { iterations: 5, weights: ScalingWeights::ones(4) }.to_json().unwrap();
        assert!(Checkpoint::from_json(&good.replace("\"n\": 2", "\"n\": 3")).is_err());
        assert!(Checkpoint::from_json(&good.replace("\"version\": 1", "\"version\": 9")).is_err());
        assert!(Checkpoint::from_json("{}").is_err());
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_exact(vals in proptest::collection::vec(-1e3f64..1e3, 48)) {
            let w = ScalingWeights::from_parts(8, vals[..24].to_vec(), vals[24..].to_vec()).unwrap();
            let ck = Checkpoint { iterations: 3, weights: w };
            let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }
}
