//! Polar code construction, encoding and the frozen-bit parity check.
//!
//! Vectors are treated as rows: a message `u` is encoded as `c = u·G` with
//! `G = F^{⊗n}·B`, `F = [[1,0],[1,1]]` and `B` the bit-reversal permutation.
//! Because `G·G = I`, the message is recovered as `u = c·G`, so the frozen
//! positions give the parity constraints `(c·G)_j = 0` for every frozen `j`.
//! Row `i` of the parity-check matrix is therefore column `A_c[i]` of `G`.

use std::fmt::Write as _;
use std::path::Path;

use crate::bits::{BitMatrix, BitVector};
use crate::error::{Error, Result};

/// Largest block length for which the generator is materialised.
pub const MAX_BLOCK_LENGTH: usize = 4096;

const MAX_STAGES: u32 = 30;

fn check_stages(n: u32) -> Result<()> {
    if n == 0 || n > MAX_STAGES {
        return Err(Error::StageCount(n));
    }
    Ok(())
}

#[inline]
pub(crate) fn reverse_bits(j: usize, n: u32) -> usize {
    j.reverse_bits() >> (usize::BITS - n)
}

/// Bit-reversal permutation of `0..2^n`. The permutation is its own inverse.
pub fn bit_reversal_permutation(n: u32) -> Result<Vec<usize>> {
    check_stages(n)?;
    Ok((0..1usize << n).map(|j| reverse_bits(j, n)).collect())
}

/// `F^{⊗n}·B` over GF(2).
///
/// Entry `(r, c)` of `F^{⊗n}` is 1 iff the bits of `c` are a subset of the bits
/// of `r`; multiplying by `B` on the right permutes the columns.
pub fn build_generator(n: u32) -> Result<BitMatrix> {
    check_stages(n)?;
    let len = 1usize << n;
    if len > MAX_BLOCK_LENGTH {
        return Err(Error::BlockLength(len));
    }
    let mut g = BitMatrix::zeros(len, len);
    for r in 0..len {
        for c in 0..len {
            let k = reverse_bits(c, n);
            if k & !r == 0 {
                g.set(r, c, true);
            }
        }
    }
    Ok(g)
}

/// Bhattacharyya parameters of the synthesized channels for a BEC with
/// erasure probability `design_erasure`.
pub fn bhattacharyya_parameters(block_len: usize, design_erasure: f64) -> Result<Vec<f64>> {
    if block_len < 2 || !block_len.is_power_of_two() {
        return Err(Error::BlockLength(block_len));
    }
    if !(design_erasure > 0.0 && design_erasure < 1.0) {
        return Err(Error::DesignErasure(design_erasure));
    }
    let mut z = vec![design_erasure];
    while z.len() < block_len {
        z = z.iter().flat_map(|&p| [2.0 * p - p * p, p * p]).collect();
    }
    Ok(z)
}

/// Selects the `k` most reliable positions (smallest Bhattacharyya parameter).
/// Ties go to the larger index. The result is sorted ascending.
pub fn construct_frozen_set(block_len: usize, k: usize, design_erasure: f64) -> Result<Vec<usize>> {
    if k == 0 || k >= block_len {
        return Err(Error::Dimensions { n: block_len, k });
    }
    let z = bhattacharyya_parameters(block_len, design_erasure)?;
    let mut order: Vec<usize> = (0..block_len).collect();
    order.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(b.cmp(&a)));
    let mut info: Vec<usize> = order.into_iter().take(k).collect();
    info.sort_unstable();
    Ok(info)
}

/// An `(N, K)` polar code with its generator and frozen-bit parity check.
#[derive(Clone, Debug)]
pub struct PolarCode {
    stages: u32,
    block_len: usize,
    info_set: Vec<usize>,
    frozen_set: Vec<usize>,
    frozen_mask: Vec<bool>,
    generator: BitMatrix,
    parity_check: BitMatrix,
    row_supports: Vec<Vec<usize>>,
}

impl PolarCode {
    /// Builds a code from an explicit information set.
    pub fn new(block_len: usize, info_set: Vec<usize>) -> Result<Self> {
        if block_len < 2 || !block_len.is_power_of_two() || block_len > MAX_BLOCK_LENGTH {
            return Err(Error::BlockLength(block_len));
        }
        let k = info_set.len();
        if k == 0 || k >= block_len {
            return Err(Error::Dimensions { n: block_len, k });
        }
        let mut frozen_mask = vec![true; block_len];
        let mut prev = None;
        for &a in &info_set {
            if a >= block_len {
                return Err(Error::InfoSet(format!("index {a} >= N={block_len}")));
            }
            if prev.is_some_and(|p| a <= p) {
                return Err(Error::InfoSet("indices must be strictly increasing".into()));
            }
            prev = Some(a);
            frozen_mask[a] = false;
        }
        let frozen_set: Vec<usize> = (0..block_len).filter(|&j| frozen_mask[j]).collect();

        let stages = block_len.trailing_zeros();
        let generator = build_generator(stages)?;
        let rows: Vec<BitVector> = frozen_set.iter().map(|&j| generator.column(j)).collect();
        let parity_check = BitMatrix::from_rows(rows, block_len);
        let row_supports = parity_check.rows().iter().map(BitVector::ones).collect();

        Ok(PolarCode {
            stages,
            block_len,
            info_set,
            frozen_set,
            frozen_mask,
            generator,
            parity_check,
            row_supports,
        })
    }

    /// Builds a code whose information set comes from the BEC Bhattacharyya recursion.
    pub fn construct(block_len: usize, k: usize, design_erasure: f64) -> Result<Self> {
        let info = construct_frozen_set(block_len, k, design_erasure)?;
        PolarCode::new(block_len, info)
    }

    /// Block length N.
    pub fn n(&self) -> usize {
        self.block_len
    }

    /// Number of information bits K.
    pub fn k(&self) -> usize {
        self.info_set.len()
    }

    /// log2 N.
    pub fn stages(&self) -> usize {
        self.stages as usize
    }

    pub fn rate(&self) -> f64 {
        self.k() as f64 / self.n() as f64
    }

    pub fn info_set(&self) -> &[usize] {
        &self.info_set
    }

    pub fn frozen_set(&self) -> &[usize] {
        &self.frozen_set
    }

    pub fn is_frozen(&self, j: usize) -> bool {
        self.frozen_mask[j]
    }

    pub fn generator(&self) -> &BitMatrix {
        &self.generator
    }

    /// `(N−K)×N` parity-check matrix; row `i` checks frozen position `frozen_set()[i]`.
    pub fn parity_check(&self) -> &BitMatrix {
        &self.parity_check
    }

    /// Column indices of the ones in each parity-check row.
    pub fn row_supports(&self) -> &[Vec<usize>] {
        &self.row_supports
    }

    fn check_len(&self, what: &'static str, v: &BitVector, expected: usize) -> Result<()> {
        if v.len() != expected {
            return Err(Error::Length {
                what,
                expected,
                actual: v.len(),
            });
        }
        Ok(())
    }

    /// Places the information bits at `A` and zeros at `A_c`.
    pub fn message_from_info(&self, info_bits: &BitVector) -> Result<BitVector> {
        self.check_len("information bits", info_bits, self.k())?;
        let mut u = BitVector::zeros(self.n());
        for (i, &a) in self.info_set.iter().enumerate() {
            u.set(a, info_bits.get(i));
        }
        Ok(u)
    }

    /// Restricts a length-N message to the information positions.
    pub fn info_from_message(&self, u: &BitVector) -> Result<BitVector> {
        self.check_len("message", u, self.n())?;
        let mut info = BitVector::zeros(self.k());
        for (i, &a) in self.info_set.iter().enumerate() {
            info.set(i, u.get(a));
        }
        Ok(info)
    }

    /// `c = u·G` with `u` the information bits scattered over `A`.
    pub fn encode(&self, info_bits: &BitVector) -> Result<BitVector> {
        let u = self.message_from_info(info_bits)?;
        Ok(self.generator.vec_mul(&u))
    }

    /// Same result as [`encode`](Self::encode) via the `O(N log N)` butterfly.
    pub fn encode_butterfly(&self, info_bits: &BitVector) -> Result<BitVector> {
        let u = self.message_from_info(info_bits)?;
        Ok(BitVector::from_bools(&self.transform(&u.iter().collect::<Vec<_>>())))
    }

    /// Butterfly form of `x·G`: bit-reverse the input, then apply `F^{⊗n}`
    /// stage by stage with offsets `N/2, N/4, …, 1`.
    pub fn transform(&self, x: &[bool]) -> Vec<bool> {
        assert_eq!(x.len(), self.n());
        let mut v: Vec<bool> = (0..self.n())
            .map(|k| x[reverse_bits(k, self.stages)])
            .collect();
        let mut d = self.n() / 2;
        while d >= 1 {
            for j in 0..self.n() {
                if j & d == 0 {
                    v[j] ^= v[j + d];
                }
            }
            d /= 2;
        }
        v
    }

    /// `u = c·G`. Valid codewords have zeros at every frozen position.
    pub fn invert_message(&self, codeword: &BitVector) -> Result<BitVector> {
        self.check_len("codeword", codeword, self.n())?;
        Ok(self.generator.vec_mul(codeword))
    }

    /// `H·c`; all-zero iff `c` is a codeword.
    pub fn syndrome(&self, codeword: &BitVector) -> Result<BitVector> {
        self.check_len("codeword", codeword, self.n())?;
        Ok(self.parity_check.mul_vec(codeword))
    }

    /// Text definition: `N=`, `K=` and `A=` lines.
    pub fn to_definition(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "N={}", self.n());
        let _ = writeln!(s, "K={}", self.k());
        let a: Vec<String> = self.info_set.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(s, "A={}", a.join(","));
        s
    }

    pub fn from_definition(text: &str) -> Result<Self> {
        let mut n = None;
        let mut k = None;
        let mut a = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::CodeFile(format!("line {}: expected `key=value`", lineno + 1))
            })?;
            let value = value.trim();
            let parse_usize = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::CodeFile(format!("line {}: {e}", lineno + 1)))
            };
            match key.trim() {
                "N" => n = Some(parse_usize(value)?),
                "K" => k = Some(parse_usize(value)?),
                "A" => {
                    let set = value
                        .split(',')
                        .filter(|t| !t.trim().is_empty())
                        .map(parse_usize)
                        .collect::<Result<Vec<_>>>()?;
                    a = Some(set)
                }
                other => {
                    return Err(Error::CodeFile(format!(
                        "line {}: unknown key `{other}`",
                        lineno + 1
                    )))
                }
            }
        }
        let n = n.ok_or_else(|| Error::CodeFile("missing `N`".into()))?;
        let k = k.ok_or_else(|| Error::CodeFile("missing `K`".into()))?;
        let a = a.ok_or_else(|| Error::CodeFile("missing `A`".into()))?;
        if a.len() != k {
            return Err(Error::CodeFile(format!("K={k} but A lists {} indices", a.len())));
        }
        PolarCode::new(n, a)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PolarCode::from_definition(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_definition()).map_err(|e| Error::io(path, e))
    }
}
