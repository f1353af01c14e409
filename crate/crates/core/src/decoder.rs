//! Weighted min-sum belief propagation on the polar factor graph.
//!
//! The graph has `n + 1` columns of `N` nodes. Column 1 is the message side,
//! column `n + 1` the channel side. The processing element (PE) at stage `i`
//! joins nodes `j` and `j + d`, `d = N / 2^i`, of columns `i` and `i + 1`.
//! With these offsets the graph computes `x·F^{⊗n}`, so message bit `u_m` sits
//! at column-1 node `rev(m)` (bit reversal), which realises `c = u·G` with the
//! codeword in natural order on the channel side.
//!
//! One iteration is a full right-to-left sweep (L messages, stages `n..=1`)
//! followed by a full left-to-right sweep (R messages, stages `1..=n`):
//!
//! ```text
//! L[i][j]   = clamp(α[i][j]   · g(L[i+1][j], L[i+1][j+d] + R[i][j+d]))
//! L[i][j+d] = clamp(α[i][j+d] · g(R[i][j], L[i+1][j]) + L[i+1][j+d])
//! R[i+1][j]   = clamp(β[i+1][j]   · g(R[i][j], L[i+1][j+d] + R[i][j+d]))
//! R[i+1][j+d] = clamp(β[i+1][j+d] · g(R[i][j], L[i+1][j]) + R[i][j+d])
//! ```
//!
//! The same α/β are used in every iteration.

use rayon::prelude::*;

use crate::bits::BitVector;
use crate::error::{Error, Result};
use crate::polar::{reverse_bits, PolarCode};
use crate::weights::ScalingWeights;

pub const DEFAULT_LLR_MAX: f64 = 30.0;

#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Min-sum check update `sign(a)·sign(b)·min(|a|, |b|)`, `sign(0) = +1`.
#[inline]
pub fn min_sum_g(a: f64, b: f64) -> f64 {
    let m = a.abs().min(b.abs());
    if (a < 0.0) != (b < 0.0) {
        -m
    } else {
        m
    }
}

#[inline]
pub(crate) fn clamp(x: f64, llr_max: f64) -> f64 {
    x.clamp(-llr_max, llr_max)
}

/// Observer of the non-smooth operations in a forward pass.
pub(crate) trait Probe {
    #[inline]
    fn min_sum(&mut self, _a: f64, _b: f64) {}
    #[inline]
    fn clamp(&mut self, _pre: f64, _llr_max: f64) {}
}

pub(crate) struct NoProbe;

impl Probe for NoProbe {}

/// PE wiring of the factor graph.
#[derive(Clone, Debug)]
pub struct FactorGraphLayout {
    len: usize,
    stages: usize,
    /// `tops[i-1]`: the upper node `j` of every PE at stage `i`.
    tops: Vec<Vec<usize>>,
    /// Column-1 node of message bit `m`.
    message_node: Vec<usize>,
    /// Column-1 nodes carrying frozen bits.
    frozen_node: Vec<bool>,
}

impl FactorGraphLayout {
    pub fn new(code: &PolarCode) -> Self {
        let len = code.n();
        let stages = code.stages();
        let tops = (1..=stages)
            .map(|i| {
                let d = len >> i;
                (0..len).filter(|j| j % (2 * d) < d).collect()
            })
            .collect();
        let message_node: Vec<usize> = (0..len).map(|m| reverse_bits(m, stages as u32)).collect();
        let mut frozen_node = vec![false; len];
        for &f in code.frozen_set() {
            frozen_node[message_node[f]] = true;
        }
        FactorGraphLayout {
            len,
            stages,
            tops,
            message_node,
            frozen_node,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    /// Node offset `d = N / 2^i` of stage `i`.
    pub fn offset(&self, stage: usize) -> usize {
        self.len >> stage
    }

    /// `(j, j + d)` pairs of stage `i ∈ 1..=n`.
    pub fn pairs(&self, stage: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let d = self.offset(stage);
        self.tops[stage - 1].iter().map(move |&j| (j, j + d))
    }

    pub fn message_node(&self, m: usize) -> usize {
        self.message_node[m]
    }

    pub fn is_frozen_node(&self, node: usize) -> bool {
        self.frozen_node[node]
    }

    #[inline]
    pub(crate) fn tops(&self, stage: usize) -> &[usize] {
        &self.tops[stage - 1]
    }
}

/// L and R messages for one frame, columns `1..=n+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageState {
    len: usize,
    pub(crate) l: Vec<f64>,
    pub(crate) r: Vec<f64>,
}

impl MessageState {
    #[inline]
    pub(crate) fn idx(&self, stage: usize, node: usize) -> usize {
        (stage - 1) * self.len + node
    }

    pub fn l(&self, stage: usize, node: usize) -> f64 {
        self.l[self.idx(stage, node)]
    }

    pub fn r(&self, stage: usize, node: usize) -> f64 {
        self.r[self.idx(stage, node)]
    }

    /// Column `stage` of L.
    pub fn l_column(&self, stage: usize) -> &[f64] {
        let s = self.idx(stage, 0);
        &self.l[s..s + self.len]
    }

    pub fn r_column(&self, stage: usize) -> &[f64] {
        let s = self.idx(stage, 0);
        &self.r[s..s + self.len]
    }

    pub fn max_abs(&self) -> f64 {
        self.l
            .iter()
            .chain(&self.r)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Channel LLRs into column `n+1` of L, frozen pins `+llr_max` into column 1 of R.
pub fn init_messages(llr: &[f64], layout: &FactorGraphLayout, llr_max: f64) -> Result<MessageState> {
    let len = layout.len();
    if llr.len() != len {
        return Err(Error::Length {
            what: "llr",
            expected: len,
            actual: llr.len(),
        });
    }
    let cols = layout.stages() + 1;
    let mut state = MessageState {
        len,
        l: vec![0.0; cols * len],
        r: vec![0.0; cols * len],
    };
    let base = (cols - 1) * len;
    for (dst, &v) in state.l[base..].iter_mut().zip(llr) {
        *dst = clamp(v, llr_max);
    }
    for node in 0..len {
        if layout.is_frozen_node(node) {
            state.r[node] = llr_max;
        }
    }
    Ok(state)
}

pub(crate) fn l_sweep<P: Probe>(
    state: &mut MessageState,
    weights: &ScalingWeights,
    layout: &FactorGraphLayout,
    llr_max: f64,
    probe: &mut P,
) {
    let len = layout.len();
    for i in (1..=layout.stages()).rev() {
        let d = layout.offset(i);
        let cur = (i - 1) * len;
        let next = i * len;
        let alpha = weights.alpha_stage(i);
        for &j in layout.tops(i) {
            let jd = j + d;
            let l_next_j = state.l[next + j];
            let l_next_jd = state.l[next + jd];
            let r_j = state.r[cur + j];
            let r_jd = state.r[cur + jd];
            let b = l_next_jd + r_jd;
            probe.min_sum(l_next_j, b);
            probe.min_sum(r_j, l_next_j);
            let top = alpha[j] * min_sum_g(l_next_j, b);
            let bot = alpha[jd] * min_sum_g(r_j, l_next_j) + l_next_jd;
            probe.clamp(top, llr_max);
            probe.clamp(bot, llr_max);
            state.l[cur + j] = clamp(top, llr_max);
            state.l[cur + jd] = clamp(bot, llr_max);
        }
    }
}

pub(crate) fn r_sweep<P: Probe>(
    state: &mut MessageState,
    weights: &ScalingWeights,
    layout: &FactorGraphLayout,
    llr_max: f64,
    probe: &mut P,
) {
    let len = layout.len();
    for i in 1..=layout.stages() {
        let d = layout.offset(i);
        let cur = (i - 1) * len;
        let next = i * len;
        let beta = weights.beta_stage(i + 1);
        for &j in layout.tops(i) {
            let jd = j + d;
            let r_j = state.r[cur + j];
            let r_jd = state.r[cur + jd];
            let l_next_j = state.l[next + j];
            let l_next_jd = state.l[next + jd];
            let b = l_next_jd + r_jd;
            probe.min_sum(r_j, b);
            probe.min_sum(r_j, l_next_j);
            let top = beta[j] * min_sum_g(r_j, b);
            let bot = beta[jd] * min_sum_g(r_j, l_next_j) + r_jd;
            probe.clamp(top, llr_max);
            probe.clamp(bot, llr_max);
            state.r[next + j] = clamp(top, llr_max);
            state.r[next + jd] = clamp(bot, llr_max);
        }
    }
}

/// One round trip: L sweep from the channel side, then R sweep from the message side.
pub fn bp_iteration(
    state: &mut MessageState,
    weights: &ScalingWeights,
    layout: &FactorGraphLayout,
    llr_max: f64,
) {
    l_sweep(state, weights, layout, llr_max, &mut NoProbe);
    r_sweep(state, weights, layout, llr_max, &mut NoProbe);
}

/// `ĉ_j = 0` if `s_j ≥ 0`, else 1.
pub fn hard_codeword(s: &[f64]) -> BitVector {
    let bits: Vec<bool> = s.iter().map(|&v| v < 0.0).collect();
    BitVector::from_bools(&bits)
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    /// Message estimate in message order.
    pub u_hat: BitVector,
    /// Soft codeword `L[n+1] + R[n+1]`.
    pub s: Vec<f64>,
    pub state: MessageState,
}

/// Decoder configuration: graph, iteration count and message clamp.
#[derive(Clone, Debug)]
pub struct BpDecoder {
    layout: FactorGraphLayout,
    iterations: usize,
    llr_max: f64,
}

impl BpDecoder {
    pub fn new(code: &PolarCode, iterations: usize, llr_max: f64) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::Config("iteration count must be >= 1".into()));
        }
        if !(llr_max > 0.0 && llr_max.is_finite()) {
            return Err(Error::Config(format!("llr_max {llr_max} must be positive")));
        }
        Ok(BpDecoder {
            layout: FactorGraphLayout::new(code),
            iterations,
            llr_max,
        })
    }

    pub fn layout(&self) -> &FactorGraphLayout {
        &self.layout
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn llr_max(&self) -> f64 {
        self.llr_max
    }

    pub(crate) fn check_weights(&self, weights: &ScalingWeights) -> Result<()> {
        if weights.block_len() != self.layout.len() || weights.stages() != self.layout.stages() {
            return Err(Error::Checkpoint(format!(
                "weights shaped for N={} but decoder has N={}",
                weights.block_len(),
                self.layout.len()
            )));
        }
        Ok(())
    }

    pub fn init(&self, llr: &[f64]) -> Result<MessageState> {
        init_messages(llr, &self.layout, self.llr_max)
    }

    /// Soft codeword output of a state.
    pub fn soft_output(&self, state: &MessageState) -> Vec<f64> {
        let col = self.layout.stages() + 1;
        state
            .l_column(col)
            .iter()
            .zip(state.r_column(col))
            .map(|(l, r)| l + r)
            .collect()
    }

    /// Message decisions from column 1, mapped back to message order.
    ///
    /// The decision uses `L + R`: R is zero at information nodes, so this is
    /// the sign of L there, while at frozen nodes the `+llr_max` prior keeps
    /// the decision at 0 (L alone is extrinsic and never sees that prior).
    pub fn message_estimate(&self, state: &MessageState) -> BitVector {
        let l1 = state.l_column(1);
        let r1 = state.r_column(1);
        let bits: Vec<bool> = (0..self.layout.len())
            .map(|m| {
                let k = self.layout.message_node(m);
                l1[k] + r1[k] < 0.0
            })
            .collect();
        BitVector::from_bools(&bits)
    }

    pub fn decode(&self, llr: &[f64], weights: &ScalingWeights) -> Result<DecodeOutput> {
        self.decode_probed(llr, weights, &mut NoProbe)
    }

    pub(crate) fn decode_probed<P: Probe>(
        &self,
        llr: &[f64],
        weights: &ScalingWeights,
        probe: &mut P,
    ) -> Result<DecodeOutput> {
        self.check_weights(weights)?;
        let mut state = self.init(llr)?;
        for _ in 0..self.iterations {
            l_sweep(&mut state, weights, &self.layout, self.llr_max, probe);
            r_sweep(&mut state, weights, &self.layout, self.llr_max, probe);
        }
        Ok(DecodeOutput {
            u_hat: self.message_estimate(&state),
            s: self.soft_output(&state),
            state,
        })
    }

    pub fn decode_batch(&self, llrs: &[Vec<f64>], weights: &ScalingWeights) -> Result<Vec<DecodeOutput>> {
        llrs.par_iter().map(|llr| self.decode(llr, weights)).collect()
    }
}

/// Free-function form: `init_messages`, `T` iterations, hard decision and soft output.
pub fn decode(
    llr: &[f64],
    code: &PolarCode,
    weights: &ScalingWeights,
    iterations: usize,
    llr_max: f64,
) -> Result<DecodeOutput> {
    BpDecoder::new(code, iterations, llr_max)?.decode(llr, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{bpsk_modulate, substream, Frame, sigma_from_snr};
    use rand::Rng;

    #[test]
    fn g_examples() {
        assert_eq!(min_sum_g(2.0, -3.0), -2.0);
        assert_eq!(min_sum_g(0.0, 5.0), 0.0);
        assert_eq!(min_sum_g(-7.0, 0.0), 0.0);
        for (a, b) in [(1.5, -0.3), (-4.0, -2.0), (3.0, 3.0)] {
            assert_eq!(min_sum_g(a, b), min_sum_g(b, a));
        }
    }

    #[test]
    fn layout_matches_fig2_wiring() {
        let code = PolarCode::construct(8, 4, 0.5).unwrap();
        let layout = FactorGraphLayout::new(&code);
        let pairs = |i| layout.pairs(i).collect::<Vec<_>>();
        assert_eq!(pairs(1), vec![(0, 4), (1, 5), (2, 6), (3, 7)]);
        assert_eq!(pairs(2), vec![(0, 2), (1, 3), (4, 6), (5, 7)]);
        assert_eq!(pairs(3), vec![(0, 1), (2, 3), (4, 5), (6, 7)]);
        for i in 1..=3 {
            let mut seen = [0; 8];
            for (a, b) in layout.pairs(i) {
                seen[a] += 1;
                seen[b] += 1;
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn init_examples() {
        let code = PolarCode::construct(8, 4, 0.5).unwrap();
        let layout = FactorGraphLayout::new(&code);
        let m = 30.0;
        let st = init_messages(&[0.5; 8], &layout, m).unwrap();
        assert_eq!(st.r_column(1), &[m, m, m, 0.0, m, 0.0, 0.0, 0.0]);
        assert_eq!(st.l_column(4), &[0.5; 8]);

        let st = init_messages(&[0.0; 8], &layout, m).unwrap();
        assert!(st.l.iter().all(|&v| v == 0.0));
        assert!((2..=4).all(|i| st.r_column(i).iter().all(|&v| v == 0.0)));

        let st = init_messages(&[300.0, -300.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &layout, m).unwrap();
        assert_eq!(st.l(4, 0), m);
        assert_eq!(st.l(4, 1), -m);
        assert!(init_messages(&[0.0; 7], &layout, m).is_err());
    }

    #[test]
    fn n2_hand_trace() {
        let code = PolarCode::new(2, vec![1]).unwrap();
        let dec = BpDecoder::new(&code, 1, 30.0).unwrap();
        let w = ScalingWeights::ones(2);
        let out = dec.decode(&[2.0, -3.0], &w).unwrap();
        let st = &out.state;
        assert_eq!(st.l(1, 0), -2.0);
        assert_eq!(st.l(1, 1), -1.0);
        assert_eq!(st.r(2, 0), -3.0);
        assert_eq!(st.r(2, 1), 2.0);
        assert_eq!(out.s, vec![-1.0, -1.0]);
        assert_eq!(hard_codeword(&out.s).to_bytes(), vec![1, 1]);
        assert!(code.syndrome(&hard_codeword(&out.s)).unwrap().is_zero());
        assert!(out.u_hat.get(1));
    }

    #[test]
    fn zero_llr_stays_zero() {
        let code = PolarCode::construct(16, 8, 0.5).unwrap();
        let dec = BpDecoder::new(&code, 3, 30.0).unwrap();
        let out = dec.decode(&[0.0; 16], &ScalingWeights::ones(16)).unwrap();
        assert!(out.state.l.iter().all(|&v| v == 0.0));
        // Only the frozen-bit prior moves: R carries values in {0, +llr_max}.
        for i in 2..=5 {
            assert!(out.state.r_column(i).iter().all(|&v| v == 0.0 || v == 30.0));
        }
        let pins: Vec<f64> = (0..16)
            .map(|k| if dec.layout().is_frozen_node(k) { 30.0 } else { 0.0 })
            .collect();
        assert_eq!(out.state.r_column(1), &pins[..]);
    }

    #[test]
    fn hard_codeword_examples() {
        assert_eq!(hard_codeword(&[-1.0, -1.0]).to_bytes(), vec![1, 1]);
        assert!(hard_codeword(&[0.1, 4.0, 2.0]).is_zero());
        assert_eq!(hard_codeword(&[0.0]).to_bytes(), vec![0]);
    }

    #[test]
    fn noiseless_small_code() {
        let code = PolarCode::construct(8, 4, 0.5).unwrap();
        let dec = BpDecoder::new(&code, 5, 30.0).unwrap();
        let w = ScalingWeights::ones(8);
        for m in 0..16u8 {
            let info = BitVector::from_bits(&(0..4).map(|b| (m >> b) & 1).collect::<Vec<_>>()).unwrap();
            let c = code.encode(&info).unwrap();
            let llr: Vec<f64> = bpsk_modulate(&c).iter().map(|x| 20.0 * x).collect();
            let out = dec.decode(&llr, &w).unwrap();
            assert_eq!(code.info_from_message(&out.u_hat).unwrap(), info);
            assert_eq!(hard_codeword(&out.s), c);
        }
    }

    #[test]
    fn invariants_on_noisy_frames() {
        let code = PolarCode::construct(64, 32, 0.5).unwrap();
        let dec = BpDecoder::new(&code, 5, 30.0).unwrap();
        let mut w = ScalingWeights::ones(64);
        let mut rng = substream(5, 0);
        for p in 0..w.num_params() {
            *w.param_mut(p) = rng.gen_range(0.5..1.5);
        }
        let p = sigma_from_snr(1.0, 0.5).unwrap();
        let llrs: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let info: Vec<bool> = (0..32).map(|_| rng.gen()).collect();
                let c = code.encode(&BitVector::from_bools(&info)).unwrap();
                Frame::simulate(&c, &p, &mut rng).llr
            })
            .collect();
        let batch = dec.decode_batch(&llrs, &w).unwrap();
        for (llr, out) in llrs.iter().zip(&batch) {
            let alone = dec.decode(llr, &w).unwrap();
            assert_eq!(alone.state, out.state);
            assert!(out.state.max_abs() <= 30.0);
            let clamped: Vec<f64> = llr.iter().map(|v| v.clamp(-30.0, 30.0)).collect();
            assert_eq!(out.state.l_column(7), &clamped[..]);
            for &f in code.frozen_set() {
                let node = dec.layout().message_node(f);
                assert_eq!(out.state.r(1, node), 30.0);
                assert!(!out.u_hat.get(f), "frozen bit {f} decided as 1");
            }
        }
    }
}
