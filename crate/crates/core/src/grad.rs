//! Reverse-mode gradients of a frame loss with respect to the shared α/β.
//!
//! The forward pass is unrolled over `T` iterations and every message column
//! is snapshotted after each iteration. The backward pass walks the sweeps in
//! reverse and recomputes each PE from its recorded inputs, so the min-sum
//! branch and clamp saturation it differentiates are exactly the ones taken
//! forward. Conventions at non-smooth points:
//!
//! - `min(|a|, |b|)` ties route to the first argument;
//! - `sign` has zero derivative and `sign(0) = +1`;
//! - a clamped (saturated) message passes no gradient;
//! - the hinge at exactly 1 passes no gradient.
//!
//! Because the weights are shared, each gradient entry sums its contributions
//! from all `T` iterations.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bits::BitVector;
use crate::channel::{self, substream, ChannelParams, SnrConvention};
use crate::decoder::{min_sum_g, sign, BpDecoder, DecodeOutput, MessageState, Probe};
use crate::error::{Error, Result};
use crate::loss::{self, sigmoid, soft_check, LossKind};
use crate::polar::PolarCode;
use crate::weights::ScalingWeights;

/// Partial derivatives of `g(a, b)` scaled by `upstream`.
#[inline]
pub fn g_backward(a: f64, b: f64, upstream: f64) -> (f64, f64) {
    if a.abs() <= b.abs() {
        (upstream * sign(b), 0.0)
    } else {
        (0.0, upstream * sign(a))
    }
}

/// Gradient of `Σ_i upstream_i · softsynd(s)_i` with respect to `s`.
pub fn soft_syndrome_backward(s: &[f64], code: &PolarCode, upstream: &[f64]) -> Vec<f64> {
    assert_eq!(upstream.len(), code.row_supports().len());
    let mut ds = vec![0.0; s.len()];
    for (support, &up) in code.row_supports().iter().zip(upstream) {
        if up == 0.0 {
            continue;
        }
        let chk = soft_check(s, support);
        let k = chk.argmin;
        // product of the other signs = full product · sign(s_k)
        ds[k] += up * chk.sign_product * sign(s[k]);
    }
    ds
}

/// Frame loss and its gradient with respect to the soft output `s`.
pub fn loss_and_grad(
    kind: LossKind,
    s: &[f64],
    code: &PolarCode,
    labels: Option<&BitVector>,
) -> Result<(f64, Vec<f64>)> {
    match kind {
        LossKind::Syndrome => {
            let rows = loss::soft_syndrome(s, code);
            let scale = 1.0 / rows.len() as f64;
            let upstream: Vec<f64> = rows
                .iter()
                .map(|&v| if v < 1.0 { -scale } else { 0.0 })
                .collect();
            Ok((loss::hinge_mean(&rows), soft_syndrome_backward(s, code, &upstream)))
        }
        LossKind::Bce => {
            let c = labels.ok_or(Error::MissingLabels)?;
            if c.len() != s.len() {
                return Err(Error::Length {
                    what: "codeword label",
                    expected: s.len(),
                    actual: c.len(),
                });
            }
            let scale = 1.0 / s.len() as f64;
            let ds = s
                .iter()
                .zip(c.iter())
                .map(|(&v, bit)| scale * if bit { sigmoid(v) } else { -sigmoid(-v) })
                .collect();
            Ok((loss::bce_loss(c, s), ds))
        }
    }
}

/// Gradients shaped like [`ScalingWeights`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub d_alpha: Vec<f64>,
    pub d_beta: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(weights: &ScalingWeights) -> Self {
        GradientSet {
            d_alpha: vec![0.0; weights.alpha().len()],
            d_beta: vec![0.0; weights.beta().len()],
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.d_alpha.iter_mut().zip(&other.d_alpha) {
            *a += b;
        }
        for (a, b) in self.d_beta.iter_mut().zip(&other.d_beta) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.d_alpha.iter_mut().chain(self.d_beta.iter_mut()) {
            *v *= factor;
        }
    }

    /// Parameter `p` in the order α then β (same as [`ScalingWeights::param`]).
    pub fn param(&self, p: usize) -> f64 {
        if p < self.d_alpha.len() {
            self.d_alpha[p]
        } else {
            self.d_beta[p - self.d_alpha.len()]
        }
    }

    pub fn is_zero(&self) -> bool {
        self.d_alpha.iter().chain(&self.d_beta).all(|&v| v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.d_alpha.iter().chain(&self.d_beta).all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.d_alpha
            .iter()
            .chain(&self.d_beta)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Message snapshots of one frame: entry `t` holds the state after iteration
/// `t`, entry 0 the initial state.
#[derive(Clone, Debug)]
pub struct Tape {
    states: Vec<MessageState>,
}

impl Tape {
    pub fn iterations(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_state(&self) -> &MessageState {
        self.states.last().expect("tape holds the initial state")
    }
}

/// Forward decode recording a [`Tape`].
pub fn forward(dec: &BpDecoder, llr: &[f64], weights: &ScalingWeights) -> Result<(DecodeOutput, Tape)> {
    dec.check_weights(weights)?;
    let mut state = dec.init(llr)?;
    let mut states = Vec::with_capacity(dec.iterations() + 1);
    states.push(state.clone());
    for _ in 0..dec.iterations() {
        crate::decoder::bp_iteration(&mut state, weights, dec.layout(), dec.llr_max());
        states.push(state.clone());
    }
    let out = DecodeOutput {
        u_hat: dec.message_estimate(&state),
        s: dec.soft_output(&state),
        state,
    };
    Ok((out, Tape { states }))
}

/// Backpropagates `ds = ∂loss/∂s` through the recorded iterations.
pub fn backward_from_soft(
    dec: &BpDecoder,
    weights: &ScalingWeights,
    tape: &Tape,
    ds: &[f64],
) -> Result<GradientSet> {
    dec.check_weights(weights)?;
    let layout = dec.layout();
    let len = layout.len();
    let n = layout.stages();
    if tape.iterations() != dec.iterations() || tape.states[0].l.len() != (n + 1) * len {
        return Err(Error::Length {
            what: "tape",
            expected: dec.iterations(),
            actual: tape.iterations(),
        });
    }
    if ds.len() != len {
        return Err(Error::Length {
            what: "soft-output gradient",
            expected: len,
            actual: ds.len(),
        });
    }
    let m = dec.llr_max();
    let mut grad = GradientSet::zeros_like(weights);
    let mut adj_l = vec![0.0; (n + 1) * len];
    let mut adj_r = vec![0.0; (n + 1) * len];
    adj_r[n * len..].copy_from_slice(ds);

    for t in (1..=tape.iterations()).rev() {
        let cur = &tape.states[t];
        let prev = &tape.states[t - 1];

        // R sweep ran over stages 1..=n; undo it from n down to 1.
        for i in (1..=n).rev() {
            let d = layout.offset(i);
            let ci = (i - 1) * len;
            let cn = i * len;
            let beta = weights.beta_stage(i + 1);
            let dbeta = &mut grad.d_beta[(i - 1) * len..i * len];
            for &j in layout.tops(i) {
                let jd = j + d;
                let r_j = cur.r[ci + j];
                let r_jd = cur.r[ci + jd];
                let l_j = cur.l[cn + j];
                let l_jd = cur.l[cn + jd];

                let up = std::mem::take(&mut adj_r[cn + j]);
                if up != 0.0 {
                    let b = l_jd + r_jd;
                    let g = min_sum_g(r_j, b);
                    if (beta[j] * g).abs() <= m {
                        dbeta[j] += up * g;
                        let (da, db) = g_backward(r_j, b, up * beta[j]);
                        adj_r[ci + j] += da;
                        adj_l[cn + jd] += db;
                        adj_r[ci + jd] += db;
                    }
                }

                let up = std::mem::take(&mut adj_r[cn + jd]);
                if up != 0.0 {
                    let g = min_sum_g(r_j, l_j);
                    if (beta[jd] * g + r_jd).abs() <= m {
                        dbeta[jd] += up * g;
                        let (da, db) = g_backward(r_j, l_j, up * beta[jd]);
                        adj_r[ci + j] += da;
                        adj_l[cn + j] += db;
                        adj_r[ci + jd] += up;
                    }
                }
            }
        }
        // column 1 of R holds the fixed frozen prior
        adj_r[..len].iter_mut().for_each(|v| *v = 0.0);

        // L sweep ran over stages n..=1; undo it from 1 up to n.
        for i in 1..=n {
            let d = layout.offset(i);
            let ci = (i - 1) * len;
            let cn = i * len;
            let alpha = weights.alpha_stage(i);
            let dalpha = &mut grad.d_alpha[(i - 1) * len..i * len];
            for &j in layout.tops(i) {
                let jd = j + d;
                let l_j = cur.l[cn + j];
                let l_jd = cur.l[cn + jd];
                let r_j = prev.r[ci + j];
                let r_jd = prev.r[ci + jd];

                let up = std::mem::take(&mut adj_l[ci + j]);
                if up != 0.0 {
                    let b = l_jd + r_jd;
                    let g = min_sum_g(l_j, b);
                    if (alpha[j] * g).abs() <= m {
                        dalpha[j] += up * g;
                        let (da, db) = g_backward(l_j, b, up * alpha[j]);
                        adj_l[cn + j] += da;
                        adj_l[cn + jd] += db;
                        adj_r[ci + jd] += db;
                    }
                }

                let up = std::mem::take(&mut adj_l[ci + jd]);
                if up != 0.0 {
                    let g = min_sum_g(r_j, l_j);
                    if (alpha[jd] * g + l_jd).abs() <= m {
                        dalpha[jd] += up * g;
                        let (da, db) = g_backward(r_j, l_j, up * alpha[jd]);
                        adj_r[ci + j] += da;
                        adj_l[cn + j] += db;
                        adj_l[cn + jd] += up;
                    }
                }
            }
        }
        // channel LLRs and the frozen prior are constants
        adj_l[n * len..].iter_mut().for_each(|v| *v = 0.0);
        adj_r[..len].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(grad)
}

/// Loss of one recorded frame and its gradient. `supervision` must be present for BCE.
pub fn backward(
    dec: &BpDecoder,
    weights: &ScalingWeights,
    code: &PolarCode,
    tape: &Tape,
    kind: LossKind,
    supervision: Option<&BitVector>,
) -> Result<(f64, GradientSet)> {
    let s = dec.soft_output(tape.final_state());
    let (value, ds) = loss_and_grad(kind, &s, code, supervision)?;
    let grad = backward_from_soft(dec, weights, tape, &ds)?;
    Ok((value, grad))
}

/// One frame for a batch: channel LLRs and, for supervised losses, the codeword.
#[derive(Clone, Copy, Debug)]
pub struct FrameRef<'a> {
    pub llr: &'a [f64],
    pub label: Option<&'a BitVector>,
}

const REDUCE_CHUNK: usize = 16;

/// Mean loss and mean gradient over a batch.
///
/// Frames are processed in parallel in fixed-size chunks; partial sums are
/// combined in index order, so the result does not depend on the thread count.
pub fn batch_loss_and_grad(
    dec: &BpDecoder,
    weights: &ScalingWeights,
    code: &PolarCode,
    kind: LossKind,
    frames: &[FrameRef<'_>],
) -> Result<(f64, GradientSet)> {
    if frames.is_empty() {
        return Ok((0.0, GradientSet::zeros_like(weights)));
    }
    let partials: Vec<(f64, GradientSet)> = frames
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut loss_sum = 0.0;
            let mut acc = GradientSet::zeros_like(weights);
            for f in chunk {
                let (_, tape) = forward(dec, f.llr, weights)?;
                let (v, g) = backward(dec, weights, code, &tape, kind, f.label)?;
                loss_sum += v;
                acc.add_assign(&g);
            }
            Ok((loss_sum, acc))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grad = GradientSet::zeros_like(weights);
    for (v, g) in &partials {
        total += v;
        grad.add_assign(g);
    }
    let inv = 1.0 / frames.len() as f64;
    grad.scale(inv);
    Ok((total * inv, grad))
}

/// Mean loss over a batch, forward only.
pub fn batch_loss(
    dec: &BpDecoder,
    weights: &ScalingWeights,
    code: &PolarCode,
    kind: LossKind,
    frames: &[FrameRef<'_>],
) -> Result<f64> {
    let partials: Vec<f64> = frames
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut sum = 0.0;
            for f in chunk {
                let out = dec.decode(f.llr, weights)?;
                sum += loss::frame_loss(kind, &out.s, code, f.label).ok_or(Error::MissingLabels)?;
            }
            Ok(sum)
        })
        .collect::<Result<_>>()?;
    Ok(partials.iter().sum::<f64>() / frames.len().max(1) as f64)
}

/// Records which branch every non-smooth operation took and how close its
/// inputs came to a branch boundary.
struct KinkProbe {
    hash: u64,
    margin: f64,
}

impl KinkProbe {
    fn new() -> Self {
        KinkProbe {
            hash: 0xcbf2_9ce4_8422_2325,
            margin: f64::INFINITY,
        }
    }

    fn push(&mut self, bits: u8) {
        self.hash ^= bits as u64;
        self.hash = self.hash.wrapping_mul(0x0100_0000_01b3);
    }

    fn near(&mut self, gap: f64) {
        if gap != 0.0 {
            self.margin = self.margin.min(gap.abs());
        }
    }

    fn loss(&mut self, kind: LossKind, s: &[f64], code: &PolarCode) {
        for &v in s {
            self.near(v);
        }
        if kind != LossKind::Syndrome {
            return;
        }
        for support in code.row_supports() {
            let chk = soft_check(s, support);
            let mut second = f64::INFINITY;
            for &j in support {
                if j != chk.argmin {
                    second = second.min(s[j].abs());
                }
            }
            self.near(second - s[chk.argmin].abs());
            self.near(1.0 - chk.value);
            self.push((chk.argmin % 251) as u8);
            self.push(((chk.sign_product < 0.0) as u8) | (((chk.value < 1.0) as u8) << 1));
        }
    }
}

impl Probe for KinkProbe {
    fn min_sum(&mut self, a: f64, b: f64) {
        self.near(a);
        self.near(b);
        self.near(a.abs() - b.abs());
        self.push(((a.abs() <= b.abs()) as u8) | (((a < 0.0) as u8) << 1) | (((b < 0.0) as u8) << 2));
    }

    fn clamp(&mut self, pre: f64, llr_max: f64) {
        // sitting exactly on the bound is a kink as well
        self.margin = self.margin.min((pre.abs() - llr_max).abs());
        self.push((pre.abs() > llr_max) as u8);
    }
}

/// Loss of one frame with its branch signature and smallest boundary margin.
fn probed_loss(
    dec: &BpDecoder,
    weights: &ScalingWeights,
    code: &PolarCode,
    kind: LossKind,
    frame: &FrameRef<'_>,
) -> Result<(f64, u64, f64)> {
    let mut probe = KinkProbe::new();
    let out = dec.decode_probed(frame.llr, weights, &mut probe)?;
    probe.loss(kind, &out.s, code);
    let value = loss::frame_loss(kind, &out.s, code, frame.label).ok_or(Error::MissingLabels)?;
    Ok((value, probe.hash, probe.margin))
}

/// Settings of the finite-difference gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdConfig {
    pub block_len: usize,
    pub info_len: usize,
    pub iterations: usize,
    pub seed: u64,
    pub eps: f64,
    pub frames: usize,
    /// Frames whose forward pass comes within `guard` of a tie, knee or clamp boundary are resampled.
    pub guard: f64,
    pub snr_db: f64,
    pub llr_max: f64,
    pub loss: LossKind,
    /// Weights are drawn uniformly from `1 ± weight_spread`.
    pub weight_spread: f64,
    pub tolerance: f64,
    /// Resampling rounds for frames whose ±eps evaluations cross a branch boundary.
    pub max_rounds: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            block_len: 8,
            info_len: 4,
            iterations: 2,
            seed: 1,
            eps: 1e-4,
            frames: 10,
            guard: 1e-3,
            snr_db: -1.0,
            llr_max: crate::decoder::DEFAULT_LLR_MAX,
            loss: LossKind::Syndrome,
            weight_spread: 0.1,
            tolerance: 1e-3,
            max_rounds: 200,
        }
    }
}

/// Outcome of a finite-difference check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub params_checked: usize,
    pub nonzero_params: usize,
    pub frames_resampled: usize,
    /// Frames in the final batch whose perturbed passes still crossed a branch boundary.
    pub crossing_frames: usize,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Denominator floor for the relative error; gradients below it are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

struct FdFrame {
    llr: Vec<f64>,
    label: BitVector,
}

fn draw_frame<R: Rng>(
    code: &PolarCode,
    dec: &BpDecoder,
    weights: &ScalingWeights,
    cfg: &FdConfig,
    params: &ChannelParams,
    rng: &mut R,
    resampled: &mut usize,
) -> Result<FdFrame> {
    loop {
        let info: Vec<bool> = (0..code.k()).map(|_| rng.gen()).collect();
        let c = code.encode(&BitVector::from_bools(&info))?;
        let llr = channel::Frame::simulate(&c, params, rng).llr;
        let frame = FrameRef { llr: &llr, label: Some(&c) };
        let (_, _, margin) = probed_loss(dec, weights, code, cfg.loss, &frame)?;
        if margin >= cfg.guard {
            return Ok(FdFrame { llr, label: c });
        }
        *resampled += 1;
    }
}

/// Compares the analytic batch gradient with central differences of the
/// full forward loss for every α/β entry.
pub fn finite_difference_check(cfg: &FdConfig) -> Result<FdReport> {
    if cfg.eps.is_nan() || cfg.eps <= 0.0 {
        return Err(Error::Config(format!("eps {} must be positive", cfg.eps)));
    }
    let code = PolarCode::construct(cfg.block_len, cfg.info_len, 0.5)?;
    let dec = BpDecoder::new(&code, cfg.iterations, cfg.llr_max)?;
    let params = ChannelParams::from_snr(cfg.snr_db, code.rate(), SnrConvention::Ebn0)?;
    let mut rng = substream(cfg.seed, 0);

    let mut weights = ScalingWeights::ones(code.n());
    for p in 0..weights.num_params() {
        *weights.param_mut(p) = 1.0 + cfg.weight_spread * rng.gen_range(-1.0..1.0);
    }

    let mut resampled = 0;
    let mut frames: Vec<FdFrame> = (0..cfg.frames)
        .map(|_| draw_frame(&code, &dec, &weights, cfg, &params, &mut rng, &mut resampled))
        .collect::<Result<_>>()?;

    let mut round = 0;
    loop {
        let refs: Vec<FrameRef<'_>> = frames
            .iter()
            .map(|f| FrameRef { llr: &f.llr, label: Some(&f.label) })
            .collect();
        let base: Vec<(f64, u64, f64)> = refs
            .iter()
            .map(|f| probed_loss(&dec, &weights, &code, cfg.loss, f))
            .collect::<Result<_>>()?;
        let (_, analytic) = batch_loss_and_grad(&dec, &weights, &code, cfg.loss, &refs)?;

        let mut crossed = vec![false; frames.len()];
        let mut numeric = vec![0.0; weights.num_params()];
        for (p, num) in numeric.iter_mut().enumerate() {
            let mut sides = [0.0; 2];
            for (side, delta) in [cfg.eps, -cfg.eps].into_iter().enumerate() {
                let mut w = weights.clone();
                *w.param_mut(p) += delta;
                let mut sum = 0.0;
                for (fi, f) in refs.iter().enumerate() {
                    let (v, sig, _) = probed_loss(&dec, &w, &code, cfg.loss, f)?;
                    if sig != base[fi].1 {
                        crossed[fi] = true;
                    }
                    sum += v;
                }
                sides[side] = sum / refs.len() as f64;
            }
            *num = (sides[0] - sides[1]) / (2.0 * cfg.eps);
        }

        let crossing = crossed.iter().filter(|&&c| c).count();
        if crossing > 0 && round < cfg.max_rounds {
            drop(refs);
            for (fi, c) in crossed.iter().enumerate() {
                if *c {
                    frames[fi] = draw_frame(&code, &dec, &weights, cfg, &params, &mut rng, &mut resampled)?;
                    resampled += 1;
                }
            }
            round += 1;
            continue;
        }

        let mut report = FdReport {
            max_rel_error: 0.0,
            worst_param: weights.param_name(0),
            analytic: analytic.param(0),
            numeric: numeric[0],
            params_checked: weights.num_params(),
            nonzero_params: 0,
            frames_resampled: resampled,
            crossing_frames: crossing,
            tolerance: cfg.tolerance,
        };
        for (p, &num) in numeric.iter().enumerate() {
            let a = analytic.param(p);
            if a != 0.0 || num != 0.0 {
                report.nonzero_params += 1;
            }
            let err = relative_error(a, num);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = weights.param_name(p);
                report.analytic = a;
                report.numeric = num;
            }
        }
        return Ok(report);
    }
}
