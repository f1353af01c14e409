//! Monte-Carlo FER/BER sweeps with common random numbers across decoders.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bits::BitVector;
use crate::channel::{substream, ChannelParams, Frame, SnrConvention};
use crate::decoder::BpDecoder;
use crate::error::{Error, Result};
use crate::polar::PolarCode;
use crate::weights::ScalingWeights;

/// Label of the identity-weight decoder that every comparison includes.
pub const CONVENTIONAL: &str = "conventional";

/// Largest block length accepted by [`MlDecoder`].
pub const ML_MAX_BLOCK_LENGTH: usize = 16;

/// Frames per RNG substream. Part of the reproducibility contract: changing it changes every report.
const CHUNK: usize = 256;

/// Stop an SNR point once every decoder has `min_frame_errors` frame errors,
/// or after `max_frames` frames, whichever comes first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stopping {
    pub max_frames: u64,
    pub min_frame_errors: u64,
}

impl Default for Stopping {
    fn default() -> Self {
        Stopping {
            max_frames: 1_000_000,
            min_frame_errors: 100,
        }
    }
}

impl Stopping {
    /// Fixed frame count, no early stop.
    pub fn fixed(frames: u64) -> Self {
        Stopping {
            max_frames: frames,
            min_frame_errors: u64::MAX,
        }
    }
}

/// Counts for one decoder at one SNR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub snr_db: f64,
    pub frames: u64,
    pub frame_errors: u64,
    pub bit_errors: u64,
}

impl EvalPoint {
    pub fn fer(&self) -> f64 {
        ratio(self.frame_errors, self.frames)
    }

    /// Information-bit error rate; needs the code dimension.
    pub fn ber(&self, k: usize) -> f64 {
        ratio(self.bit_errors, self.frames * k as u64)
    }

    pub fn fer_interval(&self) -> (f64, f64) {
        wilson_interval(self.frame_errors, self.frames)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One decoder's FER/BER curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub decoder: String,
    pub seed: u64,
    /// Information bits per frame, used for BER.
    pub k: usize,
    pub points: Vec<EvalPoint>,
}

impl EvalReport {
    pub fn point(&self, snr_db: f64) -> Option<&EvalPoint> {
        self.points.iter().find(|p| p.snr_db == snr_db)
    }
}

/// 95% Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    const Z: f64 = 1.959963984540054;
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z * Z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Exhaustive maximum-likelihood decoding over all 2^K codewords.
///
/// For BPSK over AWGN, minimum Euclidean distance to `y` is the same as maximum
/// correlation with the channel LLRs, which is what is computed. Ties keep the
/// lowest-index message.
#[derive(Clone, Debug)]
pub struct MlDecoder {
    k: usize,
    /// Antipodal codewords, +1 for bit 0.
    codebook: Vec<Vec<f64>>,
}

impl MlDecoder {
    pub fn new(code: &PolarCode) -> Result<Self> {
        if code.n() > ML_MAX_BLOCK_LENGTH {
            return Err(Error::Dimensions { n: code.n(), k: code.k() });
        }
        let k = code.k();
        let codebook = (0..1u64 << k)
            .map(|m| {
                let info = BitVector::from_bools(&(0..k).map(|i| m >> i & 1 == 1).collect::<Vec<_>>());
                code.encode(&info).map(|c| crate::channel::bpsk_modulate(&c))
            })
            .collect::<Result<_>>()?;
        Ok(MlDecoder { k, codebook })
    }

    /// Decoded information bits.
    pub fn decode(&self, llr: &[f64]) -> BitVector {
        let mut best = 0;
        let mut best_metric = f64::NEG_INFINITY;
        for (m, x) in self.codebook.iter().enumerate() {
            let metric: f64 = x.iter().zip(llr).map(|(a, b)| a * b).sum();
            if metric > best_metric {
                best_metric = metric;
                best = m;
            }
        }
        BitVector::from_bools(&(0..self.k).map(|i| best >> i & 1 == 1).collect::<Vec<_>>())
    }
}

/// A decoder taking part in a comparison.
#[derive(Clone, Debug)]
pub enum Contender {
    Bp { label: String, weights: ScalingWeights },
    Ml { label: String },
}

impl Contender {
    pub fn bp(label: impl Into<String>, weights: ScalingWeights) -> Self {
        Contender::Bp { label: label.into(), weights }
    }

    pub fn label(&self) -> &str {
        match self {
            Contender::Bp { label, .. } | Contender::Ml { label } => label,
        }
    }
}

/// Settings shared by every decoder in a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub iterations: usize,
    pub llr_max: f64,
    pub snr_list: Vec<f64>,
    pub stopping: Stopping,
    pub seed: u64,
    pub snr_convention: SnrConvention,
}

enum Engine<'a> {
    Bp(&'a ScalingWeights),
    Ml(MlDecoder),
}

/// Per-decoder (frame errors, bit errors) for one chunk of frames.
fn run_chunk(
    code: &PolarCode,
    dec: &BpDecoder,
    engines: &[Engine<'_>],
    params: &ChannelParams,
    stream: u64,
    seed: u64,
    frames: usize,
) -> Result<Vec<(u64, u64)>> {
    let mut rng = substream(seed, stream);
    let mut counts = vec![(0u64, 0u64); engines.len()];
    for _ in 0..frames {
        let bits: Vec<bool> = (0..code.k()).map(|_| rng.gen()).collect();
        let info = BitVector::from_bools(&bits);
        let c = code.encode_butterfly(&info)?;
        let frame = Frame::simulate(&c, params, &mut rng);
        for (engine, count) in engines.iter().zip(&mut counts) {
            let decided = match engine {
                Engine::Bp(w) => code.info_from_message(&dec.decode(&frame.llr, w)?.u_hat)?,
                Engine::Ml(ml) => ml.decode(&frame.llr),
            };
            let mut diff = decided;
            diff.xor_assign(&info);
            let wrong = diff.count_ones() as u64;
            if wrong > 0 {
                count.0 += 1;
                count.1 += wrong;
            }
        }
    }
    Ok(counts)
}

/// Runs all contenders on identical frames. Frames come in fixed-size chunks, each
/// with its own RNG substream keyed by (SNR index, chunk index); chunks are
/// decoded in parallel but accumulated and checked against the stopping rule in
/// order, so the result does not depend on the thread count.
pub fn compare_contenders(code: &PolarCode, contenders: &[Contender], cfg: &SweepConfig) -> Result<Vec<EvalReport>> {
    if contenders.is_empty() {
        return Err(Error::Config("no decoders to evaluate".into()));
    }
    if cfg.stopping.max_frames == 0 {
        return Err(Error::BadValue {
            key: "max_frames".into(),
            msg: "must be > 0".into(),
        });
    }
    let dec = BpDecoder::new(code, cfg.iterations, cfg.llr_max)?;
    let engines: Vec<Engine<'_>> = contenders
        .iter()
        .map(|c| match c {
            Contender::Bp { weights, .. } => {
                dec.check_weights(weights)?;
                Ok(Engine::Bp(weights))
            }
            Contender::Ml { .. } => MlDecoder::new(code).map(Engine::Ml),
        })
        .collect::<Result<_>>()?;
    let mut reports: Vec<EvalReport> = contenders
        .iter()
        .map(|c| EvalReport {
            decoder: c.label().to_string(),
            seed: cfg.seed,
            k: code.k(),
            points: Vec::with_capacity(cfg.snr_list.len()),
        })
        .collect();

    let round = rayon::current_num_threads().max(1) * 2;
    for (si, &snr) in cfg.snr_list.iter().enumerate() {
        let params = ChannelParams::from_snr(snr, code.rate(), cfg.snr_convention)?;
        let max = cfg.stopping.max_frames;
        let n_chunks = max.div_ceil(CHUNK as u64);
        let mut frames = 0u64;
        let mut totals = vec![(0u64, 0u64); contenders.len()];
        let mut next = 0u64;
        'snr: while next < n_chunks {
            let end = (next + round as u64).min(n_chunks);
            let results: Vec<Vec<(u64, u64)>> = (next..end)
                .into_par_iter()
                .map(|chunk| {
                    let size = (max - chunk * CHUNK as u64).min(CHUNK as u64) as usize;
                    let stream = (si as u64) << 40 | chunk;
                    run_chunk(code, &dec, &engines, &params, stream, cfg.seed, size)
                })
                .collect::<Result<_>>()?;
            for (chunk, counts) in (next..end).zip(results) {
                frames += (max - chunk * CHUNK as u64).min(CHUNK as u64);
                for (t, c) in totals.iter_mut().zip(counts) {
                    t.0 += c.0;
                    t.1 += c.1;
                }
                if totals.iter().all(|t| t.0 >= cfg.stopping.min_frame_errors) {
                    break 'snr;
                }
            }
            next = end;
        }
        for (report, t) in reports.iter_mut().zip(totals) {
            report.points.push(EvalPoint {
                snr_db: snr,
                frames,
                frame_errors: t.0,
                bit_errors: t.1,
            });
        }
    }
    Ok(reports)
}

/// Sweep of a single weighted BP decoder.
pub fn fer_sweep(code: &PolarCode, label: &str, weights: &ScalingWeights, cfg: &SweepConfig) -> Result<EvalReport> {
    let mut reports = compare_contenders(code, &[Contender::bp(label, weights.clone())], cfg)?;
    Ok(reports.remove(0))
}

/// Paired comparison of labelled weight sets, preceded by the identity-weight
/// `conventional` baseline.
pub fn compare_decoders(
    code: &PolarCode,
    weight_sets: &[(String, ScalingWeights)],
    cfg: &SweepConfig,
) -> Result<Vec<EvalReport>> {
    let mut contenders = vec![Contender::bp(CONVENTIONAL, ScalingWeights::ones(code.n()))];
    contenders.extend(weight_sets.iter().map(|(l, w)| Contender::bp(l.clone(), w.clone())));
    compare_contenders(code, &contenders, cfg)
}

pub const REPORT_HEADER: [&str; 8] = ["decoder", "snr_db", "frames", "frame_errors", "bit_errors", "fer", "ber", "seed"];

/// One CSV row per (decoder, SNR). Rates carry 12 significant digits.
pub fn write_report(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_HEADER)?;
    for r in reports {
        for p in &r.points {
            w.write_record([
                r.decoder.clone(),
                p.snr_db.to_string(),
                p.frames.to_string(),
                p.frame_errors.to_string(),
                p.bit_errors.to_string(),
                format!("{:.11e}", p.fer()),
                format!("{:.11e}", p.ber(r.k)),
                r.seed.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses a report CSV, grouping rows by decoder in first-appearance order.
/// The code dimension is recovered from the BER column.
pub fn read_report(path: &Path) -> Result<Vec<EvalReport>> {
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.iter().ne(REPORT_HEADER) {
        return Err(Error::Report(format!("{}: unexpected header", path.display())));
    }
    let mut reports: Vec<EvalReport> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Report(format!("row {}: bad {what}", line + 2));
        let num = |i: usize, what: &str| rec.get(i).and_then(|v| v.parse::<u64>().ok()).ok_or_else(|| bad(what));
        let float = |i: usize, what: &str| rec.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad(what));
        let decoder = rec.get(0).ok_or_else(|| bad("decoder"))?.to_string();
        let point = EvalPoint {
            snr_db: float(1, "snr_db")?,
            frames: num(2, "frames")?,
            frame_errors: num(3, "frame_errors")?,
            bit_errors: num(4, "bit_errors")?,
        };
        let ber = float(6, "ber")?;
        let seed = num(7, "seed")?;
        if point.frame_errors > point.frames {
            return Err(bad("frame_errors"));
        }
        let k = if ber > 0.0 {
            (point.bit_errors as f64 / (ber * point.frames as f64)).round() as usize
        } else {
            0
        };
        match reports.iter_mut().find(|r| r.decoder == decoder) {
            Some(r) => {
                if r.k == 0 {
                    r.k = k;
                }
                r.points.push(point);
            }
            None => reports.push(EvalReport { decoder, seed, k, points: vec![point] }),
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(snrs: &[f64], stopping: Stopping, seed: u64) -> SweepConfig {
        SweepConfig {
            iterations: 5,
            llr_max: 30.0,
            snr_list: snrs.to_vec(),
            stopping,
            seed,
            snr_convention: SnrConvention::Ebn0,
        }
    }

    #[test]
    fn wilson_examples() {
        let (lo, hi) = wilson_interval(0, 100);
        assert!(lo.abs() < 1e-15);
        assert!((hi - 0.036994).abs() < 1e-5, "{hi}");
        let (lo, hi) = wilson_interval(50, 100);
        assert!((lo - 0.40383).abs() < 1e-4 && (hi - 0.59617).abs() < 1e-4, "{lo} {hi}");
    }

    #[test]
    fn ml_decodes_noiseless_and_matches_min_distance() {
        let code = PolarCode::construct(8, 4, 0.5).unwrap();
        let ml = MlDecoder::new(&code).unwrap();
        let mut rng = substream(9, 0);
        for m in 0..16u8 {
            let info = BitVector::from_bits(&(0..4).map(|i| m >> i & 1).collect::<Vec<_>>()).unwrap();
            let x = crate::channel::bpsk_modulate(&code.encode(&info).unwrap());
            assert_eq!(ml.decode(&x), info);
            // Euclidean oracle on a noisy observation
            let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-1.5..1.5)).collect();
            let best = (0..16u8)
                .map(|m2| {
                    let i2 = BitVector::from_bits(&(0..4).map(|i| m2 >> i & 1).collect::<Vec<_>>()).unwrap();
                    let x2 = crate::channel::bpsk_modulate(&code.encode(&i2).unwrap());
                    (x2.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i2)
                })
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
                .unwrap();
            assert_eq!(ml.decode(&y), best.1);
        }
        assert!(MlDecoder::new(&PolarCode::construct(32, 16, 0.5).unwrap()).is_err());
    }

    #[test]
    fn paired_and_deterministic() {
        let code = PolarCode::construct(16, 8, 0.5).unwrap();
        let c = cfg(&[1.0, 3.0], Stopping { max_frames: 3000, min_frame_errors: 50 }, 5);
        let w = ScalingWeights::ones(16);
        let a = compare_decoders(&code, &[("copy".into(), w.clone())], &c).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].decoder, CONVENTIONAL);
        assert_eq!(a[0].points, a[1].points);
        let b = compare_decoders(&code, &[("copy".into(), w)], &c).unwrap();
        assert_eq!(a, b);
        for p in &a[0].points {
            assert!(p.frame_errors >= 50 || p.frames == 3000);
            assert!(p.bit_errors >= p.frame_errors);
        }
        // thread count does not matter
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let single = pool.install(|| compare_decoders(&code, &[], &c).unwrap());
        assert_eq!(single[0], a[0]);
    }

    #[test]
    fn fixed_budget_and_noiseless() {
        let code = PolarCode::construct(16, 8, 0.5).unwrap();
        let r = fer_sweep(&code, "x", &ScalingWeights::ones(16), &cfg(&[20.0], Stopping::fixed(300), 1)).unwrap();
        assert_eq!(r.points[0].frames, 300);
        assert_eq!(r.points[0].frame_errors, 0);
        let bad = ScalingWeights::ones(8);
        assert!(fer_sweep(&code, "x", &bad, &cfg(&[1.0], Stopping::fixed(10), 1)).is_err());
    }

    #[test]
    fn fer_falls_with_snr() {
        let code = PolarCode::construct(16, 8, 0.5).unwrap();
        let r = fer_sweep(
            &code,
            "x",
            &ScalingWeights::ones(16),
            &cfg(&[0.0, 2.0, 4.0], Stopping { max_frames: 200_000, min_frame_errors: 200 }, 3),
        )
        .unwrap();
        for w in r.points.windows(2) {
            assert!(w[1].fer_interval().0 <= w[0].fer_interval().1, "{w:?}");
            assert!(w[1].fer() < w[0].fer());
        }
    }

    #[test]
    fn ml_is_a_lower_bound_on_small_code() {
        let code = PolarCode::construct(8, 4, 0.5).unwrap();
        let contenders = [Contender::bp(CONVENTIONAL, ScalingWeights::ones(8)), Contender::Ml { label: "ml".into() }];
        let c = cfg(&[0.0, 2.0], Stopping { max_frames: 100_000, min_frame_errors: 100 }, 2);
        let r = compare_contenders(&code, &contenders, &c).unwrap();
        for (bp, ml) in r[0].points.iter().zip(&r[1].points) {
            assert!(ml.frame_errors <= bp.frame_errors, "{bp:?} {ml:?}");
        }
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_report(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), REPORT_HEADER.join(",") + "\n");
        assert!(read_report(&path).unwrap().is_empty());

        let reports = vec![
            EvalReport {
                decoder: "conventional".into(),
                seed: 11,
                k: 32,
                points: vec![
                    EvalPoint { snr_db: 4.0, frames: 3000, frame_errors: 7, bit_errors: 33 },
                    EvalPoint { snr_db: 4.5, frames: 3, frame_errors: 1, bit_errors: 1 },
                ],
            },
            EvalReport {
                decoder: "bce".into(),
                seed: 11,
                k: 32,
                points: vec![
                    EvalPoint { snr_db: 4.0, frames: 3000, frame_errors: 3, bit_errors: 5 },
                    EvalPoint { snr_db: 4.5, frames: 3, frame_errors: 0, bit_errors: 0 },
                ],
            },
        ];
        write_report(&reports, &path).unwrap();
        assert_eq!(read_report(&path).unwrap(), reports);
        let text = std::fs::read_to_string(&path).unwrap();
        let row: Vec<&str> = text.lines().nth(2).unwrap().split(',').collect();
        assert_eq!(row[5], "3.33333333333e-1");
        let fer: f64 = row[5].parse().unwrap();
        assert!((fer - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(text.lines().count(), 5);
    }
}
