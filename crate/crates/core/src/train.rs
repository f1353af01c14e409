//! Mini-batch SGD on the scaling weights, supervised (BCE) or label-free
//! (frozen-bit syndrome loss), with per-epoch validation.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bits::BitVector;
use crate::channel::{substream, ChannelParams, Frame, SnrConvention};
use crate::config::KeyValues;
use crate::decoder::{BpDecoder, DEFAULT_LLR_MAX};
use crate::error::{Error, Result};
use crate::grad::{batch_loss_and_grad, FrameRef, GradientSet};
use crate::loss::{self, LossKind};
use crate::polar::PolarCode;
use crate::weights::ScalingWeights;

/// Which epoch's weights [`train`] returns as the checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSelect {
    /// Lowest validation FER (earliest epoch on ties).
    #[default]
    ValFer,
    /// Lowest validation loss.
    ValLoss,
    /// Weights after the final epoch.
    Last,
}

impl std::str::FromStr for CheckpointSelect {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "val_fer" => Ok(CheckpointSelect::ValFer),
            "val_loss" => Ok(CheckpointSelect::ValLoss),
            "last" => Ok(CheckpointSelect::Last),
            other => Err(format!("unknown selection `{other}` (val_fer|val_loss|last)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub snr_list: Vec<f64>,
    /// Frames drawn per SNR before the train/validation split.
    pub codewords_per_snr: usize,
    pub mini_batch: usize,
    pub learning_rate: f64,
    pub validation_ratio: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation-FER improvement.
    pub patience: Option<usize>,
    pub seed: u64,
    pub loss: LossKind,
    pub llr_max: f64,
    pub snr_convention: SnrConvention,
    pub select: CheckpointSelect,
}

impl TrainConfig {
    /// Reduced-size defaults for a (64,32), T=5 run: 6 SNRs × 6,000 frames, M = 600.
    pub fn desk_scale(loss: LossKind, seed: u64) -> Self {
        TrainConfig {
            iterations: 5,
            snr_list: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0],
            codewords_per_snr: 6_000,
            mini_batch: 600,
            learning_rate: 0.03,
            validation_ratio: 0.2,
            max_epochs: 50,
            patience: None,
            seed,
            loss,
            llr_max: DEFAULT_LLR_MAX,
            snr_convention: SnrConvention::Ebn0,
            select: CheckpointSelect::ValFer,
        }
    }

    /// Full-size settings: 60,000 frames per SNR, M = 3,600.
    pub fn full_scale(loss: LossKind, seed: u64) -> Self {
        TrainConfig {
            codewords_per_snr: 60_000,
            mini_batch: 3_600,
            ..TrainConfig::desk_scale(loss, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::BadValue {
                key: key.to_string(),
                msg: msg.to_string(),
            })
        };
        if self.iterations == 0 {
            return bad("iterations", "must be >= 1");
        }
        if self.snr_list.is_empty() || self.snr_list.iter().any(|s| !s.is_finite()) {
            return bad("snr_list", "needs at least one finite value");
        }
        if self.codewords_per_snr < 2 {
            return bad("codewords_per_snr", "must be >= 2");
        }
        if self.mini_batch == 0 {
            return bad("mini_batch", "must be > 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be > 0");
        }
        if !(self.validation_ratio > 0.0 && self.validation_ratio < 1.0) {
            return bad("validation_ratio", "must lie in (0, 1)");
        }
        if !(self.llr_max > 0.0 && self.llr_max.is_finite()) {
            return bad("llr_max", "must be > 0");
        }
        let val = self.validation_count();
        if val == 0 || val >= self.codewords_per_snr {
            return bad("validation_ratio", "leaves an empty train or validation split");
        }
        Ok(())
    }

    /// Validation frames per SNR.
    pub fn validation_count(&self) -> usize {
        (self.codewords_per_snr as f64 * self.validation_ratio).round() as usize
    }

    /// Reads the training keys from a flat config, leaving any other keys in `kv`.
    pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
        let cfg = TrainConfig {
            iterations: kv.require("iterations")?,
            snr_list: kv.require_list("snr_list")?,
            codewords_per_snr: kv.require("codewords_per_snr")?,
            mini_batch: kv.require("mini_batch")?,
            learning_rate: kv.require("learning_rate")?,
            validation_ratio: kv.require("validation_ratio")?,
            max_epochs: kv.require("max_epochs")?,
            patience: kv.take("patience")?,
            seed: kv.require("seed")?,
            loss: kv.require("loss")?,
            llr_max: kv.take("llr_max")?.unwrap_or(DEFAULT_LLR_MAX),
            snr_convention: kv.take("snr_convention")?.unwrap_or_default(),
            select: kv.take("select")?.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One simulated frame. Labels are used only by supervised losses and by FER measurement.
#[derive(Clone, Debug)]
pub struct Sample {
    pub snr_db: f64,
    pub llr: Vec<f64>,
    pub info: Option<BitVector>,
    pub codeword: Option<BitVector>,
}

impl Sample {
    pub fn frame_ref(&self) -> FrameRef<'_> {
        FrameRef {
            llr: &self.llr,
            label: self.codeword.as_ref(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Drops every message and codeword label.
    pub fn strip_labels(&mut self) {
        for s in &mut self.samples {
            s.info = None;
            s.codeword = None;
        }
    }

    pub fn has_labels(&self) -> bool {
        self.samples.iter().all(|s| s.info.is_some() && s.codeword.is_some())
    }
}

/// Draws `codewords_per_snr` frames per SNR from `rng` and splits off the last
/// `validation_ratio` share of each SNR block for validation.
pub fn generate_dataset<R: Rng>(config: &TrainConfig, code: &PolarCode, rng: &mut R) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    let n_val = config.validation_count();
    let mut train = Dataset::default();
    let mut val = Dataset::default();
    for &snr in &config.snr_list {
        let params = ChannelParams::from_snr(snr, code.rate(), config.snr_convention)?;
        for i in 0..config.codewords_per_snr {
            let bits: Vec<bool> = (0..code.k()).map(|_| rng.gen()).collect();
            let info = BitVector::from_bools(&bits);
            let c = code.encode_butterfly(&info)?;
            let frame = Frame::simulate(&c, &params, rng);
            let sample = Sample {
                snr_db: snr,
                llr: frame.llr,
                info: Some(info),
                codeword: Some(c),
            };
            if i < config.codewords_per_snr - n_val {
                train.samples.push(sample);
            } else {
                val.samples.push(sample);
            }
        }
    }
    Ok((train, val))
}

/// `θ ← θ − η·∇θ`.
pub fn sgd_step(weights: &mut ScalingWeights, grads: &GradientSet, learning_rate: f64) -> Result<()> {
    if grads.d_alpha.len() != weights.alpha().len() || grads.d_beta.len() != weights.beta().len() {
        return Err(Error::Length {
            what: "gradient",
            expected: weights.num_params(),
            actual: grads.d_alpha.len() + grads.d_beta.len(),
        });
    }
    for (w, g) in weights.alpha_mut().iter_mut().zip(&grads.d_alpha) {
        *w -= learning_rate * g;
    }
    for (w, g) in weights.beta_mut().iter_mut().zip(&grads.d_beta) {
        *w -= learning_rate * g;
    }
    Ok(())
}

const EVAL_CHUNK: usize = 64;

/// Mean loss and information-bit FER over a labelled set.
pub fn validate(
    weights: &ScalingWeights,
    set: &Dataset,
    code: &PolarCode,
    dec: &BpDecoder,
    kind: LossKind,
) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::Config("empty validation set".into()));
    }
    let partials: Vec<(f64, usize)> = set
        .samples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let mut loss_sum = 0.0;
            let mut errors = 0;
            for s in chunk {
                let out = dec.decode(&s.llr, weights)?;
                loss_sum += loss::frame_loss(kind, &out.s, code, s.codeword.as_ref())
                    .ok_or(Error::MissingLabels)?;
                let truth = s.info.as_ref().ok_or(Error::MissingLabels)?;
                if &code.info_from_message(&out.u_hat)? != truth {
                    errors += 1;
                }
            }
            Ok((loss_sum, errors))
        })
        .collect::<Result<_>>()?;
    let (loss_sum, errors) = partials
        .iter()
        .fold((0.0, 0usize), |(l, e), (pl, pe)| (l + pl, e + pe));
    let n = set.len() as f64;
    Ok((loss_sum / n, errors as f64 / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean mini-batch loss over the epoch (epoch 0: loss of the initial weights on the training set).
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_fer: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights chosen by [`TrainConfig::select`].
    pub weights: ScalingWeights,
    pub best_epoch: usize,
    pub final_weights: ScalingWeights,
    pub history: Vec<EpochReport>,
}

/// Generates the dataset from `config.seed`, withholds training labels when the
/// loss is label-free, and runs [`train_on`].
pub fn train(config: &TrainConfig, code: &PolarCode, on_epoch: impl FnMut(&EpochReport)) -> Result<TrainOutcome> {
    let mut rng = substream(config.seed, 0);
    let (mut train_set, val_set) = generate_dataset(config, code, &mut rng)?;
    if !config.loss.needs_labels() {
        train_set.strip_labels();
    }
    train_on(config, code, &train_set, &val_set, on_epoch)
}

fn mean_train_loss(
    weights: &ScalingWeights,
    set: &Dataset,
    code: &PolarCode,
    dec: &BpDecoder,
    kind: LossKind,
) -> Result<f64> {
    let refs: Vec<FrameRef<'_>> = set.samples.iter().map(Sample::frame_ref).collect();
    crate::grad::batch_loss(dec, weights, code, kind, &refs)
}

/// SGD from all-ones weights. Epoch 0 in the history is the untrained decoder.
pub fn train_on(
    config: &TrainConfig,
    code: &PolarCode,
    train_set: &Dataset,
    val_set: &Dataset,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let dec = BpDecoder::new(code, config.iterations, config.llr_max)?;
    let mut weights = ScalingWeights::ones(code.n());
    let mut shuffle_rng = substream(config.seed, 1);
    let mut history = Vec::with_capacity(config.max_epochs + 1);

    let start = Instant::now();
    let train_loss = mean_train_loss(&weights, train_set, code, &dec, config.loss)?;
    let (val_loss, val_fer) = validate(&weights, val_set, code, &dec, config.loss)?;
    let report = EpochReport {
        epoch: 0,
        train_loss,
        val_loss,
        val_fer,
        seconds: start.elapsed().as_secs_f64(),
    };
    on_epoch(&report);
    history.push(report);

    let mut best = (weights.clone(), 0usize, val_fer, val_loss);
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(config.mini_batch).enumerate() {
            let refs: Vec<FrameRef<'_>> = idx.iter().map(|&i| train_set.samples[i].frame_ref()).collect();
            let (value, grads) = batch_loss_and_grad(&dec, &weights, code, config.loss, &refs)?;
            if !value.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            sgd_step(&mut weights, &grads, config.learning_rate)?;
            loss_sum += value;
            batches += 1;
        }
        let (val_loss, val_fer) = validate(&weights, val_set, code, &dec, config.loss)?;
        let report = EpochReport {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            val_fer,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&report);
        history.push(report);

        let improved = match config.select {
            CheckpointSelect::ValFer => val_fer < best.2,
            CheckpointSelect::ValLoss => val_loss < best.3,
            CheckpointSelect::Last => true,
        };
        if val_fer < best.2 || config.select != CheckpointSelect::ValFer && improved {
            since_best = 0;
        } else {
            since_best += 1;
        }
        if improved {
            best = (weights.clone(), epoch, val_fer, val_loss);
        }
        if config.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }

    Ok(TrainOutcome {
        weights: best.0,
        best_epoch: best.1,
        final_weights: weights,
        history,
    })
}

/// Writes `epoch,train_loss,val_loss,val_fer,seconds`.
pub fn write_history(path: &Path, history: &[EpochReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_loss", "val_fer", "seconds"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.val_fer.to_string(),
            format!("{:.3}", r.seconds),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochReport>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Report(format!("bad history field {i} in {rec:?}")))
        };
        out.push(EpochReport {
            epoch: field(0)? as usize,
            train_loss: field(1)?,
            val_loss: field(2)?,
            val_fer: field(3)?,
            seconds: field(4)?,
        });
    }
    Ok(out)
}
