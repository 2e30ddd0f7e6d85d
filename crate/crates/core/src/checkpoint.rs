//! Self-describing model files.
//!
//! A checkpoint is a short text header of `key=value` lines (format
//! version, variant, network configuration, training configuration and a
//! history summary) terminated by `end_header`, followed by one raw tensor
//! per network parameter. Reals in the header use Rust's shortest
//! round-trip formatting and tensors are stored as raw `f64` bits, so a
//! load after a save reproduces the model exactly.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::RawTensor;
use crate::diff::Matrix;
use crate::error::{Error, Result};
use crate::icnn::{Activation, IcnnConfig, IcnnParams};
use crate::potential::{PotentialVariant, ProxModel, VariantKind};
use crate::training::{PretrainLoss, TrainConfig, TrainHistory};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC_LINE: &str = "aelpn-checkpoint";
const END_LINE: &str = "end_header";

/// Condensed training history stored alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct HistorySummary {
    pub entries: usize,
    pub final_step: usize,
    pub final_loss: f64,
    pub final_eval_psnr: Option<f64>,
}

impl HistorySummary {
    pub fn from_history(h: &TrainHistory) -> Option<Self> {
        let last = h.entries.last()?;
        Some(Self {
            entries: h.entries.len(),
            final_step: last.step,
            final_loss: last.loss,
            final_eval_psnr: last.eval_psnr,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ProxModel,
    pub seed: u64,
    pub train: Option<TrainConfig>,
    pub history: Option<HistorySummary>,
}

impl Checkpoint {
    pub fn new(model: ProxModel, seed: u64) -> Self {
        Self {
            model,
            seed,
            train: None,
            history: None,
        }
    }

    pub fn with_training(mut self, cfg: &TrainConfig, history: &TrainHistory) -> Self {
        self.train = Some(cfg.clone());
        self.history = HistorySummary::from_history(history);
        self
    }

    pub fn header_lines(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| kv.push((k.to_string(), v));
        let c = self.model.config();
        put("format_version", FORMAT_VERSION.to_string());
        put("variant", self.model.kind().tag().to_string());
        put("alpha", format!("{:?}", self.model.variant().alpha));
        put("seed", self.seed.to_string());
        put("icnn.input_dim", c.input_dim.to_string());
        put(
            "icnn.hidden_widths",
            c.hidden_widths.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        put("icnn.activation", c.activation.tag());
        put("icnn.use_bias", c.use_bias.to_string());
        put("icnn.x_skip", c.x_skip.to_string());
        put("icnn.final_rectify_square", c.final_rectify_square.to_string());
        if let Some(t) = &self.train {
            put("train.sigma_noise", format!("{:?}", t.sigma_noise));
            put("train.batch_size", t.batch_size.to_string());
            put("train.pretrain_steps", t.pretrain_steps.to_string());
            put("train.match_steps", t.match_steps.to_string());
            put("train.lr_pretrain", format!("{:?}", t.lr_pretrain));
            put("train.lr_match", format!("{:?}", t.lr_match));
            put("train.gamma0", format!("{:?}", t.gamma0));
            put("train.gamma_halve_every", t.gamma_halve_every.to_string());
            put("train.gamma_min", format!("{:?}", t.gamma_min));
            put("train.seed", t.seed.to_string());
            put("train.loss_pretrain", t.loss_pretrain.tag().to_string());
            put("train.log_every", t.log_every.to_string());
            put("train.ema_decay", format!("{:?}", t.ema_decay));
        }
        if let Some(h) = &self.history {
            put("history.entries", h.entries.to_string());
            put("history.final_step", h.final_step.to_string());
            put("history.final_loss", format!("{:?}", h.final_loss));
            if let Some(p) = h.final_eval_psnr {
                put("history.final_eval_psnr", format!("{p:?}"));
            }
        }
        put("tensors", self.model.params().tensors().len().to_string());
        kv
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        out.push_str(MAGIC_LINE);
        out.push('\n');
        for (k, v) in self.header_lines() {
            out.push_str(&format!("{k}={v}\n"));
        }
        out.push_str(END_LINE);
        out.push('\n');
        let mut bytes = out.into_bytes();
        for m in self.model.params().tensors() {
            let (r, c) = m.shape();
            let t = RawTensor {
                dims: vec![r as u64, c as u64],
                data: m.as_slice().to_vec(),
            };
            bytes.extend(t.encode());
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut pos) = split_header(bytes)?;
        let h = Header(header);
        let version: u32 = h.parse("format_version")?;
        if version > FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let kind = VariantKind::parse(h.get("variant")?).map_err(bad)?;
        let variant = PotentialVariant::new(kind, h.parse("alpha")?).map_err(bad)?;
        let widths = h.get("icnn.hidden_widths")?;
        let config = IcnnConfig {
            input_dim: h.parse("icnn.input_dim")?,
            hidden_widths: if widths.is_empty() {
                Vec::new()
            } else {
                widths
                    .split(',')
                    .map(|w| w.parse().map_err(|_| bad_value("icnn.hidden_widths", widths)))
                    .collect::<Result<_>>()?
            },
            activation: Activation::parse(h.get("icnn.activation")?).map_err(bad)?,
            use_bias: h.parse("icnn.use_bias")?,
            x_skip: h.parse("icnn.x_skip")?,
            final_rectify_square: h.parse("icnn.final_rectify_square")?,
        };
        config.validate().map_err(bad)?;
        let train = if h.0.contains_key("train.sigma_noise") {
            Some(TrainConfig {
                sigma_noise: h.parse("train.sigma_noise")?,
                batch_size: h.parse("train.batch_size")?,
                pretrain_steps: h.parse("train.pretrain_steps")?,
                match_steps: h.parse("train.match_steps")?,
                lr_pretrain: h.parse("train.lr_pretrain")?,
                lr_match: h.parse("train.lr_match")?,
                gamma0: h.parse("train.gamma0")?,
                gamma_halve_every: h.parse("train.gamma_halve_every")?,
                gamma_min: h.parse("train.gamma_min")?,
                seed: h.parse("train.seed")?,
                loss_pretrain: PretrainLoss::parse(h.get("train.loss_pretrain")?).map_err(bad)?,
                log_every: h.parse("train.log_every")?,
                ema_decay: h.parse("train.ema_decay")?,
            })
        } else {
            None
        };
        let history = if h.0.contains_key("history.entries") {
            Some(HistorySummary {
                entries: h.parse("history.entries")?,
                final_step: h.parse("history.final_step")?,
                final_loss: h.parse("history.final_loss")?,
                final_eval_psnr: match h.0.get("history.final_eval_psnr") {
                    Some(_) => Some(h.parse("history.final_eval_psnr")?),
                    None => None,
                },
            })
        } else {
            None
        };
        let count: usize = h.parse("tensors")?;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let (t, used) = RawTensor::decode(&bytes[pos..])?;
            pos += used;
            let [r, c] = t.dims[..] else {
                return Err(Error::Checkpoint(format!("parameter tensor has dims {:?}", t.dims)));
            };
            tensors.push(Matrix::from_vec(r as usize, c as usize, t.data)?);
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let params = IcnnParams::from_tensors(&config, tensors).map_err(bad)?;
        Ok(Self {
            model: ProxModel::new(variant, params).map_err(bad)?,
            seed: h.parse("seed")?,
            train,
            history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn bad(e: Error) -> Error {
    match e {
        Error::Checkpoint(_) => e,
        other => Error::Checkpoint(other.to_string()),
    }
}

fn bad_value(key: &str, value: &str) -> Error {
    Error::Checkpoint(format!("invalid value {value:?} for {key}"))
}

struct Header(BTreeMap<String, String>);

impl Header {
    fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing header key {key}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| bad_value(key, v))
    }
}

fn split_header(bytes: &[u8]) -> Result<(BTreeMap<String, String>, usize)> {
    let mut map = BTreeMap::new();
    let mut pos = 0;
    let mut first = true;
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("header is not terminated".into()))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::Checkpoint(format!("non-UTF-8 header line at byte {pos}")))?;
        pos += nl + 1;
        if first {
            if line != MAGIC_LINE {
                return Err(Error::Checkpoint("not an aelpn checkpoint".into()));
            }
            first = false;
            continue;
        }
        if line == END_LINE {
            return Ok((map, pos));
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed header line {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
}
