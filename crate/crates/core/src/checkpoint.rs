//! Single-file checkpoints: a text manifest (model config and, per array,
//! name / group / shape / offset) terminated by an `end` line, followed by
//! the arrays as little-endian `f64` in manifest order.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::model::{ChannelMode, HeadKind, Model, ModelConfig, ModelParams, ParamGroup};
use crate::patching::PatchMode;
use crate::tensor::Tensor;

const MAGIC: &str = "patchtst-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Dataset standardizer the model was trained under, if any.
    pub scaler: Option<Standardizer>,
}

fn config_lines(cfg: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("lookback", cfg.lookback.to_string()),
        ("horizon", cfg.horizon.to_string()),
        ("patch_len", cfg.patch_len.to_string()),
        ("stride", cfg.stride.to_string()),
        (
            "patch_mode",
            match cfg.patch_mode {
                PatchMode::PaddedOverlap => "overlap",
                PatchMode::NonOverlap => "nonoverlap",
            }
            .into(),
        ),
        ("d_model", cfg.d_model.to_string()),
        ("heads", cfg.heads.to_string()),
        ("d_ff", cfg.d_ff.to_string()),
        ("layers", cfg.layers.to_string()),
        ("dropout", cfg.dropout.to_string()),
        (
            "channel_mode",
            match cfg.channel_mode {
                ChannelMode::Independent => "independent",
                ChannelMode::Mixing => "mixing",
            }
            .into(),
        ),
        ("channels", cfg.channels.to_string()),
        ("instance_norm", cfg.instance_norm.to_string()),
        (
            "head_kind",
            match cfg.head_kind {
                HeadKind::Forecast => "forecast",
                HeadKind::Reconstruct => "reconstruct",
            }
            .into(),
        ),
    ]
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(format!("bad value `{v}` for {key}")))
}

fn set_config(cfg: &mut ModelConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "lookback" => cfg.lookback = num(key, v)?,
        "horizon" => cfg.horizon = num(key, v)?,
        "patch_len" => cfg.patch_len = num(key, v)?,
        "stride" => cfg.stride = num(key, v)?,
        "patch_mode" => {
            cfg.patch_mode = match v {
                "overlap" => PatchMode::PaddedOverlap,
                "nonoverlap" => PatchMode::NonOverlap,
                _ => return Err(bad(format!("bad patch_mode {v}"))),
            }
        }
        "d_model" => cfg.d_model = num(key, v)?,
        "heads" => cfg.heads = num(key, v)?,
        "d_ff" => cfg.d_ff = num(key, v)?,
        "layers" => cfg.layers = num(key, v)?,
        "dropout" => cfg.dropout = num(key, v)?,
        "channel_mode" => {
            cfg.channel_mode = match v {
                "independent" => ChannelMode::Independent,
                "mixing" => ChannelMode::Mixing,
                _ => return Err(bad(format!("bad channel_mode {v}"))),
            }
        }
        "channels" => cfg.channels = num(key, v)?,
        "instance_norm" => cfg.instance_norm = num(key, v)?,
        "head_kind" => {
            cfg.head_kind = match v {
                "forecast" => HeadKind::Forecast,
                "reconstruct" => HeadKind::Reconstruct,
                _ => return Err(bad(format!("bad head_kind {v}"))),
            }
        }
        _ => return Err(bad(format!("unknown config field {key}"))),
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(model: Model, scaler: Option<Standardizer>) -> Self {
        Self { model, scaler }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays: Vec<(&str, &str, Vec<usize>, &[f64])> = self
            .model
            .params
            .iter()
            .map(|(name, p)| (name, p.group.as_str(), p.tensor.shape().to_vec(), p.tensor.data()))
            .collect();
        if let Some(s) = &self.scaler {
            arrays.push(("scaler.mean", "scaler", vec![s.mean.len()], &s.mean));
            arrays.push(("scaler.std", "scaler", vec![s.std.len()], &s.std));
        }
        let mut manifest = String::new();
        let _ = writeln!(manifest, "{MAGIC}");
        for (k, v) in config_lines(&self.model.config) {
            let _ = writeln!(manifest, "config {k} {v}");
        }
        let mut offset = 0;
        for (name, group, shape, data) in &arrays {
            let dims: Vec<String> = shape.iter().map(ToString::to_string).collect();
            let _ = writeln!(manifest, "array {name} {group} {} {offset}", dims.join(","));
            offset += data.len();
        }
        let _ = writeln!(manifest, "end");
        let mut bytes = manifest.into_bytes();
        bytes.reserve(offset * 8);
        for (_, _, _, data) in &arrays {
            for v in data.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const END: &[u8] = b"\nend\n";
        let split = bytes
            .windows(END.len())
            .position(|w| w == END)
            .ok_or_else(|| bad("manifest terminator not found"))?;
        let manifest = std::str::from_utf8(&bytes[..split])
            .map_err(|_| bad("manifest is not UTF-8"))?;
        let body = &bytes[split + END.len()..];
        if body.len() % 8 != 0 {
            return Err(bad("binary section is not a whole number of f64 values"));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();

        let mut lines = manifest.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("not a checkpoint file"));
        }
        let mut config = ModelConfig::default();
        let mut params = ModelParams::new();
        let mut scaler_mean = None;
        let mut scaler_std = None;
        let mut expected_offset = 0;
        for line in lines {
            let parts: Vec<&str> = line.split(' ').collect();
            match parts.as_slice() {
                ["config", key, value] => set_config(&mut config, key, value)?,
                ["array", name, group, dims, offset] => {
                    let shape: Vec<usize> = dims
                        .split(',')
                        .map(|d| num("shape", d))
                        .collect::<Result<_>>()?;
                    let offset: usize = num("offset", offset)?;
                    let len: usize = shape.iter().product();
                    if offset != expected_offset || offset + len > values.len() {
                        return Err(bad(format!("array {name} has an inconsistent offset")));
                    }
                    expected_offset += len;
                    let data = values[offset..offset + len].to_vec();
                    if *group == "scaler" {
                        match *name {
                            "scaler.mean" => scaler_mean = Some(data),
                            "scaler.std" => scaler_std = Some(data),
                            _ => return Err(bad(format!("unknown scaler array {name}"))),
                        }
                    } else {
                        let group = ParamGroup::parse(group)
                            .ok_or_else(|| bad(format!("unknown group {group}")))?;
                        params.insert(*name, Tensor::new(shape, data)?, group);
                    }
                }
                _ => return Err(bad(format!("unreadable manifest line `{line}`"))),
            }
        }
        if expected_offset != values.len() {
            return Err(bad("trailing data after the last array"));
        }
        config.validate()?;
        let scaler = match (scaler_mean, scaler_std) {
            (Some(mean), Some(std)) => Some(Standardizer { mean, std }),
            (None, None) => None,
            _ => return Err(bad("incomplete scaler")),
        };
        let ckpt = Self {
            model: Model { config, params },
            scaler,
        };
        ckpt.check_names()?;
        Ok(ckpt)
    }

    /// The parameter names and shapes must be exactly those a fresh model
    /// of the stored config would have.
    fn check_names(&self) -> Result<()> {
        let reference = ModelParams::init(&self.model.config, 0)?;
        let ours = &self.model.params;
        if reference.len() != ours.len() {
            return Err(bad(format!(
                "expected {} arrays, found {}",
                reference.len(),
                ours.len()
            )));
        }
        for ((rn, rp), (on, op)) in reference.iter().zip(ours.iter()) {
            if rn != on || rp.tensor.shape() != op.tensor.shape() || rp.group != op.group {
                return Err(bad(format!("array {on} does not match the canonical set ({rn})")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = ModelConfig {
            lookback: 32,
            horizon: 8,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            layers: 2,
            dropout: 0.1,
            ..ModelConfig::default()
        };
        let mut model = Model::new(cfg, 3).unwrap();
        // Awkward values survive too.
        let w = model.params.tensor_mut("embed.w_p").unwrap();
        w.data_mut()[0] = -0.0;
        w.data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        w.data_mut()[2] = 1.0 / 3.0;
        let scaler = Standardizer {
            mean: vec![1.5, -2.0],
            std: vec![0.1, 3.0],
        };
        let ckpt = Checkpoint::new(model, Some(scaler));
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for ((_, a), (_, b)) in back.model.params.iter().zip(ckpt.model.params.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
        assert_eq!(back.model.config, ckpt.model.config);
        assert_eq!(back.scaler, ckpt.scaler);
    }

    #[test]
    fn rejects_damaged_files() {
        let cfg = ModelConfig {
            lookback: 16,
            horizon: 4,
            patch_len: 4,
            stride: 4,
            d_model: 4,
            heads: 2,
            d_ff: 8,
            layers: 1,
            ..ModelConfig::default()
        };
        let bytes = Checkpoint::new(Model::new(cfg, 1).unwrap(), None).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"hello\nend\n").is_err());
        let text = String::from_utf8_lossy(&bytes).replace("embed.w_pos", "embed.w_poz");
        assert!(Checkpoint::from_bytes(text.as_bytes()).is_err());
    }
}
