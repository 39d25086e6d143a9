use std::path::Path;

use super::{header_text, lookup, parse, read_file, required, split_header, write_file};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SertModel};
use crate::numerics::{AdamState, Tensor};

pub const CHECKPOINT_MAGIC: &str = "SRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters, optimizer state and the configuration that produced them.
///
/// Binary records follow the header: `u32` name length, name bytes, `u32`
/// rank, `u64` extents, then `f64` values, all little-endian. Parameters come
/// first in registration order, then Adam first and second moments under
/// `adam.m.<name>` and `adam.v.<name>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub params: Vec<(String, Tensor)>,
    pub adam: Option<AdamState>,
    /// Extra `key=value` provenance (training schedule, data seed, ...).
    pub extra: Vec<(String, String)>,
}

fn config_pairs(cfg: &ModelConfig) -> Vec<(String, String)> {
    cfg.to_kv()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().replace(' ', "")))
        .collect()
}

fn push_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(what, "truncated payload"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32("record name")? as usize;
        let name = std::str::from_utf8(self.take(len, "record name")?)
            .map_err(|_| Error::format("record name", "not valid UTF-8"))?
            .to_string();
        let rank = self.u32(&name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64(&name)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::format(name.as_str(), "shape overflows"))?;
        let raw = self.take(n * 8, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl Checkpoint {
    /// Snapshot of `model` (and optionally its optimizer) after `step` updates.
    pub fn capture(model: &SertModel, seed: u64, step: u64, adam: Option<&AdamState>) -> Self {
        Self {
            config: model.config().clone(),
            step,
            seed,
            params: model
                .store()
                .iter()
                .map(|(_, name, t)| (name.to_string(), t.clone()))
                .collect(),
            adam: adam.cloned(),
            extra: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut pairs: Vec<(String, String)> = vec![
            ("version".into(), CHECKPOINT_VERSION.to_string()),
            ("step".into(), self.step.to_string()),
            ("seed".into(), self.seed.to_string()),
        ];
        pairs.extend(config_pairs(&self.config).into_iter().map(|(k, v)| (format!("config.{k}"), v)));
        if let Some(a) = &self.adam {
            if a.m.len() != self.params.len() || a.v.len() != self.params.len() {
                return Err(Error::Internal("optimizer state does not match the parameters".into()));
            }
            pairs.push(("adam.step".into(), a.step.to_string()));
            pairs.push(("adam.lr".into(), a.lr.to_string()));
            pairs.push(("adam.beta1".into(), a.beta1.to_string()));
            pairs.push(("adam.beta2".into(), a.beta2.to_string()));
            pairs.push(("adam.eps".into(), a.eps.to_string()));
        }
        for (k, v) in &self.extra {
            if k.is_empty() || k.contains(['=', '\n', ' ']) || k.chars().any(|c| c.is_ascii_uppercase()) || v.contains('\n') {
                return Err(Error::format(format!("extra.{k}"), "keys must be lowercase, values single-line"));
            }
            pairs.push((format!("extra.{k}"), v.clone()));
        }
        pairs.push(("params".into(), self.params.len().to_string()));
        let mut out = header_text(&format!("{CHECKPOINT_MAGIC}{CHECKPOINT_VERSION}"), &pairs).into_bytes();
        for (name, t) in &self.params {
            push_record(&mut out, name, t);
        }
        if let Some(a) = &self.adam {
            for ((name, _), m) in self.params.iter().zip(&a.m) {
                push_record(&mut out, &format!("adam.m.{name}"), m);
            }
            for ((name, _), v) in self.params.iter().zip(&a.v) {
                push_record(&mut out, &format!("adam.v.{name}"), v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (pairs, payload) = split_header(bytes, &format!("{CHECKPOINT_MAGIC}{CHECKPOINT_VERSION}"))?;
        let version: u32 = parse("version", required(&pairs, "version")?)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format("version", format!("unsupported checkpoint version {version}")));
        }
        let config_text: String = pairs
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| format!("{k} = {v}\n")))
            .collect();
        let config = ModelConfig::from_kv(&config_text)?;
        let count: usize = parse("params", required(&pairs, "params")?)?;
        let mut reader = Reader { bytes: payload, pos: 0 };
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            params.push(reader.record()?);
        }
        let adam = match lookup(&pairs, "adam.step") {
            None => None,
            Some(step) => {
                let mut moments = |prefix: &str| -> Result<Vec<Tensor>> {
                    params
                        .iter()
                        .map(|(name, p)| {
                            let (n, t) = reader.record()?;
                            if n != format!("{prefix}{name}") {
                                return Err(Error::format(n, format!("expected `{prefix}{name}`")));
                            }
                            if t.shape() != p.shape() {
                                return Err(Error::ShapeConflict {
                                    name: n,
                                    expected: p.shape().to_vec(),
                                    found: t.shape().to_vec(),
                                });
                            }
                            Ok(t)
                        })
                        .collect()
                };
                let m = moments("adam.m.")?;
                let v = moments("adam.v.")?;
                let num = |k: &str| -> Result<f64> { parse(k, required(&pairs, k)?) };
                Some(AdamState {
                    step: parse("adam.step", step)?,
                    lr: num("adam.lr")?,
                    beta1: num("adam.beta1")?,
                    beta2: num("adam.beta2")?,
                    eps: num("adam.eps")?,
                    m,
                    v,
                })
            }
        };
        if reader.pos != payload.len() {
            return Err(Error::format("payload", format!("{} trailing bytes", payload.len() - reader.pos)));
        }
        Ok(Self {
            config,
            step: parse("step", required(&pairs, "step")?)?,
            seed: parse("seed", required(&pairs, "seed")?)?,
            params,
            adam,
            extra: pairs
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
                .collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }

    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Copies the stored parameters into `model`, which must have been built
    /// from the same configuration.
    pub fn restore_into(&self, model: &mut SertModel) -> Result<()> {
        if model.config() != &self.config {
            let ours = config_pairs(model.config());
            let diff: Vec<String> = config_pairs(&self.config)
                .into_iter()
                .filter(|p| !ours.contains(p))
                .map(|(k, v)| format!("{k}={v}"))
                .collect();
            return Err(Error::ConfigConflict(format!(
                "checkpoint was written for a different configuration ({})",
                diff.join(", ")
            )));
        }
        let store = model.store_mut();
        if store.len() != self.params.len() {
            return Err(Error::ConfigConflict(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::ConfigConflict(format!("model has no parameter `{name}`")))?;
            let slot = store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::ShapeConflict {
                    name: name.clone(),
                    expected: slot.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Builds the model described by this checkpoint.
    pub fn to_model(&self) -> Result<SertModel> {
        let mut model = SertModel::init(&self.config, self.seed)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }
}
