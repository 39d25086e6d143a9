use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::rect_attention::RectSpec;
use crate::spectral_enhance::{GateKind, Placement};

/// One Residual Transformer Layer: its rectangle and number of blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub rect: RectSpec,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub bands: usize,
    pub channels: usize,
    pub rank: usize,
    pub memory_entries: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub layers: Vec<LayerSpec>,
    pub use_ra: bool,
    pub use_se: bool,
    pub use_shuffle: bool,
    pub use_mu: bool,
    pub use_mlp: bool,
    pub use_norm: bool,
    /// 3x3 convolution closing each layer before its residual.
    pub use_layer_conv: bool,
    /// 3x3 convolution with residual around the whole layer stack.
    pub use_body_conv: bool,
    pub se_gate: GateKind,
    pub se_placement: Placement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let layer = |h, w| LayerSpec {
            rect: RectSpec { h, w },
            blocks: 6,
        };
        Self {
            bands: 31,
            channels: 96,
            rank: 12,
            memory_entries: 31,
            heads: 2,
            mlp_ratio: 2,
            layers: vec![layer(16, 1), layer(32, 2), layer(32, 4)],
            use_ra: true,
            use_se: true,
            use_shuffle: true,
            use_mu: true,
            use_mlp: true,
            use_norm: true,
            use_layer_conv: true,
            use_body_conv: true,
            se_gate: GateKind::Linear,
            se_placement: Placement::NonLocal,
        }
    }
}

const KEYS: &[&str] = &[
    "bands",
    "channels",
    "rank",
    "memory_entries",
    "heads",
    "mlp_ratio",
    "rects",
    "blocks",
    "use_ra",
    "use_se",
    "use_shuffle",
    "use_mu",
    "use_mlp",
    "use_norm",
    "use_layer_conv",
    "use_body_conv",
    "se_gate",
    "se_placement",
];

impl ModelConfig {
    /// Small configuration used by the gradient and golden tests.
    pub fn toy(bands: usize, channels: usize, rank: usize, rects: &[(usize, usize)], blocks: usize) -> Self {
        Self {
            bands,
            channels,
            rank,
            memory_entries: 3,
            layers: rects
                .iter()
                .map(|&(h, w)| LayerSpec {
                    rect: RectSpec { h, w },
                    blocks,
                })
                .collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.bands == 0 {
            return fail("bands must be positive".into());
        }
        if self.channels == 0 || !self.channels.is_multiple_of(2) {
            return fail(format!("channels must be even and positive, got {}", self.channels));
        }
        if self.use_se && (self.rank == 0 || self.rank >= self.channels) {
            return fail(format!(
                "rank K={} must satisfy 1 <= K < C={}",
                self.rank, self.channels
            ));
        }
        if self.use_se && self.use_mu && self.memory_entries == 0 {
            return fail("memory_entries must be positive".into());
        }
        if self.heads == 0 || !(self.channels / 2).is_multiple_of(self.heads) {
            return fail(format!(
                "{} heads do not divide the {} branch channels",
                self.heads,
                self.channels / 2
            ));
        }
        if self.use_mlp && self.mlp_ratio == 0 {
            return fail("mlp_ratio must be positive".into());
        }
        if self.layers.is_empty() {
            return fail("at least one layer is required".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            RectSpec::new(l.rect.h, l.rect.w)?;
            if l.blocks == 0 {
                return fail(format!("layer {i} has no blocks"));
            }
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.layers.iter().map(|l| l.blocks).sum()
    }

    /// Flat `key = value` text listing every field.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let rects: Vec<String> = self
            .layers
            .iter()
            .map(|l| format!("{}x{}", l.rect.h, l.rect.w))
            .collect();
        let blocks: Vec<String> = self.layers.iter().map(|l| l.blocks.to_string()).collect();
        let _ = writeln!(s, "bands = {}", self.bands);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "rank = {}", self.rank);
        let _ = writeln!(s, "memory_entries = {}", self.memory_entries);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "mlp_ratio = {}", self.mlp_ratio);
        let _ = writeln!(s, "rects = {}", rects.join(", "));
        let _ = writeln!(s, "blocks = {}", blocks.join(", "));
        for (k, v) in [
            ("use_ra", self.use_ra),
            ("use_se", self.use_se),
            ("use_shuffle", self.use_shuffle),
            ("use_mu", self.use_mu),
            ("use_mlp", self.use_mlp),
            ("use_norm", self.use_norm),
            ("use_layer_conv", self.use_layer_conv),
            ("use_body_conv", self.use_body_conv),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let gate = match self.se_gate {
            GateKind::Linear => "linear",
            GateKind::Sigmoid => "sigmoid",
        };
        let placement = match self.se_placement {
            Placement::NonLocal => "nonlocal",
            Placement::Local => "local",
            Placement::Global => "global",
        };
        let _ = writeln!(s, "se_gate = {gate}");
        let _ = writeln!(s, "se_placement = {placement}");
        s
    }

    /// Parses `key = value` lines (`#` starts a comment) on top of the
    /// defaults. Unknown keys are rejected.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut rects: Option<Vec<RectSpec>> = None;
        let mut blocks: Option<Vec<usize>> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            apply_key(&mut cfg, key, value, &mut rects, &mut blocks)?;
        }
        match (rects, blocks) {
            (None, None) => {}
            (rects, blocks) => {
                let rects = rects.unwrap_or_else(|| cfg.layers.iter().map(|l| l.rect).collect());
                let blocks = match blocks {
                    Some(b) if b.len() == 1 && rects.len() > 1 => vec![b[0]; rects.len()],
                    Some(b) => b,
                    None => vec![cfg.layers.first().map_or(6, |l| l.blocks); rects.len()],
                };
                if rects.len() != blocks.len() {
                    return Err(Error::format(
                        "blocks",
                        format!("{} rectangles but {} block counts", rects.len(), blocks.len()),
                    ));
                }
                cfg.layers = rects
                    .into_iter()
                    .zip(blocks)
                    .map(|(rect, blocks)| LayerSpec { rect, blocks })
                    .collect();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn apply_key(
    cfg: &mut ModelConfig,
    key: &str,
    value: &str,
    rects: &mut Option<Vec<RectSpec>>,
    blocks: &mut Option<Vec<usize>>,
) -> Result<()> {
    let int = |v: &str| -> Result<usize> {
        v.parse()
            .map_err(|_| Error::format(key, format!("expected a non-negative integer, got `{v}`")))
    };
    let flag = |v: &str| -> Result<bool> {
        match v {
            "true" | "on" | "1" => Ok(true),
            "false" | "off" | "0" => Ok(false),
            _ => Err(Error::format(key, format!("expected true or false, got `{v}`"))),
        }
    };
    match key {
        "bands" => cfg.bands = int(value)?,
        "channels" => cfg.channels = int(value)?,
        "rank" => cfg.rank = int(value)?,
        "memory_entries" => cfg.memory_entries = int(value)?,
        "heads" => cfg.heads = int(value)?,
        "mlp_ratio" => cfg.mlp_ratio = int(value)?,
        "rects" => {
            let parsed = value
                .split(',')
                .map(|r| {
                    let (h, w) = r.trim().split_once('x').ok_or_else(|| {
                        Error::format(key, format!("expected HxW, got `{}`", r.trim()))
                    })?;
                    RectSpec::new(int(h.trim())?, int(w.trim())?)
                })
                .collect::<Result<Vec<_>>>()?;
            *rects = Some(parsed);
        }
        "blocks" => {
            *blocks = Some(
                value
                    .split(',')
                    .map(|b| int(b.trim()))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        "use_ra" => cfg.use_ra = flag(value)?,
        "use_se" => cfg.use_se = flag(value)?,
        "use_shuffle" => cfg.use_shuffle = flag(value)?,
        "use_mu" => cfg.use_mu = flag(value)?,
        "use_mlp" => cfg.use_mlp = flag(value)?,
        "use_norm" => cfg.use_norm = flag(value)?,
        "use_layer_conv" => cfg.use_layer_conv = flag(value)?,
        "use_body_conv" => cfg.use_body_conv = flag(value)?,
        "se_gate" => {
            cfg.se_gate = match value {
                "linear" => GateKind::Linear,
                "sigmoid" => GateKind::Sigmoid,
                _ => return Err(Error::format(key, format!("expected linear or sigmoid, got `{value}`"))),
            }
        }
        "se_placement" => {
            cfg.se_placement = match value {
                "nonlocal" => Placement::NonLocal,
                "local" => Placement::Local,
                "global" => Placement::Global,
                _ => {
                    return Err(Error::format(
                        key,
                        format!("expected nonlocal, local or global, got `{value}`"),
                    ))
                }
            }
        }
        _ => {
            return Err(Error::format(
                key,
                format!("unknown key; expected one of {}", KEYS.join(", ")),
            ))
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matches_the_reference_setting() {
        let c = ModelConfig::default();
        assert_eq!((c.channels, c.rank, c.bands), (96, 12, 31));
        let rects: Vec<(usize, usize)> = c.layers.iter().map(|l| (l.rect.h, l.rect.w)).collect();
        assert_eq!(rects, vec![(16, 1), (32, 2), (32, 4)]);
        assert_eq!(c.total_blocks(), 18);
        c.validate().unwrap();
    }

    #[test]
    fn kv_roundtrip() {
        let mut c = ModelConfig::toy(4, 8, 2, &[(4, 1), (4, 2)], 2);
        c.use_shuffle = false;
        c.se_gate = GateKind::Sigmoid;
        c.se_placement = Placement::Local;
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn parses_comments_and_broadcast_block_count() {
        let c = ModelConfig::from_kv("# toy\nchannels = 16 # C\nrank=4\nrects = 8x1, 8x2\nblocks = 2\n").unwrap();
        assert_eq!(c.channels, 16);
        assert_eq!(c.layers.len(), 2);
        assert!(c.layers.iter().all(|l| l.blocks == 2));
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "channels = 7",
            "rank = 96",
            "colour = red",
            "rects = 1x4",
            "rects = 8x1, 8x2\nblocks = 1, 2, 3",
            "use_se = maybe",
            "heads = 5",
            "just text",
        ] {
            assert!(ModelConfig::from_kv(text).is_err(), "{text}");
        }
    }
}
