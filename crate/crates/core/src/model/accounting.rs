//! Closed-form learnable-scalar and multiply-accumulate counts.
//!
//! MACs cover matrix products (projections, attention scores and mixing, SE
//! projections and memory reads) and convolutions at full kernel size with
//! zero padding included. Elementwise ops, softmax, norms and pooling are not
//! counted. One MAC is two FLOPs.

use std::fmt;

use super::config::ModelConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BreakdownItem {
    pub name: &'static str,
    pub count: u64,
    /// Component the network needs but whose exact form is assumed.
    pub assumed: bool,
}

/// Itemized count, in a fixed item order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Breakdown {
    pub items: Vec<BreakdownItem>,
}

pub const HEAD_CONV: &str = "head conv";
pub const TAIL_CONV: &str = "tail conv";
pub const BODY_CONV: &str = "body conv";
pub const LAYER_CONVS: &str = "layer convs";
pub const ATTN_QKV: &str = "attention qkv";
pub const ATTN_SCORES: &str = "attention scores";
pub const ATTN_OUT: &str = "attention output proj";
pub const POS_BIAS: &str = "position bias";
pub const SE_PROJ: &str = "se projections";
pub const MEMORY: &str = "memory unit";
pub const NORMS: &str = "norms";
pub const MLP: &str = "mlp";

impl Breakdown {
    fn new(entries: &[(&'static str, u64, bool)]) -> Self {
        Self {
            items: entries
                .iter()
                .map(|&(name, count, assumed)| BreakdownItem { name, count, assumed })
                .collect(),
        }
    }

    pub fn total(&self) -> u64 {
        self.items.iter().map(|i| i.count).sum()
    }

    pub fn assumed_total(&self) -> u64 {
        self.items.iter().filter(|i| i.assumed).map(|i| i.count).sum()
    }

    pub fn get(&self, name: &str) -> u64 {
        self.items.iter().filter(|i| i.name == name).map(|i| i.count).sum()
    }
}

impl fmt::Display for Breakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in &self.items {
            let tag = if i.assumed { "assumed" } else { "" };
            writeln!(f, "{:<24} {:>16} {tag}", i.name, i.count)?;
        }
        write!(f, "{:<24} {:>16}", "total", self.total())
    }
}

fn conv(cin: usize, cout: usize) -> u64 {
    (9 * cin * cout + cout) as u64
}

/// Exact number of learnable scalars of [`SertModel::init`](super::SertModel::init)
/// for `config`.
pub fn param_count(config: &ModelConfig) -> Breakdown {
    let c = config.channels;
    let half = c / 2;
    let (mut qkv, mut out, mut bias, mut se, mut mem, mut norms, mut mlp) = (0u64, 0, 0, 0, 0, 0, 0);
    for layer in &config.layers {
        let (h, w) = (layer.rect.h, layer.rect.w);
        let blocks = layer.blocks as u64;
        if config.use_ra {
            qkv += blocks * 2 * 3 * (half * half) as u64;
            out += blocks * 2 * (half * half + half) as u64;
            bias += blocks * 2 * (config.heads * (2 * h - 1) * (2 * w - 1)) as u64;
        }
        if config.use_se {
            se += blocks * 2 * (c * config.rank) as u64;
            if config.use_mu {
                mem += blocks * (config.rank * config.memory_entries) as u64;
            }
        }
        if config.use_norm {
            let n = if config.use_mlp { 2 } else { 1 };
            norms += blocks * n * 2 * c as u64;
        }
        if config.use_mlp {
            let hidden = c * config.mlp_ratio;
            mlp += blocks * (c * hidden + hidden + hidden * c + c) as u64;
        }
    }
    let layers = config.layers.len() as u64;
    Breakdown::new(&[
        (HEAD_CONV, conv(config.bands, c), true),
        (ATTN_QKV, qkv, false),
        (ATTN_OUT, out, true),
        (POS_BIAS, bias, false),
        (SE_PROJ, se, false),
        (MEMORY, mem, false),
        (NORMS, norms, true),
        (MLP, mlp, true),
        (LAYER_CONVS, if config.use_layer_conv { layers * conv(c, c) } else { 0 }, true),
        (BODY_CONV, if config.use_body_conv { conv(c, c) } else { 0 }, true),
        (TAIL_CONV, conv(c, config.bands), true),
    ])
}

fn padded(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Multiply-accumulate count of one forward pass on an `height x width`
/// image, itemized like [`param_count`].
pub fn flops_estimate(config: &ModelConfig, height: usize, width: usize) -> Breakdown {
    let (hh, ww) = (height as u64, width as u64);
    let pixels = hh * ww;
    let c = config.channels as u64;
    let half = c / 2;
    let k = config.rank as u64;
    let e = config.memory_entries as u64;
    let conv = |cin: u64, cout: u64| pixels * 9 * cin * cout;
    let (mut qkv, mut scores, mut out, mut se, mut mem, mut mlp) = (0u64, 0, 0, 0, 0, 0);
    for layer in &config.layers {
        let blocks = layer.blocks as u64;
        let rect = layer.rect;
        if config.use_ra {
            for (rows, cols) in [(rect.h, rect.w), (rect.w, rect.h)] {
                let tokens = (padded(height, rows) * padded(width, cols)) as u64;
                let n = (rows * cols) as u64;
                qkv += blocks * 3 * tokens * half * half;
                scores += blocks * 2 * tokens * n * half;
                out += blocks * tokens * half * half;
            }
        }
        if config.use_se {
            let (rows, cols) = config.se_placement.patch_extent(rect, height, width);
            let patches = (padded(height, rows) / rows * (padded(width, cols) / cols)) as u64;
            se += blocks * 2 * patches * c * k;
            if config.use_mu {
                mem += blocks * 2 * patches * k * e;
            }
        }
        if config.use_mlp {
            mlp += blocks * 2 * pixels * c * c * config.mlp_ratio as u64;
        }
    }
    let layers = config.layers.len() as u64;
    let bands = config.bands as u64;
    Breakdown::new(&[
        (HEAD_CONV, conv(bands, c), true),
        (ATTN_QKV, qkv, false),
        (ATTN_SCORES, scores, false),
        (ATTN_OUT, out, true),
        (SE_PROJ, se, false),
        (MEMORY, mem, false),
        (MLP, mlp, true),
        (LAYER_CONVS, if config.use_layer_conv { layers * conv(c, c) } else { 0 }, true),
        (BODY_CONV, if config.use_body_conv { conv(c, c) } else { 0 }, true),
        (TAIL_CONV, conv(c, bands), true),
    ])
}
