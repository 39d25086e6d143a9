//! Rectangle self-attention: spectral split, horizontal and vertical
//! rectangle multi-head attention with a learnable relative position bias,
//! merge, and the two-group spectral shuffle.
//!
//! Feature maps are `[H, W, C]` row-major. A rectangle `[h, w]` with
//! `h >= w` is tiled as `h` rows by `w` columns in the horizontal branch and
//! as `w` rows by `h` columns in the vertical branch.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{self, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// Rectangle with long side `h` and short side `w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RectSpec {
    pub h: usize,
    pub w: usize,
}

impl RectSpec {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if w == 0 || h < w {
            return Err(Error::Config(format!(
                "rectangle [{h}, {w}] must satisfy h >= w >= 1"
            )));
        }
        Ok(Self { h, w })
    }

    /// `(rows, cols)` of one tile.
    pub fn tile(&self, orientation: Orientation) -> (usize, usize) {
        match orientation {
            Orientation::Horizontal => (self.h, self.w),
            Orientation::Vertical => (self.w, self.h),
        }
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

/// Extents before and after divisibility padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadRecord {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl PadRecord {
    pub fn is_identity(&self) -> bool {
        self.height == self.padded_height && self.width == self.padded_width
    }
}

/// A padded `[H, W, C]` map together with its original extents.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub pad: PadRecord,
}

fn dims3(tape: &Tape, z: Var, what: &str) -> Result<(usize, usize, usize)> {
    match *tape.shape(z) {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::Dimension(format!("{what} expects [H, W, C], got {s:?}"))),
    }
}

/// Mirror index without edge repetition, periodic for any overshoot.
pub(crate) fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

/// Reflect-pads rows and columns up to multiples of `mult_h` and `mult_w`.
pub fn pad_reflect(tape: &mut Tape, z: Var, mult_h: usize, mult_w: usize) -> Result<FeatureMap> {
    let (h, w, c) = dims3(tape, z, "pad_reflect")?;
    let ph = h.div_ceil(mult_h) * mult_h;
    let pw = w.div_ceil(mult_w) * mult_w;
    let pad = PadRecord {
        height: h,
        width: w,
        padded_height: ph,
        padded_width: pw,
    };
    if pad.is_identity() {
        return Ok(FeatureMap { var: z, pad });
    }
    let mut index = Vec::with_capacity(ph * pw * c);
    for y in 0..ph {
        let sy = reflect_index(y, h);
        for x in 0..pw {
            let base = (sy * w + reflect_index(x, w)) * c;
            index.extend(base..base + c);
        }
    }
    let var = tape.gather(z, Rc::new(index), &[ph, pw, c])?;
    Ok(FeatureMap { var, pad })
}

/// Drops the padded border again.
pub fn crop(tape: &mut Tape, z: Var, pad: &PadRecord) -> Result<Var> {
    let (ph, pw, c) = dims3(tape, z, "crop")?;
    if (ph, pw) != (pad.padded_height, pad.padded_width) {
        return Err(Error::Internal(format!(
            "crop: map is {ph}x{pw}, pad record says {}x{}",
            pad.padded_height, pad.padded_width
        )));
    }
    if pad.is_identity() {
        return Ok(z);
    }
    let mut index = Vec::with_capacity(pad.height * pad.width * c);
    for y in 0..pad.height {
        let base = y * pw * c;
        index.extend(base..base + pad.width * c);
    }
    tape.gather(z, Rc::new(index), &[pad.height, pad.width, c])
}

/// Contiguous channel halves `[0, C/2)` and `[C/2, C)`.
pub fn split_spectral(tape: &mut Tape, z: Var) -> Result<(Var, Var)> {
    let (_, _, c) = dims3(tape, z, "split_spectral")?;
    if c % 2 != 0 {
        return Err(Error::Config(format!("spectral split needs even channels, got {c}")));
    }
    let half = c / 2;
    Ok((tape.narrow(z, 2, 0, half)?, tape.narrow(z, 2, half, half)?))
}

fn partition_index(h: usize, w: usize, c: usize, rows: usize, cols: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(h * w * c);
    for ty in 0..h / rows {
        for tx in 0..w / cols {
            for r in 0..rows {
                for q in 0..cols {
                    let base = ((ty * rows + r) * w + tx * cols + q) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    index
}

/// Splits `[H, W, c]` into `N = H*W/(rows*cols)` tiles in row-major tile
/// order; the result is `[N, rows*cols, c]`.
pub fn partition_rect(tape: &mut Tape, z: Var, rows: usize, cols: usize) -> Result<Var> {
    let (h, w, c) = dims3(tape, z, "partition_rect")?;
    if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 {
        return Err(Error::Internal(format!(
            "partition_rect: {h}x{w} map is not divisible into {rows}x{cols} tiles (pad first)"
        )));
    }
    let n = (h / rows) * (w / cols);
    let index = partition_index(h, w, c, rows, cols);
    tape.gather(z, Rc::new(index), &[n, rows * cols, c])
}

/// Exact inverse of [`partition_rect`].
pub fn merge_rect(
    tape: &mut Tape,
    tiles: Var,
    rows: usize,
    cols: usize,
    height: usize,
    width: usize,
) -> Result<Var> {
    let shape = tape.shape(tiles).to_vec();
    let [n, tokens, c] = shape[..] else {
        return Err(Error::Dimension(format!("merge_rect expects [N, n, c], got {shape:?}")));
    };
    if rows == 0 || cols == 0 || !height.is_multiple_of(rows) || !width.is_multiple_of(cols) {
        return Err(Error::Internal(format!(
            "merge_rect: {height}x{width} is not divisible into {rows}x{cols} tiles"
        )));
    }
    if tokens != rows * cols || n != (height / rows) * (width / cols) {
        return Err(Error::Internal(format!(
            "merge_rect: got {n} tiles of {tokens} tokens for a {height}x{width} map of {rows}x{cols} tiles"
        )));
    }
    let forward = partition_index(height, width, c, rows, cols);
    let mut inverse = vec![0; forward.len()];
    for (i, &src) in forward.iter().enumerate() {
        inverse[src] = i;
    }
    tape.gather(tiles, Rc::new(inverse), &[height, width, c])
}

fn shuffle_index(h: usize, w: usize, c: usize, inverse: bool) -> Vec<usize> {
    let half = c / 2;
    let mut perm = vec![0; c];
    for i in 0..half {
        // output channel 2i <- first half i, 2i+1 <- second half i
        perm[2 * i] = i;
        perm[2 * i + 1] = half + i;
    }
    if inverse {
        let mut inv = vec![0; c];
        for (dst, &src) in perm.iter().enumerate() {
            inv[src] = dst;
        }
        perm = inv;
    }
    let mut index = Vec::with_capacity(h * w * c);
    for p in 0..h * w {
        index.extend(perm.iter().map(|&ch| p * c + ch));
    }
    index
}

fn shuffle_impl(tape: &mut Tape, z: Var, inverse: bool) -> Result<Var> {
    let (h, w, c) = dims3(tape, z, "shuffle_spectral")?;
    if c % 2 != 0 {
        return Err(Error::Config(format!("spectral shuffle needs even channels, got {c}")));
    }
    tape.gather(z, Rc::new(shuffle_index(h, w, c, inverse)), &[h, w, c])
}

/// Two-group channel interleave of `[Z1 | Z2]`.
pub fn shuffle_spectral(tape: &mut Tape, z: Var) -> Result<Var> {
    shuffle_impl(tape, z, false)
}

pub fn inverse_shuffle_spectral(tape: &mut Tape, z: Var) -> Result<Var> {
    shuffle_impl(tape, z, true)
}

/// Maps every ordered token pair of a `rows x cols` tile to its slot in a
/// `(2*rows-1) x (2*cols-1)` relative-offset table, for each head.
pub fn relative_position_index(rows: usize, cols: usize, heads: usize) -> Vec<usize> {
    let n = rows * cols;
    let table = (2 * rows - 1) * (2 * cols - 1);
    let mut index = Vec::with_capacity(heads * n * n);
    for head in 0..heads {
        for i in 0..n {
            let (r1, c1) = (i / cols, i % cols);
            for j in 0..n {
                let (r2, c2) = (j / cols, j % cols);
                let dr = r1 + rows - 1 - r2;
                let dc = c1 + cols - 1 - c2;
                index.push(head * table + dr * (2 * cols - 1) + dc);
            }
        }
    }
    index
}

/// Learnable parameters of one rectangle-attention branch.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub pos_bias: ParamId,
    pub heads: usize,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    bias_index: Rc<Vec<usize>>,
}

impl AttentionWeights {
    /// Registers `{prefix}.wq` etc. in `store`; projections and the bias
    /// table are drawn from a truncated normal with std 0.02.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        heads: usize,
        rows: usize,
        cols: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide {channels} branch channels"
            )));
        }
        let mut trunc = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| 0.02 * rng::truncated_normal(rng)).collect();
            Tensor::new(shape.to_vec(), data)
        };
        let table = (2 * rows - 1) * (2 * cols - 1);
        let wq = store.register(format!("{prefix}.wq"), trunc(&[channels, channels])?)?;
        let wk = store.register(format!("{prefix}.wk"), trunc(&[channels, channels])?)?;
        let wv = store.register(format!("{prefix}.wv"), trunc(&[channels, channels])?)?;
        let wo = store.register(format!("{prefix}.wo"), trunc(&[channels, channels])?)?;
        let bo = store.register(format!("{prefix}.bo"), Tensor::zeros([channels]))?;
        let pos_bias = store.register(format!("{prefix}.pos_bias"), trunc(&[heads, table])?)?;
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            bo,
            pos_bias,
            heads,
            channels,
            rows,
            cols,
            bias_index: Rc::new(relative_position_index(rows, cols, heads)),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }
}

/// Output of multi-head attention over a batch of tiles.
pub struct TileAttention {
    /// `[N, n, c]`
    pub out: Var,
    /// Attention weights `[N, heads, n, n]`; each row sums to one.
    pub probs: Var,
}

/// `SoftMax(Q K^T / sqrt(d) + P) V` per head over tiles `[N, n, c]` (or a
/// single tile `[n, c]`), followed by the branch output projection.
pub fn rmsa_tile(
    tape: &mut Tape,
    bound: &Bound,
    weights: &AttentionWeights,
    tiles: Var,
) -> Result<TileAttention> {
    let shape = tape.shape(tiles).to_vec();
    let (tiles, single) = match shape[..] {
        [_, _] => (tape.reshape(tiles, &[1, shape[0], shape[1]])?, true),
        [_, _, _] => (tiles, false),
        _ => {
            return Err(Error::Dimension(format!(
                "rmsa_tile expects [n, c] or [N, n, c], got {shape:?}"
            )))
        }
    };
    let [count, n, c] = tape.shape(tiles)[..] else { unreachable!() };
    if c != weights.channels {
        return Err(Error::Config(format!(
            "attention weights expect {} channels, tile has {c}",
            weights.channels
        )));
    }
    if n != weights.tokens() {
        return Err(Error::Config(format!(
            "attention weights expect {} tokens per tile, got {n}",
            weights.tokens()
        )));
    }
    let (heads, d) = (weights.heads, weights.head_dim());

    let split_heads = |tape: &mut Tape, x: Var| -> Result<Var> {
        let x = tape.reshape(x, &[count, n, heads, d])?;
        tape.permute(x, &[0, 2, 1, 3])
    };
    let q = tape.matmul(tiles, bound[weights.wq])?;
    let k = tape.matmul(tiles, bound[weights.wk])?;
    let v = tape.matmul(tiles, bound[weights.wv])?;
    let (q, k, v) = (split_heads(tape, q)?, split_heads(tape, k)?, split_heads(tape, v)?);

    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let bias = tape.gather(
        bound[weights.pos_bias],
        Rc::clone(&weights.bias_index),
        &[heads, n, n],
    )?;
    let scores = tape.add(scores, bias)?;
    let probs = tape.softmax(scores, 3)?;

    let mixed = tape.matmul(probs, v)?;
    let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = tape.reshape(mixed, &[count, n, c])?;
    let out = tape.matmul(mixed, bound[weights.wo])?;
    let mut out = tape.add(out, bound[weights.bo])?;
    if single {
        out = tape.reshape(out, &[n, c])?;
    }
    Ok(TileAttention { out, probs })
}

/// One rectangle-attention branch over a full `[H, W, c]` map: pad, tile,
/// attend, merge, crop.
pub fn rmsa_branch(tape: &mut Tape, bound: &Bound, weights: &AttentionWeights, z: Var) -> Result<Var> {
    let (rows, cols) = (weights.rows, weights.cols);
    let fm = pad_reflect(tape, z, rows, cols)?;
    let tiles = partition_rect(tape, fm.var, rows, cols)?;
    let attended = rmsa_tile(tape, bound, weights, tiles)?.out;
    let merged = merge_rect(
        tape,
        attended,
        rows,
        cols,
        fm.pad.padded_height,
        fm.pad.padded_width,
    )?;
    crop(tape, merged, &fm.pad)
}

/// The RA module: horizontal branch on the first channel half, vertical
/// branch on the second, then concatenation and (optionally) the shuffle.
#[derive(Clone, Debug)]
pub struct RectAttention {
    pub spec: RectSpec,
    pub horizontal: AttentionWeights,
    pub vertical: AttentionWeights,
}

impl RectAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        heads: usize,
        spec: RectSpec,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if !channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rectangle attention needs even channels, got {channels}"
            )));
        }
        let half = channels / 2;
        let (hr, hc) = spec.tile(Orientation::Horizontal);
        let (vr, vc) = spec.tile(Orientation::Vertical);
        Ok(Self {
            spec,
            horizontal: AttentionWeights::new(store, &format!("{prefix}.h"), half, heads, hr, hc, rng)?,
            vertical: AttentionWeights::new(store, &format!("{prefix}.v"), half, heads, vr, vc, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z: Var, shuffle: bool) -> Result<Var> {
        ra_forward(tape, bound, z, &self.horizontal, &self.vertical, shuffle)
    }
}

/// Split, horizontal and vertical rectangle attention, concat, shuffle.
pub fn ra_forward(
    tape: &mut Tape,
    bound: &Bound,
    z: Var,
    weights_h: &AttentionWeights,
    weights_v: &AttentionWeights,
    shuffle: bool,
) -> Result<Var> {
    let (z1, z2) = split_spectral(tape, z)?;
    let out1 = rmsa_branch(tape, bound, weights_h, z1)?;
    let out2 = rmsa_branch(tape, bound, weights_v, z2)?;
    let cat = tape.concat(&[out1, out2], 2)?;
    if shuffle {
        shuffle_spectral(tape, cat)
    } else {
        Ok(cat)
    }
}

#[cfg(test)]
#[path = "rect_attention_tests.rs"]
mod tests;
