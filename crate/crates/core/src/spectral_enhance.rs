//! Spectral enhancement: cube patching with an optional cyclic shift, average
//! pool squeeze, rank-K projection, memory-bank lookup and a per-patch channel
//! gate.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rect_attention::{crop, merge_rect, pad_reflect, partition_rect, PadRecord, RectSpec};
use crate::rng::{self, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    Linear,
    Sigmoid,
}

/// Spatial extent over which one low-rank vector is extracted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    /// `P x P` cubes with `P` the long side of the rectangle.
    NonLocal,
    /// One vector per attention rectangle (`h` rows by `w` columns).
    Local,
    /// One vector for the whole feature map.
    Global,
}

impl Placement {
    /// `(rows, cols)` of one patch for a map of `height x width`.
    pub fn patch_extent(self, spec: RectSpec, height: usize, width: usize) -> (usize, usize) {
        match self {
            Placement::NonLocal => (spec.h, spec.h),
            Placement::Local => (spec.h, spec.w),
            Placement::Global => (height, width),
        }
    }
}

/// `W_k`, `W_c` (both `C x K`) and the memory bank `M` (`K x E`). Without a
/// bank the projected vector is used directly as `Zl`.
#[derive(Clone, Debug)]
pub struct SeWeights {
    pub wk: ParamId,
    pub wc: ParamId,
    pub memory: Option<ParamId>,
    pub channels: usize,
    pub rank: usize,
}

impl SeWeights {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        rank: usize,
        bank: Option<usize>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if rank == 0 || rank >= channels {
            return Err(Error::Config(format!(
                "rank K={rank} must satisfy 1 <= K < C={channels}"
            )));
        }
        if bank == Some(0) {
            return Err(Error::Config("memory bank size E must be at least 1".into()));
        }
        let mut trunc = |shape: [usize; 2]| {
            let data = (0..shape[0] * shape[1])
                .map(|_| 0.02 * rng::truncated_normal(rng))
                .collect();
            Tensor::new(shape, data)
        };
        let wk = store.register(format!("{prefix}.wk"), trunc([channels, rank])?)?;
        let wc = store.register(format!("{prefix}.wc"), trunc([channels, rank])?)?;
        let memory = match bank {
            Some(e) => {
                let bound = 1.0 / (rank as f64).sqrt();
                let m = rng::uniform_tensor(rng, &[rank, e], -bound, bound);
                Some(store.register(format!("{prefix}.memory"), m)?)
            }
            None => None,
        };
        Ok(Self {
            wk,
            wc,
            memory,
            channels,
            rank,
        })
    }
}

/// Cube patches `[Np, rows * cols, C]` cut from a map, with what is needed to
/// put them back.
#[derive(Clone, Copy, Debug)]
pub struct CubeGrid {
    pub patches: Var,
    pub rows: usize,
    pub cols: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Cyclic offset `(dy, dx)` applied before cutting.
    pub shift: (usize, usize),
}

impl CubeGrid {
    pub fn count(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Cyclic roll: `out[y, x] = z[(y + dy) % H, (x + dx) % W]`.
pub fn roll(tape: &mut Tape, z: Var, dy: usize, dx: usize) -> Result<Var> {
    let [h, w, c] = tape.shape(z)[..] else {
        return Err(Error::Dimension(format!(
            "roll expects [H, W, C], got {:?}",
            tape.shape(z)
        )));
    };
    if dy.is_multiple_of(h) && dx.is_multiple_of(w) {
        return Ok(z);
    }
    let mut index = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let sy = (y + dy) % h;
        for x in 0..w {
            let base = (sy * w + (x + dx) % w) * c;
            index.extend(base..base + c);
        }
    }
    tape.gather(z, Rc::new(index), &[h, w, c])
}

/// Cuts a map whose extents are multiples of the patch into cube patches,
/// first rolling by half a patch when `shifted`.
pub fn partition_cubes(
    tape: &mut Tape,
    z: Var,
    rows: usize,
    cols: usize,
    shifted: bool,
) -> Result<CubeGrid> {
    let [h, w, _] = tape.shape(z)[..] else {
        return Err(Error::Dimension(format!(
            "partition_cubes expects [H, W, C], got {:?}",
            tape.shape(z)
        )));
    };
    if rows == 0 || cols == 0 || rows > h || cols > w {
        return Err(Error::Config(format!(
            "cube patch {rows}x{cols} does not fit a {h}x{w} map"
        )));
    }
    let shift = if shifted { (rows / 2, cols / 2) } else { (0, 0) };
    let rolled = roll(tape, z, shift.0, shift.1)?;
    let patches = partition_rect(tape, rolled, rows, cols)?;
    Ok(CubeGrid {
        patches,
        rows,
        cols,
        grid_h: h / rows,
        grid_w: w / cols,
        shift,
    })
}

/// Reassembles patches laid out as in `grid` and undoes its shift.
pub fn merge_cubes(tape: &mut Tape, patches: Var, grid: &CubeGrid) -> Result<Var> {
    let (h, w) = (grid.grid_h * grid.rows, grid.grid_w * grid.cols);
    let merged = merge_rect(tape, patches, grid.rows, grid.cols, h, w)?;
    roll(tape, merged, h - grid.shift.0 % h, w - grid.shift.1 % w)
}

/// Spatial average of each patch: `[Np, n, C] -> [Np, C]`.
pub fn squeeze(tape: &mut Tape, patches: Var) -> Result<Var> {
    if tape.shape(patches).len() != 3 {
        return Err(Error::Dimension(format!(
            "squeeze expects [Np, n, C], got {:?}",
            tape.shape(patches)
        )));
    }
    tape.mean_axis(patches, 1)
}

/// `Zk = Zc W_k`.
pub fn project_rank(tape: &mut Tape, zc: Var, wk: Var) -> Result<Var> {
    tape.matmul(zc, wk)
}

/// `I = softmax(Zk M)` over the bank, `Zl = I M^T`.
pub fn memory_read(tape: &mut Tape, zk: Var, memory: Var) -> Result<(Var, Var)> {
    let logits = tape.matmul(zk, memory)?;
    let last = tape.shape(logits).len() - 1;
    let coefficients = tape.softmax(logits, last)?;
    let zl = tape.matmul_nt(coefficients, memory)?;
    Ok((coefficients, zl))
}

/// Channel gate `g = Zl W_c^T`, passed through a sigmoid for
/// [`GateKind::Sigmoid`]: `[Np, K] -> [Np, C]`.
pub fn gate(tape: &mut Tape, zl: Var, wc: Var, kind: GateKind) -> Result<Var> {
    let g = tape.matmul_nt(zl, wc)?;
    Ok(match kind {
        GateKind::Linear => g,
        GateKind::Sigmoid => tape.sigmoid(g),
    })
}

/// Multiplies every pixel of patch `i` by `g[i]`.
pub fn apply_gate(tape: &mut Tape, patches: Var, g: Var) -> Result<Var> {
    let [np, _, c] = tape.shape(patches)[..] else {
        return Err(Error::Dimension(format!(
            "apply_gate expects [Np, n, C], got {:?}",
            tape.shape(patches)
        )));
    };
    if tape.shape(g) != [np, c] {
        return Err(Error::shape_mismatch("apply_gate", &[np, c], tape.shape(g)));
    }
    let g = tape.reshape(g, &[np, 1, c])?;
    tape.mul(patches, g)
}

/// [`gate`] followed by [`apply_gate`].
pub fn rescale(tape: &mut Tape, patches: Var, zl: Var, wc: Var, kind: GateKind) -> Result<Var> {
    let g = gate(tape, zl, wc, kind)?;
    apply_gate(tape, patches, g)
}

/// Result of [`se_forward`].
#[derive(Clone, Copy, Debug)]
pub struct SeOutput {
    /// `[H, W, C]`
    pub out: Var,
    /// Memory coefficients `I`, `[Np, E]`, patches in row-major grid order.
    pub coefficients: Option<Var>,
    /// Low-rank vectors `Zl`, `[Np, K]`.
    pub low_rank: Var,
    pub grid_h: usize,
    pub grid_w: usize,
    pub pad: PadRecord,
}

/// Full SE module on `[H, W, C]` with `rows x cols` patches: reflect-pad,
/// shift, squeeze, project, read memory, rescale, merge, unshift, crop.
#[allow(clippy::too_many_arguments)]
pub fn se_forward(
    tape: &mut Tape,
    bound: &Bound,
    z: Var,
    weights: &SeWeights,
    rows: usize,
    cols: usize,
    shifted: bool,
    kind: GateKind,
) -> Result<SeOutput> {
    let c = *tape.shape(z).last().unwrap_or(&0);
    if c != weights.channels {
        return Err(Error::Config(format!(
            "SE weights expect {} channels, map has {c}",
            weights.channels
        )));
    }
    let fm = pad_reflect(tape, z, rows.max(1), cols.max(1))?;
    let grid = partition_cubes(tape, fm.var, rows, cols, shifted)?;
    let zc = squeeze(tape, grid.patches)?;
    let zk = project_rank(tape, zc, bound[weights.wk])?;
    let (coefficients, low_rank) = match weights.memory {
        Some(m) => {
            let (i, zl) = memory_read(tape, zk, bound[m])?;
            (Some(i), zl)
        }
        None => (None, zk),
    };
    let scaled = rescale(tape, grid.patches, low_rank, bound[weights.wc], kind)?;
    let merged = merge_cubes(tape, scaled, &grid)?;
    let out = crop(tape, merged, &fm.pad)?;
    Ok(SeOutput {
        out,
        coefficients,
        low_rank,
        grid_h: grid.grid_h,
        grid_w: grid.grid_w,
        pad: fm.pad,
    })
}

#[cfg(test)]
#[path = "spectral_enhance_tests.rs"]
mod tests;
