//! Transformer blocks (RA and SE fused), Residual Transformer Layers and the
//! full denoising network, plus parameter and MAC accounting.
//!
//! Network: `X = Y + tail(body(head(Y)))` where `head` and `tail` are 3x3
//! convolutions between bands and features and `body` runs the layers in
//! sequence, optionally closed by a 3x3 convolution and a residual.

pub mod accounting;
mod config;

pub use accounting::{flops_estimate, param_count, Breakdown, BreakdownItem};
pub use config::{LayerSpec, ModelConfig};

use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rect_attention::RectAttention;
use crate::rng::{self, SeededRng};
use crate::spectral_enhance::{se_forward, Placement, SeWeights};

const INIT_STREAM: u32 = 1;

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    /// Uniform in `+-1/sqrt(fan_in)`, zero bias; all zeros when `zero`.
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        zero: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let shape = [3, 3, cin, cout];
        let w = if zero {
            Tensor::zeros(shape)
        } else {
            let bound = 1.0 / ((9 * cin) as f64).sqrt();
            rng::uniform_tensor(rng, &shape, -bound, bound)
        };
        Ok(Self {
            w: store.register(format!("{prefix}.w"), w)?,
            b: store.register(format!("{prefix}.b"), Tensor::zeros([cout]))?,
        })
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, bound[self.w], bound[self.b])
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, rng: &mut SeededRng) -> Result<Self> {
        let data = (0..cin * cout).map(|_| 0.02 * rng::truncated_normal(rng)).collect();
        Ok(Self {
            w: store.register(format!("{prefix}.w"), Tensor::new([cin, cout], data)?)?,
            b: store.register(format!("{prefix}.b"), Tensor::zeros([cout]))?,
        })
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound[self.w])?;
        tape.add(y, bound[self.b])
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, prefix: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.register(format!("{prefix}.gamma"), Tensor::full([c], 1.0))?,
            beta: store.register(format!("{prefix}.beta"), Tensor::zeros([c]))?,
        })
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound[self.gamma], bound[self.beta])
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Option<Norm>,
    ra: Option<RectAttention>,
    se: Option<SeWeights>,
    norm2: Option<Norm>,
    mlp: Option<(Linear, Linear)>,
}

#[derive(Clone, Debug)]
struct Layer {
    spec: LayerSpec,
    blocks: Vec<Block>,
    conv: Option<Conv>,
}

/// SE internals of one block, recorded by [`SertModel::forward_traced`].
#[derive(Clone, Debug)]
pub struct SeTrace {
    pub layer: usize,
    pub block: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// `[Np, E]`, absent without the memory unit.
    pub coefficients: Option<Tensor>,
    /// `[Np, K]`
    pub low_rank: Tensor,
}

/// The denoising network with its parameters.
#[derive(Clone, Debug)]
pub struct SertModel {
    config: ModelConfig,
    store: ParamStore,
    head: Conv,
    layers: Vec<Layer>,
    body: Option<Conv>,
    tail: Conv,
}

impl SertModel {
    /// Deterministic initialization from `seed`: truncated normal (std 0.02)
    /// linear maps, uniform convolutions and memory banks, identity norms and
    /// a zero tail convolution.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, rng::stream_id(INIT_STREAM, 0));
        let mut store = ParamStore::new();
        let c = config.channels;
        let head = Conv::new(&mut store, "head", config.bands, c, false, &mut rng)?;
        let mut layers = Vec::with_capacity(config.layers.len());
        for (li, spec) in config.layers.iter().enumerate() {
            let mut blocks = Vec::with_capacity(spec.blocks);
            for bi in 0..spec.blocks {
                let p = format!("layers.{li}.blocks.{bi}");
                let norm = |store: &mut ParamStore, name: &str| -> Result<Option<Norm>> {
                    match config.use_norm {
                        true => Ok(Some(Norm::new(store, &format!("{p}.{name}"), c)?)),
                        false => Ok(None),
                    }
                };
                let norm1 = norm(&mut store, "norm1")?;
                let ra = match config.use_ra {
                    true => Some(RectAttention::new(
                        &mut store,
                        &format!("{p}.ra"),
                        c,
                        config.heads,
                        spec.rect,
                        &mut rng,
                    )?),
                    false => None,
                };
                let se = match config.use_se {
                    true => Some(SeWeights::new(
                        &mut store,
                        &format!("{p}.se"),
                        c,
                        config.rank,
                        config.use_mu.then_some(config.memory_entries),
                        &mut rng,
                    )?),
                    false => None,
                };
                let (norm2, mlp) = match config.use_mlp {
                    true => {
                        let hidden = c * config.mlp_ratio;
                        let norm2 = norm(&mut store, "norm2")?;
                        let fc1 = Linear::new(&mut store, &format!("{p}.mlp.fc1"), c, hidden, &mut rng)?;
                        let fc2 = Linear::new(&mut store, &format!("{p}.mlp.fc2"), hidden, c, &mut rng)?;
                        (norm2, Some((fc1, fc2)))
                    }
                    false => (None, None),
                };
                blocks.push(Block {
                    norm1,
                    ra,
                    se,
                    norm2,
                    mlp,
                });
            }
            let conv = match config.use_layer_conv {
                true => Some(Conv::new(&mut store, &format!("layers.{li}.conv"), c, c, false, &mut rng)?),
                false => None,
            };
            layers.push(Layer {
                spec: *spec,
                blocks,
                conv,
            });
        }
        let body = match config.use_body_conv {
            true => Some(Conv::new(&mut store, "body", c, c, false, &mut rng)?),
            false => None,
        };
        let tail = Conv::new(&mut store, "tail", c, config.bands, true, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            head,
            layers,
            body,
            tail,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Binds parameters as constants, for forward passes without gradients.
    pub fn bind_constants(&self, tape: &mut Tape) -> Bound {
        Bound::from_vars(self.store.tensors().iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// One Transformer block: `Z' = Z + RA(n(Z)) + SE(n(Z))`, then
    /// `Z'' = Z' + MLP(n(Z'))`. Odd blocks shift the SE patches.
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        layer: usize,
        block: usize,
        z: Var,
    ) -> Result<Var> {
        self.block_inner(tape, bound, layer, block, z, None)
    }

    fn block_inner(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        layer: usize,
        block: usize,
        z: Var,
        trace: Option<&mut Vec<SeTrace>>,
    ) -> Result<Var> {
        let l = self.layer(layer)?;
        let b = l.blocks.get(block).ok_or_else(|| {
            Error::Config(format!("layer {layer} has {} blocks, asked for {block}", l.blocks.len()))
        })?;
        let normed = match &b.norm1 {
            Some(n) => n.forward(tape, bound, z)?,
            None => z,
        };
        let mut acc = z;
        if let Some(ra) = &b.ra {
            let r = ra.forward(tape, bound, normed, self.config.use_shuffle)?;
            acc = tape.add(acc, r)?;
        }
        if let Some(se) = &b.se {
            let [h, w, _] = tape.shape(z)[..] else {
                return Err(Error::Dimension(format!("block expects [H, W, C], got {:?}", tape.shape(z))));
            };
            let placement = self.config.se_placement;
            let (rows, cols) = placement.patch_extent(l.spec.rect, h, w);
            let shifted = block % 2 == 1 && placement != Placement::Global;
            let o = se_forward(tape, bound, normed, se, rows, cols, shifted, self.config.se_gate)?;
            if let Some(trace) = trace {
                trace.push(SeTrace {
                    layer,
                    block,
                    grid_h: o.grid_h,
                    grid_w: o.grid_w,
                    coefficients: o.coefficients.map(|v| tape.value(v).clone()),
                    low_rank: tape.value(o.low_rank).clone(),
                });
            }
            acc = tape.add(acc, o.out)?;
        }
        if let Some((fc1, fc2)) = &b.mlp {
            let n = match &b.norm2 {
                Some(n) => n.forward(tape, bound, acc)?,
                None => acc,
            };
            let hdn = fc1.forward(tape, bound, n)?;
            let hdn = tape.gelu(hdn);
            let out = fc2.forward(tape, bound, hdn)?;
            acc = tape.add(acc, out)?;
        }
        Ok(acc)
    }

    /// Residual Transformer Layer. With the layer convolution:
    /// `Z + conv(blocks(Z))`; without it the blocks' own residuals are the
    /// only skip paths, `blocks(Z)`.
    pub fn rtl_forward(&self, tape: &mut Tape, bound: &Bound, layer: usize, z: Var) -> Result<Var> {
        self.rtl_inner(tape, bound, layer, z, None)
    }

    fn rtl_inner(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        layer: usize,
        z: Var,
        mut trace: Option<&mut Vec<SeTrace>>,
    ) -> Result<Var> {
        let l = self.layer(layer)?;
        let mut x = z;
        for block in 0..l.blocks.len() {
            x = self.block_inner(tape, bound, layer, block, x, trace.as_deref_mut())?;
        }
        match &l.conv {
            Some(conv) => {
                let y = conv.forward(tape, bound, x)?;
                tape.add(z, y)
            }
            None => Ok(x),
        }
    }

    /// Full network on a noisy `[H, W, B]` image.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, y: Var) -> Result<Var> {
        self.forward_inner(tape, bound, y, None)
    }

    /// [`forward`](Self::forward), also recording every block's SE internals.
    pub fn forward_traced(&self, tape: &mut Tape, bound: &Bound, y: Var) -> Result<(Var, Vec<SeTrace>)> {
        let mut trace = Vec::new();
        let out = self.forward_inner(tape, bound, y, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        y: Var,
        mut trace: Option<&mut Vec<SeTrace>>,
    ) -> Result<Var> {
        match *tape.shape(y) {
            [_, _, b] if b == self.config.bands => {}
            ref s => {
                return Err(Error::Config(format!(
                    "model expects [H, W, {}] input, got {s:?}",
                    self.config.bands
                )))
            }
        }
        let shallow = self.head.forward(tape, bound, y)?;
        let mut x = shallow;
        for layer in 0..self.layers.len() {
            x = self.rtl_inner(tape, bound, layer, x, trace.as_deref_mut())?;
        }
        if let Some(body) = &self.body {
            let b = body.forward(tape, bound, x)?;
            x = tape.add(shallow, b)?;
        }
        let out = self.tail.forward(tape, bound, x)?;
        tape.add(y, out)
    }

    /// Denoises one image without recording gradients.
    pub fn denoise(&self, y: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_constants(&mut tape);
        let yv = tape.constant(y.clone());
        let out = self.forward(&mut tape, &bound, yv)?;
        Ok(tape.value(out).clone())
    }

    /// Like [`denoise`](Self::denoise), returning the SE trace as well.
    pub fn denoise_traced(&self, y: &Tensor) -> Result<(Tensor, Vec<SeTrace>)> {
        let mut tape = Tape::new();
        let bound = self.bind_constants(&mut tape);
        let yv = tape.constant(y.clone());
        let (out, trace) = self.forward_traced(&mut tape, &bound, yv)?;
        Ok((tape.value(out).clone(), trace))
    }

    fn layer(&self, layer: usize) -> Result<&Layer> {
        self.layers.get(layer).ok_or_else(|| {
            Error::Config(format!("model has {} layers, asked for {layer}", self.layers.len()))
        })
    }
}
