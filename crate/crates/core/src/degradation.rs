//! Synthetic noise: i.i.d. and non-i.i.d. Gaussian, stripe, deadline,
//! impulse and mixture corruption of `[H, W, B]` cubes.
//!
//! Noise levels `sigma` are on the 0-255 scale and divided by 255 before
//! being added. Outputs are never clipped. Every band draws from its own
//! sub-stream of the seed, so results do not depend on processing order.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{self, SeededRng};

const GAUSS: u32 = 10;
const SIGMA: u32 = 11;
const STRIPE: u32 = 12;
const DEADLINE: u32 = 13;
const IMPULSE: u32 = 14;
const MIXTURE: u32 = 15;
const SELECT: u32 = 16;

pub const RECIPE_VERSION: u32 = 1;

/// A hyperspectral cube `[H, W, B]` in reflectance units.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiImage {
    pub data: Tensor,
    pub wavelengths: Option<Vec<f64>>,
}

impl HsiImage {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::Dimension(format!(
                "an HSI cube is [H, W, B], got {:?}",
                data.shape()
            )));
        }
        Ok(Self {
            data,
            wavelengths: None,
        })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn bands(&self) -> usize {
        self.data.shape()[2]
    }

    /// Whether every value lies in `[0, 1]`, as required of clean images.
    pub fn is_clean_range(&self) -> bool {
        self.data.data().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StripeParams {
    pub band_fraction: f64,
    pub col_fraction_min: f64,
    pub col_fraction_max: f64,
    /// Offsets are uniform in `[-magnitude, magnitude]`.
    pub magnitude: f64,
}

impl Default for StripeParams {
    fn default() -> Self {
        Self {
            band_fraction: 1.0 / 3.0,
            col_fraction_min: 0.05,
            col_fraction_max: 0.15,
            magnitude: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeadlineParams {
    pub band_fraction: f64,
    pub col_fraction_min: f64,
    pub col_fraction_max: f64,
}

impl Default for DeadlineParams {
    fn default() -> Self {
        Self {
            band_fraction: 1.0 / 3.0,
            col_fraction_min: 0.05,
            col_fraction_max: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImpulseParams {
    pub band_fraction: f64,
    /// Per-band replacement probability, drawn uniformly from this set.
    pub p_choices: Vec<f64>,
}

impl Default for ImpulseParams {
    fn default() -> Self {
        Self {
            band_fraction: 1.0 / 3.0,
            p_choices: vec![0.1, 0.3, 0.5, 0.7],
        }
    }
}

/// Band-wise corruption probabilities of the mixture; the remainder is
/// "no corruption".
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub p_stripe: f64,
    pub p_deadline: f64,
    pub p_impulse: f64,
    pub stripe: StripeParams,
    pub deadline: DeadlineParams,
    pub impulse: ImpulseParams,
}

impl Default for MixtureParams {
    fn default() -> Self {
        Self {
            sigma_min: 10.0,
            sigma_max: 70.0,
            p_stripe: 0.3,
            p_deadline: 0.3,
            p_impulse: 0.3,
            stripe: StripeParams::default(),
            deadline: DeadlineParams::default(),
            impulse: ImpulseParams::default(),
        }
    }
}

/// Noise variant. Stripe, deadline and impulse optionally run on top of a
/// non-i.i.d. Gaussian base `(sigma_min, sigma_max)`.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseSpec {
    GaussianIid { sigma: f64 },
    GaussianNonIid { sigma_min: f64, sigma_max: f64 },
    Stripe { params: StripeParams, base: Option<(f64, f64)> },
    Deadline { params: DeadlineParams, base: Option<(f64, f64)> },
    Impulse { params: ImpulseParams, base: Option<(f64, f64)> },
    Mixture(MixtureParams),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Corruption {
    None,
    Stripe,
    Deadline,
    Impulse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StripeBand {
    pub band: usize,
    /// `(column, offset)` pairs.
    pub columns: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeadlineBand {
    pub band: usize,
    /// Distinct dead columns, ascending.
    pub columns: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImpulseBand {
    pub band: usize,
    pub p: f64,
    /// `(y * W + x, replacement)` for every replaced voxel.
    pub replaced: Vec<(usize, f64)>,
}

/// Everything that was drawn, for replay and inspection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoisePlan {
    /// Per-band Gaussian standard deviation on the 0-1 scale (empty without
    /// Gaussian noise).
    pub sigmas: Vec<f64>,
    pub stripes: Vec<StripeBand>,
    pub deadlines: Vec<DeadlineBand>,
    pub impulses: Vec<ImpulseBand>,
    /// Mixture band assignment.
    pub assignment: Vec<Corruption>,
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Parameter(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

fn check_sigma_range(lo: f64, hi: f64) -> Result<()> {
    if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::Parameter(format!(
            "sigma range [{lo}, {hi}] must satisfy 0 <= min <= max"
        )));
    }
    Ok(())
}

impl StripeParams {
    fn validate(&self) -> Result<()> {
        check_unit("band_fraction", self.band_fraction)?;
        check_unit("col_fraction_min", self.col_fraction_min)?;
        check_unit("col_fraction_max", self.col_fraction_max)?;
        if self.col_fraction_min > self.col_fraction_max {
            return Err(Error::Parameter("col_fraction_min exceeds col_fraction_max".into()));
        }
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return Err(Error::Parameter(format!("stripe magnitude {} must be >= 0", self.magnitude)));
        }
        Ok(())
    }
}

impl DeadlineParams {
    fn validate(&self) -> Result<()> {
        check_unit("band_fraction", self.band_fraction)?;
        check_unit("col_fraction_min", self.col_fraction_min)?;
        check_unit("col_fraction_max", self.col_fraction_max)?;
        if self.col_fraction_min > self.col_fraction_max {
            return Err(Error::Parameter("col_fraction_min exceeds col_fraction_max".into()));
        }
        Ok(())
    }
}

impl ImpulseParams {
    fn validate(&self) -> Result<()> {
        check_unit("band_fraction", self.band_fraction)?;
        if self.p_choices.is_empty() {
            return Err(Error::Parameter("impulse p set is empty".into()));
        }
        self.p_choices.iter().try_for_each(|&p| check_unit("impulse p", p))
    }
}

impl MixtureParams {
    fn validate(&self) -> Result<()> {
        check_sigma_range(self.sigma_min, self.sigma_max)?;
        for (n, p) in [
            ("p_stripe", self.p_stripe),
            ("p_deadline", self.p_deadline),
            ("p_impulse", self.p_impulse),
        ] {
            check_unit(n, p)?;
        }
        if self.p_stripe + self.p_deadline + self.p_impulse > 1.0 + 1e-12 {
            return Err(Error::Parameter("mixture probabilities sum above 1".into()));
        }
        self.stripe.validate()?;
        self.deadline.validate()?;
        self.impulse.validate()
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let base = |b: &Option<(f64, f64)>| b.map_or(Ok(()), |(lo, hi)| check_sigma_range(lo, hi));
        match self {
            NoiseSpec::GaussianIid { sigma } => {
                if !(*sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::Parameter(format!("sigma must be >= 0, got {sigma}")));
                }
                Ok(())
            }
            NoiseSpec::GaussianNonIid { sigma_min, sigma_max } => check_sigma_range(*sigma_min, *sigma_max),
            NoiseSpec::Stripe { params, base: b } => {
                base(b)?;
                params.validate()
            }
            NoiseSpec::Deadline { params, base: b } => {
                base(b)?;
                params.validate()
            }
            NoiseSpec::Impulse { params, base: b } => {
                base(b)?;
                params.validate()
            }
            NoiseSpec::Mixture(m) => m.validate(),
        }
    }

    /// Corrupts `x` and returns the plan of what was drawn.
    pub fn apply(&self, x: &Tensor, seed: u64) -> Result<(Tensor, NoisePlan)> {
        self.validate()?;
        let (_, _, bands) = dims(x)?;
        let mut y = x.clone();
        let mut plan = NoisePlan::default();
        match self {
            NoiseSpec::GaussianIid { sigma } => {
                plan.sigmas = vec![sigma / 255.0; bands];
                add_gaussian(&mut y, &plan.sigmas, seed);
            }
            NoiseSpec::GaussianNonIid { sigma_min, sigma_max } => {
                plan.sigmas = draw_sigmas(bands, *sigma_min, *sigma_max, seed);
                add_gaussian(&mut y, &plan.sigmas, seed);
            }
            NoiseSpec::Stripe { params, base } => {
                apply_base(&mut y, &mut plan, *base, seed);
                for band in select_bands(bands, params.band_fraction, STRIPE, seed) {
                    let mut r = rng::stream(seed, rng::stream_id(STRIPE, band as u64));
                    plan.stripes.push(stripe_band(&mut y, band, params, &mut r));
                }
            }
            NoiseSpec::Deadline { params, base } => {
                apply_base(&mut y, &mut plan, *base, seed);
                for band in select_bands(bands, params.band_fraction, DEADLINE, seed) {
                    let mut r = rng::stream(seed, rng::stream_id(DEADLINE, band as u64));
                    plan.deadlines.push(deadline_band(&mut y, band, params, &mut r));
                }
            }
            NoiseSpec::Impulse { params, base } => {
                apply_base(&mut y, &mut plan, *base, seed);
                for band in select_bands(bands, params.band_fraction, IMPULSE, seed) {
                    let mut r = rng::stream(seed, rng::stream_id(IMPULSE, band as u64));
                    plan.impulses.push(impulse_band(&mut y, band, params, &mut r));
                }
            }
            NoiseSpec::Mixture(m) => {
                plan.sigmas = draw_sigmas(bands, m.sigma_min, m.sigma_max, seed);
                add_gaussian(&mut y, &plan.sigmas, seed);
                plan.assignment = mixture_assignment(bands, m, seed);
                for (band, kind) in plan.assignment.clone().into_iter().enumerate() {
                    match kind {
                        Corruption::None => {}
                        Corruption::Stripe => {
                            let mut r = rng::stream(seed, rng::stream_id(STRIPE, band as u64));
                            plan.stripes.push(stripe_band(&mut y, band, &m.stripe, &mut r));
                        }
                        Corruption::Deadline => {
                            let mut r = rng::stream(seed, rng::stream_id(DEADLINE, band as u64));
                            plan.deadlines.push(deadline_band(&mut y, band, &m.deadline, &mut r));
                        }
                        Corruption::Impulse => {
                            let mut r = rng::stream(seed, rng::stream_id(IMPULSE, band as u64));
                            plan.impulses.push(impulse_band(&mut y, band, &m.impulse, &mut r));
                        }
                    }
                }
            }
        }
        Ok((y, plan))
    }
}

fn dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, b] => Ok((h, w, b)),
        ref s => Err(Error::Dimension(format!("noise expects [H, W, B], got {s:?}"))),
    }
}

fn apply_base(y: &mut Tensor, plan: &mut NoisePlan, base: Option<(f64, f64)>, seed: u64) {
    if let Some((lo, hi)) = base {
        plan.sigmas = draw_sigmas(y.shape()[2], lo, hi, seed);
        add_gaussian(y, &plan.sigmas, seed);
    }
}

/// Per-band sigma (0-1 scale) drawn uniformly from `[lo, hi] / 255`.
fn draw_sigmas(bands: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    (0..bands)
        .map(|b| rng::uniform(&mut rng::stream(seed, rng::stream_id(SIGMA, b as u64)), lo, hi) / 255.0)
        .collect()
}

fn add_gaussian(y: &mut Tensor, sigmas: &[f64], seed: u64) {
    let bands = sigmas.len();
    for (b, &s) in sigmas.iter().enumerate() {
        if s == 0.0 {
            continue;
        }
        let mut r = rng::stream(seed, rng::stream_id(GAUSS, b as u64));
        for v in y.data_mut().iter_mut().skip(b).step_by(bands) {
            *v += s * rng::standard_normal(&mut r);
        }
    }
}

/// `round(fraction * bands)` distinct bands, ascending.
fn select_bands(bands: usize, fraction: f64, domain: u32, seed: u64) -> Vec<usize> {
    let n = ((fraction * bands as f64).round() as usize).min(bands);
    let mut r = rng::stream(seed, rng::stream_id(SELECT, u64::from(domain)));
    let mut chosen: Vec<usize> = rng::permutation(&mut r, bands).into_iter().take(n).collect();
    chosen.sort_unstable();
    chosen
}

fn column_count(width: usize, lo: f64, hi: f64, r: &mut SeededRng) -> usize {
    let fraction = rng::uniform(r, lo, hi);
    ((fraction * width as f64).round() as usize).min(width)
}

fn stripe_band(y: &mut Tensor, band: usize, p: &StripeParams, r: &mut SeededRng) -> StripeBand {
    let [h, w, bands] = y.shape()[..] else { unreachable!() };
    let n = column_count(w, p.col_fraction_min, p.col_fraction_max, r);
    let mut cols: Vec<usize> = rng::permutation(r, w).into_iter().take(n).collect();
    cols.sort_unstable();
    let columns: Vec<(usize, f64)> = cols
        .into_iter()
        .map(|c| (c, rng::uniform(r, -p.magnitude, p.magnitude)))
        .collect();
    let data = y.data_mut();
    for &(c, offset) in &columns {
        for row in 0..h {
            data[(row * w + c) * bands + band] += offset;
        }
    }
    StripeBand { band, columns }
}

fn deadline_band(y: &mut Tensor, band: usize, p: &DeadlineParams, r: &mut SeededRng) -> DeadlineBand {
    let [h, w, bands] = y.shape()[..] else { unreachable!() };
    let lines = column_count(w, p.col_fraction_min, p.col_fraction_max, r);
    let mut columns = Vec::new();
    for _ in 0..lines {
        let start = r.random_range(0..w);
        let width = r.random_range(1..=3usize);
        columns.extend((start..start + width).filter(|&c| c < w));
    }
    columns.sort_unstable();
    columns.dedup();
    let data = y.data_mut();
    for &c in &columns {
        for row in 0..h {
            data[(row * w + c) * bands + band] = 0.0;
        }
    }
    DeadlineBand { band, columns }
}

fn impulse_band(y: &mut Tensor, band: usize, p: &ImpulseParams, r: &mut SeededRng) -> ImpulseBand {
    let [h, w, bands] = y.shape()[..] else { unreachable!() };
    let prob = p.p_choices[r.random_range(0..p.p_choices.len())];
    let data = y.data_mut();
    let mut replaced = Vec::new();
    for pixel in 0..h * w {
        let hit = r.random::<f64>() < prob;
        let salt = r.random::<bool>();
        if hit {
            let v = if salt { 1.0 } else { 0.0 };
            data[pixel * bands + band] = v;
            replaced.push((pixel, v));
        }
    }
    ImpulseBand {
        band,
        p: prob,
        replaced,
    }
}

fn mixture_assignment(bands: usize, m: &MixtureParams, seed: u64) -> Vec<Corruption> {
    (0..bands)
        .map(|b| {
            let u: f64 = rng::stream(seed, rng::stream_id(MIXTURE, b as u64)).random();
            if u < m.p_stripe {
                Corruption::Stripe
            } else if u < m.p_stripe + m.p_deadline {
                Corruption::Deadline
            } else if u < m.p_stripe + m.p_deadline + m.p_impulse {
                Corruption::Impulse
            } else {
                Corruption::None
            }
        })
        .collect()
}

// ---- named operations ------------------------------------------------------

pub fn gaussian_iid(x: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    Ok(NoiseSpec::GaussianIid { sigma }.apply(x, seed)?.0)
}

pub fn gaussian_noniid(x: &Tensor, sigma_min: f64, sigma_max: f64, seed: u64) -> Result<(Tensor, NoisePlan)> {
    NoiseSpec::GaussianNonIid { sigma_min, sigma_max }.apply(x, seed)
}

pub fn stripe(x: &Tensor, params: &StripeParams, seed: u64) -> Result<(Tensor, NoisePlan)> {
    NoiseSpec::Stripe {
        params: params.clone(),
        base: None,
    }
    .apply(x, seed)
}

pub fn deadline(x: &Tensor, params: &DeadlineParams, seed: u64) -> Result<(Tensor, NoisePlan)> {
    NoiseSpec::Deadline {
        params: params.clone(),
        base: None,
    }
    .apply(x, seed)
}

pub fn impulse(x: &Tensor, params: &ImpulseParams, seed: u64) -> Result<(Tensor, NoisePlan)> {
    NoiseSpec::Impulse {
        params: params.clone(),
        base: None,
    }
    .apply(x, seed)
}

pub fn mixture(x: &Tensor, params: &MixtureParams, seed: u64) -> Result<(Tensor, NoisePlan)> {
    NoiseSpec::Mixture(params.clone()).apply(x, seed)
}

// ---- recipe files ------------------------------------------------------------

/// A noise specification with its seed, stored as versioned `key = value`
/// text.
#[derive(Clone, Debug, PartialEq)]
pub struct Recipe {
    pub spec: NoiseSpec,
    pub seed: u64,
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(", ")
}

impl Recipe {
    /// Key-value pairs in a fixed order; `f64` values use the shortest
    /// representation that parses back exactly.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = vec![
            ("version".into(), RECIPE_VERSION.to_string()),
            ("seed".into(), self.seed.to_string()),
        ];
        let mut push = |k: &str, v: String| kv.push((k.to_string(), v));
        let stripe = |push: &mut dyn FnMut(&str, String), pre: &str, p: &StripeParams| {
            push(&format!("{pre}band_fraction"), p.band_fraction.to_string());
            push(&format!("{pre}col_fraction_min"), p.col_fraction_min.to_string());
            push(&format!("{pre}col_fraction_max"), p.col_fraction_max.to_string());
            push(&format!("{pre}magnitude"), p.magnitude.to_string());
        };
        let deadline = |push: &mut dyn FnMut(&str, String), pre: &str, p: &DeadlineParams| {
            push(&format!("{pre}band_fraction"), p.band_fraction.to_string());
            push(&format!("{pre}col_fraction_min"), p.col_fraction_min.to_string());
            push(&format!("{pre}col_fraction_max"), p.col_fraction_max.to_string());
        };
        let impulse = |push: &mut dyn FnMut(&str, String), pre: &str, p: &ImpulseParams| {
            push(&format!("{pre}band_fraction"), p.band_fraction.to_string());
            push(&format!("{pre}p"), fmt_list(&p.p_choices));
        };
        let base = |push: &mut dyn FnMut(&str, String), b: &Option<(f64, f64)>| {
            if let Some((lo, hi)) = b {
                push("base_sigma_min", lo.to_string());
                push("base_sigma_max", hi.to_string());
            }
        };
        match &self.spec {
            NoiseSpec::GaussianIid { sigma } => {
                push("variant", "gaussian_iid".into());
                push("sigma", sigma.to_string());
            }
            NoiseSpec::GaussianNonIid { sigma_min, sigma_max } => {
                push("variant", "gaussian_noniid".into());
                push("sigma_min", sigma_min.to_string());
                push("sigma_max", sigma_max.to_string());
            }
            NoiseSpec::Stripe { params, base: b } => {
                push("variant", "stripe".into());
                stripe(&mut push, "", params);
                base(&mut push, b);
            }
            NoiseSpec::Deadline { params, base: b } => {
                push("variant", "deadline".into());
                deadline(&mut push, "", params);
                base(&mut push, b);
            }
            NoiseSpec::Impulse { params, base: b } => {
                push("variant", "impulse".into());
                impulse(&mut push, "", params);
                base(&mut push, b);
            }
            NoiseSpec::Mixture(m) => {
                push("variant", "mixture".into());
                push("sigma_min", m.sigma_min.to_string());
                push("sigma_max", m.sigma_max.to_string());
                push("p_stripe", m.p_stripe.to_string());
                push("p_deadline", m.p_deadline.to_string());
                push("p_impulse", m.p_impulse.to_string());
                stripe(&mut push, "stripe.", &m.stripe);
                deadline(&mut push, "deadline.", &m.deadline);
                impulse(&mut push, "impulse.", &m.impulse);
            }
        }
        kv
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses recipe text; `#` starts a comment. Parameters not given take
    /// their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(format!("recipe line {}", n + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| pairs.iter().rev().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
        let num = |k: &str, default: f64| -> Result<f64> {
            match get(k) {
                None => Ok(default),
                Some(v) => v
                    .parse::<f64>()
                    .map_err(|_| Error::format(k, format!("expected a number, got `{v}`"))),
            }
        };
        let list = |k: &str, default: &[f64]| -> Result<Vec<f64>> {
            match get(k) {
                None => Ok(default.to_vec()),
                Some(v) => v
                    .split(',')
                    .map(|p| {
                        p.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::format(k, format!("expected numbers, got `{v}`")))
                    })
                    .collect(),
            }
        };
        match get("version") {
            Some(v) if v == RECIPE_VERSION.to_string() => {}
            Some(v) => return Err(Error::format("version", format!("unsupported recipe version {v}"))),
            None => return Err(Error::format("version", "missing recipe version")),
        }
        let seed = match get("seed") {
            Some(v) => v
                .parse()
                .map_err(|_| Error::format("seed", format!("expected an unsigned integer, got `{v}`")))?,
            None => 0,
        };
        let stripe = |pre: &str| -> Result<StripeParams> {
            let d = StripeParams::default();
            Ok(StripeParams {
                band_fraction: num(&format!("{pre}band_fraction"), d.band_fraction)?,
                col_fraction_min: num(&format!("{pre}col_fraction_min"), d.col_fraction_min)?,
                col_fraction_max: num(&format!("{pre}col_fraction_max"), d.col_fraction_max)?,
                magnitude: num(&format!("{pre}magnitude"), d.magnitude)?,
            })
        };
        let deadline = |pre: &str| -> Result<DeadlineParams> {
            let d = DeadlineParams::default();
            Ok(DeadlineParams {
                band_fraction: num(&format!("{pre}band_fraction"), d.band_fraction)?,
                col_fraction_min: num(&format!("{pre}col_fraction_min"), d.col_fraction_min)?,
                col_fraction_max: num(&format!("{pre}col_fraction_max"), d.col_fraction_max)?,
            })
        };
        let impulse = |pre: &str| -> Result<ImpulseParams> {
            let d = ImpulseParams::default();
            Ok(ImpulseParams {
                band_fraction: num(&format!("{pre}band_fraction"), d.band_fraction)?,
                p_choices: list(&format!("{pre}p"), &d.p_choices)?,
            })
        };
        let base = || -> Result<Option<(f64, f64)>> {
            match (get("base_sigma_min"), get("base_sigma_max")) {
                (None, None) => Ok(None),
                _ => Ok(Some((num("base_sigma_min", 10.0)?, num("base_sigma_max", 70.0)?))),
            }
        };
        let spec = match get("variant") {
            Some("gaussian_iid") => NoiseSpec::GaussianIid {
                sigma: num("sigma", 50.0)?,
            },
            Some("gaussian_noniid") => NoiseSpec::GaussianNonIid {
                sigma_min: num("sigma_min", 10.0)?,
                sigma_max: num("sigma_max", 70.0)?,
            },
            Some("stripe") => NoiseSpec::Stripe {
                params: stripe("")?,
                base: base()?,
            },
            Some("deadline") => NoiseSpec::Deadline {
                params: deadline("")?,
                base: base()?,
            },
            Some("impulse") => NoiseSpec::Impulse {
                params: impulse("")?,
                base: base()?,
            },
            Some("mixture") => {
                let d = MixtureParams::default();
                NoiseSpec::Mixture(MixtureParams {
                    sigma_min: num("sigma_min", d.sigma_min)?,
                    sigma_max: num("sigma_max", d.sigma_max)?,
                    p_stripe: num("p_stripe", d.p_stripe)?,
                    p_deadline: num("p_deadline", d.p_deadline)?,
                    p_impulse: num("p_impulse", d.p_impulse)?,
                    stripe: stripe("stripe.")?,
                    deadline: deadline("deadline.")?,
                    impulse: impulse("impulse.")?,
                })
            }
            Some(other) => return Err(Error::format("variant", format!("unknown noise variant `{other}`"))),
            None => return Err(Error::format("variant", "missing noise variant")),
        };
        spec.validate()?;
        Ok(Self { spec, seed })
    }

    pub fn apply(&self, x: &Tensor) -> Result<(Tensor, NoisePlan)> {
        self.spec.apply(x, self.seed)
    }
}

#[cfg(test)]
#[path = "degradation_tests.rs"]
mod tests;
