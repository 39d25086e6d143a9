use std::path::Path;

use super::{header_text, lookup, parse, read_file, required, split_header, write_file};
use crate::degradation::{HsiImage, Recipe};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const HSI_MAGIC: &str = "HSR1";

/// Sample type of the payload.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            _ => Err(Error::format("dtype", format!("unknown dtype `{s}`"))),
        }
    }
}

/// Provenance stored next to the cube.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HsiMeta {
    pub seed: Option<u64>,
    pub recipe: Option<Recipe>,
    /// Free-form origin, e.g. the generator or the checkpoint that produced it.
    pub source: Option<String>,
}

/// A loaded container.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiFile {
    pub image: HsiImage,
    pub dtype: Dtype,
    pub meta: HsiMeta,
}

pub(super) fn encode(image: &HsiImage, dtype: Dtype, meta: &HsiMeta) -> Result<Vec<u8>> {
    let (h, w, b) = (image.height(), image.width(), image.bands());
    let mut pairs: Vec<(String, String)> = vec![
        ("height".into(), h.to_string()),
        ("width".into(), w.to_string()),
        ("bands".into(), b.to_string()),
        ("dtype".into(), dtype.name().into()),
        ("layout".into(), "band-major".into()),
    ];
    if let Some(seed) = meta.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    if let Some(source) = &meta.source {
        if source.contains('\n') {
            return Err(Error::format("source", "must be a single line"));
        }
        pairs.push(("source".into(), source.clone()));
    }
    if let Some(wl) = &image.wavelengths {
        if wl.len() != b {
            return Err(Error::format("wavelengths", format!("{} values for {b} bands", wl.len())));
        }
        let list: Vec<String> = wl.iter().map(f64::to_string).collect();
        pairs.push(("wavelengths".into(), list.join(",")));
    }
    if let Some(recipe) = &meta.recipe {
        for (k, v) in recipe.to_pairs() {
            pairs.push((format!("recipe.{k}"), v.replace(' ', "")));
        }
    }
    let mut bytes = header_text(HSI_MAGIC, &pairs).into_bytes();
    bytes.reserve(h * w * b * dtype.width());
    let data = image.data.data();
    for band in 0..b {
        for px in 0..h * w {
            let v = data[px * b + band];
            match dtype {
                Dtype::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(bytes)
}

pub(super) fn decode(bytes: &[u8]) -> Result<HsiFile> {
    let (pairs, payload) = split_header(bytes, HSI_MAGIC)?;
    let dim = |key: &str| -> Result<usize> {
        let v: usize = parse(key, required(&pairs, key)?)?;
        if v == 0 {
            return Err(Error::format(key, "must be positive"));
        }
        Ok(v)
    };
    let (h, w, b) = (dim("height")?, dim("width")?, dim("bands")?);
    let dtype: Dtype = required(&pairs, "dtype")?.parse()?;
    let layout = required(&pairs, "layout")?;
    if layout != "band-major" {
        return Err(Error::format("layout", format!("unsupported layout `{layout}`")));
    }
    for (k, _) in &pairs {
        let known = matches!(
            k.as_str(),
            "height" | "width" | "bands" | "dtype" | "layout" | "seed" | "source" | "wavelengths"
        ) || k.starts_with("recipe.");
        if !known {
            return Err(Error::format(k.as_str(), "unknown header key"));
        }
    }
    let seed = lookup(&pairs, "seed").map(|v| parse("seed", v)).transpose()?;
    let wavelengths = lookup(&pairs, "wavelengths")
        .map(|v| {
            let wl = v
                .split(',')
                .map(|x| parse::<f64>("wavelengths", x))
                .collect::<Result<Vec<_>>>()?;
            if wl.len() != b {
                return Err(Error::format("wavelengths", format!("{} values for {b} bands", wl.len())));
            }
            Ok(wl)
        })
        .transpose()?;
    let recipe_pairs: Vec<(String, String)> = pairs
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("recipe.").map(|k| (k.to_string(), v.clone())))
        .collect();
    let recipe = if recipe_pairs.is_empty() {
        None
    } else {
        Some(Recipe::from_pairs(&recipe_pairs)?)
    };

    let count = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(b))
        .ok_or_else(|| Error::format("height", "voxel count overflows"))?;
    let expected = count * dtype.width();
    if payload.len() < expected {
        return Err(Error::format(
            "payload",
            format!("truncated payload: expected {expected} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(
            "payload",
            format!("{} trailing bytes after {expected}", payload.len() - expected),
        ));
    }
    let mut data = vec![0.0; count];
    for (i, chunk) in payload.chunks_exact(dtype.width()).enumerate() {
        let v = match dtype {
            Dtype::F32 => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
            Dtype::F64 => f64::from_le_bytes(chunk.try_into().unwrap()),
        };
        let (band, px) = (i / (h * w), i % (h * w));
        data[px * b + band] = v;
    }
    let mut image = HsiImage::new(Tensor::new([h, w, b], data)?)?;
    image.wavelengths = wavelengths;
    Ok(HsiFile {
        image,
        dtype,
        meta: HsiMeta {
            seed,
            recipe,
            source: lookup(&pairs, "source").map(str::to_string),
        },
    })
}

/// Writes `image` as an `HSR1` container.
pub fn save_hsi(path: impl AsRef<Path>, image: &HsiImage, dtype: Dtype, meta: &HsiMeta) -> Result<()> {
    write_file(path.as_ref(), &encode(image, dtype, meta)?)
}

/// Reads an `HSR1` container, validating the header before the payload.
pub fn load_hsi(path: impl AsRef<Path>) -> Result<HsiFile> {
    decode(&read_file(path.as_ref())?)
}
