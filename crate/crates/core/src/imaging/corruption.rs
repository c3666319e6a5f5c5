//! Parametric weather corruptions.
//!
//! Every corruption is geometry-preserving: it changes pixel values only, so
//! annotations carry over unchanged. Randomized corruptions (rain, snow) draw
//! from a ChaCha stream keyed by the spec seed and, at dataset level, the image
//! file name.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::blur::{double_gaussian_blur, gaussian_blur};
use super::image::{read_image, write_image, Image};
use crate::dataset::{ConditionTag, DatasetManifest, ImageRecord};
use crate::error::{io_err, ImageError};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorruptionKind {
    DoubleGaussian {
        sigma1: f64,
        sigma2: f64,
    },
    /// `out = (1 - density) * img + density * airlight`.
    Fog {
        density: f64,
        airlight: f64,
    },
    /// Slanted streaks alpha-blended over the image.
    Rain {
        streaks: u32,
        length: u32,
        alpha: f64,
        #[serde(default = "default_slant")]
        slant: f64,
    },
    /// White discs alpha-blended over the image.
    Snow {
        flakes: u32,
        radius: f64,
        #[serde(default = "default_snow_alpha")]
        alpha: f64,
    },
    /// Per-channel tint multiply followed by a Gaussian blur.
    Sand {
        tint: [f64; 3],
        sigma: f64,
    },
}

fn default_slant() -> f64 {
    0.25
}

fn default_snow_alpha() -> f64 {
    0.85
}

impl CorruptionKind {
    pub fn name(&self) -> &'static str {
        match self {
            CorruptionKind::DoubleGaussian { .. } => "double_gaussian",
            CorruptionKind::Fog { .. } => "fog",
            CorruptionKind::Rain { .. } => "rain",
            CorruptionKind::Snow { .. } => "snow",
            CorruptionKind::Sand { .. } => "sand",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    #[serde(flatten)]
    pub kind: CorruptionKind,
    #[serde(default)]
    pub seed: u64,
}

fn unit(name: &str, v: f64) -> Result<(), ImageError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(ImageError::Param(format!("{name} must lie in [0, 1], got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<(), ImageError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(ImageError::Param(format!("{name} must be finite and >= 0, got {v}")))
    }
}

const MAX_MARKS: u32 = 100_000;

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, seed: u64) -> Self {
        CorruptionSpec { kind, seed }
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        match &self.kind {
            CorruptionKind::DoubleGaussian { sigma1, sigma2 } => {
                non_negative("sigma1", *sigma1)?;
                non_negative("sigma2", *sigma2)
            }
            CorruptionKind::Fog { density, airlight } => {
                unit("density", *density)?;
                unit("airlight", *airlight)
            }
            CorruptionKind::Rain { streaks, length, alpha, slant } => {
                unit("alpha", *alpha)?;
                if *streaks > MAX_MARKS || *length > 4096 || !slant.is_finite() || slant.abs() > 4.0 {
                    return Err(ImageError::Param("rain parameters out of range".into()));
                }
                Ok(())
            }
            CorruptionKind::Snow { flakes, radius, alpha } => {
                unit("alpha", *alpha)?;
                non_negative("radius", *radius)?;
                if *flakes > MAX_MARKS || *radius > 64.0 {
                    return Err(ImageError::Param("snow parameters out of range".into()));
                }
                Ok(())
            }
            CorruptionKind::Sand { tint, sigma } => {
                for t in tint {
                    non_negative("tint", *t)?;
                }
                non_negative("sigma", *sigma)
            }
        }
    }
}

/// Applies one corruption. Output is a pure function of `(img, spec)`.
pub fn apply_corruption(img: &Image, spec: &CorruptionSpec) -> Result<Image, ImageError> {
    spec.validate()?;
    let mut stream = rng::stream(spec.seed, spec.kind.name());
    match &spec.kind {
        CorruptionKind::DoubleGaussian { sigma1, sigma2 } => double_gaussian_blur(img, *sigma1, *sigma2),
        CorruptionKind::Fog { density, airlight } => {
            let (t, l) = (*density, *airlight);
            Ok(img.map(|v| (1.0 - t) * v + t * l))
        }
        CorruptionKind::Rain { streaks, length, alpha, slant } => {
            let mut out = img.clone();
            let (w, h) = (img.width() as f64, img.height() as f64);
            let color = [0.82, 0.84, 0.88];
            for _ in 0..*streaks {
                let x0 = stream.gen_range(-(slant.abs() * *length as f64)..w + slant.abs() * *length as f64);
                let y0 = stream.gen_range(-(*length as f64)..h);
                for s in 0..*length {
                    let x = (x0 + slant * s as f64).floor();
                    let y = y0.floor() + s as f64;
                    if x >= 0.0 && y >= 0.0 && x < w && y < h {
                        out.blend(x as usize, y as usize, color, *alpha);
                    }
                }
            }
            Ok(out)
        }
        CorruptionKind::Snow { flakes, radius, alpha } => {
            let mut out = img.clone();
            let (w, h) = (img.width() as i64, img.height() as i64);
            for _ in 0..*flakes {
                let cx = stream.gen_range(0.0..w as f64);
                let cy = stream.gen_range(0.0..h as f64);
                let r = radius * stream.gen_range(0.5..1.5);
                let r2 = r * r;
                let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
                let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
                for y in y0.max(0)..=y1.min(h - 1) {
                    for x in x0.max(0)..=x1.min(w - 1) {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        if dx * dx + dy * dy <= r2 {
                            out.blend(x as usize, y as usize, [1.0; 3], *alpha);
                        }
                    }
                }
            }
            Ok(out)
        }
        CorruptionKind::Sand { tint, sigma } => {
            let mut tinted = img.clone();
            for y in 0..img.height() {
                for x in 0..img.width() {
                    for (c, t) in tint.iter().enumerate() {
                        tinted.set(x, y, c, img.get(x, y, c) * t);
                    }
                }
            }
            gaussian_blur(&tinted, *sigma)
        }
    }
}

/// An ordered list of corruptions applied one after another.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorruptionChain(pub Vec<CorruptionSpec>);

impl CorruptionChain {
    pub fn single(spec: CorruptionSpec) -> Self {
        CorruptionChain(vec![spec])
    }

    /// Kind names joined with `+`, as used in condition tags.
    pub fn tag(&self) -> String {
        self.0.iter().map(|s| s.kind.name()).collect::<Vec<_>>().join("+")
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        if self.0.is_empty() {
            return Err(ImageError::Param("empty corruption chain".into()));
        }
        self.0.iter().try_for_each(CorruptionSpec::validate)
    }

    /// Applies the chain with every seed re-keyed by `key`.
    pub fn apply_keyed(&self, img: &Image, key: &str) -> Result<Image, ImageError> {
        let mut out = img.clone();
        for spec in &self.0 {
            let keyed = CorruptionSpec { kind: spec.kind.clone(), seed: rng::derive_seed(spec.seed, key) };
            out = apply_corruption(&out, &keyed)?;
        }
        Ok(out)
    }
}

impl fmt::Display for CorruptionChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|s| {
                let mut v = serde_json::to_value(s).expect("spec serializes");
                let obj = v.as_object_mut().expect("spec is an object");
                obj.remove("kind");
                let params: Vec<String> = obj
                    .iter()
                    .map(|(k, v)| match v.as_array() {
                        Some(items) => {
                            let items: Vec<String> = items.iter().map(|x| x.to_string()).collect();
                            format!("{k}={}", items.join("|"))
                        }
                        None => format!("{k}={v}"),
                    })
                    .collect();
                format!("{}:{}", s.kind.name(), params.join(","))
            })
            .collect();
        f.write_str(&parts.join("+"))
    }
}

/// Parses `kind:key=value,...` items joined by `+`, for example
/// `fog:density=0.5,airlight=0.9+rain:streaks=40,length=6,alpha=0.5,seed=3`.
/// Array values use `|` as separator: `sand:tint=1|0.8|0.55,sigma=1`.
impl FromStr for CorruptionChain {
    type Err = ImageError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let specs = s
            .split('+')
            .map(|item| {
                let (kind, params) = item.trim().split_once(':').unwrap_or((item.trim(), ""));
                let mut obj = serde_json::Map::new();
                obj.insert("kind".into(), kind.into());
                for kv in params.split(',').filter(|p| !p.trim().is_empty()) {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| ImageError::Param(format!("expected key=value, got {kv:?}")))?;
                    let parse = |v: &str| {
                        serde_json::from_str::<serde_json::Value>(v.trim())
                            .map_err(|_| ImageError::Param(format!("bad value for {k}: {v:?}")))
                    };
                    let value = if v.contains('|') {
                        serde_json::Value::Array(v.split('|').map(parse).collect::<Result<_, _>>()?)
                    } else {
                        parse(v)?
                    };
                    obj.insert(k.trim().to_string(), value);
                }
                serde_json::from_value::<CorruptionSpec>(obj.into())
                    .map_err(|e| ImageError::Param(format!("corruption {kind:?}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let chain = CorruptionChain(specs);
        chain.validate()?;
        Ok(chain)
    }
}

fn file_key(path: &Path) -> Result<String, ImageError> {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(String::from)
        .ok_or_else(|| ImageError::Param(format!("image path {} has no file name", path.display())))
}

/// Corrupts every image of `m` into `out_dir`, keeping annotations.
///
/// Per-image randomness is keyed by the image file name, so the output for a
/// given image does not depend on record order. Returns a manifest only when
/// every image succeeded.
pub fn corrupt_dataset(
    m: &DatasetManifest,
    chain: &CorruptionChain,
    out_dir: &Path,
) -> Result<DatasetManifest, ImageError> {
    chain.validate()?;
    let mut out = DatasetManifest {
        records: Vec::with_capacity(m.len()),
        class_set: m.class_set.clone(),
        provenance: format!("corrupt({} | {chain})", m.provenance),
    };
    if m.is_empty() {
        return Ok(out);
    }
    fs::create_dir_all(out_dir).map_err(io_err::<ImageError>(out_dir))?;
    let tag = ConditionTag::Corrupted(chain.tag());
    let mut seen = HashSet::new();
    let mut failures = Vec::new();
    for r in &m.records {
        let result = (|| {
            let key = file_key(&r.image_path)?;
            if !seen.insert(key.clone()) {
                return Err(ImageError::Param(format!("duplicate image file name {key}")));
            }
            let img = read_image(&r.image_path)?;
            let corrupted = chain.apply_keyed(&img, &key)?;
            let target = out_dir.join(&key);
            write_image(&corrupted, &target)?;
            Ok(ImageRecord { image_path: target, condition: tag.clone(), ..r.clone() })
        })();
        match result {
            Ok(rec) => out.records.push(rec),
            Err(e) => failures.push(e),
        }
    }
    let count = failures.len();
    if let Some(first) = failures.into_iter().next() {
        return Err(ImageError::Batch { count, first: Box::new(first) });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noisy(seed: u64) -> Image {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Image::from_raw(16, 12, (0..16 * 12 * 3).map(|_| r.gen::<f64>()).collect()).unwrap()
    }

    fn fog(t: f64, l: f64) -> CorruptionSpec {
        CorruptionSpec::new(CorruptionKind::Fog { density: t, airlight: l }, 0)
    }

    #[test]
    fn fog_boundaries() {
        let img = noisy(1);
        assert_eq!(apply_corruption(&img, &fog(0.0, 0.9)).unwrap(), img);
        let full = apply_corruption(&img, &fog(1.0, 0.9)).unwrap();
        assert!(full.pixels().iter().all(|&v| (v - 0.9).abs() < 1e-15));
    }

    #[test]
    fn denser_fog_moves_every_pixel_closer_to_airlight() {
        let img = noisy(2);
        let l = 0.9;
        let a = apply_corruption(&img, &fog(0.3, l)).unwrap();
        let b = apply_corruption(&img, &fog(0.6, l)).unwrap();
        for ((orig, pa), pb) in img.pixels().iter().zip(a.pixels()).zip(b.pixels()) {
            if *orig != l {
                assert!((pb - l).abs() < (pa - l).abs());
            }
        }
    }

    #[test]
    fn randomized_corruptions_are_deterministic() {
        let img = noisy(3);
        for kind in [
            CorruptionKind::Rain { streaks: 30, length: 5, alpha: 0.6, slant: 0.3 },
            CorruptionKind::Snow { flakes: 20, radius: 1.5, alpha: 0.8 },
            CorruptionKind::Sand { tint: [1.0, 0.8, 0.5], sigma: 1.0 },
            CorruptionKind::DoubleGaussian { sigma1: 1.0, sigma2: 2.0 },
        ] {
            let spec = CorruptionSpec::new(kind, 42);
            let a = apply_corruption(&img, &spec).unwrap();
            assert_eq!(a, apply_corruption(&img, &spec).unwrap());
            assert_ne!(a, img);
        }
        let rain = |seed| CorruptionSpec::new(CorruptionKind::Rain { streaks: 30, length: 5, alpha: 0.6, slant: 0.3 }, seed);
        assert_ne!(apply_corruption(&img, &rain(1)).unwrap(), apply_corruption(&img, &rain(2)).unwrap());
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        assert!(apply_corruption(&noisy(0), &fog(1.5, 0.9)).is_err());
        let blur = CorruptionSpec::new(CorruptionKind::DoubleGaussian { sigma1: -1.0, sigma2: 0.0 }, 0);
        assert!(apply_corruption(&noisy(0), &blur).is_err());
    }

    #[test]
    fn chain_parses_and_prints() {
        let chain: CorruptionChain =
            "fog:density=0.5,airlight=0.9+rain:streaks=40,length=6,alpha=0.5,seed=3".parse().unwrap();
        assert_eq!(chain.tag(), "fog+rain");
        assert_eq!(chain.0[1].seed, 3);
        let again: CorruptionChain = chain.to_string().parse().unwrap();
        assert_eq!(again, chain);
        let sand: CorruptionChain = "sand:tint=1|0.8|0.55,sigma=1".parse().unwrap();
        assert_eq!(sand.0[0].kind, CorruptionKind::Sand { tint: [1.0, 0.8, 0.55], sigma: 1.0 });
        assert_eq!(sand.to_string().parse::<CorruptionChain>().unwrap(), sand);
    }

    #[test]
    fn unknown_kind_is_a_parameter_error() {
        assert!(matches!("hail:size=2".parse::<CorruptionChain>(), Err(ImageError::Param(_))));
        assert!(matches!("fog:density=0.5".parse::<CorruptionChain>(), Err(ImageError::Param(_))));
    }
}
