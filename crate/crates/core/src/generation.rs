//! Generation job planning and the pure image helpers used by executors.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::SeedBuilder;
use crate::prompt::{apply_style, GenerationPrompt, PromptCorpus, PromptError, PromptKind};

pub const DEFAULT_GUIDANCE_SCALE: f64 = 2.0;
pub const DEFAULT_STEPS: u32 = 50;
pub const DEFAULT_RESOLUTION: u32 = 1024;
pub const DEFAULT_TARGET_RESOLUTION: u32 = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenerationError {
    #[error("prompt corpus for `{0}` has no prompts or styles")]
    EmptyCorpus(String),
    #[error("quota must be at least 1")]
    ZeroQuota,
    #[error("invalid generation parameters: {0}")]
    InvalidParams(&'static str),
    #[error("factor {factor} does not divide {width}x{height}")]
    NonDivisibleFactor { factor: u32, width: u32, height: u32 },
    #[error("malformed PPM: {0}")]
    BadPpm(&'static str),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Sampler settings sent with every job.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub guidance_scale: f64,
    pub steps: u32,
    pub width: u32,
    pub height: u32,
    pub target_resolution: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            steps: DEFAULT_STEPS,
            width: DEFAULT_RESOLUTION,
            height: DEFAULT_RESOLUTION,
            target_resolution: DEFAULT_TARGET_RESOLUTION,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), GenerationError> {
        if !(self.guidance_scale > 0.0 && self.guidance_scale.is_finite()) {
            return Err(GenerationError::InvalidParams("guidance_scale must be positive"));
        }
        if self.steps == 0 {
            return Err(GenerationError::InvalidParams("steps must be at least 1"));
        }
        if self.width == 0 || self.width != self.height {
            return Err(GenerationError::InvalidParams(
                "width and height must be equal and positive",
            ));
        }
        if self.target_resolution == 0 || self.width % self.target_resolution != 0 {
            return Err(GenerationError::InvalidParams("target_resolution must divide width"));
        }
        Ok(())
    }

    pub fn downsample_factor(&self) -> u32 {
        self.width / self.target_resolution
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationJob {
    /// `"{class_id}/{kind}/{index}"`.
    pub job_id: String,
    pub class_id: String,
    pub index: usize,
    /// How many times the prompt list had been cycled when this job was planned.
    pub replica: usize,
    pub prompt: GenerationPrompt,
    pub seed: u64,
    #[serde(flatten)]
    pub params: GenerationParams,
}

impl GenerationJob {
    pub fn kind(&self) -> PromptKind {
        self.prompt.kind
    }

    /// Relative output path without extension: `{class_id}/{kind}/{index}`.
    pub fn relative_stem(&self) -> String {
        self.job_id.clone()
    }
}

pub fn job_seed(seed_base: u64, class_id: &str, kind: PromptKind, index: usize) -> u64 {
    SeedBuilder::new("generation-job")
        .u64(seed_base)
        .str(class_id)
        .str(kind.as_str())
        .u64(index as u64)
        .finish()
}

/// Plans `quota` jobs for one class: `ceil(quota/2)` contextual jobs cycling
/// the CD prompts, and `floor(quota/2)` stylized jobs cycling the
/// `(prompt, style)` grid in prompt-major order.
pub fn plan_jobs(
    class_id: &str,
    corpus: &PromptCorpus,
    quota: usize,
    seed_base: u64,
    params: GenerationParams,
) -> Result<Vec<GenerationJob>, GenerationError> {
    if quota == 0 {
        return Err(GenerationError::ZeroQuota);
    }
    params.validate()?;
    let n_cd = quota.div_ceil(2);
    let n_sd = quota / 2;
    let prompts = &corpus.cd_prompts;
    if prompts.is_empty() || (n_sd > 0 && corpus.styles.is_empty()) {
        return Err(GenerationError::EmptyCorpus(class_id.to_string()));
    }

    let job = |kind: PromptKind, index: usize, replica: usize, prompt: GenerationPrompt| GenerationJob {
        job_id: format!("{class_id}/{kind}/{index}"),
        class_id: class_id.to_string(),
        index,
        replica,
        prompt,
        seed: job_seed(seed_base, class_id, kind, index),
        params,
    };

    let mut jobs = Vec::with_capacity(quota);
    for i in 0..n_cd {
        let mut prompt = prompts[i % prompts.len()].clone();
        prompt.class_id = class_id.to_string();
        jobs.push(job(PromptKind::Cd, i, i / prompts.len(), prompt));
    }
    let grid = prompts.len() * corpus.styles.len();
    for i in 0..n_sd {
        let cell = i % grid;
        let (p, s) = (cell / corpus.styles.len(), cell % corpus.styles.len());
        let mut prompt = apply_style(&prompts[p], &corpus.styles[s])?;
        prompt.class_id = class_id.to_string();
        jobs.push(job(PromptKind::Sd, i, i / grid, prompt));
    }
    Ok(jobs)
}

/// An 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<[u8; 3]>,
}

impl RasterImage {
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        RasterImage {
            width,
            height,
            pixels: alloc::vec![rgb; width as usize * height as usize],
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let header = format!("P6\n{} {}\n255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.pixels.len() * 3);
        out.extend_from_slice(header.as_bytes());
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, GenerationError> {
        let mut pos = 0;
        let mut token = || -> Result<&str, GenerationError> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(GenerationError::BadPpm("truncated header"));
            }
            core::str::from_utf8(&bytes[start..pos]).map_err(|_| GenerationError::BadPpm("header is not ASCII"))
        };
        if token()? != "P6" {
            return Err(GenerationError::BadPpm("not a P6 file"));
        }
        let mut num =
            |what| -> Result<u32, GenerationError> { token()?.parse().map_err(|_| GenerationError::BadPpm(what)) };
        let width = num("bad width")?;
        let height = num("bad height")?;
        if num("bad maxval")? != 255 {
            return Err(GenerationError::BadPpm("maxval must be 255"));
        }
        let data = bytes.get(pos + 1..).ok_or(GenerationError::BadPpm("missing raster"))?;
        let n = width as usize * height as usize;
        if data.len() != n * 3 {
            return Err(GenerationError::BadPpm("raster size does not match header"));
        }
        Ok(RasterImage {
            width,
            height,
            pixels: data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }
}

/// Deterministic placeholder for a text-to-image model.
///
/// Produces a bilinear blend of four seeded corner colours with seeded
/// per-pixel noise; a pure function of `(seed, width, height)`.
pub fn stub_generate(job: &GenerationJob) -> RasterImage {
    stub_raster(job.seed, job.params.width, job.params.height)
}

pub fn stub_raster(seed: u64, width: u32, height: u32) -> RasterImage {
    let mut rng = SeedBuilder::new("stub-image")
        .u64(seed)
        .u64(u64::from(width))
        .u64(u64::from(height))
        .rng();
    let corners: [[f64; 3]; 4] =
        core::array::from_fn(|_| core::array::from_fn(|_| f64::from(rng.random_range(0u8..=223))));
    let mut pixels = Vec::with_capacity(width as usize * height as usize);
    let fx = |v: u32, n: u32| if n > 1 { f64::from(v) / f64::from(n - 1) } else { 0.0 };
    for y in 0..height {
        let ty = fx(y, height);
        for x in 0..width {
            let tx = fx(x, width);
            let mut px = [0u8; 3];
            for (c, out) in px.iter_mut().enumerate() {
                let top = corners[0][c] * (1.0 - tx) + corners[1][c] * tx;
                let bottom = corners[2][c] * (1.0 - tx) + corners[3][c] * tx;
                let base = top * (1.0 - ty) + bottom * ty;
                *out = (base as u8).saturating_add(rng.random_range(0u8..32));
            }
            pixels.push(px);
        }
    }
    RasterImage { width, height, pixels }
}

/// Box-filter downsampling: each output pixel is the per-channel mean of a
/// `factor x factor` block, rounded half up.
pub fn downsample_box(img: &RasterImage, factor: u32) -> Result<RasterImage, GenerationError> {
    if factor == 0 || img.width % factor != 0 || img.height % factor != 0 {
        return Err(GenerationError::NonDivisibleFactor {
            factor,
            width: img.width,
            height: img.height,
        });
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (ow, oh) = (img.width / factor, img.height / factor);
    let count = u64::from(factor) * u64::from(factor);
    let mut pixels = Vec::with_capacity(ow as usize * oh as usize);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut sums = [0u64; 3];
            for y in oy * factor..(oy + 1) * factor {
                for x in ox * factor..(ox + 1) * factor {
                    let p = img.pixel(x, y);
                    for c in 0..3 {
                        sums[c] += u64::from(p[c]);
                    }
                }
            }
            pixels.push(sums.map(|s| ((2 * s + count) / (2 * count)) as u8));
        }
    }
    Ok(RasterImage {
        width: ow,
        height: oh,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{assemble_cd_prompt, load_style_list, AspectSet};
    use alloc::vec;
    use proptest::prelude::*;

    fn corpus(n: usize) -> PromptCorpus {
        PromptCorpus {
            class_id: "c".into(),
            cd_prompts: (0..n)
                .map(|i| assemble_cd_prompt("c", AspectSet::new(&format!("fg{i}"), "bg", "li", "ca").unwrap()))
                .collect(),
            styles: load_style_list().unwrap(),
            queries_issued: 1,
        }
    }

    #[test]
    fn plan_splits_quota() {
        let c = corpus(3);
        let jobs = plan_jobs("c", &c, 4, 1, GenerationParams::default()).unwrap();
        let cd = jobs.iter().filter(|j| j.kind() == PromptKind::Cd).count();
        assert_eq!((cd, jobs.len() - cd), (2, 2));
        let jobs = plan_jobs("c", &c, 5, 1, GenerationParams::default()).unwrap();
        let cd = jobs.iter().filter(|j| j.kind() == PromptKind::Cd).count();
        assert_eq!((cd, jobs.len() - cd), (3, 2));
        assert_eq!(jobs[0].job_id, "c/cd/0");
        assert_eq!(jobs[3].job_id, "c/sd/0");
    }

    #[test]
    fn plan_cycles_prompts_and_style_grid() {
        let c = corpus(2);
        let jobs = plan_jobs("c", &c, 10, 1, GenerationParams::default()).unwrap();
        let cd: Vec<_> = jobs.iter().filter(|j| j.kind() == PromptKind::Cd).collect();
        assert_eq!(cd[2].prompt.text, c.cd_prompts[0].text);
        assert_eq!(cd[2].replica, 1);
        let sd: Vec<_> = jobs.iter().filter(|j| j.kind() == PromptKind::Sd).collect();
        assert_eq!(sd[0].prompt.style.as_deref(), Some("Sketch"));
        assert_eq!(sd[1].prompt.style.as_deref(), Some("Painting"));
        assert!(sd[1]
            .prompt
            .text
            .ends_with(c.cd_prompts[0].source_aspects.body().as_str()));

        // Past the first 60 cells the grid moves to the second prompt.
        let jobs = plan_jobs("c", &c, 124, 1, GenerationParams::default()).unwrap();
        let sd: Vec<_> = jobs.iter().filter(|j| j.kind() == PromptKind::Sd).collect();
        assert_eq!(sd[60].prompt.style.as_deref(), Some("Sketch"));
        assert!(sd[60].prompt.text.contains("fg1"));
    }

    #[test]
    fn plan_is_deterministic_with_distinct_seeds() {
        let c = corpus(5);
        let a = plan_jobs("c", &c, 20, 42, GenerationParams::default()).unwrap();
        assert_eq!(a, plan_jobs("c", &c, 20, 42, GenerationParams::default()).unwrap());
        let seeds: alloc::collections::BTreeSet<_> = a.iter().map(|j| j.seed).collect();
        assert_eq!(seeds.len(), 20);
        let b = plan_jobs("c", &c, 20, 43, GenerationParams::default()).unwrap();
        assert_ne!(a[0].seed, b[0].seed);
        assert!(a.iter().all(|j| j.params == GenerationParams::default()));
    }

    #[test]
    fn plan_errors() {
        let mut c = corpus(0);
        assert!(matches!(
            plan_jobs("c", &c, 2, 0, GenerationParams::default()),
            Err(GenerationError::EmptyCorpus(_))
        ));
        c = corpus(1);
        assert_eq!(
            plan_jobs("c", &c, 0, 0, GenerationParams::default()),
            Err(GenerationError::ZeroQuota)
        );
        let bad = GenerationParams {
            target_resolution: 300,
            ..GenerationParams::default()
        };
        assert!(matches!(
            plan_jobs("c", &c, 2, 0, bad),
            Err(GenerationError::InvalidParams(_))
        ));
        let bad = GenerationParams {
            guidance_scale: 0.0,
            ..GenerationParams::default()
        };
        assert!(matches!(
            plan_jobs("c", &c, 2, 0, bad),
            Err(GenerationError::InvalidParams(_))
        ));
    }

    #[test]
    fn stub_is_deterministic_and_seed_sensitive() {
        let a = stub_raster(1, 16, 16);
        assert_eq!(a.pixels.len(), 256);
        assert_eq!(a, stub_raster(1, 16, 16));
        assert_ne!(a.to_ppm(), stub_raster(2, 16, 16).to_ppm());
        assert_ne!(a.to_ppm(), stub_raster(1, 16, 8).to_ppm());
    }

    #[test]
    fn downsample_examples() {
        let u = RasterImage::filled(8, 8, [77, 77, 77]);
        assert_eq!(downsample_box(&u, 4).unwrap(), RasterImage::filled(2, 2, [77, 77, 77]));
        let checker = RasterImage {
            width: 2,
            height: 2,
            pixels: vec![[0; 3], [255; 3], [255; 3], [0; 3]],
        };
        assert_eq!(downsample_box(&checker, 2).unwrap().pixels, vec![[128; 3]]);
        assert!(matches!(
            downsample_box(&RasterImage::filled(5, 5, [0; 3]), 2),
            Err(GenerationError::NonDivisibleFactor { .. })
        ));
        assert!(downsample_box(&u, 0).is_err());
    }

    #[test]
    fn ppm_roundtrip_and_errors() {
        let img = stub_raster(5, 4, 3);
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n4 3\n255\n"));
        assert_eq!(RasterImage::from_ppm(&bytes).unwrap(), img);
        assert!(RasterImage::from_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(RasterImage::from_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
    }

    proptest! {
        #[test]
        fn downsample_preserves_mean(seed in any::<u64>(), factor in 1u32..5, blocks in 1u32..4) {
            let img = stub_raster(seed, factor * blocks, factor * blocks);
            let out = downsample_box(&img, factor).unwrap();
            for c in 0..3 {
                let mean_in = img.pixels.iter().map(|p| f64::from(p[c])).sum::<f64>() / img.pixels.len() as f64;
                let mean_out = out.pixels.iter().map(|p| f64::from(p[c])).sum::<f64>() / out.pixels.len() as f64;
                prop_assert!((mean_in - mean_out).abs() <= 0.5 + 1e-9);
            }
        }

        #[test]
        fn plan_balance(quota in 1usize..200) {
            let jobs = plan_jobs("c", &corpus(3), quota, 0, GenerationParams::default()).unwrap();
            let cd = jobs.iter().filter(|j| j.kind() == PromptKind::Cd).count() as i64;
            let sd = jobs.len() as i64 - cd;
            prop_assert_eq!(jobs.len(), quota);
            prop_assert!((cd - sd).abs() <= 1);
        }
    }
}
