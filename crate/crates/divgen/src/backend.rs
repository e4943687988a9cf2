//! Text-to-image backends: a deterministic stub and an HTTP client.

use std::io::Cursor;
use std::time::Duration;

use base64::Engine;
use divgen_core::{stub_generate, GenerationJob, RasterImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GEN_KEY_ENV: &str = "DIVGEN_GEN_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("request failed: {0}")]
    Request(String),
    #[error("undecodable image: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFormat::Ppm => "ppm",
            ImageFormat::Png => "png",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ppm" => Some(ImageFormat::Ppm),
            "png" => Some(ImageFormat::Png),
            _ => None,
        }
    }

    pub fn encode(self, img: &RasterImage) -> Result<Vec<u8>, BackendError> {
        match self {
            ImageFormat::Ppm => Ok(img.to_ppm()),
            ImageFormat::Png => {
                let raw: Vec<u8> = img.pixels.iter().flatten().copied().collect();
                let buf = image::RgbImage::from_raw(img.width, img.height, raw)
                    .ok_or_else(|| BackendError::Decode("pixel buffer size".into()))?;
                let mut out = Cursor::new(Vec::new());
                buf.write_to(&mut out, image::ImageFormat::Png)
                    .map_err(|e| BackendError::Decode(e.to_string()))?;
                Ok(out.into_inner())
            }
        }
    }

    pub fn decode(self, bytes: &[u8]) -> Result<RasterImage, BackendError> {
        match self {
            ImageFormat::Ppm => RasterImage::from_ppm(bytes).map_err(|e| BackendError::Decode(e.to_string())),
            ImageFormat::Png => {
                let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
                    .map_err(|e| BackendError::Decode(e.to_string()))?
                    .to_rgb8();
                let (width, height) = img.dimensions();
                let pixels = img.pixels().map(|p| p.0).collect();
                Ok(RasterImage { width, height, pixels })
            }
        }
    }
}

/// A full-resolution image as returned by a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    pub raster: RasterImage,
    pub format: ImageFormat,
}

pub trait ImageBackend: Sync {
    fn generate(&self, job: &GenerationJob) -> Result<GeneratedImage, BackendError>;
}

/// Pure function of the job's seed and dimensions; never touches the network.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubBackend;

impl ImageBackend for StubBackend {
    fn generate(&self, job: &GenerationJob) -> Result<GeneratedImage, BackendError> {
        Ok(GeneratedImage {
            raster: stub_generate(job),
            format: ImageFormat::Ppm,
        })
    }
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    prompt: &'a str,
    guidance_scale: f64,
    num_inference_steps: u32,
    width: u32,
    height: u32,
    seed: u64,
}

#[derive(Deserialize)]
struct GenerateResponse {
    image_b64: String,
    format: String,
}

/// `POST {base_url}/generate` returning `{image_b64, format}`.
pub struct HttpBackend {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// Reads the bearer token from `DIVGEN_GEN_KEY` if set.
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        Self::with_key(base_url, timeout, std::env::var(GEN_KEY_ENV).ok())
    }

    pub fn with_key(base_url: &str, timeout: Duration, api_key: Option<String>) -> Self {
        HttpBackend {
            endpoint: format!("{}/generate", base_url.trim_end_matches('/')),
            api_key,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl ImageBackend for HttpBackend {
    fn generate(&self, job: &GenerationJob) -> Result<GeneratedImage, BackendError> {
        let body = GenerateRequest {
            prompt: &job.prompt.text,
            guidance_scale: job.params.guidance_scale,
            num_inference_steps: job.params.steps,
            width: job.params.width,
            height: job.params.height,
            seed: job.seed,
        };
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp: GenerateResponse = req
            .send_json(&body)
            .map_err(|e| BackendError::Request(format!("POST {}: {e}", self.endpoint)))?
            .into_json()
            .map_err(|e| BackendError::Decode(format!("malformed response: {e}")))?;
        let format = ImageFormat::parse(&resp.format)
            .ok_or_else(|| BackendError::Decode(format!("unsupported format {:?}", resp.format)))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(resp.image_b64.trim())
            .map_err(|e| BackendError::Decode(e.to_string()))?;
        Ok(GeneratedImage {
            raster: format.decode(&bytes)?,
            format,
        })
    }
}
