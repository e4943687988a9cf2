//! LLM query construction, response parsing, and generation prompts.
//!
//! Contextual prompts (CD) are built from four LLM-described aspects of a
//! photo of the class: foreground, background, lighting and camera angle.
//! Stylized prompts (SD) swap the "photograph" keyword of a CD prompt for
//! one of 60 canonical art styles.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::hash::SeedBuilder;
use crate::similarity::ResolvedMeaning;

pub const CD_PREFIX: &str = "a photograph of ";
pub const DEFAULT_TEMPERATURE: f64 = 0.75;
pub const DEFAULT_PER_QUERY: usize = 20;
pub const DEFAULT_CORPUS_TARGET: usize = 600;
pub const STYLE_COUNT: usize = 60;

const STYLE_DATA: &str = include_str!("../data/styles.txt");

const QUERY_LEAD: &str = "Imagine there is a photo of ";
const QUERY_AFTER_SUBJECT: &str = ". What foreground and background objects can show up together with it? Describe the photo in the following four aspects:\n - Foreground\n - Background\n - Lighting Condition\n - Camera Angle\n";
const QUERY_COUNT_LEAD: &str = "Write exactly ";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("class name is empty")]
    EmptyClassName,
    #[error("count must be at least 1")]
    ZeroCount,
    #[error("no complete aspect entries found ({partial} partial)")]
    NoParsableEntries { partial: usize },
    #[error("aspect `{field}` is invalid: {reason}")]
    InvalidAspect { field: &'static str, reason: &'static str },
    #[error("style list corrupt: expected {STYLE_COUNT} styles, found {count}")]
    StyleListCorrupt { count: usize },
    #[error("style keyword is empty")]
    EmptyStyle,
    #[error("style can only be applied to a contextual (CD) prompt")]
    NotCdPrompt,
    #[error("prompt corpus underfilled: {achieved} of {target} unique prompts")]
    CorpusUnderfilled { achieved: usize, target: usize },
    #[error("llm request failed: {0}")]
    Llm(String),
}

/// The four described aspects of one photo.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AspectSet {
    pub foreground: String,
    pub background: String,
    pub lighting: String,
    pub camera_angle: String,
}

impl AspectSet {
    /// Trims every field; rejects empty fields and embedded line breaks.
    pub fn new(foreground: &str, background: &str, lighting: &str, camera_angle: &str) -> Result<Self, PromptError> {
        fn field(name: &'static str, v: &str) -> Result<String, PromptError> {
            let v = v.trim();
            if v.is_empty() {
                return Err(PromptError::InvalidAspect {
                    field: name,
                    reason: "empty",
                });
            }
            if v.contains(['\n', '\r']) {
                return Err(PromptError::InvalidAspect {
                    field: name,
                    reason: "contains a line break",
                });
            }
            Ok(v.to_string())
        }
        Ok(AspectSet {
            foreground: field("foreground", foreground)?,
            background: field("background", background)?,
            lighting: field("lighting", lighting)?,
            camera_angle: field("camera_angle", camera_angle)?,
        })
    }

    /// The comma-joined aspect body shared by CD and SD prompts.
    pub fn body(&self) -> String {
        format!(
            "{}, {}, {}, {}",
            self.foreground, self.background, self.lighting, self.camera_angle
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Cd,
    Sd,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Cd => "cd",
            PromptKind::Sd => "sd",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPrompt {
    pub class_id: String,
    pub kind: PromptKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    pub text: String,
    pub source_aspects: AspectSet,
}

/// The subject phrase used in queries: the class name, followed by the
/// resolved meaning in parentheses when one is known.
pub fn subject_phrase(class_name: &str, meaning: Option<&ResolvedMeaning>) -> String {
    match meaning {
        Some(m) => format!("{class_name} ({})", m.chosen.text),
        None => class_name.to_string(),
    }
}

/// Builds the contextual-description query for one class.
pub fn build_cd_query(
    class_name: &str,
    meaning: Option<&ResolvedMeaning>,
    count_per_query: usize,
) -> Result<String, PromptError> {
    let class_name = class_name.trim();
    if class_name.is_empty() {
        return Err(PromptError::EmptyClassName);
    }
    if count_per_query == 0 {
        return Err(PromptError::ZeroCount);
    }
    let (noun, objects) = if count_per_query == 1 {
        ("description", "object")
    } else {
        ("descriptions", "objects")
    };
    Ok(format!(
        "{QUERY_LEAD}{subject}{QUERY_AFTER_SUBJECT}\
         {QUERY_COUNT_LEAD}{n} different {noun} of such photos. Please be creative and avoid repetition.\n\
         Respond only with a JSON array of exactly {n} {objects}, each with the string fields \
         \"foreground\", \"background\", \"lighting\" and \"camera_angle\".",
        subject = subject_phrase(class_name, meaning),
        n = count_per_query,
    ))
}

#[derive(Default)]
struct PartialAspects {
    foreground: Option<String>,
    background: Option<String>,
    lighting: Option<String>,
    camera_angle: Option<String>,
}

impl PartialAspects {
    fn is_empty(&self) -> bool {
        self.foreground.is_none() && self.background.is_none() && self.lighting.is_none() && self.camera_angle.is_none()
    }

    fn slot(&mut self, key: AspectKey) -> &mut Option<String> {
        match key {
            AspectKey::Foreground => &mut self.foreground,
            AspectKey::Background => &mut self.background,
            AspectKey::Lighting => &mut self.lighting,
            AspectKey::CameraAngle => &mut self.camera_angle,
        }
    }

    fn complete(&self) -> Option<AspectSet> {
        AspectSet::new(
            self.foreground.as_deref()?,
            self.background.as_deref()?,
            self.lighting.as_deref()?,
            self.camera_angle.as_deref()?,
        )
        .ok()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum AspectKey {
    Foreground,
    Background,
    Lighting,
    CameraAngle,
}

fn aspect_key(raw: &str) -> Option<AspectKey> {
    let key: String = raw
        .trim()
        .trim_matches(|c: char| c == '*' || c == '_' || c == '"')
        .chars()
        .map(|c| {
            if c == ' ' || c == '-' {
                '_'
            } else {
                c.to_ascii_lowercase()
            }
        })
        .collect();
    match key.as_str() {
        "foreground" | "foreground_objects" => Some(AspectKey::Foreground),
        "background" | "background_objects" => Some(AspectKey::Background),
        "lighting" | "lighting_condition" | "lighting_conditions" => Some(AspectKey::Lighting),
        "camera_angle" | "camera" => Some(AspectKey::CameraAngle),
        _ => None,
    }
}

fn clean_value(v: &str) -> String {
    let flat: String = v
        .chars()
        .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
        .collect();
    flat.trim().trim_matches('*').trim().to_string()
}

/// Returns `(complete, partial)` from a JSON array embedded in `raw`.
fn parse_json_entries(raw: &str) -> Option<(Vec<AspectSet>, usize)> {
    let start = raw.find('[')?;
    let end = raw.rfind(']')?;
    if end <= start {
        return None;
    }
    let items: Vec<Value> = serde_json::from_str(&raw[start..=end]).ok()?;
    let mut complete = Vec::new();
    let mut partial = 0;
    for item in &items {
        let Value::Object(map) = item else {
            partial += 1;
            continue;
        };
        let mut acc = PartialAspects::default();
        for (k, v) in map {
            if let (Some(key), Value::String(s)) = (aspect_key(k), v) {
                let s = clean_value(s);
                if !s.is_empty() {
                    *acc.slot(key) = Some(s);
                }
            }
        }
        match acc.complete() {
            Some(a) => complete.push(a),
            None => partial += 1,
        }
    }
    Some((complete, partial))
}

fn strip_bullet(line: &str) -> &str {
    let mut s = line.trim_start();
    s = s.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = s.len() - s.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &s[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            s = r.trim_start();
            s = s.trim_start_matches(['-', '*', '•']).trim_start();
        }
    }
    s
}

/// Returns `(complete, partial)` from "- Foreground: ..." style lines.
fn parse_bullet_entries(raw: &str) -> (Vec<AspectSet>, usize) {
    let mut complete = Vec::new();
    let mut partial = 0;
    let mut cur = PartialAspects::default();
    let mut flush = |cur: &mut PartialAspects| {
        if !cur.is_empty() {
            match cur.complete() {
                Some(a) => complete.push(a),
                None => partial += 1,
            }
        }
        *cur = PartialAspects::default();
    };
    for line in raw.lines() {
        let body = strip_bullet(line);
        let Some((k, v)) = body.split_once(':') else {
            continue;
        };
        let Some(key) = aspect_key(k) else {
            continue;
        };
        let value = clean_value(v);
        if value.is_empty() {
            continue;
        }
        if key == AspectKey::Foreground || cur.slot(key).is_some() {
            flush(&mut cur);
        }
        *cur.slot(key) = Some(value);
    }
    flush(&mut cur);
    (complete, partial)
}

/// Parses an LLM response into aspect sets, in order of appearance.
///
/// A JSON array of four-key objects is tried first; the bullet format
/// ("- Foreground: ...") is the fallback. Incomplete entries are dropped.
pub fn parse_aspect_response(raw: &str) -> Result<Vec<AspectSet>, PromptError> {
    let mut partial = 0;
    if let Some((complete, p)) = parse_json_entries(raw) {
        if !complete.is_empty() {
            return Ok(complete);
        }
        partial = p;
    }
    let (complete, p) = parse_bullet_entries(raw);
    if complete.is_empty() {
        return Err(PromptError::NoParsableEntries {
            partial: partial.max(p),
        });
    }
    Ok(complete)
}

pub fn assemble_cd_prompt(class_id: &str, aspects: AspectSet) -> GenerationPrompt {
    GenerationPrompt {
        class_id: class_id.to_string(),
        kind: PromptKind::Cd,
        style: None,
        text: format!("{CD_PREFIX}{}", aspects.body()),
        source_aspects: aspects,
    }
}

/// Parses a style list, one style per line; blank lines are ignored.
pub fn parse_style_list(text: &str) -> Result<Vec<String>, PromptError> {
    let styles: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(ToString::to_string)
        .collect();
    if styles.len() != STYLE_COUNT {
        return Err(PromptError::StyleListCorrupt { count: styles.len() });
    }
    Ok(styles)
}

/// The 60 canonical style keywords, in canonical order.
pub fn load_style_list() -> Result<Vec<String>, PromptError> {
    parse_style_list(STYLE_DATA)
}

/// The raw canonical style file, as shipped.
pub fn style_list_source() -> &'static str {
    STYLE_DATA
}

/// Lowercases the leading letter unless the rest of the keyword carries
/// uppercase letters (acronyms such as "CGI", digit-led "3D model").
fn render_style(style: &str) -> String {
    let mut chars = style.chars();
    let Some(first) = chars.next() else {
        return String::new();
    };
    let rest = chars.as_str();
    if first.is_alphabetic() && !rest.chars().any(char::is_uppercase) {
        let mut out: String = first.to_lowercase().collect();
        out.push_str(rest);
        out
    } else {
        style.to_string()
    }
}

fn indefinite_article(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Turns a CD prompt into an SD prompt by replacing "a photograph" with
/// the article and style keyword. The aspect body is kept byte-for-byte.
pub fn apply_style(cd: &GenerationPrompt, style: &str) -> Result<GenerationPrompt, PromptError> {
    if cd.kind != PromptKind::Cd {
        return Err(PromptError::NotCdPrompt);
    }
    let style = style.trim();
    if style.is_empty() {
        return Err(PromptError::EmptyStyle);
    }
    let body = cd.text.strip_prefix(CD_PREFIX).ok_or(PromptError::NotCdPrompt)?;
    let rendered = render_style(style);
    Ok(GenerationPrompt {
        class_id: cd.class_id.clone(),
        kind: PromptKind::Sd,
        style: Some(style.to_string()),
        text: format!("{} {} of {}", indefinite_article(&rendered), rendered, body),
        source_aspects: cd.source_aspects.clone(),
    })
}

/// Strips the `"{article} {style} of "` lead of an SD prompt.
pub fn sd_body(sd: &GenerationPrompt) -> Option<&str> {
    let rendered = render_style(sd.style.as_deref()?);
    let lead = format!("{} {} of ", indefinite_article(&rendered), rendered);
    sd.text.strip_prefix(lead.as_str())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn user(model: &str, content: String, temperature: f64, max_tokens: u32) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages: alloc::vec![ChatMessage {
                role: "user".to_string(),
                content,
            }],
            temperature,
            max_tokens,
        }
    }

    fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map_or("", |m| m.content.as_str())
    }
}

/// A chat-completion backend returning the assistant's text.
pub trait LlmClient {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, PromptError>;
}

impl<T: LlmClient + ?Sized> LlmClient for &mut T {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, PromptError> {
        (**self).complete(request)
    }
}

const ACTIONS: &[&str] = &[
    "standing still",
    "resting on the ground",
    "seen in profile",
    "partially hidden",
    "in motion",
    "next to a person",
    "in a small group",
    "close to the camera",
    "far in the distance",
    "framed by branches",
    "reflected in water",
    "in its natural habitat",
    "on display",
    "covered in morning dew",
    "half in shadow",
    "surrounded by clutter",
    "in a miniature scale",
    "in a worn condition",
    "in pristine condition",
    "at the center of the scene",
    "at the edge of the frame",
    "beside a wooden fence",
    "under a light dusting of snow",
    "after a rain shower",
];

const BACKGROUNDS: &[&str] = &[
    "a busy city street",
    "an open meadow, wildflowers",
    "a rocky shoreline, crashing waves",
    "dense forest, ferns",
    "a cluttered workshop, tools",
    "a quiet living room, bookshelves",
    "a market stall, crowds",
    "snowy mountains in the distance",
    "a desert plain, dunes",
    "a riverbank, reeds",
    "a farmyard, hay bales",
    "a modern office, glass walls",
    "a kitchen counter, utensils",
    "a park bench, autumn leaves",
    "a harbor, fishing boats",
    "a rooftop, city skyline",
    "a garden, stone path",
    "a museum hall, display cases",
    "a foggy valley",
    "a sandy beach, palm trees",
    "a train platform, commuters",
    "a backyard, wooden deck",
    "a cave entrance, moss",
    "a frozen lake, pine trees",
    "a vineyard, rolling hills",
    "a library, reading lamps",
    "a construction site, scaffolding",
    "a country road, fields",
    "a lagoon, lily pads",
    "a night market, lanterns",
];

const LIGHTING: &[&str] = &[
    "natural daylight",
    "golden hour",
    "overcast sky",
    "harsh midday sun",
    "soft morning light",
    "dappled sunlight",
    "warm indoor light",
    "neon glow",
    "candlelight",
    "blue hour",
    "studio lighting",
    "backlit silhouette",
    "moonlight",
    "fluorescent light",
    "late afternoon sunlight",
    "stormy light",
];

const CAMERA_ANGLES: &[&str] = &[
    "close-up shot",
    "medium shot",
    "wide shot",
    "low-angle shot",
    "high-angle shot",
    "overhead shot",
    "eye-level shot",
    "macro shot",
    "panoramic shot",
    "long shot",
    "dutch angle",
    "over-the-shoulder shot",
];

const BANK_SIZE: u64 = (ACTIONS.len() * BACKGROUNDS.len() * LIGHTING.len() * CAMERA_ANGLES.len()) as u64;
// Prime not dividing BANK_SIZE, so `k -> k * STRIDE + offset` permutes the bank.
const STRIDE: u64 = 7919;

/// Deterministic offline LLM.
///
/// Answers contextual-description queries with a JSON array of aspect sets
/// drawn from fixed word banks. Entries are unique across successive calls
/// for the same subject (up to the bank size); the sequence depends only on
/// the seed, the subject phrase and the call history.
#[derive(Debug, Clone)]
pub struct MockLlm {
    seed: u64,
    emitted: u64,
    calls: u64,
}

impl MockLlm {
    pub fn new(seed: u64) -> Self {
        MockLlm {
            seed,
            emitted: 0,
            calls: 0,
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    /// The aspect set at position `index` of the mock's sequence for `subject`.
    pub fn entry(&self, subject: &str, index: u64) -> AspectSet {
        let offset = SeedBuilder::new("mock-llm").u64(self.seed).str(subject).finish() % BANK_SIZE;
        let mut k = (index % BANK_SIZE).wrapping_mul(STRIDE).wrapping_add(offset) % BANK_SIZE;
        let mut pick = |bank: &[&'static str]| {
            let n = bank.len() as u64;
            let v = bank[(k % n) as usize];
            k /= n;
            v
        };
        let action = pick(ACTIONS);
        let background = pick(BACKGROUNDS);
        let lighting = pick(LIGHTING);
        let angle = pick(CAMERA_ANGLES);
        AspectSet {
            foreground: format!("{subject} {action}"),
            background: background.to_string(),
            lighting: lighting.to_string(),
            camera_angle: angle.to_string(),
        }
    }

    /// Extracts `(subject, count)` from a query built by [`build_cd_query`].
    pub fn parse_query(query: &str) -> Option<(String, usize)> {
        let rest = &query[query.find(QUERY_LEAD)? + QUERY_LEAD.len()..];
        let subject = &rest[..rest.find(QUERY_AFTER_SUBJECT)?];
        let after = &rest[rest.find(QUERY_COUNT_LEAD)? + QUERY_COUNT_LEAD.len()..];
        let digits: String = after.chars().take_while(char::is_ascii_digit).collect();
        Some((subject.to_string(), digits.parse().ok()?))
    }
}

impl LlmClient for MockLlm {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, PromptError> {
        self.calls += 1;
        let Some((subject, count)) = MockLlm::parse_query(request.last_user()) else {
            return Ok("I can only describe photos.".to_string());
        };
        let entries: Vec<AspectSet> = (0..count as u64)
            .map(|j| self.entry(&subject, self.emitted + j))
            .collect();
        self.emitted += count as u64;
        serde_json::to_string(&entries).map_err(|e| PromptError::Llm(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusOptions {
    pub target: usize,
    pub per_query: usize,
    /// Query budget; `None` means three queries per `per_query` block of the target.
    pub max_queries: Option<usize>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            target: DEFAULT_CORPUS_TARGET,
            per_query: DEFAULT_PER_QUERY,
            max_queries: None,
            model: "gpt-3.5-turbo".to_string(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: 4096,
        }
    }
}

impl CorpusOptions {
    pub fn query_budget(&self) -> usize {
        self.max_queries
            .unwrap_or(3 * self.target.div_ceil(self.per_query.max(1)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCorpus {
    pub class_id: String,
    pub cd_prompts: Vec<GenerationPrompt>,
    pub styles: Vec<String>,
    pub queries_issued: usize,
}

/// Queries `client` until `options.target` unique CD prompts are collected.
///
/// Responses that fail to parse still consume budget. Prompts are
/// deduplicated on exact text and kept in first-seen order.
pub fn generate_prompt_corpus<C: LlmClient + ?Sized>(
    class_id: &str,
    class_name: &str,
    meaning: Option<&ResolvedMeaning>,
    client: &mut C,
    options: &CorpusOptions,
) -> Result<PromptCorpus, PromptError> {
    if options.target == 0 || options.per_query == 0 {
        return Err(PromptError::ZeroCount);
    }
    let query = build_cd_query(class_name, meaning, options.per_query)?;
    let request = ChatRequest::user(&options.model, query, options.temperature, options.max_tokens);
    let styles = load_style_list()?;
    let budget = options.query_budget();

    let mut seen = BTreeSet::new();
    let mut cd_prompts = Vec::with_capacity(options.target);
    let mut queries = 0;
    while cd_prompts.len() < options.target && queries < budget {
        queries += 1;
        let raw = client.complete(&request)?;
        let Ok(aspects) = parse_aspect_response(&raw) else {
            continue;
        };
        for a in aspects {
            let p = assemble_cd_prompt(class_id, a);
            if seen.insert(p.text.clone()) {
                cd_prompts.push(p);
                if cd_prompts.len() == options.target {
                    break;
                }
            }
        }
    }
    if cd_prompts.len() < options.target {
        return Err(PromptError::CorpusUnderfilled {
            achieved: cd_prompts.len(),
            target: options.target,
        });
    }
    Ok(PromptCorpus {
        class_id: class_id.to_string(),
        cd_prompts,
        styles,
        queries_issued: queries,
    })
}
