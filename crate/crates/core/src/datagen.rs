//! Label-conditioned caption generation and instruction-pair synthesis.
//!
//! Captions come from a multimodal chat model prompted with the image's
//! ground-truth label; each paragraph is split into sentences tagged with the
//! facial region they mention. [`StubClient`] is a deterministic offline
//! stand-in with fixed templates per artifact kind.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::io::{read_jsonl, write_jsonl};
use crate::seed::{sha256_hex, sub_seed};
use crate::synthface::{ArtifactKind, LabeledImage};
use crate::{Error, Label, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Eyes,
    Mouth,
    Chin,
    Hair,
    Nose,
    Skin,
    Other,
}

impl Region {
    /// Keyword priority: the first keyword found in a sentence wins.
    pub const KEYWORD_ORDER: [Region; 6] = [Region::Eyes, Region::Mouth, Region::Chin, Region::Hair, Region::Nose, Region::Skin];

    pub fn as_str(self) -> &'static str {
        match self {
            Region::Eyes => "eyes",
            Region::Mouth => "mouth",
            Region::Chin => "chin",
            Region::Hair => "hair",
            Region::Nose => "nose",
            Region::Skin => "skin",
            Region::Other => "other",
        }
    }

    pub fn classify(sentence: &str) -> Region {
        let lower = sentence.to_lowercase();
        Self::KEYWORD_ORDER
            .into_iter()
            .find(|r| lower.contains(r.as_str()))
            .unwrap_or(Region::Other)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    pub region: Region,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub label: Label,
    #[serde(rename = "paragraph")]
    pub raw_paragraph: String,
    pub sentences: Vec<Sentence>,
    /// SHA-256 of the prompt that produced the paragraph.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionSource {
    Generated,
    Fixture,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub image_id: String,
    pub question: String,
    pub response: String,
    pub source: InstructionSource,
}

pub const DETECTION_QUESTION: &str = "Is this image real or fake? Explain.";

pub fn build_caption_prompt(label: Label) -> String {
    format!(
        "Explain why the face attributes (e.g., eyes, mouth, chin, hair, nose, and others) make this image look {}",
        label.as_str()
    )
}

/// Splits on `.`, `!` and `?`, keeping the terminator with its sentence, and
/// tags each sentence with the first matching region keyword.
pub fn split_caption(paragraph: &str) -> Result<Vec<Sentence>> {
    if paragraph.trim().is_empty() {
        return Err(Error::Degenerate("empty caption paragraph".into()));
    }
    let mut out = Vec::new();
    let mut start = 0;
    let mut push = |segment: &str| {
        let text = segment.trim();
        // Runs of terminators ("...") leave punctuation-only fragments.
        if text.chars().any(|c| c.is_alphanumeric()) {
            out.push(Sentence {
                text: text.to_string(),
                region: Region::classify(text),
            });
        } else if let Some(last) = out.last_mut() {
            last.text.push_str(text);
        }
    };
    for (i, c) in paragraph.char_indices() {
        if matches!(c, '.' | '!' | '?') {
            let end = i + c.len_utf8();
            push(&paragraph[start..end]);
            start = end;
        }
    }
    if start < paragraph.len() {
        push(&paragraph[start..]);
    }
    Ok(out)
}

/// Everything a captioning backend may use to describe one image.
#[derive(Clone, Debug)]
pub struct CaptionRequest<'a> {
    pub image_id: &'a str,
    pub label: Label,
    pub artifact_kind: ArtifactKind,
    pub prompt: String,
    pub image_png: Option<Vec<u8>>,
}

pub trait MllmClient: Sync {
    fn describe(&self, request: &CaptionRequest<'_>) -> Result<String>;
}

/// Offline client: a pure function of `(image_id, label, artifact_kind)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubClient;

const REAL_TEMPLATES: [&str; 3] = [
    "The eyes are symmetric and clear with natural reflections. The skin shows even and consistent texture.",
    "The mouth and lips have natural shape and color. The eyes look balanced and sharp.",
    "The skin tone is smooth and consistent across the face. The chin and jaw line blend naturally with the neck.",
];

fn fake_templates(kind: ArtifactKind) -> &'static [&'static str] {
    match kind {
        ArtifactKind::BlendBoundary => &[
            "The chin shows a visible blending seam along the jaw. The lower face has an unnatural color shift.",
            "A distorted boundary runs across the chin. The skin below the seam looks unnatural and mismatched.",
        ],
        ArtifactKind::EyeAsymmetry => &[
            "The eyes are misaligned and one eye looks larger than the other. The face appears unnatural around the eye region.",
            "The left eye is distorted and asymmetric. The eyes do not match in size.",
        ],
        ArtifactKind::TextureNoise => &[
            "The skin has blotchy and unnatural texture noise on the cheeks. The surface looks grainy and distorted.",
            "The cheeks show noisy speckled skin. The texture is blurry and unnatural.",
        ],
        ArtifactKind::MouthWarp => &[
            "The mouth looks blurry and warped. The lips are distorted with an unnatural shape.",
            "The mouth is misaligned and wavy. The lip contour appears distorted.",
        ],
        ArtifactKind::None => &["The face looks manipulated in an unnatural way."],
    }
}

/// Words a description of a real image must never contain.
pub const NEGATIVE_LEXICON: [&str; 4] = ["blurry", "misaligned", "unnatural", "distorted"];

impl MllmClient for StubClient {
    fn describe(&self, request: &CaptionRequest<'_>) -> Result<String> {
        let pick = sub_seed(0, request.image_id) as usize;
        let text = match request.label {
            Label::Real => REAL_TEMPLATES[pick % REAL_TEMPLATES.len()],
            Label::Fake => {
                let t = fake_templates(request.artifact_kind);
                t[pick % t.len()]
            }
        };
        Ok(text.to_string())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HttpClientConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for HttpClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/v1/chat".into(),
            model: "llama-3.2-vision".into(),
            api_key_env: "AUTHGUARD_API_KEY".into(),
            timeout_secs: 60,
            retries: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ChatRequest<'a> {
    pub model: &'a str,
    pub messages: Vec<ChatMessage<'a>>,
    /// Base64-encoded PNG.
    pub image: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct ChatMessage<'a> {
    pub role: &'a str,
    pub content: &'a str,
}

#[derive(Debug, Deserialize)]
pub struct ChatResponse {
    pub text: String,
}

/// Chat-completion client: POSTs `{model, messages, image}` and reads `{text}`.
pub struct HttpClient {
    cfg: HttpClientConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(cfg: HttpClientConfig) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Client(e.to_string()))?;
        let api_key = std::env::var(&cfg.api_key_env).ok();
        Ok(Self { cfg, api_key, http })
    }

    pub fn request_body<'a>(&'a self, request: &'a CaptionRequest<'_>) -> ChatRequest<'a> {
        ChatRequest {
            model: &self.cfg.model,
            messages: vec![ChatMessage {
                role: "user",
                content: &request.prompt,
            }],
            image: request
                .image_png
                .as_ref()
                .map(|png| base64::engine::general_purpose::STANDARD.encode(png)),
        }
    }

    fn attempt(&self, request: &CaptionRequest<'_>) -> Result<String> {
        let mut req = self.http.post(&self.cfg.endpoint).json(&self.request_body(request));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Client(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Client(format!("HTTP {status}")));
        }
        let body: ChatResponse = resp.json().map_err(|e| Error::Client(e.to_string()))?;
        Ok(body.text)
    }
}

impl MllmClient for HttpClient {
    fn describe(&self, request: &CaptionRequest<'_>) -> Result<String> {
        with_retries(self.cfg.retries, Duration::from_millis(self.cfg.backoff_ms), || {
            self.attempt(request)
        })
    }
}

/// Calls `f` up to `1 + retries` times, doubling the delay after each failure.
pub fn with_retries<T>(retries: u32, base_delay: Duration, mut f: impl FnMut() -> Result<T>) -> Result<T> {
    let mut delay = base_delay;
    let mut attempt = 0;
    loop {
        match f() {
            Ok(v) => return Ok(v),
            Err(e) if attempt >= retries => return Err(e),
            Err(e) => {
                tracing::warn!(attempt, error = %e, "caption request failed, retrying");
                std::thread::sleep(delay);
                delay *= 2;
                attempt += 1;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionFailure {
    pub image_id: String,
    pub error: String,
}

#[derive(Clone, Debug, Default)]
pub struct CaptionOutcome {
    pub records: Vec<CaptionRecord>,
    pub failures: Vec<CaptionFailure>,
}

/// Captions every image with up to `concurrency` requests in flight.
///
/// Records come back sorted by image id. A failed image yields a
/// [`CaptionFailure`] and the run continues, unless more than half fail.
pub fn generate_captions<'a, I>(images: I, client: &dyn MllmClient, concurrency: usize, attach_png: bool) -> Result<CaptionOutcome>
where
    I: IntoIterator<Item = &'a LabeledImage>,
{
    let images: Vec<&LabeledImage> = images.into_iter().collect();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(images.len()));
    std::thread::scope(|scope| {
        for _ in 0..concurrency.max(1).min(images.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(img) = images.get(i) else { break };
                let result = caption_one(img, client, attach_png);
                results.lock().expect("caption worker panicked").push((img.id.clone(), result));
            });
        }
    });
    let mut results = results.into_inner().expect("caption worker panicked");
    results.sort_by(|a, b| a.0.cmp(&b.0));
    let mut outcome = CaptionOutcome::default();
    for (image_id, result) in results {
        match result {
            Ok(r) => outcome.records.push(r),
            Err(e) => outcome.failures.push(CaptionFailure {
                image_id,
                error: e.to_string(),
            }),
        }
    }
    let total = images.len();
    if outcome.failures.len() * 2 > total {
        return Err(Error::TooManyFailures {
            failed: outcome.failures.len(),
            total,
        });
    }
    Ok(outcome)
}

fn caption_one(img: &LabeledImage, client: &dyn MllmClient, attach_png: bool) -> Result<CaptionRecord> {
    let prompt = build_caption_prompt(img.label);
    let image_png = if attach_png { Some(encode_png(img)?) } else { None };
    let request = CaptionRequest {
        image_id: &img.id,
        label: img.label,
        artifact_kind: img.artifact_kind,
        prompt,
        image_png,
    };
    let paragraph = client.describe(&request)?;
    let sentences = split_caption(&paragraph)?;
    Ok(CaptionRecord {
        image_id: img.id.clone(),
        label: img.label,
        raw_paragraph: paragraph,
        sentences,
        prompt_hash: Some(sha256_hex(request.prompt.as_bytes())),
    })
}

fn encode_png(img: &LabeledImage) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut buf = Vec::new();
    let side = img.side() as u32;
    image::codecs::png::PngEncoder::new(&mut buf).write_image(&img.to_rgb8(), side, side, image::ExtendedColorType::Rgb8)?;
    Ok(buf)
}

/// One detection pair per record plus one pair per region-tagged sentence.
pub fn build_instruction_samples(records: &[CaptionRecord]) -> Result<Vec<InstructionSample>> {
    if records.is_empty() {
        return Err(Error::Degenerate("no caption records".into()));
    }
    let mut out = Vec::new();
    for r in records {
        let mut response = format!("This image is {}.", r.label);
        for s in &r.sentences {
            response.push(' ');
            response.push_str(&s.text);
        }
        out.push(InstructionSample {
            image_id: r.image_id.clone(),
            question: DETECTION_QUESTION.to_string(),
            response,
            source: InstructionSource::Generated,
        });
        for s in r.sentences.iter().filter(|s| s.region != Region::Other) {
            out.push(InstructionSample {
                image_id: r.image_id.clone(),
                question: format!("Describe the {} in this image.", s.region.as_str()),
                response: s.text.clone(),
                source: InstructionSource::Generated,
            });
        }
    }
    Ok(out)
}

pub fn write_captions(path: &Path, records: &[CaptionRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn read_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    read_jsonl(path)
}

pub fn write_instructions(path: &Path, samples: &[InstructionSample]) -> Result<()> {
    write_jsonl(path, samples)
}

pub fn read_instructions(path: &Path) -> Result<Vec<InstructionSample>> {
    read_jsonl(path)
}

pub fn captions_by_id(records: &[CaptionRecord]) -> BTreeMap<&str, &CaptionRecord> {
    records.iter().map(|r| (r.image_id.as_str(), r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthface::{make_corpus_with_side, make_sample};

    #[test]
    fn prompt_substitutes_only_the_label() {
        assert_eq!(
            build_caption_prompt(Label::Fake),
            "Explain why the face attributes (e.g., eyes, mouth, chin, hair, nose, and others) make this image look fake"
        );
        let real = build_caption_prompt(Label::Real);
        assert!(real.ends_with("look real"));
        let fake = build_caption_prompt(Label::Fake);
        let (r, f): (Vec<_>, Vec<_>) = (real.split(' ').collect(), fake.split(' ').collect());
        assert_eq!(r.len(), f.len());
        let diffs: Vec<usize> = (0..r.len()).filter(|&i| r[i] != f[i]).collect();
        assert_eq!(diffs, vec![r.len() - 1]);
    }

    #[test]
    fn split_assigns_regions_by_keyword() {
        let s = split_caption("The eyes are misaligned. The mouth looks blurry.").unwrap();
        assert_eq!(
            s,
            vec![
                Sentence {
                    text: "The eyes are misaligned.".into(),
                    region: Region::Eyes
                },
                Sentence {
                    text: "The mouth looks blurry.".into(),
                    region: Region::Mouth
                },
            ]
        );
        let s = split_caption("Nothing notable here.").unwrap();
        assert_eq!(s[0].region, Region::Other);
        let s = split_caption("The eyes and mouth clash!").unwrap();
        assert_eq!(s[0].region, Region::Eyes);
        assert!(matches!(split_caption("   "), Err(Error::Degenerate(_))));
    }

    #[test]
    fn split_handles_unterminated_tail_and_ellipsis() {
        let s = split_caption("The HAIR is odd... and the nose").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].text, "The HAIR is odd...");
        assert_eq!(s[0].region, Region::Hair);
        assert_eq!(s[1].region, Region::Nose);
    }

    #[test]
    fn stub_describes_artifact_region_and_keeps_real_positive() {
        let fake = make_sample(1, 3, Label::Fake, ArtifactKind::EyeAsymmetry, 32).unwrap();
        let out = generate_captions([&fake], &StubClient, 1, false).unwrap();
        assert!(out.records[0].raw_paragraph.contains("eyes"));
        let corpus = make_corpus_with_side(2, 40, 32).unwrap();
        let out = generate_captions(corpus.samples.iter(), &StubClient, 4, false).unwrap();
        for r in out.records.iter().filter(|r| r.label == Label::Real) {
            let lower = r.raw_paragraph.to_lowercase();
            for w in NEGATIVE_LEXICON {
                assert!(!lower.contains(w), "real caption contains {w}: {lower}");
            }
        }
    }

    #[test]
    fn caption_records_are_sorted_and_bijective() {
        let corpus = make_corpus_with_side(5, 100, 32).unwrap();
        let out = generate_captions(corpus.samples.iter().rev(), &StubClient, 8, false).unwrap();
        assert_eq!(out.records.len(), 100);
        let ids: Vec<&str> = out.records.iter().map(|r| r.image_id.as_str()).collect();
        let mut expected: Vec<&str> = corpus.samples.iter().map(|s| s.id.as_str()).collect();
        expected.sort();
        assert_eq!(ids, expected);
        for r in &out.records {
            assert_eq!(
                r.prompt_hash.as_deref(),
                Some(sha256_hex(build_caption_prompt(r.label).as_bytes()).as_str())
            );
        }
    }

    struct Flaky {
        fail_ids: Vec<String>,
    }

    impl MllmClient for Flaky {
        fn describe(&self, request: &CaptionRequest<'_>) -> Result<String> {
            if self.fail_ids.iter().any(|id| id == request.image_id) {
                Err(Error::Client("boom".into()))
            } else {
                StubClient.describe(request)
            }
        }
    }

    #[test]
    fn failures_are_recorded_until_half_fail() {
        let corpus = make_corpus_with_side(5, 10, 32).unwrap();
        let ids: Vec<String> = corpus.samples.iter().map(|s| s.id.clone()).collect();
        let client = Flaky {
            fail_ids: ids[..5].to_vec(),
        };
        let out = generate_captions(corpus.samples.iter(), &client, 2, false).unwrap();
        assert_eq!(out.records.len(), 5);
        assert_eq!(out.failures.len(), 5);
        let client = Flaky {
            fail_ids: ids[..6].to_vec(),
        };
        assert!(matches!(
            generate_captions(corpus.samples.iter(), &client, 2, false),
            Err(Error::TooManyFailures { failed: 6, total: 10 })
        ));
    }

    #[test]
    fn retries_back_off_then_give_up() {
        let mut calls = 0;
        let r: Result<()> = with_retries(3, Duration::from_millis(1), || {
            calls += 1;
            Err(Error::Client("down".into()))
        });
        assert!(r.is_err());
        assert_eq!(calls, 4);
        let mut calls = 0;
        let r = with_retries(3, Duration::from_millis(1), || {
            calls += 1;
            if calls < 3 {
                Err(Error::Client("flaky".into()))
            } else {
                Ok(calls)
            }
        });
        assert_eq!(r.unwrap(), 3);
    }

    fn record(label: Label, sentences: &[(&str, Region)]) -> CaptionRecord {
        CaptionRecord {
            image_id: "x".into(),
            label,
            raw_paragraph: sentences.iter().map(|s| s.0).collect::<Vec<_>>().join(" "),
            sentences: sentences
                .iter()
                .map(|(t, r)| Sentence {
                    text: t.to_string(),
                    region: *r,
                })
                .collect(),
            prompt_hash: None,
        }
    }

    #[test]
    fn instruction_counts_and_templates() {
        let r = record(
            Label::Fake,
            &[
                ("The eyes are off.", Region::Eyes),
                ("Weird.", Region::Other),
                ("The mouth is odd.", Region::Mouth),
            ],
        );
        let out = build_instruction_samples(&[r]).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out[0].response.starts_with("This image is fake."));
        assert_eq!(out[1].question, "Describe the eyes in this image.");
        assert_eq!(out[2].response, "The mouth is odd.");

        let empty = record(Label::Real, &[]);
        let out = build_instruction_samples(&[empty]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].response, "This image is real.");
        assert!(build_instruction_samples(&[]).is_err());
    }
}
