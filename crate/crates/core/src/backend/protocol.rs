//! Request and response bodies for the five model roles. Bodies travel as
//! canonical JSON; boxes are `[x_min, y_min, x_max, y_max]` in normalized
//! coordinates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::BackendError;
use crate::canonical;
use crate::model::BBox;
use crate::text::PromptRole;

pub const DEFAULT_GUIDANCE_SCALE: f64 = 10.0;
pub const DEFAULT_IMAGE_SIZE: [u32; 2] = [256, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Caption,
    GenerateImage,
    Complete,
    Detect,
    Embed,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Caption,
        Role::GenerateImage,
        Role::Complete,
        Role::Detect,
        Role::Embed,
    ];

    /// Path segment of the role's endpoint.
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Caption => "caption",
            Role::GenerateImage => "generate_image",
            Role::Complete => "complete",
            Role::Detect => "detect",
            Role::Embed => "embed",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| BackendError::InvalidRequest(format!("unknown role {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    /// Content hash of the image to describe.
    pub image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateImageRequest {
    pub prompt: String,
    #[serde(default = "default_guidance")]
    pub guidance_scale: f64,
    pub seed: u64,
    /// `[width, height]` in pixels.
    #[serde(default = "default_size")]
    pub size: [u32; 2],
}

fn default_guidance() -> f64 {
    DEFAULT_GUIDANCE_SCALE
}

fn default_size() -> [u32; 2] {
    DEFAULT_IMAGE_SIZE
}

impl GenerateImageRequest {
    pub fn new(prompt: impl Into<String>, seed: u64) -> Self {
        GenerateImageRequest {
            prompt: prompt.into(),
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            seed,
            size: DEFAULT_IMAGE_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateImageResponse {
    /// Content hash of the payload, fetched through `GET /blob/{hash}`.
    pub image_ref: String,
    pub size: [u32; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteRequest {
    pub prompt: String,
    pub task: PromptRole,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRequest {
    pub image_ref: String,
    pub phrase: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectResponse {
    /// Sorted by descending confidence.
    pub detections: Vec<ScoredBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Caption(CaptionRequest),
    GenerateImage(GenerateImageRequest),
    Complete(CompleteRequest),
    Detect(DetectRequest),
    Embed(EmbedRequest),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Caption(CaptionResponse),
    GenerateImage(GenerateImageResponse),
    Complete(CompleteResponse),
    Detect(DetectResponse),
    Embed(EmbedResponse),
}

fn is_content_hash(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

impl Request {
    pub fn role(&self) -> Role {
        match self {
            Request::Caption(_) => Role::Caption,
            Request::GenerateImage(_) => Role::GenerateImage,
            Request::Complete(_) => Role::Complete,
            Request::Detect(_) => Role::Detect,
            Request::Embed(_) => Role::Embed,
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        match self {
            Request::Caption(r) => canonical::to_canonical_value(r),
            Request::GenerateImage(r) => canonical::to_canonical_value(r),
            Request::Complete(r) => canonical::to_canonical_value(r),
            Request::Detect(r) => canonical::to_canonical_value(r),
            Request::Embed(r) => canonical::to_canonical_value(r),
        }
    }

    /// Canonical JSON body.
    pub fn body(&self) -> String {
        self.to_value().to_string()
    }

    /// Hash of role plus canonical body; the cache and trace key.
    pub fn content_hash(&self) -> String {
        canonical::sha256_hex(format!("{}\n{}", self.role(), self.body()).as_bytes())
    }

    pub fn parse(role: Role, body: &str) -> Result<Request, BackendError> {
        let bad = |e: serde_json::Error| BackendError::InvalidRequest(format!("{role}: {e}"));
        let req = match role {
            Role::Caption => Request::Caption(serde_json::from_str(body).map_err(bad)?),
            Role::GenerateImage => Request::GenerateImage(serde_json::from_str(body).map_err(bad)?),
            Role::Complete => Request::Complete(serde_json::from_str(body).map_err(bad)?),
            Role::Detect => Request::Detect(serde_json::from_str(body).map_err(bad)?),
            Role::Embed => Request::Embed(serde_json::from_str(body).map_err(bad)?),
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let fail = |msg: String| Err(BackendError::InvalidRequest(msg));
        match self {
            Request::Caption(r) if !is_content_hash(&r.image_ref) => fail(format!(
                "caption image_ref {:?} is not a content hash",
                r.image_ref
            )),
            Request::GenerateImage(r) if r.prompt.trim().is_empty() => {
                fail("generate_image prompt is empty".into())
            }
            Request::GenerateImage(r)
                if !(r.guidance_scale > 0.0 && r.guidance_scale.is_finite()) =>
            {
                fail(format!(
                    "guidance_scale must be > 0, got {}",
                    r.guidance_scale
                ))
            }
            Request::GenerateImage(r) if r.size[0] == 0 || r.size[1] == 0 => {
                fail(format!("image size {:?} must be positive", r.size))
            }
            Request::Complete(r) if r.prompt.trim().is_empty() => {
                fail("complete prompt is empty".into())
            }
            Request::Detect(r) if !is_content_hash(&r.image_ref) => fail(format!(
                "detect image_ref {:?} is not a content hash",
                r.image_ref
            )),
            Request::Detect(r) if r.phrase.trim().is_empty() => {
                fail("detect phrase is empty".into())
            }
            Request::Embed(r) if r.texts.is_empty() => fail("embed texts are empty".into()),
            _ => Ok(()),
        }
    }
}

impl Response {
    pub fn role(&self) -> Role {
        match self {
            Response::Caption(_) => Role::Caption,
            Response::GenerateImage(_) => Role::GenerateImage,
            Response::Complete(_) => Role::Complete,
            Response::Detect(_) => Role::Detect,
            Response::Embed(_) => Role::Embed,
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        match self {
            Response::Caption(r) => canonical::to_canonical_value(r),
            Response::GenerateImage(r) => canonical::to_canonical_value(r),
            Response::Complete(r) => canonical::to_canonical_value(r),
            Response::Detect(r) => canonical::to_canonical_value(r),
            Response::Embed(r) => canonical::to_canonical_value(r),
        }
    }

    pub fn body(&self) -> String {
        self.to_value().to_string()
    }

    /// Parses and validates a response body. Any failure is a non-retryable
    /// schema violation.
    pub fn parse(role: Role, body: &str) -> Result<Response, BackendError> {
        let bad = |e: serde_json::Error| BackendError::Malformed {
            role,
            message: e.to_string(),
        };
        let resp = match role {
            Role::Caption => Response::Caption(serde_json::from_str(body).map_err(bad)?),
            Role::GenerateImage => {
                Response::GenerateImage(serde_json::from_str(body).map_err(bad)?)
            }
            Role::Complete => Response::Complete(serde_json::from_str(body).map_err(bad)?),
            Role::Detect => Response::Detect(serde_json::from_str(body).map_err(bad)?),
            Role::Embed => Response::Embed(serde_json::from_str(body).map_err(bad)?),
        };
        resp.validate()?;
        Ok(resp)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let role = self.role();
        let fail = |message: String| Err(BackendError::Malformed { role, message });
        match self {
            Response::GenerateImage(r) if !is_content_hash(&r.image_ref) => {
                fail(format!("image_ref {:?} is not a content hash", r.image_ref))
            }
            Response::Detect(r) => {
                if let Some(d) = r
                    .detections
                    .iter()
                    .find(|d| !(0.0..=1.0).contains(&d.confidence))
                {
                    return fail(format!("confidence {} outside [0, 1]", d.confidence));
                }
                if r.detections
                    .windows(2)
                    .any(|w| w[0].confidence < w[1].confidence)
                {
                    return fail("detections are not sorted by descending confidence".into());
                }
                Ok(())
            }
            Response::Embed(r) => {
                let dim = r.embeddings.first().map_or(0, Vec::len);
                if dim == 0 || r.embeddings.iter().any(|e| e.len() != dim) {
                    return fail("embeddings are empty or of unequal dimension".into());
                }
                if r.embeddings.iter().flatten().any(|v| !v.is_finite()) {
                    return fail("embedding has a non-finite entry".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Checks that the response answers `request` (role and cardinality).
    pub fn check_answers(&self, request: &Request) -> Result<(), BackendError> {
        let role = request.role();
        if self.role() != role {
            return Err(BackendError::Malformed {
                role,
                message: format!("got a {} response", self.role()),
            });
        }
        if let (Request::Embed(req), Response::Embed(resp)) = (request, self) {
            if req.texts.len() != resp.embeddings.len() {
                return Err(BackendError::Malformed {
                    role,
                    message: format!(
                        "{} embeddings for {} texts",
                        resp.embeddings.len(),
                        req.texts.len()
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Error body: `{"error": {"code", "retryable", "message"}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub retryable: bool,
    pub message: String,
}

impl ErrorBody {
    pub fn new(code: impl Into<String>, retryable: bool, message: impl Into<String>) -> Self {
        ErrorBody {
            error: ErrorDetail {
                code: code.into(),
                retryable,
                message: message.into(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HASH: &str = "0000000000000000000000000000000000000000000000000000000000000abc";

    #[test]
    fn detect_response_wire_format() {
        let body = r#"{"detections":[{"box":[0.1,0.2,0.5,0.6],"confidence":0.9},{"box":[0,0,1,1],"confidence":0.5}]}"#;
        let resp = Response::parse(Role::Detect, body).unwrap();
        assert_eq!(resp.body(), body.replace("[0,0,1,1]", "[0.0,0.0,1.0,1.0]"));
    }

    #[test]
    fn detect_response_rejects_violations() {
        let unsorted = r#"{"detections":[{"box":[0.1,0.2,0.5,0.6],"confidence":0.5},{"box":[0,0,1,1],"confidence":0.9}]}"#;
        assert!(matches!(
            Response::parse(Role::Detect, unsorted),
            Err(BackendError::Malformed { .. })
        ));
        let bad_box = r#"{"detections":[{"box":[0.6,0.2,0.5,0.6],"confidence":0.5}]}"#;
        assert!(Response::parse(Role::Detect, bad_box).is_err());
        let bad_conf = r#"{"detections":[{"box":[0.1,0.2,0.5,0.6],"confidence":1.5}]}"#;
        assert!(Response::parse(Role::Detect, bad_conf).is_err());
    }

    #[test]
    fn request_defaults_and_validation() {
        let req = Request::parse(Role::GenerateImage, r#"{"prompt":"a dog","seed":3}"#).unwrap();
        match &req {
            Request::GenerateImage(g) => {
                assert_eq!(g.guidance_scale, 10.0);
                assert_eq!(g.size, [256, 256]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(Request::parse(
            Role::GenerateImage,
            r#"{"prompt":"x","seed":1,"guidance_scale":0}"#
        )
        .is_err());
        assert!(Request::parse(Role::Caption, r#"{"image_ref":"nothex"}"#).is_err());
        assert!(Request::parse(Role::Caption, &format!(r#"{{"image_ref":"{HASH}"}}"#)).is_ok());
        assert!(Request::parse(Role::Embed, r#"{"texts":[]}"#).is_err());
    }

    #[test]
    fn content_hash_depends_on_role_and_body() {
        let a = Request::Detect(DetectRequest {
            image_ref: HASH.into(),
            phrase: "a dog".into(),
        });
        let b = Request::Detect(DetectRequest {
            image_ref: HASH.into(),
            phrase: "a cat".into(),
        });
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), a.clone().content_hash());
    }

    #[test]
    fn role_names() {
        for role in Role::ALL {
            assert_eq!(role.as_str().parse::<Role>().unwrap(), role);
        }
        assert!("blob".parse::<Role>().is_err());
    }
}
