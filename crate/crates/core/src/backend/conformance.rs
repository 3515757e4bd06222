//! Protocol conformance checks that any backend, in-process or remote, must
//! pass.

use super::{
    Backend, BackendError, CaptionRequest, CompleteRequest, DetectRequest, EmbedRequest,
    GenerateImageRequest, Request, Response,
};
use crate::canonical;
use crate::text::PromptRole;

const SAMPLE_IMAGE: &str = "5e884898da28047151d0e56f8dc6292773603d0d6aabbdd62a11ef721d1542d8";

/// Fixed request corpus covering every role.
pub fn corpus() -> Vec<Request> {
    vec![
        Request::Caption(CaptionRequest {
            image_ref: SAMPLE_IMAGE.into(),
            prompt: None,
        }),
        Request::Caption(CaptionRequest {
            image_ref: SAMPLE_IMAGE.into(),
            prompt: Some("Describe the image in detail.".into()),
        }),
        Request::GenerateImage(GenerateImageRequest::new(
            "A red dog rests next to a wooden bench in a quiet park.",
            7,
        )),
        Request::Complete(CompleteRequest {
            prompt: "Q: dog, frisbee\nA: A dog catches a frisbee.\nQ: kite, beach\nA:".into(),
            task: PromptRole::Concept2text,
            seed: 1,
        }),
        Request::Complete(CompleteRequest {
            prompt:
                "Q: A cat sits on a mat.\nA: cat, mat\nQ: A red ball lies near a wooden bench.\nA:"
                    .into(),
            task: PromptRole::ExtractShort,
            seed: 1,
        }),
        Request::Complete(CompleteRequest {
            prompt: "Q: a, b\nA: a and b\nQ: a dog, a brown dog\nA:".into(),
            task: PromptRole::Summarize,
            seed: 1,
        }),
        Request::Detect(DetectRequest {
            image_ref: SAMPLE_IMAGE.into(),
            phrase: "a red ball".into(),
        }),
        Request::Embed(EmbedRequest {
            texts: vec!["a red ball".into(), "a wooden bench".into()],
        }),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub request: String,
    pub message: String,
}

fn check_one(backend: &dyn Backend, request: &Request) -> Result<(), String> {
    let first = backend
        .call(request)
        .map_err(|e| format!("call failed: {e}"))?;
    let second = backend
        .call(request)
        .map_err(|e| format!("repeat call failed: {e}"))?;
    first.check_answers(request).map_err(|e| e.to_string())?;
    first.validate().map_err(|e| e.to_string())?;
    if first.body() != second.body() {
        return Err("repeated request produced a different response".into());
    }
    // The canonical body must parse back to the same response.
    let reparsed = Response::parse(request.role(), &first.body()).map_err(|e| e.to_string())?;
    if reparsed != first {
        return Err("response does not survive a serialize/parse round trip".into());
    }
    match &first {
        Response::Embed(r) => {
            for e in &r.embeddings {
                let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(format!("embedding norm {norm} is not 1"));
                }
            }
        }
        Response::GenerateImage(r) => {
            let blob = backend
                .fetch_blob(&r.image_ref)
                .map_err(|e| format!("blob fetch failed: {e}"))?;
            if canonical::sha256_hex(&blob) != r.image_ref {
                return Err("blob does not match its content hash".into());
            }
        }
        Response::Caption(r) if r.caption.trim().is_empty() => {
            return Err("empty caption".into());
        }
        Response::Complete(r) if r.text.trim().is_empty() => {
            return Err("empty completion".into());
        }
        _ => {}
    }
    Ok(())
}

/// Runs the corpus plus negative cases; returns every violation found.
pub fn check(backend: &dyn Backend) -> Vec<Violation> {
    let mut violations = Vec::new();
    for request in corpus() {
        if let Err(message) = check_one(backend, &request) {
            violations.push(Violation {
                request: format!("{} {}", request.role(), request.body()),
                message,
            });
        }
    }
    let invalid = Request::Detect(DetectRequest {
        image_ref: "not-a-hash".into(),
        phrase: "a dog".into(),
    });
    match backend.call(&invalid) {
        Ok(_) => violations.push(Violation {
            request: invalid.body(),
            message: "invalid request was accepted".into(),
        }),
        Err(e) if e.is_retryable() => violations.push(Violation {
            request: invalid.body(),
            message: format!("invalid request reported as retryable: {e}"),
        }),
        Err(_) => {}
    }
    let missing = "0".repeat(64);
    if !matches!(
        backend.fetch_blob(&missing),
        Err(BackendError::BlobNotFound(_)
            | BackendError::Remote {
                retryable: false,
                ..
            })
    ) {
        violations.push(Violation {
            request: format!("GET /blob/{missing}"),
            message: "unknown blob did not yield a non-retryable not-found error".into(),
        });
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;

    #[test]
    fn mocks_conform() {
        for seed in [0, 1, 42] {
            let violations = check(&MockBackend::new(seed));
            assert!(violations.is_empty(), "seed {seed}: {violations:?}");
        }
    }
}
