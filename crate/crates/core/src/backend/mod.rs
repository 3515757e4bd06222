//! Model backends: the wire protocol, an HTTP client with retries, and
//! deterministic in-process mocks.

mod client;
pub mod conformance;
mod mock;
mod protocol;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

pub use client::{BackendEndpoint, HttpBackend, RetryPolicy};
pub use mock::{MockBackend, MOCK_EMBED_DIM};
pub use protocol::*;

#[derive(Debug, Clone, Error)]
pub enum BackendError {
    #[error("request timed out after {0:?}")]
    Timeout(Duration),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("{role} backend returned HTTP {status} ({code}): {message}")]
    Remote {
        role: Role,
        status: u16,
        code: String,
        retryable: bool,
        message: String,
    },

    #[error("malformed {role} response: {message}")]
    Malformed { role: Role, message: String },

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("{role} backend exhausted after {attempts} attempts: {last}")]
    Exhausted {
        role: Role,
        attempts: u32,
        last: Box<BackendError>,
    },

    #[error("no backend serves role {0}")]
    Unsupported(Role),

    #[error("blob {0} not found")]
    BlobNotFound(String),

    #[error("blob {expected} failed its content hash check (got {actual})")]
    BlobCorrupt { expected: String, actual: String },
}

impl BackendError {
    /// Transient failures worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout(_) | BackendError::Transport(_) => true,
            BackendError::Remote { retryable, .. } => *retryable,
            _ => false,
        }
    }
}

fn unexpected(role: Role, got: Response) -> BackendError {
    BackendError::Malformed {
        role,
        message: format!("got a {} response", got.role()),
    }
}

/// A model service for one or more roles.
pub trait Backend: Send + Sync {
    /// Identifier recorded in stage traces.
    fn id(&self, role: Role) -> String;

    fn call(&self, request: &Request) -> Result<Response, BackendError>;

    /// Fetches an image payload by content hash.
    fn fetch_blob(&self, hash: &str) -> Result<Vec<u8>, BackendError>;

    fn caption(&self, request: &CaptionRequest) -> Result<CaptionResponse, BackendError> {
        match self.call(&Request::Caption(request.clone()))? {
            Response::Caption(r) => Ok(r),
            other => Err(unexpected(Role::Caption, other)),
        }
    }

    fn generate_image(
        &self,
        request: &GenerateImageRequest,
    ) -> Result<GenerateImageResponse, BackendError> {
        match self.call(&Request::GenerateImage(request.clone()))? {
            Response::GenerateImage(r) => Ok(r),
            other => Err(unexpected(Role::GenerateImage, other)),
        }
    }

    fn complete(&self, request: &CompleteRequest) -> Result<CompleteResponse, BackendError> {
        match self.call(&Request::Complete(request.clone()))? {
            Response::Complete(r) => Ok(r),
            other => Err(unexpected(Role::Complete, other)),
        }
    }

    fn detect(&self, request: &DetectRequest) -> Result<DetectResponse, BackendError> {
        match self.call(&Request::Detect(request.clone()))? {
            Response::Detect(r) => Ok(r),
            other => Err(unexpected(Role::Detect, other)),
        }
    }

    fn embed(&self, request: &EmbedRequest) -> Result<EmbedResponse, BackendError> {
        match self.call(&Request::Embed(request.clone()))? {
            Response::Embed(r) => Ok(r),
            other => Err(unexpected(Role::Embed, other)),
        }
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn id(&self, role: Role) -> String {
        (**self).id(role)
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        (**self).call(request)
    }

    fn fetch_blob(&self, hash: &str) -> Result<Vec<u8>, BackendError> {
        (**self).fetch_blob(hash)
    }
}

/// Passes the first `budget` calls through, then fails every call as if
/// the backend's retries were exhausted. Used to interrupt runs on purpose.
pub struct FaultInjector<B> {
    inner: B,
    remaining: std::sync::atomic::AtomicU64,
}

impl<B: Backend> FaultInjector<B> {
    pub fn new(inner: B, budget: u64) -> Self {
        FaultInjector {
            inner,
            remaining: std::sync::atomic::AtomicU64::new(budget),
        }
    }

    fn spend(&self, role: Role) -> Result<(), BackendError> {
        use std::sync::atomic::Ordering;
        self.remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .map(|_| ())
            .map_err(|_| BackendError::Exhausted {
                role,
                attempts: 1,
                last: Box::new(BackendError::Transport("injected fault".into())),
            })
    }
}

impl<B: Backend> Backend for FaultInjector<B> {
    fn id(&self, role: Role) -> String {
        self.inner.id(role)
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        self.spend(request.role())?;
        self.inner.call(request)
    }

    fn fetch_blob(&self, hash: &str) -> Result<Vec<u8>, BackendError> {
        self.inner.fetch_blob(hash)
    }
}

/// Dispatches each role to its own backend. Blobs come from the image
/// generator's backend.
#[derive(Clone, Default)]
pub struct Router {
    routes: BTreeMap<Role, Arc<dyn Backend>>,
}

impl Router {
    pub fn new() -> Self {
        Router::default()
    }

    /// Serves every role from one backend.
    pub fn uniform(backend: Arc<dyn Backend>) -> Self {
        let mut router = Router::new();
        for role in Role::ALL {
            router.routes.insert(role, backend.clone());
        }
        router
    }

    pub fn route(mut self, role: Role, backend: Arc<dyn Backend>) -> Self {
        self.routes.insert(role, backend);
        self
    }

    fn get(&self, role: Role) -> Result<&Arc<dyn Backend>, BackendError> {
        self.routes
            .get(&role)
            .ok_or(BackendError::Unsupported(role))
    }
}

impl Backend for Router {
    fn id(&self, role: Role) -> String {
        self.get(role)
            .map(|b| b.id(role))
            .unwrap_or_else(|_| format!("unrouted:{role}"))
    }

    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        self.get(request.role())?.call(request)
    }

    fn fetch_blob(&self, hash: &str) -> Result<Vec<u8>, BackendError> {
        self.get(Role::GenerateImage)?.fetch_blob(hash)
    }
}
