//! The one query path shared by the CLI and the HTTP service.

use serde::{Deserialize, Serialize};

use esr_core::index::EmbeddingIndex;
use esr_core::model::ModelBundle;
use esr_core::prompts::normalize_text;

/// Result count used when a request does not name one, capped by the index size.
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    /// Unknown only for indexes loaded without their metadata sidecar.
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub results: Vec<QueryHit>,
    pub query_echo: String,
    pub model_d: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum QueryError {
    /// Well-formed but unanswerable request (empty text, k out of range).
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] esr_core::Error),
}

/// Encodes `req.text` and ranks the index against it.
pub fn run_query(
    model: &ModelBundle,
    index: &EmbeddingIndex,
    req: &QueryRequest,
) -> Result<QueryResponse, QueryError> {
    let echo = normalize_text(&req.text);
    if echo.is_empty() {
        return Err(QueryError::Invalid(
            "query text is empty after normalization".into(),
        ));
    }
    if index.is_empty() {
        return Err(QueryError::Invalid("index is empty".into()));
    }
    let k = req.k.unwrap_or(DEFAULT_K.min(index.len()));
    if k == 0 || k > index.len() {
        return Err(QueryError::Invalid(format!(
            "k must lie in 1..={}, got {k}",
            index.len()
        )));
    }
    if req.threshold.is_some_and(|t| !t.is_finite()) {
        return Err(QueryError::Invalid("threshold must be finite".into()));
    }
    let q = model.encode_text(&req.text)?;
    let hits = index.query(&q, k, req.threshold)?;
    let results = hits
        .into_iter()
        .map(|h| {
            let meta = index.meta(&h.id);
            QueryHit {
                style: meta.and_then(|m| m.style.clone()),
                duration_s: meta.map(|m| m.duration_s),
                id: h.id,
                score: h.score,
            }
        })
        .collect();
    Ok(QueryResponse {
        results,
        query_echo: echo,
        model_d: model.dim(),
    })
}
