use std::fmt;
use std::str::FromStr;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MtError {
    #[error("translation {hop} unavailable: {cause}")]
    MtUnavailable { hop: String, cause: String },
    #[error("malformed translation response: {0}")]
    MtMalformedResponse(String),
    #[error("invalid route {0:?}")]
    InvalidRoute(String),
}

/// Language hops of a (possibly chained) back-translation, e.g. `en-es-en-fr-en`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TranslationRoute {
    hops: Vec<String>,
}

impl TranslationRoute {
    pub fn new<S: Into<String>>(hops: impl IntoIterator<Item = S>) -> Result<Self, MtError> {
        let hops: Vec<String> = hops.into_iter().map(Into::into).collect();
        let valid = hops.len() >= 3
            && hops.first() == hops.last()
            && hops.iter().all(|h| !h.is_empty())
            && hops.windows(2).all(|w| w[0] != w[1]);
        if !valid {
            return Err(MtError::InvalidRoute(hops.join("-")));
        }
        Ok(TranslationRoute { hops })
    }

    pub fn hops(&self) -> &[String] {
        &self.hops
    }

    pub fn source(&self) -> &str {
        &self.hops[0]
    }

    /// The high-resource default set: three simple routes and one chained.
    pub fn defaults() -> Vec<TranslationRoute> {
        ["en-fr-en", "en-de-en", "en-es-en", "en-es-en-fr-en"]
            .iter()
            .map(|r| r.parse().expect("valid default route"))
            .collect()
    }
}

impl FromStr for TranslationRoute {
    type Err = MtError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TranslationRoute::new(s.split('-').map(str::trim))
    }
}

impl TryFrom<String> for TranslationRoute {
    type Error = MtError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TranslationRoute> for String {
    fn from(r: TranslationRoute) -> String {
        r.to_string()
    }
}

impl fmt::Display for TranslationRoute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.hops.join("-"))
    }
}

pub trait Translator: Sync {
    fn translate(&self, text: &str, src: &str, tgt: &str) -> Result<String, MtError>;
}

impl<T: Translator + ?Sized> Translator for &T {
    fn translate(&self, text: &str, src: &str, tgt: &str) -> Result<String, MtError> {
        (**self).translate(text, src, tgt)
    }
}

/// Folds the client over consecutive hop pairs of the route.
pub fn back_translate(text: &str, route: &TranslationRoute, client: &dyn Translator) -> Result<String, MtError> {
    route
        .hops
        .windows(2)
        .try_fold(text.to_string(), |acc, w| client.translate(&acc, &w[0], &w[1]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

pub fn back_translate_with_retry(
    text: &str,
    route: &TranslationRoute,
    client: &dyn Translator,
    policy: RetryPolicy,
) -> Result<String, MtError> {
    let mut backoff = policy.initial_backoff;
    let mut attempt = 1;
    loop {
        match back_translate(text, route, client) {
            Ok(out) => return Ok(out),
            Err(e) if attempt >= policy.attempts.max(1) => return Err(e),
            Err(e) => {
                log::warn!("route {route} attempt {attempt} failed: {e}; retrying in {backoff:?}");
                thread::sleep(backoff);
                backoff *= 2;
                attempt += 1;
            }
        }
    }
}

#[derive(Serialize)]
struct TranslateRequest<'a> {
    text: &'a str,
    src: &'a str,
    tgt: &'a str,
}

#[derive(Deserialize)]
struct TranslateResponse {
    text: String,
}

/// Client for `POST {endpoint}/translate` with body `{"text", "src", "tgt"}`
/// answering `{"text"}`.
pub struct HttpTranslator {
    url: String,
    agent: ureq::Agent,
}

impl HttpTranslator {
    pub fn new(endpoint: &str) -> Self {
        Self::with_timeout(endpoint, Duration::from_secs(60))
    }

    pub fn with_timeout(endpoint: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpTranslator {
            url: format!("{}/translate", endpoint.trim_end_matches('/')),
            agent,
        }
    }
}

impl Translator for HttpTranslator {
    fn translate(&self, text: &str, src: &str, tgt: &str) -> Result<String, MtError> {
        let hop = format!("{src}->{tgt}");
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(TranslateRequest { text, src, tgt })
            .map_err(|e| MtError::MtUnavailable {
                hop: hop.clone(),
                cause: e.to_string(),
            })?;
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| MtError::MtMalformedResponse(e.to_string()))?;
        let parsed: TranslateResponse =
            serde_json::from_str(&body).map_err(|e| MtError::MtMalformedResponse(format!("{e}: {body}")))?;
        Ok(parsed.text)
    }
}
