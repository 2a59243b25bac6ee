//! Instruction-model synonym filter reached over an OpenAI-compatible
//! `/v1/completions` endpoint.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Filter prompt; `{target}`, `{input_sequence}` and `{decoded_tokens}` are substituted.
pub const PROMPT_TEMPLATE: &str = "Find contextual synonyms for the word {target} in this text: {input_sequence}

Available tokens: {decoded_tokens}

Instructions:

- Find ALL possible synonyms from the available tokens that could replace {target} in this context

- Return ONLY a comma-separated list of synonyms from the available tokens, surrounded by square brackets

- Include every relevant synonym

- NO duplicates allowed

- NO explanations or extra text

- If no synonyms found, return: []

Example format: [word1, word2, word3]

Synonyms for {target}:";

pub fn render_prompt(target: &str, input_sequence: &str, decoded_tokens: &[&str]) -> String {
    PROMPT_TEMPLATE
        .replace("{input_sequence}", input_sequence)
        .replace("{decoded_tokens}", &decoded_tokens.join(", "))
        .replace("{target}", target)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedReply {
    /// Distinct words in reply order.
    pub words: Vec<String>,
    pub duplicates: usize,
}

/// Parses `[w1, w2, ...]`. Anything else, including surrounding prose, is an error.
pub fn parse_reply(reply: &str) -> Result<ParsedReply> {
    let s = reply.trim();
    let inner = s
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| Error::ProviderReply(format!("not a bracketed list: {s:?}")))?;
    if inner.contains('[') || inner.contains(']') {
        return Err(Error::ProviderReply(format!("nested brackets: {s:?}")));
    }
    let mut out = ParsedReply {
        words: Vec::new(),
        duplicates: 0,
    };
    if inner.trim().is_empty() {
        return Ok(out);
    }
    for item in inner.split(',') {
        let w = item.trim();
        if w.is_empty() {
            return Err(Error::ProviderReply(format!("empty list item: {s:?}")));
        }
        if out.words.iter().any(|x| x == w) {
            out.duplicates += 1;
        } else {
            out.words.push(w.to_string());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportFailure {
    pub retryable: bool,
    pub message: String,
}

/// One completion request. Implementations must be callable from many threads.
pub trait CompletionTransport: Send + Sync {
    fn complete(&self, prompt: &str) -> std::result::Result<String, TransportFailure>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExternalConfig {
    /// Server root, e.g. `http://127.0.0.1:8000`.
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// Upper bound on in-flight requests.
    pub concurrency: usize,
    pub max_tokens: usize,
    pub repetition_penalty: f64,
    pub backoff_ms: u64,
    /// Environment variable holding a bearer token, if the server needs one.
    pub api_key_env: Option<String>,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            model: "instruct".into(),
            timeout_secs: 60,
            max_retries: 3,
            concurrency: 4,
            max_tokens: 256,
            repetition_penalty: 1.1,
            backoff_ms: 250,
            api_key_env: None,
        }
    }
}

impl ExternalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.concurrency == 0 {
            return Err(Error::config("provider concurrency must be >= 1"));
        }
        if self.base_url.is_empty() || self.model.is_empty() {
            return Err(Error::config("provider base_url and model are required"));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
    repetition_penalty: f64,
}

#[derive(Deserialize)]
struct CompletionChoice {
    text: String,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

/// Greedy-decoding HTTP client.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    model: String,
    max_tokens: usize,
    repetition_penalty: f64,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: &ExternalConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            url: format!("{}/v1/completions", cfg.base_url.trim_end_matches('/')),
            model: cfg.model.clone(),
            max_tokens: cfg.max_tokens,
            repetition_penalty: cfg.repetition_penalty,
            api_key: cfg.api_key_env.as_ref().and_then(|k| std::env::var(k).ok()),
        }
    }
}

impl CompletionTransport for HttpTransport {
    fn complete(&self, prompt: &str) -> std::result::Result<String, TransportFailure> {
        let body = CompletionRequest {
            model: &self.model,
            prompt,
            max_tokens: self.max_tokens,
            temperature: 0.0,
            repetition_penalty: self.repetition_penalty,
        };
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| TransportFailure {
            retryable: true,
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(TransportFailure {
                retryable: status == 429 || status >= 500,
                message: format!("HTTP {status} from {}", self.url),
            });
        }
        let parsed: CompletionResponse =
            resp.body_mut().read_json().map_err(|e| TransportFailure {
                retryable: false,
                message: format!("malformed completion response: {e}"),
            })?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| TransportFailure {
                retryable: false,
                message: "completion response has no choices".into(),
            })
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

/// Bounded-concurrency provider with per-request retries and exponential backoff.
pub struct ExternalProvider {
    transport: Box<dyn CompletionTransport>,
    limiter: Semaphore,
    max_retries: u32,
    backoff_ms: u64,
}

impl ExternalProvider {
    pub fn new(cfg: &ExternalConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::with_transport(Box::new(HttpTransport::new(cfg)), cfg))
    }

    pub fn with_transport(transport: Box<dyn CompletionTransport>, cfg: &ExternalConfig) -> Self {
        Self {
            transport,
            limiter: Semaphore::new(cfg.concurrency.max(1)),
            max_retries: cfg.max_retries,
            backoff_ms: cfg.backoff_ms,
        }
    }

    /// Sends `prompt`, retrying retryable failures; the permit is held across retries.
    pub fn complete(&self, prompt: &str) -> Result<String> {
        let _permit = self.limiter.acquire();
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match self.transport.complete(prompt) {
                Ok(text) => return Ok(text),
                Err(f) if f.retryable && attempts <= self.max_retries => {
                    log::warn!("provider attempt {attempts} failed: {}", f.message);
                    let wait = self.backoff_ms.saturating_mul(1 << (attempts - 1).min(16));
                    thread::sleep(Duration::from_millis(wait));
                }
                Err(f) => {
                    return Err(Error::Transport {
                        attempts,
                        retryable: f.retryable,
                        message: f.message,
                    })
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn template_substitution() {
        let p = render_prompt("browse", "safe to browse", &["browse", "surf"]);
        assert!(p.starts_with(
            "Find contextual synonyms for the word browse in this text: safe to browse\n\n"
        ));
        assert!(p.contains("Available tokens: browse, surf\n"));
        assert!(p.ends_with("Synonyms for browse:"));
        assert!(!p.contains('{'));
    }

    #[test]
    fn reply_grammar() {
        assert_eq!(parse_reply("[]").unwrap().words, Vec::<String>::new());
        assert_eq!(parse_reply("  [ ] \n").unwrap().words, Vec::<String>::new());
        let r = parse_reply("[surf, visit,surf , view]").unwrap();
        assert_eq!(r.words, vec!["surf", "visit", "view"]);
        assert_eq!(r.duplicates, 1);
        for bad in [
            "surf, visit",
            "Sure! [surf]",
            "[surf",
            "[a,,b]",
            "[[a]]",
            "",
        ] {
            assert!(
                matches!(parse_reply(bad), Err(Error::ProviderReply(_))),
                "{bad:?}"
            );
        }
    }

    struct Flaky {
        fail_first: usize,
        retryable: bool,
        calls: AtomicUsize,
    }

    impl CompletionTransport for Flaky {
        fn complete(&self, _: &str) -> std::result::Result<String, TransportFailure> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(TransportFailure {
                    retryable: self.retryable,
                    message: "boom".into(),
                })
            } else {
                Ok("[x]".into())
            }
        }
    }

    fn cfg(retries: u32) -> ExternalConfig {
        ExternalConfig {
            max_retries: retries,
            backoff_ms: 1,
            ..ExternalConfig::default()
        }
    }

    #[test]
    fn retries_then_succeeds() {
        let t = Flaky {
            fail_first: 2,
            retryable: true,
            calls: AtomicUsize::new(0),
        };
        let p = ExternalProvider::with_transport(Box::new(t), &cfg(3));
        assert_eq!(p.complete("q").unwrap(), "[x]");
    }

    #[test]
    fn exhausted_retries_carry_metadata() {
        let t = Flaky {
            fail_first: 10,
            retryable: true,
            calls: AtomicUsize::new(0),
        };
        let p = ExternalProvider::with_transport(Box::new(t), &cfg(2));
        match p.complete("q") {
            Err(Error::Transport {
                attempts,
                retryable,
                ..
            }) => {
                assert_eq!(attempts, 3);
                assert!(retryable);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn permanent_failure_not_retried() {
        let t = Flaky {
            fail_first: 1,
            retryable: false,
            calls: AtomicUsize::new(0),
        };
        let p = ExternalProvider::with_transport(Box::new(t), &cfg(5));
        assert!(matches!(
            p.complete("q"),
            Err(Error::Transport { attempts: 1, .. })
        ));
    }

    struct Counting {
        live: AtomicUsize,
        peak: Arc<AtomicUsize>,
    }

    impl CompletionTransport for Counting {
        fn complete(&self, _: &str) -> std::result::Result<String, TransportFailure> {
            let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            thread::sleep(Duration::from_millis(5));
            self.live.fetch_sub(1, Ordering::SeqCst);
            Ok("[]".into())
        }
    }

    #[test]
    fn concurrency_is_bounded() {
        let peak = Arc::new(AtomicUsize::new(0));
        let t = Counting {
            live: AtomicUsize::new(0),
            peak: peak.clone(),
        };
        let c = ExternalConfig {
            concurrency: 2,
            ..cfg(0)
        };
        let p = ExternalProvider::with_transport(Box::new(t), &c);
        thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| p.complete("q").unwrap());
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
