//! JSON-over-HTTP client for an external inference service.
//!
//! Protocol: `POST <endpoint>` with `{"prompt", "max_new_tokens",
//! "request_id"}`; a 2xx response carries `{"text"}` and may echo
//! `request_id`. Connection failures, timeouts and 5xx responses are
//! retried with exponential backoff; other non-2xx statuses fail at once.

use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};

use super::{GenerateError, GenerationBackend, GenerationRequest};

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout: Duration,
    pub retries: u32,
    pub backoff: Duration,
    /// In-flight request bound used by batch generation.
    pub concurrency: usize,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(60),
            retries: 2,
            backoff: Duration::from_millis(500),
            concurrency: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteRequest<'a> {
    pub prompt: &'a str,
    pub max_new_tokens: usize,
    pub request_id: &'a str,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteResponse {
    pub text: String,
    #[serde(default)]
    pub request_id: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RemoteBackend {
    config: RemoteConfig,
    client: Client,
}

enum Attempt {
    Retry(GenerateError),
    Fail(GenerateError),
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, GenerateError> {
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GenerateError::BackendUnreachable(format!("building HTTP client: {e}")))?;
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn attempt(&self, request: &GenerationRequest) -> Result<String, Attempt> {
        let body = RemoteRequest {
            prompt: &request.prompt,
            max_new_tokens: request.max_new_tokens,
            request_id: &request.request_id,
        };
        let response = self
            .client
            .post(&self.config.endpoint)
            .json(&body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    Attempt::Retry(GenerateError::Timeout(self.config.timeout))
                } else if e.is_connect() {
                    Attempt::Retry(GenerateError::BackendUnreachable(format!(
                        "{}: {e}",
                        self.config.endpoint
                    )))
                } else {
                    Attempt::Retry(GenerateError::BackendProtocolError(e.to_string()))
                }
            })?;

        let status = response.status();
        let text = response.text().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retry(GenerateError::Timeout(self.config.timeout))
            } else {
                Attempt::Fail(GenerateError::BackendProtocolError(format!("reading body: {e}")))
            }
        })?;
        if !status.is_success() {
            let err = GenerateError::BackendProtocolError(format!("HTTP {status}: {}", text.trim()));
            return Err(if status.is_server_error() {
                Attempt::Retry(err)
            } else {
                Attempt::Fail(err)
            });
        }
        let parsed: RemoteResponse = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fail(GenerateError::BackendProtocolError(format!("bad response body: {e}"))))?;
        if let Some(id) = &parsed.request_id {
            if id != &request.request_id {
                return Err(Attempt::Fail(GenerateError::BackendProtocolError(format!(
                    "response for request {id:?}, expected {:?}",
                    request.request_id
                ))));
            }
        }
        Ok(parsed.text)
    }
}

impl GenerationBackend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn complete(&self, request: &GenerationRequest) -> Result<String, GenerateError> {
        let mut delay = self.config.backoff;
        let mut attempt = 0;
        loop {
            match self.attempt(request) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fail(e)) => return Err(e),
                Err(Attempt::Retry(e)) if attempt >= self.config.retries => return Err(e),
                Err(Attempt::Retry(_)) => {
                    thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                    attempt += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generate::generate;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Serves scripted `(status, body)` replies, one per connection, and
    /// records request bodies.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; length];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push(String::from_utf8(buf).unwrap());
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/generate"), seen)
    }

    fn backend(endpoint: &str) -> RemoteBackend {
        let mut config = RemoteConfig::new(endpoint);
        config.backoff = Duration::from_millis(5);
        config.timeout = Duration::from_secs(5);
        RemoteBackend::new(config).unwrap()
    }

    #[test]
    fn defaults() {
        let c = RemoteConfig::new("http://x");
        assert_eq!(c.timeout, Duration::from_secs(60));
        assert_eq!(c.retries, 2);
        assert_eq!(c.concurrency, 4);
    }

    #[test]
    fn posts_request_and_truncates_reply() {
        let reply = format!("{{\"text\":\"{}\",\"request_id\":\"s1\"}}", "tok ".repeat(10));
        let (url, seen) = serve(vec![(200, reply)]);
        let req = GenerationRequest::new("lesion: 0.87 TL;DR", "s1").with_max_new_tokens(3);
        let out = generate("s1", &req, &backend(&url)).unwrap();
        assert_eq!(out.text, "tok tok tok");
        assert_eq!(out.backend, "remote");
        let body: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
        assert_eq!(body["prompt"], "lesion: 0.87 TL;DR");
        assert_eq!(body["max_new_tokens"], 3);
        assert_eq!(body["request_id"], "s1");
    }

    #[test]
    fn server_errors_are_retried() {
        let (url, seen) = serve(vec![
            (503, "busy".into()),
            (500, "oops".into()),
            (200, "{\"text\":\"There is a lesion.\"}".into()),
        ]);
        let out = generate("s", &GenerationRequest::new("p", "s"), &backend(&url)).unwrap();
        assert_eq!(out.text, "There is a lesion.");
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn client_error_is_protocol_error() {
        let (url, seen) = serve(vec![(400, "bad".into())]);
        let err = generate("s", &GenerationRequest::new("p", "s"), &backend(&url)).unwrap_err();
        assert!(matches!(err, GenerateError::BackendProtocolError(ref m) if m.contains("400")));
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn malformed_body_and_wrong_id() {
        let (url, _) = serve(vec![(200, "{\"txt\":1}".into())]);
        assert!(matches!(
            generate("s", &GenerationRequest::new("p", "s"), &backend(&url)),
            Err(GenerateError::BackendProtocolError(_))
        ));
        let (url, _) = serve(vec![(200, "{\"text\":\"x\",\"request_id\":\"other\"}".into())]);
        assert!(matches!(
            generate("s", &GenerationRequest::new("p", "s"), &backend(&url)),
            Err(GenerateError::BackendProtocolError(_))
        ));
    }

    #[test]
    fn server_down_is_unreachable() {
        let port = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let err = generate(
            "s",
            &GenerationRequest::new("p", "s"),
            &backend(&format!("http://127.0.0.1:{port}/generate")),
        )
        .unwrap_err();
        assert!(matches!(err, GenerateError::BackendUnreachable(_)), "{err:?}");
        assert!(err.is_backend_failure());
    }

    #[test]
    fn slow_server_times_out() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/generate", listener.local_addr().unwrap());
        thread::spawn(move || {
            let mut held = Vec::new();
            for stream in listener.incoming().take(3) {
                held.push(stream.unwrap());
            }
            thread::sleep(Duration::from_secs(3));
        });
        let mut config = RemoteConfig::new(url);
        config.timeout = Duration::from_millis(200);
        config.backoff = Duration::from_millis(5);
        let err = generate(
            "s",
            &GenerationRequest::new("p", "s"),
            &RemoteBackend::new(config).unwrap(),
        )
        .unwrap_err();
        assert!(
            matches!(err, GenerateError::Timeout(d) if d == Duration::from_millis(200)),
            "{err:?}"
        );
    }
}
