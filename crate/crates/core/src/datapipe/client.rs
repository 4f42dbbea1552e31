//! Pluggable model clients. External annotator/translator models sit behind
//! one text-completion trait with three implementations: a deterministic
//! mock (pure function of the request), recorded-fixture replay, and a
//! minimal HTTP adapter speaking `POST {prompt, image_b64?} -> {text}`.
//! Tests never touch the network; the HTTP adapter is exercised against a
//! loopback listener.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::time::Duration;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRequest {
    pub prompt: String,
    /// PNG bytes, base64-encoded on the wire.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
}

impl ClientRequest {
    pub fn text(prompt: impl Into<String>) -> Self {
        ClientRequest { prompt: prompt.into(), image_b64: None }
    }

    pub fn with_png(prompt: impl Into<String>, png: &[u8]) -> Self {
        ClientRequest { prompt: prompt.into(), image_b64: Some(base64_encode(png)) }
    }
}

pub trait TextClient: Send + Sync {
    fn complete(&self, request: &ClientRequest) -> Result<String>;
}

/// Retry wrapper: client errors are retriable, everything else is not.
pub fn complete_with_retries(
    client: &dyn TextClient,
    request: &ClientRequest,
    retries: u32,
) -> Result<String> {
    let mut last = None;
    for _ in 0..=retries {
        match client.complete(request) {
            Ok(text) => return Ok(text),
            Err(Error::Client(msg)) => last = Some(Error::Client(msg)),
            Err(other) => return Err(other),
        }
    }
    Err(last.unwrap_or_else(|| Error::client("no attempts made")))
}

// ── deterministic mocks ──────────────────────────────────────────────

/// Annotator mock: echoes a short hash of the full prompt plus the line
/// tagged `Original:` so refinements are recognizably derived from their
/// condition text.
pub struct MockAnnotator;

impl TextClient for MockAnnotator {
    fn complete(&self, request: &ClientRequest) -> Result<String> {
        let original = request
            .prompt
            .lines()
            .find_map(|l| l.strip_prefix("Original: "))
            .unwrap_or("")
            .trim();
        Ok(format!("refined {:08x}: {original}", fnv(&request.prompt) as u32))
    }
}

/// Prompt marker the translator contract uses; the text to translate
/// follows on the next lines.
pub const TRANSLATE_MARKER: &str = "Translate to Chinese:";

/// Translator mock: a deterministic tagged transform that always emits Han
/// script.
pub struct MockTranslator;

impl TextClient for MockTranslator {
    fn complete(&self, request: &ClientRequest) -> Result<String> {
        let text = request
            .prompt
            .split_once('\n')
            .map(|(_, rest)| rest)
            .unwrap_or("")
            .trim();
        Ok(format!("中文版：{text}"))
    }
}

/// Replays recorded responses keyed by exact prompt. Lines are JSON
/// objects {"prompt": ..., "text": ...}.
pub struct FixtureClient {
    responses: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct FixtureLine {
    prompt: String,
    text: String,
}

impl FixtureClient {
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::input(format!("cannot read fixture {}: {e}", path.display())))?;
        let mut responses = BTreeMap::new();
        for (i, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: FixtureLine = serde_json::from_str(line)
                .map_err(|e| Error::input(format!("fixture line {}: {e}", i + 1)))?;
            responses.insert(parsed.prompt, parsed.text);
        }
        Ok(FixtureClient { responses })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        FixtureClient { responses: pairs.into_iter().collect() }
    }
}

impl TextClient for FixtureClient {
    fn complete(&self, request: &ClientRequest) -> Result<String> {
        self.responses
            .get(&request.prompt)
            .cloned()
            .ok_or_else(|| Error::client("no recorded response for prompt"))
    }
}

// ── HTTP adapter ─────────────────────────────────────────────────────

#[derive(Debug, Deserialize)]
struct WireReply {
    text: String,
}

/// Minimal HTTP/1.1 JSON POST client. Endpoint format: "host:port/path"
/// (scheme optional, http only).
pub struct HttpClient {
    host: String,
    port: u16,
    path: String,
    timeout: Duration,
}

impl HttpClient {
    pub fn new(endpoint: &str, timeout: Duration) -> Result<Self> {
        let stripped = endpoint.strip_prefix("http://").unwrap_or(endpoint);
        let (hostport, path) = match stripped.split_once('/') {
            Some((hp, p)) => (hp, format!("/{p}")),
            None => (stripped, "/".to_string()),
        };
        let (host, port) = hostport
            .split_once(':')
            .ok_or_else(|| Error::config(format!("endpoint {endpoint:?} needs host:port")))?;
        let port: u16 = port
            .parse()
            .map_err(|e| Error::config(format!("bad port in {endpoint:?}: {e}")))?;
        Ok(HttpClient { host: host.to_string(), port, path, timeout })
    }
}

impl TextClient for HttpClient {
    fn complete(&self, request: &ClientRequest) -> Result<String> {
        let body = serde_json::to_string(request)?;
        let mut stream = TcpStream::connect((self.host.as_str(), self.port))
            .map_err(|e| Error::client(format!("connect {}:{}: {e}", self.host, self.port)))?;
        stream.set_read_timeout(Some(self.timeout)).map_err(Error::Io)?;
        stream.set_write_timeout(Some(self.timeout)).map_err(Error::Io)?;
        let request_text = format!(
            "POST {} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            self.path,
            self.host,
            body.len(),
            body
        );
        stream
            .write_all(request_text.as_bytes())
            .map_err(|e| Error::client(format!("send: {e}")))?;
        let mut raw = Vec::new();
        stream
            .read_to_end(&mut raw)
            .map_err(|e| Error::client(format!("receive: {e}")))?;
        let raw = String::from_utf8_lossy(&raw);
        let (head, reply_body) = raw
            .split_once("\r\n\r\n")
            .ok_or_else(|| Error::client("malformed HTTP response"))?;
        let status = head.lines().next().unwrap_or("");
        if !status.contains(" 200") {
            return Err(Error::client(format!("HTTP status {status:?}")));
        }
        let reply: WireReply = serde_json::from_str(reply_body.trim())
            .map_err(|e| Error::client(format!("bad reply JSON: {e}")))?;
        Ok(reply.text)
    }
}

// ── event segmentation ───────────────────────────────────────────────

/// Temporal event boundary, (t0, t1] seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventSegment {
    pub t0: f64,
    pub t1: f64,
}

pub trait EventSegmenter: Send + Sync {
    fn segment(&self, media_id: &str, duration: f64) -> Result<Vec<EventSegment>>;
}

/// Fixed-length windows clamped to the video duration.
pub struct MockSegmenter {
    pub window: f64,
}

impl EventSegmenter for MockSegmenter {
    fn segment(&self, _media_id: &str, duration: f64) -> Result<Vec<EventSegment>> {
        if self.window <= 0.0 {
            return Err(Error::config("segmenter window must be positive".to_string()));
        }
        let mut segments = Vec::new();
        let mut t = 0.0;
        while t < duration {
            let end = (t + self.window).min(duration);
            segments.push(EventSegment { t0: t, t1: end });
            t = end;
        }
        Ok(segments)
    }
}

/// Event segmentation over the generic HTTP text contract: the reply text
/// must be a JSON array of {t0, t1}.
pub struct HttpSegmenter {
    pub client: HttpClient,
}

impl EventSegmenter for HttpSegmenter {
    fn segment(&self, media_id: &str, duration: f64) -> Result<Vec<EventSegment>> {
        let prompt = format!("Segment into events.\nMedia: {media_id}\nDuration: {duration}");
        let reply = self.client.complete(&ClientRequest::text(prompt))?;
        serde_json::from_str(&reply).map_err(|e| Error::client(format!("bad segment reply: {e}")))
    }
}

fn fnv(s: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn base64_encode(bytes: &[u8]) -> String {
    const TABLE: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    let mut out = String::with_capacity(bytes.len().div_ceil(3) * 4);
    for chunk in bytes.chunks(3) {
        let b = [chunk[0], *chunk.get(1).unwrap_or(&0), *chunk.get(2).unwrap_or(&0)];
        let n = ((b[0] as u32) << 16) | ((b[1] as u32) << 8) | b[2] as u32;
        out.push(TABLE[(n >> 18) as usize & 63] as char);
        out.push(TABLE[(n >> 12) as usize & 63] as char);
        out.push(if chunk.len() > 1 { TABLE[(n >> 6) as usize & 63] as char } else { '=' });
        out.push(if chunk.len() > 2 { TABLE[n as usize & 63] as char } else { '=' });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;

    #[test]
    fn mock_annotator_is_pure() {
        let req = ClientRequest::text("Task: caption\nOriginal: a brown dog\n");
        let a = MockAnnotator.complete(&req).unwrap();
        let b = MockAnnotator.complete(&req).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("a brown dog"));
    }

    #[test]
    fn mock_translator_emits_han_script() {
        let req = ClientRequest::text(format!("{TRANSLATE_MARKER}\na brown dog"));
        let zh = MockTranslator.complete(&req).unwrap();
        assert!(zh.contains("a brown dog"));
        assert!(crate::datapipe::record::script_matches("zh", &zh));
    }

    #[test]
    fn fixture_replay_and_miss() {
        let client = FixtureClient::from_pairs([("p1".to_string(), "r1".to_string())]);
        assert_eq!(client.complete(&ClientRequest::text("p1")).unwrap(), "r1");
        assert!(matches!(
            client.complete(&ClientRequest::text("p2")),
            Err(Error::Client(_))
        ));
    }

    #[test]
    fn retries_only_on_client_errors() {
        struct FailTwice(std::sync::Mutex<u32>);
        impl TextClient for FailTwice {
            fn complete(&self, _r: &ClientRequest) -> Result<String> {
                let mut n = self.0.lock().unwrap();
                *n += 1;
                if *n <= 2 {
                    Err(Error::client("transient"))
                } else {
                    Ok("ok".to_string())
                }
            }
        }
        let flaky = FailTwice(std::sync::Mutex::new(0));
        assert_eq!(complete_with_retries(&flaky, &ClientRequest::text("x"), 2).unwrap(), "ok");

        let flaky = FailTwice(std::sync::Mutex::new(0));
        assert!(complete_with_retries(&flaky, &ClientRequest::text("x"), 1).is_err());
    }

    #[test]
    fn mock_segmenter_windows_and_clamp() {
        let segs = MockSegmenter { window: 2.0 }.segment("m", 6.0).unwrap();
        assert_eq!(
            segs,
            vec![
                EventSegment { t0: 0.0, t1: 2.0 },
                EventSegment { t0: 2.0, t1: 4.0 },
                EventSegment { t0: 4.0, t1: 6.0 }
            ]
        );
        let short = MockSegmenter { window: 2.0 }.segment("m", 1.0).unwrap();
        assert_eq!(short, vec![EventSegment { t0: 0.0, t1: 1.0 }]);
    }

    #[test]
    fn http_client_speaks_the_wire_contract() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = vec![0u8; 4096];
            let n = stream.read(&mut buf).unwrap();
            let request = String::from_utf8_lossy(&buf[..n]).into_owned();
            let reply_body = r#"{"text":"from server"}"#;
            let response = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply_body.len(),
                reply_body
            );
            stream.write_all(response.as_bytes()).unwrap();
            request
        });
        let client =
            HttpClient::new(&format!("{}:{}/v1/complete", addr.ip(), addr.port()), Duration::from_secs(2))
                .unwrap();
        let reply = client
            .complete(&ClientRequest::with_png("describe", b"fake-png"))
            .unwrap();
        assert_eq!(reply, "from server");
        let seen = server.join().unwrap();
        assert!(seen.starts_with("POST /v1/complete HTTP/1.1\r\n"));
        assert!(seen.contains(r#""prompt":"describe""#));
        assert!(seen.contains(r#""image_b64":"ZmFrZS1wbmc=""#));
    }

    #[test]
    fn http_connect_failure_is_client_error() {
        // Port 9 (discard) is almost certainly closed in the sandbox.
        let client = HttpClient::new("127.0.0.1:9/x", Duration::from_millis(100)).unwrap();
        assert!(matches!(
            client.complete(&ClientRequest::text("x")),
            Err(Error::Client(_))
        ));
    }
}
