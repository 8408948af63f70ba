use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{build_prompt, parse_layout, stub_layout, ExampleBank, LayoutError, LayoutResult};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    #[default]
    Stub,
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmClientConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub mode: LlmMode,
    pub timeout_s: u64,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/v1/completions".into(),
            api_key_env: "DYAD_LLM_API_KEY".into(),
            temperature: 0.2,
            max_tokens: 128,
            mode: LlmMode::Stub,
            timeout_s: 30,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<(), LayoutError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LayoutError::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(LayoutError::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Request body: prompt, temperature and output token limit.
    pub fn request_body(&self, prompt: &str) -> Value {
        json!({
            "prompt": prompt,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        })
    }
}

/// Sends one completion request and returns the completion text.
pub trait LlmTransport {
    fn complete(&self, config: &LlmClientConfig, api_key: &str, prompt: &str) -> Result<String, LayoutError>;
}

/// JSON over HTTP with a bearer token.
#[derive(Clone, Copy, Debug, Default)]
pub struct HttpTransport;

impl LlmTransport for HttpTransport {
    fn complete(&self, config: &LlmClientConfig, api_key: &str, prompt: &str) -> Result<String, LayoutError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s.max(1))))
            .build()
            .into();
        let body = config.request_body(prompt).to_string();
        let mut resp = agent
            .post(&config.endpoint)
            .header("content-type", "application/json")
            .header("authorization", &format!("Bearer {api_key}"))
            .send(body.as_str())
            .map_err(|e| LayoutError::Transport(e.to_string()))?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| LayoutError::Transport(e.to_string()))?;
        Ok(completion_text(&text))
    }
}

/// Pulls the completion out of common response envelopes (`text`,
/// `completion`, `output`, `choices[0].text`, `choices[0].message.content`);
/// anything else is returned as is.
fn completion_text(body: &str) -> String {
    let Ok(v) = serde_json::from_str::<Value>(body) else {
        return body.to_string();
    };
    let candidates = [
        v.get("text"),
        v.get("completion"),
        v.get("output"),
        v.pointer("/choices/0/text"),
        v.pointer("/choices/0/message/content"),
    ];
    let found = candidates
        .into_iter()
        .flatten()
        .find_map(Value::as_str)
        .map(str::to_string);
    found.unwrap_or_else(|| body.to_string())
}

/// Stub mode answers from the bank. Live mode reads the key from the
/// configured environment variable and queries the endpoint.
pub fn request_layout(
    query: &str,
    client: &LlmClientConfig,
    bank: &ExampleBank,
    seed: u64,
) -> Result<LayoutResult, LayoutError> {
    client.validate()?;
    match client.mode {
        LlmMode::Stub => stub_layout(query, bank),
        LlmMode::Live => {
            let key = std::env::var(&client.api_key_env)
                .map_err(|_| LayoutError::Config(format!("environment variable {} is not set", client.api_key_env)))?;
            request_live(query, client, bank, seed, &key, &HttpTransport)
        }
    }
}

/// One request, retried once with the same prompt if no JSON object comes
/// back. Schema errors are not retried.
pub fn request_live(
    query: &str,
    client: &LlmClientConfig,
    bank: &ExampleBank,
    seed: u64,
    api_key: &str,
    transport: &dyn LlmTransport,
) -> Result<LayoutResult, LayoutError> {
    client.validate()?;
    let prompt = build_prompt(query, bank, seed)?;
    let first = parse_layout(&transport.complete(client, api_key, &prompt)?);
    match first {
        Err(LayoutError::Parse(msg)) => {
            log::warn!("layout response unparseable ({msg}); retrying once");
            parse_layout(&transport.complete(client, api_key, &prompt)?)
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    struct Canned {
        replies: RefCell<Vec<String>>,
        prompts: RefCell<Vec<String>>,
    }

    impl Canned {
        fn new(replies: &[&str]) -> Self {
            Self {
                replies: RefCell::new(replies.iter().rev().map(|s| s.to_string()).collect()),
                prompts: RefCell::new(Vec::new()),
            }
        }
    }

    impl LlmTransport for Canned {
        fn complete(&self, _: &LlmClientConfig, _: &str, prompt: &str) -> Result<String, LayoutError> {
            self.prompts.borrow_mut().push(prompt.to_string());
            self.replies
                .borrow_mut()
                .pop()
                .ok_or_else(|| LayoutError::Transport("no more replies".into()))
        }
    }

    const EXAMPLE_1: &str = r#"{"A": [0.0, 0.0, -0.5], "B": [0.0, 0.0, 0.5]}"#;

    fn live() -> LlmClientConfig {
        LlmClientConfig {
            mode: LlmMode::Live,
            ..Default::default()
        }
    }

    #[test]
    fn retries_once_after_parse_error_with_same_prompt() {
        let t = Canned::new(&["sorry, I cannot", EXAMPLE_1]);
        let l = request_live("q", &live(), &ExampleBank::builtin(), 3, "k", &t).unwrap();
        assert_eq!(l.b, [0.0, 0.0, 0.5]);
        let p = t.prompts.borrow();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn persistent_parse_error_surfaces() {
        let t = Canned::new(&["nope", "still nope"]);
        let r = request_live("q", &live(), &ExampleBank::builtin(), 3, "k", &t);
        assert!(matches!(r, Err(LayoutError::Parse(_))));
    }

    #[test]
    fn schema_error_is_not_retried() {
        let t = Canned::new(&[r#"{"A":[0,0],"B":[0,0,0]}"#, EXAMPLE_1]);
        let r = request_live("q", &live(), &ExampleBank::builtin(), 3, "k", &t);
        assert!(matches!(r, Err(LayoutError::Schema(_))));
        assert_eq!(t.prompts.borrow().len(), 1);
    }

    #[test]
    fn missing_key_is_a_config_error() {
        let cfg = LlmClientConfig {
            api_key_env: "DYAD_TEST_KEY_THAT_IS_NEVER_SET".into(),
            ..live()
        };
        let r = request_layout("q", &cfg, &ExampleBank::builtin(), 0);
        assert!(matches!(r, Err(LayoutError::Config(_))));
    }

    #[test]
    fn negative_temperature_is_rejected() {
        let cfg = LlmClientConfig {
            temperature: -0.1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn envelopes_are_unwrapped() {
        assert_eq!(completion_text(r#"{"text": "x"}"#), "x");
        assert_eq!(completion_text(r#"{"choices": [{"message": {"content": "y"}}]}"#), "y");
        assert_eq!(completion_text("plain"), "plain");
    }

    /// Serves one recorded response on a local port and captures the request.
    fn fixture_server(body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut req = vec![0u8; len];
            reader.read_exact(&mut req).unwrap();
            let resp = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            reader.get_mut().write_all(resp.as_bytes()).unwrap();
            head + &String::from_utf8(req).unwrap()
        });
        (url, handle)
    }

    #[test]
    fn live_request_against_recorded_fixture() {
        let (url, server) = fixture_server(r#"{"text": "{\"A\": [0.0, 0.0, -0.5], \"B\": [0.0, 0.0, 0.5]}"}"#);
        let cfg = LlmClientConfig {
            endpoint: url,
            ..live()
        };
        let l = request_live(
            "face to face",
            &cfg,
            &ExampleBank::builtin(),
            1,
            "secret",
            &HttpTransport,
        )
        .unwrap();
        assert_eq!(l.a, [0.0, 0.0, -0.5]);
        assert_eq!(l.b, [0.0, 0.0, 0.5]);
        let req = server.join().unwrap();
        assert!(req.to_ascii_lowercase().contains("authorization: bearer secret"));
        let body: Value = serde_json::from_str(&req[req.find("\r\n\r\n").unwrap() + 4..]).unwrap();
        assert_eq!(body["temperature"], 0.2);
        assert_eq!(body["max_tokens"], 128);
        assert!(body["prompt"].as_str().unwrap().contains("[User Query]"));
    }
}
