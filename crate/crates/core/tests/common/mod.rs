#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use priorprobe_core::diagnostics::{diagnose_records, DiagnosticConfig, DiagnosticReport};
use priorprobe_core::llm::{
    parse_single_value, render_coin_prompt, render_life_prompt, BackendConfig, ChatRequest, ChatTransport,
    ParseError, Prompt, RemoteBackend, TransportError,
};
use priorprobe_core::{run_sweep, ChainRecord, ProportionTask, SweepSpec, Task};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution};

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn golden_cases() -> Vec<(&'static str, Prompt)> {
    let coin = |n, h, m| render_coin_prompt(h, &ProportionTask::new(n, m).unwrap());
    vec![
        ("coin_n10_h7_m100.txt", coin(10, 7, 100)),
        ("coin_n10_h0_m100.txt", coin(10, 0, 100)),
        ("coin_n20_h20_m50.txt", coin(20, 20, 50)),
        ("life_t30.txt", render_life_prompt(30)),
        ("life_t1.txt", render_life_prompt(1)),
    ]
}

/// Compares every rendered prompt with its golden file; returns mismatches.
pub fn golden_mismatches() -> Vec<String> {
    golden_cases()
        .into_iter()
        .filter_map(|(file, prompt)| {
            let expected = std::fs::read_to_string(golden_dir().join(file)).ok()?;
            let rendered = format!("{}\n{}\n", prompt.system, prompt.user);
            (rendered != expected).then(|| file.to_string())
        })
        .chain(
            golden_cases()
                .iter()
                .filter(|(file, _)| !golden_dir().join(file).exists())
                .map(|(file, _)| format!("{file} missing")),
        )
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expect {
    Strict(i64),
    Loose(i64),
    NoDigits,
    Overflow,
}

pub const PARSE_TABLE: [(&str, Expect); 20] = [
    ("42", Expect::Strict(42)),
    (" 55.\n", Expect::Strict(55)),
    ("0", Expect::Strict(0)),
    ("100.", Expect::Strict(100)),
    ("55.0", Expect::Strict(55)),
    ("55.00.", Expect::Strict(55)),
    ("\t78 \r\n", Expect::Strict(78)),
    ("+7", Expect::Strict(7)),
    ("-3", Expect::Strict(-3)),
    ("007", Expect::Strict(7)),
    ("I predict 70 heads", Expect::Loose(70)),
    ("55.5", Expect::Loose(55)),
    ("1,000", Expect::Loose(1)),
    ("About 80 years.", Expect::Loose(80)),
    ("**65**", Expect::Loose(65)),
    ("Between 60 and 70", Expect::Loose(60)),
    ("", Expect::NoDigits),
    ("   \n", Expect::NoDigits),
    ("I cannot answer that.", Expect::NoDigits),
    ("99999999999999999999", Expect::Overflow),
];

/// Runs the parse table; returns descriptions of failing rows.
pub fn parse_table_failures() -> Vec<String> {
    PARSE_TABLE
        .iter()
        .filter_map(|&(raw, expect)| {
            let got = parse_single_value(raw);
            let ok = match (expect, &got) {
                (Expect::Strict(v), Ok(p)) => p.value == v && !p.loose,
                (Expect::Loose(v), Ok(p)) => p.value == v && p.loose,
                (Expect::NoDigits, Err(ParseError::NoDigits(_))) => true,
                (Expect::Overflow, Err(ParseError::Overflow(_))) => true,
                _ => false,
            };
            (!ok).then(|| format!("{raw:?}: expected {expect:?}, got {got:?}"))
        })
        .collect()
}

/// A minimal HTTP/1.1 server answering each connection with the next scripted
/// `(status, body)`; the last entry repeats once the script runs out.
pub struct FakeServer {
    pub base_url: String,
    pub requests: Arc<Mutex<Vec<RecordedRequest>>>,
    handle: Option<JoinHandle<()>>,
    stop: Arc<Mutex<bool>>,
    addr: String,
}

#[derive(Debug, Clone)]
pub struct RecordedRequest {
    pub path: String,
    pub authorization: Option<String>,
    pub body: String,
}

impl FakeServer {
    pub fn start(script: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let addr = listener.local_addr().unwrap().to_string();
        let requests = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(Mutex::new(false));
        let (reqs, stop_flag) = (requests.clone(), stop.clone());
        let handle = std::thread::spawn(move || {
            let mut served = 0usize;
            for stream in listener.incoming() {
                if *stop_flag.lock().unwrap() {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let (status, body) = script[served.min(script.len() - 1)].clone();
                served += 1;
                if let Some(req) = serve(stream, status, &body) {
                    reqs.lock().unwrap().push(req);
                }
            }
        });
        Self { base_url: format!("http://{addr}/v1"), requests, handle: Some(handle), stop, addr }
    }

    pub fn chat_reply(content: &str) -> String {
        serde_json::json!({
            "id": "fake",
            "object": "chat.completion",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]
        })
        .to_string()
    }
}

impl Drop for FakeServer {
    fn drop(&mut self) {
        *self.stop.lock().unwrap() = true;
        let _ = TcpStream::connect(&self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, status: u16, body: &str) -> Option<RecordedRequest> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line).ok()?;
    let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
    let mut content_length = 0usize;
    let mut authorization = None;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            match name.to_ascii_lowercase().as_str() {
                "content-length" => content_length = value.trim().parse().unwrap_or(0),
                "authorization" => authorization = Some(value.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut buf = vec![0u8; content_length];
    reader.read_exact(&mut buf).ok()?;
    let mut stream = stream;
    let response = format!(
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(response.as_bytes()).ok()?;
    Some(RecordedRequest { path, authorization, body: String::from_utf8_lossy(&buf).into_owned() })
}

/// Stand-in language model for the bundled fixture: reads ω from the prompt,
/// answers like a posterior sampler, and varies the reply format so the
/// fixture exercises strict, loose and out-of-range replies.
pub struct FixtureModel {
    rng: Mutex<ChaCha8Rng>,
}

impl FixtureModel {
    pub fn new(seed: u64) -> Self {
        Self { rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)) }
    }
}

impl ChatTransport for FixtureModel {
    fn complete(&self, request: &ChatRequest) -> Result<String, TransportError> {
        let user = &request.messages[1].content;
        let heads: u64 = user
            .split("coin flips, ")
            .nth(1)
            .and_then(|s| s.split_whitespace().next())
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TransportError::Fatal("unexpected prompt".into()))?;
        let mut rng = self.rng.lock().unwrap();
        let theta = Beta::new(2.0 + heads as f64, 2.0 + (10 - heads) as f64).unwrap().sample(&mut *rng);
        let omega = Binomial::new(100, theta).unwrap().sample(&mut *rng) as i64;
        Ok(match rng.random_range(0..20) {
            0 => format!("I would predict {omega} heads."),
            1 => format!("{}", omega + 100),
            2 => format!("{omega}."),
            3 => format!(" {omega}\n"),
            _ => omega.to_string(),
        })
    }
}

pub const FIXTURE_MODEL: &str = "fixture-model";

pub fn fixture_sweep() -> SweepSpec {
    SweepSpec {
        task: Task::Proportion(ProportionTask::default()),
        initial_values: vec![2, 8],
        chains_per_init: 4,
        steps: 25,
        burn_in: 5,
        master_seed: 2024,
    }
}

pub fn fixture_diagnostics() -> DiagnosticConfig {
    DiagnosticConfig { min_samples: 40, thin: 1, resamples: 500, ..DiagnosticConfig::default() }
}

pub fn fixture_backend_config(cache_dir: PathBuf) -> BackendConfig {
    let mut config = BackendConfig::new(FIXTURE_MODEL);
    config.cache_dir = cache_dir;
    config
}

pub fn records_bytes(records: &[ChainRecord]) -> Vec<u8> {
    records.iter().flat_map(|r| r.to_bytes()).collect()
}

pub fn report_bytes(report: &DiagnosticReport) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(report).unwrap();
    s.push('\n');
    s.into_bytes()
}

/// Replays the bundled cache and returns serialized records and report.
pub fn replay_fixture() -> Result<(Vec<u8>, Vec<u8>), String> {
    let backend =
        RemoteBackend::replay(fixture_backend_config(fixture_dir())).map_err(|e| e.to_string())?;
    let records = run_sweep(&fixture_sweep(), &backend, Some(4)).map_err(|e| e.first.source.to_string())?;
    let report = diagnose_records(&records, &fixture_diagnostics()).map_err(|e| e.to_string())?;
    Ok((records_bytes(&records), report_bytes(&report)))
}

/// Compares a fixture replay with the committed expectations.
pub fn fixture_replay_check() -> Result<usize, String> {
    let exchanges = std::fs::read_to_string(fixture_dir().join("exchanges.jsonl")).map_err(|e| e.to_string())?;
    let count = exchanges.lines().filter(|l| !l.trim().is_empty()).count();
    let expected_records = std::fs::read(fixture_dir().join("expected_records.txt")).map_err(|e| e.to_string())?;
    let expected_report = std::fs::read(fixture_dir().join("expected_report.json")).map_err(|e| e.to_string())?;
    for run in 0..3 {
        let (records, report) = replay_fixture()?;
        if records != expected_records {
            return Err(format!("replay {run}: chain records differ"));
        }
        if report != expected_report {
            return Err(format!("replay {run}: diagnostic report differs"));
        }
    }
    Ok(count)
}
