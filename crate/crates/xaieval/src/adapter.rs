//! Host side of the external-model protocol, plus a server loop that
//! exposes any [`Provider`] over it.
//!
//! Newline-delimited JSON over the adapter's standard streams. Requests are
//! `{"id":N,"method":M,"params":P}` with ids increasing from 0 (the
//! handshake); each response echoes its id and carries either `result` or
//! `error` (`{code, message}`). Exactly one request is in flight per
//! connection. Rasters travel as base64 little-endian float32. See
//! `docs/protocol.md` for the method table.

use std::io::{self, BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use xaieval_core::grid::{Heatmap, Image, Roi};
use xaieval_core::provider::{Capabilities, Capability, Model, Provider, Randomization, PROTOCOL_VERSION};
use xaieval_core::refmodel::{FeatureStack, Prediction};
use xaieval_core::{ProviderError, ProviderErrorKind};

use crate::formats::{f32_to_le_bytes, le_bytes_to_f32, DTYPE};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);

pub const PARSE_ERROR: i64 = -32700;
pub const METHOD_NOT_FOUND: i64 = -32601;
pub const INVALID_PARAMS: i64 = -32602;
pub const ADAPTER_FAULT: i64 = -32000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub method: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorObject {
    pub code: i64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorObject>,
}

/// A raster payload: `channels` planes of `height x width`, channel-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub dtype: String,
    pub data: String,
}

impl Tensor {
    pub fn encode(width: usize, height: usize, channels: usize, values: &[f32]) -> Self {
        Self {
            width,
            height,
            channels,
            dtype: DTYPE.into(),
            data: B64.encode(f32_to_le_bytes(values)),
        }
    }

    pub fn decode(&self) -> Result<Vec<f32>, String> {
        if self.dtype != DTYPE {
            return Err(format!("unsupported dtype {:?}", self.dtype));
        }
        let bytes = B64.decode(&self.data).map_err(|e| format!("bad base64: {e}"))?;
        let values = le_bytes_to_f32(&bytes).ok_or("payload length is not a multiple of 4")?;
        if values.len() != self.width * self.height * self.channels {
            return Err(format!(
                "{} values for {} channels of {}x{}",
                values.len(),
                self.channels,
                self.height,
                self.width
            ));
        }
        Ok(values)
    }

    pub fn image(img: &Image) -> Self {
        Self::encode(img.width(), img.height(), 1, img.pixels())
    }

    pub fn to_image(&self) -> Result<Image, String> {
        if self.channels != 1 {
            return Err("images have one channel".into());
        }
        Image::new(self.width, self.height, self.decode()?).map_err(|e| e.to_string())
    }
}

/// Prediction as sent on the wire; `box` is `[row0, col0, row1, col1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WirePrediction {
    pub score: f64,
    pub present: bool,
    #[serde(rename = "box")]
    pub bbox: Option<[usize; 4]>,
}

impl From<&Prediction> for WirePrediction {
    fn from(p: &Prediction) -> Self {
        Self {
            score: p.score,
            present: p.present,
            bbox: p.bbox.map(|b| b.as_array()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub protocol: u32,
    pub supports: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    /// Score at zero evidence (deletion metrics are relative to it).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub null_score: Option<f64>,
}

impl Handshake {
    pub fn capabilities(&self) -> Capabilities {
        let known = [
            Capability::Predict,
            Capability::Features,
            Capability::Ablate,
            Capability::Randomize,
            Capability::Attribution,
        ];
        Capabilities {
            protocol: self.protocol,
            supports: known
                .into_iter()
                .filter(|c| self.supports.iter().any(|s| s == c.name()))
                .collect(),
        }
    }
}

fn protocol_error(message: impl Into<String>) -> ProviderError {
    ProviderError::new(ProviderErrorKind::Protocol, message)
}

fn error_kind(code: i64) -> ProviderErrorKind {
    match code {
        METHOD_NOT_FOUND => ProviderErrorKind::Capability,
        INVALID_PARAMS => ProviderErrorKind::InvalidParams,
        _ => ProviderErrorKind::Fault,
    }
}

/// Lines exchanged on a connection: `> ` for requests, `< ` for responses.
pub type Transcript = Arc<Mutex<Vec<String>>>;

/// One adapter subprocess.
pub struct Connection {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<io::Result<String>>,
    next_id: u64,
    timeout: Duration,
    /// Set once the stream can no longer be trusted.
    poisoned: bool,
    transcript: Option<Transcript>,
}

impl Connection {
    /// Spawns `command` through the shell.
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, ProviderError> {
        if command.trim().is_empty() {
            return Err(ProviderError::new(ProviderErrorKind::Fault, "empty adapter command"));
        }
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ProviderError::new(ProviderErrorKind::Fault, format!("cannot start adapter: {e}")))?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let end = line.is_err();
                if tx.send(line).is_err() || end {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
            next_id: 0,
            timeout,
            poisoned: false,
            transcript: None,
        })
    }

    pub fn record(&mut self, transcript: Transcript) {
        self.transcript = Some(transcript);
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    fn log(&self, prefix: &str, line: &str) {
        if let Some(t) = &self.transcript {
            t.lock().expect("transcript lock").push(format!("{prefix}{line}"));
        }
    }

    fn fail(&mut self, e: ProviderError) -> ProviderError {
        self.poisoned = true;
        e
    }

    /// Sends one request and waits for its response.
    pub fn request(&mut self, method: &str, params: Value) -> Result<Value, ProviderError> {
        if self.poisoned {
            return Err(ProviderError::new(
                ProviderErrorKind::Fault,
                "adapter connection is unusable",
            ));
        }
        let id = self.next_id;
        self.next_id += 1;
        let line = serde_json::to_string(&Request {
            id,
            method: method.into(),
            params,
        })
        .expect("requests serialize");
        self.log("> ", &line);
        if let Err(e) = writeln!(self.stdin, "{line}").and_then(|_| self.stdin.flush()) {
            let e = ProviderError::new(ProviderErrorKind::Fault, format!("adapter closed its input: {e}"));
            return Err(self.fail(e));
        }
        let reply = match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => {
                let e = ProviderError::new(ProviderErrorKind::Fault, format!("reading adapter output: {e}"));
                return Err(self.fail(e));
            }
            Err(RecvTimeoutError::Timeout) => {
                let e = ProviderError::new(
                    ProviderErrorKind::Timeout,
                    format!("no reply to `{method}` within {:?}", self.timeout),
                );
                return Err(self.fail(e));
            }
            Err(RecvTimeoutError::Disconnected) => {
                let e = ProviderError::new(ProviderErrorKind::Fault, "adapter exited");
                return Err(self.fail(e));
            }
        };
        self.log("< ", &reply);
        let response: Response = match serde_json::from_str(&reply) {
            Ok(r) => r,
            Err(_) => return Err(self.fail(protocol_error(format!("not a JSON response: {reply}")))),
        };
        if response.id != Some(id) {
            let e = protocol_error(format!("expected response id {id}, got {:?}", response.id));
            return Err(self.fail(e));
        }
        match (response.result, response.error) {
            (_, Some(err)) => Err(ProviderError::new(error_kind(err.code), err.message)),
            (Some(result), None) => Ok(result),
            (None, None) => Err(self.fail(protocol_error("response has neither result nor error"))),
        }
    }

    pub fn handshake(&mut self) -> Result<Handshake, ProviderError> {
        let result = self.request("handshake", json!({ "protocol": PROTOCOL_VERSION }))?;
        let h: Handshake =
            serde_json::from_value(result).map_err(|e| protocol_error(format!("malformed handshake result: {e}")))?;
        if h.protocol > PROTOCOL_VERSION || h.protocol == 0 {
            return Err(self.fail(protocol_error(format!(
                "adapter speaks protocol {}, host speaks {PROTOCOL_VERSION}",
                h.protocol
            ))));
        }
        Ok(h)
    }

    fn call<T: serde::de::DeserializeOwned>(&mut self, method: &str, params: Value) -> Result<T, ProviderError> {
        let v = self.request(method, params)?;
        serde_json::from_value(v).map_err(|e| protocol_error(format!("malformed `{method}` result: {e}")))
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn prediction(p: WirePrediction, dims: (usize, usize)) -> Result<Prediction, ProviderError> {
    let bbox = match p.bbox {
        Some([r0, c0, r1, c1]) => {
            let b = Roi::new(r0, c0, r1, c1).map_err(|e| protocol_error(e.to_string()))?;
            if !b.fits(dims.0, dims.1) {
                return Err(protocol_error("predicted box lies outside the image"));
            }
            Some(b)
        }
        None => None,
    };
    if !p.score.is_finite() {
        return Err(protocol_error("non-finite score"));
    }
    Ok(Prediction {
        score: p.score,
        present: p.present,
        bbox,
    })
}

/// An external model: a pool of adapter connections, one per concurrent
/// session.
pub struct AdapterProvider {
    command: String,
    timeout: Duration,
    handshake: Handshake,
    idle: Mutex<Vec<Connection>>,
    transcript: Option<Transcript>,
}

impl AdapterProvider {
    pub fn connect(command: &str, timeout: Duration) -> Result<Self, ProviderError> {
        Self::connect_inner(command, timeout, None)
    }

    /// Like [`connect`](Self::connect), logging every exchanged line.
    pub fn connect_recording(command: &str, timeout: Duration, transcript: Transcript) -> Result<Self, ProviderError> {
        Self::connect_inner(command, timeout, Some(transcript))
    }

    fn connect_inner(command: &str, timeout: Duration, transcript: Option<Transcript>) -> Result<Self, ProviderError> {
        let mut conn = Connection::spawn(command, timeout)?;
        if let Some(t) = &transcript {
            conn.record(t.clone());
        }
        let handshake = conn.handshake()?;
        Ok(Self {
            command: command.into(),
            timeout,
            handshake,
            idle: Mutex::new(vec![conn]),
            transcript,
        })
    }

    pub fn handshake(&self) -> &Handshake {
        &self.handshake
    }

    fn open(&self) -> Result<Connection, ProviderError> {
        if let Some(c) = self.idle.lock().expect("pool lock").pop() {
            return Ok(c);
        }
        let mut conn = Connection::spawn(&self.command, self.timeout)?;
        if let Some(t) = &self.transcript {
            conn.record(t.clone());
        }
        let h = conn.handshake()?;
        if h != self.handshake {
            return Err(protocol_error("adapter instances disagree on their handshake"));
        }
        Ok(conn)
    }
}

impl Provider for AdapterProvider {
    fn capabilities(&self) -> Capabilities {
        self.handshake.capabilities()
    }

    fn model_id(&self) -> String {
        match &self.handshake.model_id {
            Some(id) => format!("adapter:{id}"),
            None => format!("adapter:{}", self.command),
        }
    }

    fn null_score(&self) -> f64 {
        self.handshake.null_score.unwrap_or(0.0)
    }

    fn session(&self) -> Result<Box<dyn Model + '_>, ProviderError> {
        Ok(Box::new(AdapterSession {
            owner: self,
            conn: Some(self.open()?),
            randomized: false,
        }))
    }
}

/// Exclusive use of one connection; returned to the pool on drop.
struct AdapterSession<'a> {
    owner: &'a AdapterProvider,
    conn: Option<Connection>,
    randomized: bool,
}

impl AdapterSession<'_> {
    fn conn(&mut self) -> &mut Connection {
        self.conn.as_mut().expect("connection held until drop")
    }

    fn predict_call(&mut self, method: &str, params: Value, dims: (usize, usize)) -> Result<Prediction, ProviderError> {
        let p: WirePrediction = self.conn().call(method, params)?;
        prediction(p, dims)
    }
}

impl Model for AdapterSession<'_> {
    fn predict(&mut self, img: &Image) -> Result<Prediction, ProviderError> {
        self.predict_call("predict", json!({ "image": Tensor::image(img) }), img.dims())
    }

    fn features(&mut self, img: &Image) -> Result<FeatureStack, ProviderError> {
        let t: Tensor = self.conn().call("features", json!({ "image": Tensor::image(img) }))?;
        let values = t.decode().map_err(protocol_error)?;
        FeatureStack::new(t.width, t.height, t.channels, values).map_err(|e| protocol_error(e.to_string()))
    }

    fn ablate(&mut self, img: &Image, channel: usize) -> Result<Prediction, ProviderError> {
        let params = json!({ "image": Tensor::image(img), "channel": channel });
        self.predict_call("ablate", params, img.dims())
    }

    fn randomize(&mut self, r: Option<&Randomization>) -> Result<(), ProviderError> {
        let params = serde_json::to_value(r).expect("randomization serializes");
        self.conn().request("randomize", params)?;
        self.randomized = r.is_some();
        Ok(())
    }

    fn attribution(&mut self, img: &Image) -> Result<Heatmap, ProviderError> {
        let t: Tensor = self
            .conn()
            .call("attribution", json!({ "image": Tensor::image(img) }))?;
        if t.channels != 1 {
            return Err(protocol_error("attribution must have one channel"));
        }
        let values = t.decode().map_err(protocol_error)?;
        Heatmap::new(t.width, t.height, values).map_err(|e| protocol_error(e.to_string()))
    }
}

impl Drop for AdapterSession<'_> {
    fn drop(&mut self) {
        let Some(mut conn) = self.conn.take() else { return };
        if self.randomized && conn.request("randomize", Value::Null).is_err() {
            return;
        }
        if !conn.is_poisoned() {
            self.owner.idle.lock().expect("pool lock").push(conn);
        }
    }
}

fn reply_error(id: Option<u64>, code: i64, message: impl Into<String>) -> Response {
    Response {
        id,
        result: None,
        error: Some(ErrorObject {
            code,
            message: message.into(),
        }),
    }
}

fn provider_reply(id: u64, e: ProviderError) -> Response {
    let code = match e.kind {
        ProviderErrorKind::Capability => METHOD_NOT_FOUND,
        ProviderErrorKind::InvalidParams => INVALID_PARAMS,
        _ => ADAPTER_FAULT,
    };
    reply_error(Some(id), code, e.to_string())
}

#[derive(Deserialize)]
struct ImageParams {
    image: Tensor,
}

#[derive(Deserialize)]
struct AblateParams {
    image: Tensor,
    channel: usize,
}

/// Handles one request on `model`.
pub fn handle(model: &mut dyn Model, info: &Handshake, req: Request) -> Response {
    let id = req.id;
    let ok = |v: Value| Response {
        id: Some(id),
        result: Some(v),
        error: None,
    };
    let bad = |m: String| reply_error(Some(id), INVALID_PARAMS, m);
    if req.method == "handshake" {
        return ok(serde_json::to_value(info).expect("handshake serializes"));
    }
    if !info.supports.contains(&req.method) {
        return reply_error(Some(id), METHOD_NOT_FOUND, format!("unknown method `{}`", req.method));
    }
    let image = |p: &Value| -> Result<Image, String> {
        let p: ImageParams = serde_json::from_value(p.clone()).map_err(|e| e.to_string())?;
        p.image.to_image()
    };
    let result = match req.method.as_str() {
        "predict" => match image(&req.params) {
            Ok(img) => model.predict(&img).map(|p| json!(WirePrediction::from(&p))),
            Err(m) => return bad(m),
        },
        "features" => match image(&req.params) {
            Ok(img) => model
                .features(&img)
                .map(|s| json!(Tensor::encode(s.width(), s.height(), s.channels(), s.data()))),
            Err(m) => return bad(m),
        },
        "ablate" => {
            let parsed = serde_json::from_value::<AblateParams>(req.params.clone())
                .map_err(|e| e.to_string())
                .and_then(|p| Ok((p.image.to_image()?, p.channel)));
            match parsed {
                Ok((img, k)) => model.ablate(&img, k).map(|p| json!(WirePrediction::from(&p))),
                Err(m) => return bad(m),
            }
        }
        "randomize" => match serde_json::from_value::<Option<Randomization>>(req.params.clone()) {
            Ok(r) => model.randomize(r.as_ref()).map(|_| json!({})),
            Err(e) => return bad(e.to_string()),
        },
        "attribution" => match image(&req.params) {
            Ok(img) => model
                .attribution(&img)
                .map(|h| json!(Tensor::encode(h.width(), h.height(), 1, h.values()))),
            Err(m) => return bad(m),
        },
        other => return reply_error(Some(id), METHOD_NOT_FOUND, format!("unknown method `{other}`")),
    };
    match result {
        Ok(v) => ok(v),
        Err(e) => provider_reply(id, e),
    }
}

/// Serves `provider` on a line stream until end of input. Malformed lines
/// get a parse error and the loop continues.
pub fn serve(
    provider: &dyn Provider,
    supports: &[Capability],
    input: impl BufRead,
    mut output: impl Write,
) -> io::Result<()> {
    let mut session = provider.session().map_err(|e| io::Error::other(e.to_string()))?;
    let info = Handshake {
        protocol: PROTOCOL_VERSION,
        supports: supports.iter().map(|c| c.name().to_string()).collect(),
        model_id: Some(provider.model_id()),
        null_score: Some(provider.null_score()),
    };
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Ok(req) => handle(session.as_mut(), &info, req),
            Err(e) => reply_error(None, PARSE_ERROR, format!("parse error: {e}")),
        };
        let text = serde_json::to_string(&response).expect("responses serialize");
        writeln!(output, "{text}")?;
        output.flush()?;
    }
    Ok(())
}
