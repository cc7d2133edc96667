use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};
use xaieval::adapter::{serve, AdapterProvider, Connection, Tensor};
use xaieval::exec::Parallel;
use xaieval_core::cam::CamMethod;
use xaieval_core::eval::{run_consistency, run_pipeline, DoseMode, GateConfig, Harness, PipelineConfig, RunStatus};
use xaieval_core::grid::Image;
use xaieval_core::perturb::PerturbationSpec;
use xaieval_core::phantom::{self, PhantomConfig};
use xaieval_core::provider::{Capability, Provider, RefProvider};
use xaieval_core::ProviderErrorKind;

const REFADAPTER: &str = env!("CARGO_BIN_EXE_xaieval-refadapter");
const SHORT: Duration = Duration::from_millis(400);

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/transcript.ndjson")
}

fn zeros(n: usize) -> Value {
    json!(Tensor::image(&Image::filled(n, n, 0.0).unwrap()))
}

/// The scripted session: every method once, then the error paths.
fn golden_requests() -> Vec<String> {
    let req = |id: u64, method: &str, params: Value| json!({"id": id, "method": method, "params": params}).to_string();
    vec![
        req(0, "handshake", json!({"protocol": 1})),
        req(1, "predict", json!({"image": zeros(40)})),
        req(2, "features", json!({"image": zeros(40)})),
        req(3, "ablate", json!({"image": zeros(40), "channel": 1})),
        req(4, "explode", json!({})),
        req(5, "ablate", json!({"image": zeros(40), "channel": 7})),
        "{\"id\":6,\"method\":".to_string(),
    ]
}

fn interleave(requests: &[String], output: &str) -> String {
    let replies: Vec<&str> = output.lines().collect();
    assert_eq!(replies.len(), requests.len(), "one reply per request");
    let mut t = String::new();
    for (q, a) in requests.iter().zip(replies) {
        t.push_str(&format!("> {q}\n< {a}\n"));
    }
    t
}

fn serve_in_process(requests: &[String]) -> String {
    let input = requests.join("\n") + "\n";
    let mut out = Vec::new();
    let provider = RefProvider::default();
    serve(&provider, &provider.capabilities().supports, input.as_bytes(), &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

#[test]
fn golden_transcript_replays() {
    let requests = golden_requests();
    let transcript = interleave(&requests, &serve_in_process(&requests));
    let path = golden_path();
    if std::env::var_os("XAIEVAL_BLESS").is_some_and(|v| v == "1") {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &transcript).unwrap();
    }
    let golden = std::fs::read_to_string(&path).expect("golden transcript (bless with XAIEVAL_BLESS=1)");
    assert_eq!(transcript, golden);

    // The same exchange through the binary, requests taken from the file.
    let sent: Vec<String> = golden
        .lines()
        .filter_map(|l| l.strip_prefix("> "))
        .map(String::from)
        .collect();
    let mut child = Command::new(REFADAPTER)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all((sent.join("\n") + "\n").as_bytes())
        .unwrap();
    let mut out = String::new();
    child.stdout.take().unwrap().read_to_string(&mut out).unwrap();
    assert!(child.wait().unwrap().success());
    assert_eq!(interleave(&sent, &out), golden);
}

#[test]
fn golden_replies_have_the_documented_shapes() {
    let golden = std::fs::read_to_string(golden_path()).unwrap();
    let replies: Vec<Value> = golden
        .lines()
        .filter_map(|l| l.strip_prefix("< "))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(replies[0]["result"]["protocol"], 1);
    let bias = xaieval_core::refmodel::RefModel::default().head.bias;
    assert_eq!(
        replies[1]["result"],
        json!({"score": bias, "present": false, "box": null})
    );
    let t: Tensor = serde_json::from_value(replies[2]["result"].clone()).unwrap();
    assert_eq!((t.width, t.height, t.channels), (40, 40, 7));
    assert_eq!(t.decode().unwrap().len(), 7 * 1600);
    assert_eq!(replies[3]["result"]["present"], false);
    assert_eq!(replies[4]["error"]["code"], -32601);
    assert_eq!(replies[5]["error"]["code"], -32602);
    assert_eq!(replies[6]["id"], Value::Null);
    assert_eq!(replies[6]["error"]["code"], -32700);
}

/// An adapter made of a shell script; `$HS` is a valid handshake reply.
fn script(body: &str) -> String {
    let hs = r#"{"id":0,"result":{"protocol":1,"supports":["predict","features"]}}"#;
    format!("HS='{hs}'; {body}")
}

fn predict_error(body: &str) -> xaieval_core::ProviderError {
    let provider = AdapterProvider::connect(&script(body), SHORT).unwrap();
    let mut session = provider.session().unwrap();
    session.predict(&Image::filled(40, 40, 0.0).unwrap()).unwrap_err()
}

#[test]
fn mismatched_id_is_a_protocol_error() {
    let e = predict_error(
        r#"read l; echo "$HS"; read l; echo '{"id":9,"result":{"score":0,"present":false,"box":null}}'; sleep 1"#,
    );
    assert_eq!(e.kind, ProviderErrorKind::Protocol);
    assert!(e.message.contains("expected response id 1"), "{}", e.message);
}

#[test]
fn non_json_line_is_a_protocol_error() {
    let e = predict_error(r#"read l; echo "$HS"; read l; echo 'model warming up'; sleep 1"#);
    assert_eq!(e.kind, ProviderErrorKind::Protocol);
    assert!(e.message.contains("model warming up"));
}

#[test]
fn silent_adapter_times_out() {
    let e = predict_error(r#"read l; echo "$HS"; read l; sleep 5"#);
    assert_eq!(e.kind, ProviderErrorKind::Timeout);
}

#[test]
fn exiting_adapter_is_a_fault() {
    let e = predict_error(r#"read l; echo "$HS"; read l; exit 0"#);
    assert_eq!(e.kind, ProviderErrorKind::Fault);
}

#[test]
fn error_codes_map_to_kinds() {
    for (code, kind) in [
        (-32601, ProviderErrorKind::Capability),
        (-32602, ProviderErrorKind::InvalidParams),
        (-32000, ProviderErrorKind::Fault),
        (17, ProviderErrorKind::Fault),
    ] {
        let reply = format!(r#"{{"id":1,"error":{{"code":{code},"message":"no"}}}}"#);
        let e = predict_error(&format!(r#"read l; echo "$HS"; read l; echo '{reply}'; sleep 1"#));
        assert_eq!(e.kind, kind, "code {code}");
    }
}

#[test]
fn newer_protocol_is_refused() {
    let cmd = r#"read l; echo '{"id":0,"result":{"protocol":2,"supports":["predict"]}}'; sleep 1"#;
    let e = AdapterProvider::connect(cmd, SHORT).err().unwrap();
    assert_eq!(e.kind, ProviderErrorKind::Protocol);
    assert!(e.message.contains("protocol 2"));
}

#[test]
fn handshake_reports_capabilities_and_null_score() {
    let provider = AdapterProvider::connect(REFADAPTER, Duration::from_secs(10)).unwrap();
    let reference = RefProvider::default();
    assert_eq!(provider.capabilities(), reference.capabilities());
    assert_eq!(provider.null_score(), reference.null_score());
    assert_eq!(provider.model_id(), format!("adapter:{}", reference.model_id()));

    let limited = format!("{REFADAPTER} --supports predict,features,ablate");
    let provider = AdapterProvider::connect(&limited, Duration::from_secs(10)).unwrap();
    assert!(!provider.capabilities().has(Capability::Randomize));
    let mut session = provider.session().unwrap();
    let e = session.attribution(&Image::filled(40, 40, 0.0).unwrap()).unwrap_err();
    assert_eq!(e.kind, ProviderErrorKind::Capability);
}

#[test]
fn transcript_records_the_exchange() {
    let log = Arc::new(Mutex::new(Vec::new()));
    let provider = AdapterProvider::connect_recording(REFADAPTER, Duration::from_secs(10), log.clone()).unwrap();
    provider
        .session()
        .unwrap()
        .predict(&Image::filled(40, 40, 0.0).unwrap())
        .unwrap();
    let lines = log.lock().unwrap().clone();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("> {\"id\":0,\"method\":\"handshake\""));
    assert!(lines[3].starts_with("< {\"id\":1,\"result\":"));
}

#[test]
fn connection_ids_increase_from_zero() {
    let mut c = Connection::spawn(REFADAPTER, Duration::from_secs(10)).unwrap();
    c.handshake().unwrap();
    let err = c.request("explode", json!({})).unwrap_err();
    assert_eq!(err.kind, ProviderErrorKind::Capability);
    // An error reply leaves the connection usable.
    assert!(!c.is_poisoned());
    assert!(c.request("predict", json!({"image": zeros(40)})).is_ok());
}

fn small_cases() -> Vec<phantom::Case> {
    let cfg = PhantomConfig {
        width: 64,
        height: 64,
        seed: 11,
        ..PhantomConfig::default()
    };
    phantom::generate_dataset(&cfg, 4, 0.5).unwrap()
}

#[test]
fn adapter_consistency_matches_builtin() {
    let cases = small_cases();
    let builtin = RefProvider::default();
    let adapter = AdapterProvider::connect(REFADAPTER, Duration::from_secs(30)).unwrap();
    let exec = Parallel::new(2);
    for spec in [
        PerturbationSpec::dose(&[1.0, 0.5]),
        PerturbationSpec::rotation(&[0.0, 20.0]),
    ] {
        for method in [CamMethod::Eigen, CamMethod::Ablation] {
            let a = run_consistency(&Harness::new(&builtin, &exec), &cases, method, &spec, DoseMode::Phantom).unwrap();
            let b = run_consistency(&Harness::new(&adapter, &exec), &cases, method, &spec, DoseMode::Phantom).unwrap();
            assert_eq!(b.run.status, RunStatus::Complete);
            assert_eq!(a.run.rows.len(), b.run.rows.len());
            for (x, y) in a.run.rows.iter().zip(&b.run.rows) {
                assert_eq!((&x.variant, x.metric), (&y.variant, y.metric));
                assert!((x.mean - y.mean).abs() <= 1e-5, "{} {:?}", x.variant, x.metric);
                assert!((x.std - y.std).abs() <= 1e-5);
            }
        }
    }
}

#[test]
fn limited_adapter_marks_protocols_unsupported() {
    let cases = small_cases();
    let cmd = format!("{REFADAPTER} --supports predict,features,ablate");
    let adapter = AdapterProvider::connect(&cmd, Duration::from_secs(30)).unwrap();
    let exec = Parallel::new(1);
    let cfg = PipelineConfig {
        perturbations: vec![PerturbationSpec::dose(&[1.0])],
        ..PipelineConfig::default()
    };
    let report = run_pipeline(
        &Harness::new(&adapter, &exec),
        &cases,
        &[CamMethod::Ablation],
        &cfg,
        &GateConfig::default(),
    )
    .unwrap();
    let status = |p: &str| {
        report
            .evaluations
            .iter()
            .find(|e| e.run.protocol == p)
            .unwrap()
            .run
            .status
    };
    assert_eq!(status("fidelity/randomization"), RunStatus::NotSupported);
    assert_eq!(status("fidelity/whitebox"), RunStatus::NotSupported);
    assert_eq!(status("fidelity/single-deletion"), RunStatus::Complete);
    assert!(!report.provider_fault);
}

#[test]
fn randomized_session_is_restored_before_reuse() {
    use xaieval_core::provider::Randomization;
    use xaieval_core::refmodel::RandomizationMode;
    let adapter = AdapterProvider::connect(REFADAPTER, Duration::from_secs(10)).unwrap();
    let img = phantom::generate_case(&PhantomConfig::default(), true, 0)
        .unwrap()
        .image;
    let before = adapter.session().unwrap().predict(&img).unwrap();
    {
        let mut s = adapter.session().unwrap();
        let r = Randomization {
            mode: RandomizationMode::HeadReinit,
            sigma: 1.0,
            seed: 5,
        };
        s.randomize(Some(&r)).unwrap();
        assert_ne!(s.predict(&img).unwrap(), before);
        // Dropped while randomized.
    }
    assert_eq!(adapter.session().unwrap().predict(&img).unwrap(), before);
}
