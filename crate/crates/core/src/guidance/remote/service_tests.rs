// RemoteProvider against an in-process HTTP stub of the guidance service.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use crate::curves::init_sketch;
use crate::error::Error;
use crate::guidance::{
    decode_image, encode_image, image_guidance, video_guidance, GuidanceRequest, PromptContext, RemoteProvider,
    WireImage,
};
use crate::motion::{optimize_motion, MotionModel, Stage2Config};
use crate::projection::ViewKind;
use crate::rasterizer::RasterImage;
use crate::stage1::{optimize_structure, Stage1Config};

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Normal,
    /// Answer 503 to this many requests before behaving normally.
    Unavailable(usize),
    BadRequest,
    Garbage,
    WrongShape,
}

struct Stub {
    url: String,
    seen: Arc<Mutex<Vec<(String, Value)>>>,
    hits: Arc<AtomicUsize>,
}

fn read_request(stream: &mut TcpStream) -> Option<(String, String, Vec<u8>)> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut len = 0;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some((method, path, body))
}

fn respond(stream: &mut TcpStream, status: &str, body: &str) {
    let msg = format!(
        "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(msg.as_bytes());
}

/// Gradient is half of each input pixel, weight 0.7.
fn halve(img: &Value) -> Value {
    let wire: WireImage = serde_json::from_value(img.clone()).unwrap();
    let vals: Vec<f64> = decode_image(&wire).unwrap().iter().map(|v| 0.5 * v).collect();
    serde_json::to_value(encode_image(wire.w, wire.h, &vals)).unwrap()
}

fn spawn(mode: Mode) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let hits = Arc::new(AtomicUsize::new(0));
    let (seen2, hits2) = (seen.clone(), hits.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let seen = seen2.clone();
            let hits = hits2.clone();
            thread::spawn(move || {
                let Some((method, path, body)) = read_request(&mut stream) else {
                    return;
                };
                let n = hits.fetch_add(1, Ordering::SeqCst);
                if let Mode::Unavailable(k) = mode {
                    if n < k {
                        return respond(&mut stream, "503 Service Unavailable", "{}");
                    }
                }
                match (method.as_str(), path.as_str(), mode) {
                    (_, _, Mode::BadRequest) => respond(&mut stream, "400 Bad Request", r#"{"error":"bad"}"#),
                    (_, _, Mode::Garbage) => respond(&mut stream, "200 OK", "not json"),
                    ("GET", "/v1/health", _) => respond(
                        &mut stream,
                        "200 OK",
                        r#"{"status":"ok","image_model":"img-stub","video_model":"vid-stub"}"#,
                    ),
                    ("POST", "/v1/image_sds", _) => {
                        let req: Value = serde_json::from_slice(&body).unwrap();
                        let grad = if mode == Mode::WrongShape {
                            serde_json::to_value(encode_image(1, 1, &[0.0])).unwrap()
                        } else {
                            halve(&req["image"])
                        };
                        seen.lock().unwrap().push((path.clone(), req));
                        respond(&mut stream, "200 OK", &json!({"grad": grad, "weight": 0.7}).to_string());
                    }
                    ("POST", "/v1/video_sds", _) => {
                        let req: Value = serde_json::from_slice(&body).unwrap();
                        let grads: Vec<Value> = req["frames"].as_array().unwrap().iter().map(halve).collect();
                        seen.lock().unwrap().push((path.clone(), req));
                        respond(
                            &mut stream,
                            "200 OK",
                            &json!({"grads": grads, "weight": 0.7}).to_string(),
                        );
                    }
                    _ => respond(&mut stream, "404 Not Found", "{}"),
                }
            });
        }
    });
    Stub { url, seen, hits }
}

fn provider(stub: &Stub) -> RemoteProvider {
    let mut p = RemoteProvider::with_timeout(&stub.url, Duration::from_secs(10)).unwrap();
    p.retry_delay = Duration::from_millis(5);
    p
}

fn ramp(w: usize, h: usize) -> RasterImage {
    RasterImage::from_data(w, h, (0..w * h).map(|i| i as f64 / (w * h) as f64).collect()).unwrap()
}

fn request(frames: Vec<RasterImage>, view: Option<ViewKind>) -> GuidanceRequest {
    let mut prompt = PromptContext::new("a cat", 7.5);
    prompt.view_tag = view;
    prompt.motion_prompt = Some("a cat jumping".into());
    GuidanceRequest {
        frames,
        prompt,
        timestep: 0.5,
        seed: 42,
    }
}

#[test]
fn health_reports_models() {
    let stub = spawn(Mode::Normal);
    let h = provider(&stub).health().unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.image_model, "img-stub");
    assert_eq!(h.video_model, "vid-stub");
}

#[test]
fn image_request_round_trip() {
    let stub = spawn(Mode::Normal);
    let img = ramp(4, 3);
    let resp = image_guidance(&provider(&stub), &request(vec![img.clone()], Some(ViewKind::Front))).unwrap();
    assert_eq!(resp.weight, 0.7);
    assert_eq!((resp.grads[0].width, resp.grads[0].height), (4, 3));
    for (g, v) in resp.grads[0].data.iter().zip(&img.data) {
        assert_eq!(*g, ((0.5 * (*v as f32) as f64) as f32) as f64);
    }
    let seen = stub.seen.lock().unwrap();
    let (path, body) = &seen[0];
    assert_eq!(path, "/v1/image_sds");
    assert_eq!(body["prompt"], "A front view of a cat");
    assert_eq!(body["cfg"], 7.5);
    assert_eq!(body["t"], 0.5);
    assert_eq!(body["seed"], 42);
    assert_eq!(body["image"]["h"], 3);
    assert_eq!(body["image"]["w"], 4);
}

#[test]
fn video_request_round_trip() {
    let stub = spawn(Mode::Normal);
    let frames = vec![ramp(3, 3), ramp(3, 3), ramp(3, 3)];
    let resp = video_guidance(&provider(&stub), &request(frames, Some(ViewKind::Right))).unwrap();
    assert_eq!(resp.grads.len(), 3);
    let seen = stub.seen.lock().unwrap();
    assert_eq!(seen[0].0, "/v1/video_sds");
    assert_eq!(seen[0].1["prompt"], "a cat jumping");
    assert_eq!(seen[0].1["frames"].as_array().unwrap().len(), 3);
}

#[test]
fn server_errors_are_retried() {
    let stub = spawn(Mode::Unavailable(2));
    let resp = image_guidance(&provider(&stub), &request(vec![ramp(2, 2)], None)).unwrap();
    assert_eq!(resp.grads.len(), 1);
    assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn persistent_server_errors_give_up() {
    let stub = spawn(Mode::Unavailable(100));
    let err = image_guidance(&provider(&stub), &request(vec![ramp(2, 2)], None)).unwrap_err();
    assert!(matches!(err, Error::Transport(_)));
    assert_eq!(stub.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let stub = spawn(Mode::BadRequest);
    let err = image_guidance(&provider(&stub), &request(vec![ramp(2, 2)], None)).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
    assert_eq!(stub.hits.load(Ordering::SeqCst), 1);
}

#[test]
fn malformed_and_misshapen_responses_are_protocol_errors() {
    let stub = spawn(Mode::Garbage);
    let err = image_guidance(&provider(&stub), &request(vec![ramp(2, 2)], None)).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));

    let stub = spawn(Mode::WrongShape);
    let err = image_guidance(&provider(&stub), &request(vec![ramp(2, 2)], None)).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
}

#[test]
fn stage1_smoke_run_through_the_service() {
    let stub = spawn(Mode::Normal);
    let init = init_sketch(4, 1, 0.2, 0.001, 0.01).unwrap();
    let mut cfg = Stage1Config::with_image_size(32, 10);
    cfg.prompt = "a cat".into();
    cfg.top_view_prob = 0.0;
    let out = optimize_structure(&init, &provider(&stub), &cfg).unwrap();
    assert_eq!(out.trace.len(), 10);
    assert!(out.trace.rows.iter().all(|r| r.is_finite()));
    assert_eq!(stub.seen.lock().unwrap().len(), 40);
}

#[test]
fn stage2_smoke_run_through_the_service() {
    let stub = spawn(Mode::Normal);
    let base = init_sketch(2, 1, 0.2, 0.001, 0.01).unwrap();
    let mut cfg = Stage2Config::with_iters(2);
    cfg.frames = 3;
    cfg.image_size = 16;
    cfg.hidden = 8;
    let out = optimize_motion(&base, MotionModel::new(2, 8, 0), &provider(&stub), &cfg).unwrap();
    assert_eq!(out.trace.len(), 2);
    assert_eq!(stub.seen.lock().unwrap().len(), 4);
}
