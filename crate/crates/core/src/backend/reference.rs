//! Reference process speaking the external backend protocol on stdio, for
//! testing and as a template for real backends.
//!
//! ```text
//! <binary> [--mode builtin|zeros|crash|crash-once|hang|garbage|wrong-size]
//!                   [--classes K] [--confidence C] [--delay-ms N]
//!                   [--marker PATH] [--fail-train]
//! ```
//!
//! `builtin` applies the default threshold rules; the other modes exist to
//! exercise failure handling. `crash-once` crashes on its first request when
//! `--marker` does not exist yet, creating it.

use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use image::RgbImage;

use super::protocol::{self, Request, ResponseHeader};
use super::{segment_builtin, BackendConfig, BackendKind, LabelMask};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Builtin,
    Zeros,
    Crash,
    CrashOnce,
    Hang,
    Garbage,
    WrongSize,
}

struct Opts {
    mode: Mode,
    classes: u8,
    confidence: Option<f32>,
    delay: Duration,
    marker: Option<PathBuf>,
    fail_train: bool,
}

fn parse_args(args: impl IntoIterator<Item = String>) -> Result<Opts, String> {
    let mut o = Opts {
        mode: Mode::Builtin,
        classes: 2,
        confidence: None,
        delay: Duration::ZERO,
        marker: None,
        fail_train: false,
    };
    let mut args = args.into_iter();
    while let Some(a) = args.next() {
        let mut val = || args.next().ok_or_else(|| format!("{a} needs a value"));
        match a.as_str() {
            "--mode" => {
                o.mode = match val()?.as_str() {
                    "builtin" => Mode::Builtin,
                    "zeros" => Mode::Zeros,
                    "crash" => Mode::Crash,
                    "crash-once" => Mode::CrashOnce,
                    "hang" => Mode::Hang,
                    "garbage" => Mode::Garbage,
                    "wrong-size" => Mode::WrongSize,
                    m => return Err(format!("unknown mode {m}")),
                }
            }
            "--classes" => o.classes = val()?.parse().map_err(|e| format!("--classes: {e}"))?,
            "--confidence" => o.confidence = Some(val()?.parse().map_err(|e| format!("--confidence: {e}"))?),
            "--delay-ms" => o.delay = Duration::from_millis(val()?.parse().map_err(|e| format!("--delay-ms: {e}"))?),
            "--marker" => o.marker = Some(PathBuf::from(val()?)),
            "--fail-train" => o.fail_train = true,
            _ => return Err(format!("unknown argument {a}")),
        }
    }
    Ok(o)
}

fn infer(o: &Opts, w: u32, h: u32, pixels: Vec<u8>) -> LabelMask {
    let mut mask = match o.mode {
        Mode::Builtin => {
            let tile = RgbImage::from_raw(w, h, pixels).expect("pixel count checked");
            let BackendKind::Builtin { rules } = BackendConfig::default().kind else {
                unreachable!("default config is builtin")
            };
            let mut m = segment_builtin(&tile, &rules, o.classes.max(2));
            m.classes = o.classes;
            m
        }
        _ => LabelMask::background(w, h, o.classes),
    };
    if let Some(c) = o.confidence {
        mask.confidence = Some(vec![c; (w * h) as usize]);
    }
    mask
}

fn train(o: &Opts, manifest: &str, hp: &impl serde::Serialize) -> io::Result<ResponseHeader> {
    if o.fail_train {
        std::process::exit(3);
    }
    let dir = Path::new(manifest).parent().unwrap_or(Path::new("."));
    let model = dir.join("model.sentinel");
    std::fs::write(&model, serde_json::to_vec(hp).expect("hyperparameters serialize"))?;
    Ok(ResponseHeader {
        model: Some(model.to_string_lossy().into_owned()),
        ..Default::default()
    })
}

fn serve(o: &Opts) -> Result<(), String> {
    let mut input = BufReader::new(io::stdin().lock());
    let mut out = BufWriter::new(io::stdout().lock());
    let mut first = true;
    while let Some((head, body)) = protocol::read_frame(&mut input).map_err(|e| e.to_string())? {
        let crash_now = match o.mode {
            Mode::Crash => true,
            Mode::CrashOnce if first => match &o.marker {
                Some(m) if !m.exists() => {
                    std::fs::write(m, b"crashed").map_err(|e| e.to_string())?;
                    true
                }
                _ => false,
            },
            _ => false,
        };
        first = false;
        if crash_now {
            std::process::exit(101);
        }
        if o.mode == Mode::Hang {
            std::thread::sleep(Duration::from_secs(3600));
        }
        std::thread::sleep(o.delay);
        let reply = match protocol::parse_header::<Request>(&head) {
            Ok(Request::Infer { w, h, c }) if c == 3 && body.len() == (w * h * 3) as usize => match o.mode {
                Mode::Garbage => {
                    out.write_all(&[3, 0, 0, 0, b'{', b'x', b'\n']).map_err(|e| e.to_string())?;
                    out.flush().map_err(|e| e.to_string())?;
                    continue;
                }
                Mode::WrongSize => protocol::encode_mask_response(&LabelMask::background(w + 1, h, o.classes)),
                _ => protocol::encode_mask_response(&infer(o, w, h, body)),
            },
            Ok(Request::Infer { w, h, c }) => protocol::encode_frame(
                &ResponseHeader {
                    error: Some(format!("bad infer request {w}x{h}x{c} with {} bytes", body.len())),
                    ..Default::default()
                },
                &[],
            ),
            Ok(Request::Train { manifest, hp }) => {
                let h = train(o, &manifest, &hp).map_err(|e| e.to_string())?;
                protocol::encode_frame(&h, &[])
            }
            Err(e) => protocol::encode_frame(
                &ResponseHeader {
                    error: Some(e.to_string()),
                    ..Default::default()
                },
                &[],
            ),
        };
        out.write_all(&reply).map_err(|e| e.to_string())?;
        out.flush().map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// Runs the reference backend with `args` (program name excluded) until
/// stdin closes.
pub fn run(args: impl IntoIterator<Item = String>) -> ExitCode {
    let opts = match parse_args(args) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("reference_backend: {e}");
            return ExitCode::from(2);
        }
    };
    match serve(&opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("reference_backend: {e}");
            ExitCode::FAILURE
        }
    }
}
