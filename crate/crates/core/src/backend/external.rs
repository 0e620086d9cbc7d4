use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use image::RgbImage;
use parking_lot::Mutex;
use tracing::warn;

use super::protocol::{self, Request, ResponseHeader};
use super::{BackendConfig, BackendKind, LabelMask, TrainingHyperparams};
use crate::error::{Error, Result};

type Frame = Result<Option<(Vec<u8>, Vec<u8>)>>;

struct Worker {
    child: Child,
    stdin: ChildStdin,
    frames: Receiver<Frame>,
}

impl Worker {
    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

enum Attempt {
    Done(LabelMask),
    /// The process crashed or stalled; worth another try on a fresh process.
    Retry(String),
    Fatal(Error),
}

/// Pool of long-lived external processes, one per concurrent caller.
pub struct ExternalBackend {
    cfg: BackendConfig,
    command: Vec<String>,
    working_dir: Option<PathBuf>,
    timeout: Duration,
    retries: u32,
    idle: Mutex<Vec<Worker>>,
}

impl ExternalBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self> {
        let BackendKind::External {
            command,
            working_dir,
            timeout_secs,
            retries,
        } = &cfg.kind
        else {
            return Err(Error::BackendConfig("not an external backend".into()));
        };
        Ok(ExternalBackend {
            command: command.clone(),
            working_dir: working_dir.clone(),
            timeout: Duration::from_secs_f64(*timeout_secs),
            retries: *retries,
            idle: Mutex::new(Vec::new()),
            cfg,
        })
    }

    pub fn command(&self) -> &[String] {
        &self.command
    }

    pub fn classes(&self) -> u8 {
        self.cfg.classes()
    }

    fn spawn_child(&self) -> Result<Child> {
        let mut cmd = Command::new(&self.command[0]);
        cmd.args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        if let Some(dir) = &self.working_dir {
            cmd.current_dir(dir);
        }
        cmd.spawn()
            .map_err(|e| Error::Process(format!("spawning {:?}: {e}", self.command)))
    }

    fn spawn_worker(&self) -> Result<Worker> {
        let mut child = self.spawn_child()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || loop {
            let frame = protocol::read_frame(&mut stdout);
            let stop = !matches!(frame, Ok(Some(_)));
            if tx.send(frame).is_err() || stop {
                break;
            }
        });
        Ok(Worker {
            child,
            stdin,
            frames: rx,
        })
    }

    fn attempt(&self, worker: &mut Worker, request: &[u8], tile: &RgbImage) -> Attempt {
        if let Err(e) = worker
            .stdin
            .write_all(request)
            .and_then(|_| worker.stdin.flush())
        {
            return Attempt::Retry(format!("writing request: {e}"));
        }
        match worker.frames.recv_timeout(self.timeout) {
            Ok(Ok(Some((head, body)))) => match protocol::decode_mask_response(&head, body) {
                Ok(mask) if (mask.width, mask.height) != tile.dimensions() => {
                    Attempt::Fatal(Error::Protocol(format!(
                        "mask is {}x{}, tile is {}x{}",
                        mask.width,
                        mask.height,
                        tile.width(),
                        tile.height()
                    )))
                }
                Ok(mask) if mask.classes != self.classes() => {
                    Attempt::Fatal(Error::ClassMismatch {
                        expected: self.classes(),
                        got: mask.classes,
                    })
                }
                Ok(mask) => Attempt::Done(mask),
                Err(e) => Attempt::Fatal(e),
            },
            Ok(Ok(None)) => Attempt::Retry("process exited".into()),
            Ok(Err(e)) => Attempt::Fatal(e),
            Err(RecvTimeoutError::Timeout) => Attempt::Retry(format!(
                "timed out after {:.1}s",
                self.timeout.as_secs_f64()
            )),
            Err(RecvTimeoutError::Disconnected) => Attempt::Retry("process exited".into()),
        }
    }

    /// Runs inference on one tile, retrying crashed or stalled processes.
    pub fn infer(&self, tile: &RgbImage, origin: (u32, u32)) -> Result<LabelMask> {
        let request = protocol::encode_infer_request(tile);
        let tile_err = |reason: String| Error::BackendTile {
            x: origin.0,
            y: origin.1,
            reason,
        };
        let mut last = String::new();
        for attempt in 0..=self.retries {
            let pooled = self.idle.lock().pop();
            let mut worker = match pooled {
                Some(w) => w,
                None => self.spawn_worker().map_err(|e| tile_err(e.to_string()))?,
            };
            match self.attempt(&mut worker, &request, tile) {
                Attempt::Done(mask) => {
                    self.idle.lock().push(worker);
                    return Ok(mask);
                }
                Attempt::Fatal(e) => {
                    worker.kill();
                    return Err(tile_err(e.to_string()));
                }
                Attempt::Retry(reason) => {
                    warn!(x = origin.0, y = origin.1, attempt, %reason, "external backend failed, restarting");
                    worker.kill();
                    last = reason;
                }
            }
        }
        Err(tile_err(format!("{last} (after {} retries)", self.retries)))
    }

    /// Starts a fresh process in train mode and waits for it to finish.
    pub fn train(&self, manifest: &Path, hp: &TrainingHyperparams) -> Result<PathBuf> {
        let mut child = self.spawn_child()?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");
        let req = Request::Train {
            manifest: manifest.to_string_lossy().into_owned(),
            hp: hp.clone(),
        };
        protocol::write_frame(&mut stdin, &req, &[])
            .map_err(|e| Error::Process(format!("sending train request: {e}")))?;
        drop(stdin);
        let frame = protocol::read_frame(&mut stdout);
        let status = child
            .wait()
            .map_err(|e| Error::Process(format!("waiting for trainer: {e}")))?;
        if !status.success() {
            return Err(Error::Process(format!("trainer exited with {status}")));
        }
        let (head, _) = frame?.ok_or_else(|| Error::Protocol("trainer sent no response".into()))?;
        let h: ResponseHeader = protocol::parse_header(&head)?;
        if let Some(e) = h.error {
            return Err(Error::Process(e));
        }
        let model = h
            .model
            .ok_or_else(|| Error::Protocol("train response has no model path".into()))?;
        let mut path = PathBuf::from(model);
        if path.is_relative() {
            if let Some(dir) = &self.working_dir {
                path = dir.join(path);
            }
        }
        if !path.exists() {
            return Err(Error::Process(format!(
                "missing output model {}",
                path.display()
            )));
        }
        Ok(path)
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        for w in self.idle.lock().drain(..) {
            w.kill();
        }
    }
}
