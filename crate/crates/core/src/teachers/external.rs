//! Teacher running in a child process, spoken to with one JSON object per
//! line over its stdin/stdout:
//!
//! ```text
//! -> {"cmd":"init","video":"<id>","box":[x,y,w,h],"frame":"<path>"}
//! <- {"ok":true}
//! -> {"cmd":"predict","frame":"<path>"}
//! <- {"box":[x,y,w,h]}
//! ```
//!
//! Every reply must arrive within [`EXTERNAL_TIMEOUT`]. Anything else is a
//! teacher failure; the caller is expected to abort.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use serde_json::{json, Value};

use super::{FrameInput, SessionCursor, Teacher, TeacherSession};
use crate::environment::dataset::{frame_file_name, write_ppm};
use crate::environment::Video;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub const EXTERNAL_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Clone, Debug)]
pub struct ExternalTeacher {
    id: String,
    program: PathBuf,
    args: Vec<String>,
    timeout: Duration,
}

impl ExternalTeacher {
    pub fn new(id: impl Into<String>, program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            id: id.into(),
            program: program.into(),
            args,
            timeout: EXTERNAL_TIMEOUT,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl Teacher for ExternalTeacher {
    fn id(&self) -> &str {
        &self.id
    }

    fn session(&self, _video: &Video) -> Result<Box<dyn TeacherSession>> {
        let fail = |message: String| Error::Teacher {
            teacher: self.id.clone(),
            message,
        };
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| fail(format!("spawning {}: {e}", self.program.display())))?;
        let stdin = child.stdin.take().ok_or_else(|| fail("no stdin pipe".into()))?;
        let stdout = child.stdout.take().ok_or_else(|| fail("no stdout pipe".into()))?;
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) | Err(_) => break,
                    Ok(_) => {
                        if tx.send(line).is_err() {
                            break;
                        }
                    }
                }
            }
        });
        Ok(Box::new(ExternalSession {
            id: self.id.clone(),
            child,
            stdin,
            replies: rx,
            timeout: self.timeout,
            spill: None,
            cursor: SessionCursor::default(),
        }))
    }
}

struct ExternalSession {
    id: String,
    child: Child,
    stdin: ChildStdin,
    replies: Receiver<String>,
    timeout: Duration,
    /// Holds frames written out for videos that have no files on disk.
    spill: Option<tempfile::TempDir>,
    cursor: SessionCursor,
}

impl ExternalSession {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Teacher {
            teacher: self.id.clone(),
            message: message.into(),
        }
    }

    fn frame_path(&mut self, input: &FrameInput<'_>) -> Result<PathBuf> {
        if let Some(p) = input.path {
            return Ok(p.to_path_buf());
        }
        if self.spill.is_none() {
            let dir = tempfile::tempdir().map_err(|e| Error::io("creating frame spill dir", e))?;
            self.spill = Some(dir);
        }
        let dir: &Path = self.spill.as_ref().map(|d| d.path()).expect("spill dir");
        let path = dir.join(frame_file_name(input.index));
        write_ppm(&path, input.frame)?;
        Ok(path)
    }

    fn exchange(&mut self, msg: Value) -> Result<Value> {
        let line = msg.to_string();
        let sent = self
            .stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.write_all(b"\n"))
            .and_then(|_| self.stdin.flush());
        if let Err(e) = sent {
            return Err(self.fail(format!("write failed: {e}")));
        }
        let reply = match self.replies.recv_timeout(self.timeout) {
            Ok(r) => r,
            Err(RecvTimeoutError::Timeout) => {
                return Err(self.fail(format!("no reply within {:?}", self.timeout)))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(self.fail("process closed its output"))
            }
        };
        serde_json::from_str(reply.trim())
            .map_err(|e| self.fail(format!("malformed reply `{}`: {e}", reply.trim())))
    }
}

fn parse_box_reply(v: &Value) -> Option<BoundingBox> {
    let obj = v.as_object()?;
    if obj.len() != 1 {
        return None;
    }
    let arr = obj.get("box")?.as_array()?;
    if arr.len() != 4 {
        return None;
    }
    let mut out = [0.0; 4];
    for (slot, x) in out.iter_mut().zip(arr) {
        *slot = x.as_f64()?;
    }
    let b = BoundingBox::from(out);
    b.is_valid().then_some(b)
}

impl TeacherSession for ExternalSession {
    fn id(&self) -> &str {
        &self.id
    }

    fn init(&mut self, input: FrameInput<'_>, g0: BoundingBox) -> Result<()> {
        if self.cursor.current().is_some() {
            return Err(Error::Protocol(format!("teacher `{}` initialized twice", self.id)));
        }
        let path = self.frame_path(&input)?;
        let reply = self.exchange(json!({
            "cmd": "init",
            "video": input.video_id,
            "box": g0.to_array(),
            "frame": path.to_string_lossy(),
        }))?;
        if reply != json!({"ok": true}) {
            return Err(self.fail(format!("unexpected init reply {reply}")));
        }
        self.cursor.init(&self.id, &input, g0)
    }

    fn predict(&mut self, input: FrameInput<'_>) -> Result<BoundingBox> {
        self.cursor.check_predict(&self.id, &input)?;
        let path = self.frame_path(&input)?;
        let reply = self.exchange(json!({
            "cmd": "predict",
            "frame": path.to_string_lossy(),
        }))?;
        let b = parse_box_reply(&reply)
            .ok_or_else(|| self.fail(format!("unexpected predict reply {reply}")))?;
        self.cursor.advance(b);
        Ok(b)
    }

    fn current(&self) -> Option<BoundingBox> {
        self.cursor.current()
    }
}

impl Drop for ExternalSession {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
