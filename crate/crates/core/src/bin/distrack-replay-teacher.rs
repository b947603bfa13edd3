//! Reference external teacher: replays `<traces>/<video_id>.csv` over the
//! line-delimited JSON teacher protocol on stdin/stdout.
//!
//! usage: distrack-replay-teacher --traces <dir> [--fault hang|garbage|exit|bad-ack]

use std::io::{BufRead, Write};
use std::path::PathBuf;

use distrack_core::environment::dataset::read_box_file;
use serde_json::{json, Value};

fn main() {
    let mut traces = None;
    let mut fault = None;
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        match a.as_str() {
            "--traces" => traces = args.next().map(PathBuf::from),
            "--fault" => fault = args.next(),
            other => {
                eprintln!("unknown argument {other}");
                std::process::exit(1);
            }
        }
    }
    let Some(traces) = traces else {
        eprintln!("usage: distrack-replay-teacher --traces <dir> [--fault <kind>]");
        std::process::exit(1);
    };

    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    let mut boxes = Vec::new();
    let mut next = 0usize;
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        let Ok(msg) = serde_json::from_str::<Value>(&line) else {
            eprintln!("bad request: {line}");
            std::process::exit(2);
        };
        let reply = match msg["cmd"].as_str() {
            Some("init") => {
                let video = msg["video"].as_str().unwrap_or_default();
                match read_box_file(&traces.join(format!("{video}.csv"))) {
                    Ok(b) => boxes = b,
                    Err(e) => {
                        eprintln!("{e}");
                        std::process::exit(2);
                    }
                }
                next = 1;
                if fault.as_deref() == Some("bad-ack") {
                    json!({"ok": false})
                } else {
                    json!({"ok": true})
                }
            }
            Some("predict") => {
                match fault.as_deref() {
                    Some("hang") => loop {
                        std::thread::sleep(std::time::Duration::from_secs(60));
                    },
                    Some("exit") => std::process::exit(0),
                    Some("garbage") => {
                        let _ = writeln!(out, "not json");
                        let _ = out.flush();
                        continue;
                    }
                    _ => {}
                }
                let b = boxes.get(next).copied();
                next += 1;
                match b {
                    Some(b) => json!({"box": [b.x, b.y, b.w, b.h]}),
                    None => json!({"error": "trace exhausted"}),
                }
            }
            _ => json!({"error": "unknown command"}),
        };
        if writeln!(out, "{reply}").and_then(|_| out.flush()).is_err() {
            break;
        }
    }
}
