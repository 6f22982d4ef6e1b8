//! Line-delimited JSON logging on stderr.

use std::io::Write;
use std::time::Instant;

use log::{Level, LevelFilter, Log, Metadata, Record};
use serde_json::{json, Value};

struct JsonLogger {
    level: LevelFilter,
}

impl Log for JsonLogger {
    fn enabled(&self, metadata: &Metadata) -> bool {
        metadata.level() <= self.level
    }

    fn log(&self, record: &Record) {
        if !self.enabled(record.metadata()) {
            return;
        }
        let line = json!({
            "event": "log",
            "level": record.level().as_str().to_ascii_lowercase(),
            "target": record.target(),
            "message": record.args().to_string(),
        });
        write_line(&line);
    }

    fn flush(&self) {
        let _ = std::io::stderr().flush();
    }
}

fn write_line(v: &Value) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{v}");
}

pub fn init(level: LevelFilter) {
    if log::set_boxed_logger(Box::new(JsonLogger { level })).is_ok() {
        log::set_max_level(level);
    }
}

/// Times one pipeline stage and reports it with its counters when finished.
pub struct Stage {
    name: String,
    started: Instant,
}

impl Stage {
    pub fn start(name: impl Into<String>) -> Stage {
        Stage {
            name: name.into(),
            started: Instant::now(),
        }
    }

    pub fn finish(self, counters: Value) {
        if log::log_enabled!(Level::Info) {
            write_line(&json!({
                "event": "stage",
                "stage": self.name,
                "duration_ms": self.started.elapsed().as_secs_f64() * 1e3,
                "counters": counters,
            }));
        }
    }
}
