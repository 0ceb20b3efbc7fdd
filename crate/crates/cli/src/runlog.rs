//! Logger writing human-readable lines to stderr and JSON lines to the run's
//! `run.log.jsonl`.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use log::{Level, LevelFilter, Log, Metadata, Record};

pub struct RunLogger {
    level: LevelFilter,
    subcommand: &'static str,
    file: Mutex<Option<File>>,
}

impl RunLogger {
    /// Installs the logger; the JSON sink is attached later with [`attach`].
    pub fn install(subcommand: &'static str, verbose: bool) -> &'static RunLogger {
        let level = match std::env::var("RUST_LOG").ok().as_deref() {
            Some("trace") => LevelFilter::Trace,
            Some("debug") => LevelFilter::Debug,
            Some("warn") => LevelFilter::Warn,
            Some("error") => LevelFilter::Error,
            _ if verbose => LevelFilter::Debug,
            _ => LevelFilter::Info,
        };
        let logger: &'static RunLogger = Box::leak(Box::new(RunLogger { level, subcommand, file: Mutex::new(None) }));
        if log::set_logger(logger).is_ok() {
            log::set_max_level(level);
        }
        logger
    }

    pub fn attach(&self, path: &Path) -> std::io::Result<()> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        *self.file.lock().expect("log sink lock") = Some(f);
        Ok(())
    }

    /// Writes a structured event to the JSON sink only.
    pub fn event(&self, event: &str, fields: serde_json::Value) {
        self.write_json(serde_json::json!({
            "ts": now(),
            "subcommand": self.subcommand,
            "event": event,
            "fields": fields,
        }));
    }

    fn write_json(&self, v: serde_json::Value) {
        if let Some(f) = self.file.lock().expect("log sink lock").as_mut() {
            let _ = writeln!(f, "{v}");
        }
    }
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

impl Log for RunLogger {
    fn enabled(&self, m: &Metadata) -> bool {
        m.level() <= self.level
    }

    fn log(&self, r: &Record) {
        if !self.enabled(r.metadata()) {
            return;
        }
        let level = r.level();
        let tag = match level {
            Level::Error => "error",
            Level::Warn => "warn",
            Level::Info => "info",
            Level::Debug => "debug",
            Level::Trace => "trace",
        };
        eprintln!("[{tag}] {}", r.args());
        self.write_json(serde_json::json!({
            "ts": now(),
            "subcommand": self.subcommand,
            "level": tag,
            "target": r.target(),
            "message": r.args().to_string(),
        }));
    }

    fn flush(&self) {
        if let Some(f) = self.file.lock().expect("log sink lock").as_mut() {
            let _ = f.flush();
        }
    }
}
