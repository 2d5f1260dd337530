use std::io::Write;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{Map, Value};

/// Shared JSON-lines writer; each record gets a `ts` field (Unix seconds).
#[derive(Clone)]
pub struct JsonLog(Arc<Mutex<Box<dyn Write + Send>>>);

impl std::fmt::Debug for JsonLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("JsonLog")
    }
}

impl JsonLog {
    pub fn new(out: impl Write + Send + 'static) -> Self {
        Self(Arc::new(Mutex::new(Box::new(out))))
    }

    pub fn stdout() -> Self {
        Self::new(std::io::stdout())
    }

    /// Appends to `path`, creating it if needed.
    pub fn append_to(path: &std::path::Path) -> std::io::Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::new(f))
    }

    pub fn write(&self, fields: Map<String, Value>) {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let mut record = Map::new();
        record.insert("ts".into(), ts.into());
        record.extend(fields);
        let line = Value::Object(record).to_string();
        // logging must never take a request down
        if let Ok(mut out) = self.0.lock() {
            let _ = writeln!(out, "{line}");
            let _ = out.flush();
        }
    }
}
