use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gje_core::genfun::ConstantsLedger;
use serde::Serialize;
use serde_json::json;

/// A nonzero exit with its message and optional structured detail.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
    pub detail: Option<serde_json::Value>,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into(), detail: None }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(1, message)
    }

    pub fn with_detail(mut self, detail: serde_json::Value) -> Self {
        self.detail = Some(detail);
        self
    }
}

pub type CmdResult = Result<(), Failure>;

/// The output directory of one command run.
pub struct Out {
    dir: PathBuf,
    command: &'static str,
}

impl Out {
    pub fn open(dir: &Path, command: &'static str) -> Result<Self, Failure> {
        fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("cannot create {}: {e}", dir.display())))?;
        let _ = fs::remove_file(dir.join("error.json"));
        Ok(Self { dir: dir.to_path_buf(), command })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> CmdResult {
        fs::write(self.path(name), text).map_err(|e| Failure::usage(format!("cannot write {name}: {e}")))
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> CmdResult {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::usage(format!("cannot encode {name}: {e}")))?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn load_ledger(&self) -> Result<ConstantsLedger, Failure> {
        let path = self.path("ledger.json");
        if !path.exists() {
            return Ok(ConstantsLedger::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Failure::usage(format!("cannot read ledger: {e}")))?;
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("malformed ledger.json: {e}")))
    }

    pub fn save_ledger(&self, ledger: &ConstantsLedger) -> CmdResult {
        self.write_json("ledger.json", ledger)
    }

    /// Wall-clock data lives here so the reports stay byte-stable.
    pub fn write_meta(&self, code: i32) {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let meta = json!({
            "command": self.command,
            "exit_code": code,
            "finished_unix": secs,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let _ = self.write_json(&format!("{}.meta.json", self.command), &meta);
    }

    pub fn write_error(&self, failure: &Failure) {
        let body = json!({
            "command": self.command,
            "code": failure.code,
            "error": failure.message,
            "detail": failure.detail,
        });
        let _ = self.write_json("error.json", &body);
    }
}
