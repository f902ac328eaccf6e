use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rs3mamba::{Error, ErrorCategory};
use sha2::{Digest, Sha256};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_FORMAT: u8 = 3;
pub const EXIT_SHAPE: u8 = 4;
pub const EXIT_CHECK: u8 = 5;

pub fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Io | ErrorCategory::Format => EXIT_FORMAT,
        ErrorCategory::Shape | ErrorCategory::Config | ErrorCategory::Numeric => EXIT_SHAPE,
    }
}

pub fn digest(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Summary of one invocation. Results go to stdout; the report goes to
/// stderr exactly once.
#[derive(Debug)]
pub struct RunReport {
    pub command: &'static str,
    pub config_digest: Option<String>,
    pub phases: Vec<(&'static str, Duration)>,
    pub outputs: Vec<PathBuf>,
    pub stdout: String,
    pub failure: Option<(u8, String)>,
}

impl RunReport {
    pub fn new(command: &'static str) -> Self {
        RunReport {
            command,
            config_digest: None,
            phases: Vec::new(),
            outputs: Vec::new(),
            stdout: String::new(),
            failure: None,
        }
    }

    pub fn failed(command: &'static str, e: Error) -> Self {
        let mut r = Self::new(command);
        r.failure = Some((exit_code(&e), format!("{} error: {e}", e.category())));
        r
    }

    /// Run `f`, recording its wall time under `name`.
    pub fn phase<R>(&mut self, name: &'static str, f: impl FnOnce() -> R) -> R {
        let t0 = Instant::now();
        let out = f();
        self.phases.push((name, t0.elapsed()));
        out
    }

    pub fn emit(self) -> ExitCode {
        print!("{}", self.stdout);
        let mut lines = vec![format!("[report] command: {}", self.command)];
        if let Some(d) = &self.config_digest {
            lines.push(format!("[report] config: sha256:{d}"));
        }
        for (name, t) in &self.phases {
            lines.push(format!("[report] phase {name}: {:.3} ms", t.as_secs_f64() * 1e3));
        }
        for p in &self.outputs {
            lines.push(format!("[report] wrote {}", p.display()));
        }
        let code = match &self.failure {
            Some((code, msg)) => {
                lines.push(format!("[report] status: failed ({msg})"));
                *code
            }
            None => {
                lines.push("[report] status: ok".to_string());
                EXIT_OK
            }
        };
        eprintln!("{}", lines.join("\n"));
        ExitCode::from(code)
    }
}
