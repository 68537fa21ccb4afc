//! Adapter that scores images with an external program.

use std::io::Read;
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use super::{IqaError, QualityScorer, Result};
use crate::imaging::Image;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
const PLACEHOLDER: &str = "{input}";

/// Writes each image to a temporary 8-bit PNG, runs `sh -c` on the command
/// template with `{input}` replaced by the quoted path, and parses one real
/// number from standard output. Calls on one instance run one at a time.
pub struct ExternalScorer {
    name: String,
    template: String,
    timeout: Duration,
    lock: Mutex<()>,
}

impl ExternalScorer {
    pub fn new(name: impl Into<String>, template: impl Into<String>, timeout: Duration) -> Result<Self> {
        let template = template.into();
        if !template.contains(PLACEHOLDER) {
            return Err(IqaError::MissingPlaceholder);
        }
        Ok(Self { name: name.into(), template, timeout, lock: Mutex::new(()) })
    }

    fn run(&self, x: &Image) -> Result<f64> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let file = tempfile::Builder::new().prefix("tidewater-score-").suffix(".png").tempfile()?;
        x.save_png(file.path())?;
        let quoted = format!("'{}'", file.path().display().to_string().replace('\'', r"'\''"));
        let cmd = self.template.replace(PLACEHOLDER, &quoted);

        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| IqaError::ProcessFailure(format!("cannot spawn `{cmd}`: {e}")))?;
        // Drain the pipes on helper threads so a chatty child cannot block on a full pipe.
        let mut stdout = child.stdout.take().expect("piped stdout");
        let mut stderr = child.stderr.take().expect("piped stderr");
        let out_reader = thread::spawn(move || {
            let mut s = String::new();
            stdout.read_to_string(&mut s).map(|_| s)
        });
        let err_reader = thread::spawn(move || {
            let mut s = String::new();
            let _ = stderr.read_to_string(&mut s);
            s
        });

        let deadline = Instant::now() + self.timeout;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                return Err(IqaError::Timeout(self.timeout));
            }
            thread::sleep(Duration::from_millis(5));
        };
        let stdout = out_reader.join().expect("stdout reader").map_err(IqaError::Io)?;
        let stderr = err_reader.join().expect("stderr reader");
        if !status.success() {
            return Err(IqaError::ProcessFailure(format!("`{cmd}` exited with {status}: {}", stderr.trim())));
        }
        let text = stdout.trim();
        let value: f64 = text.parse().map_err(|_| IqaError::UnparseableScore(text.to_string()))?;
        if !value.is_finite() {
            return Err(IqaError::UnparseableScore(text.to_string()));
        }
        Ok(value)
    }
}

impl QualityScorer for ExternalScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn deterministic(&self) -> bool {
        false
    }

    fn score(&self, x: &Image) -> Result<f64> {
        self.run(x)
    }
}
