//! Output files: atomic writes, fixed-precision JSON, provenance headers.

use std::io::{self, Write};
use std::path::Path;

use driftlab_core::summary::format_g;
use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const TOOL: &str = "driftlab";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const JSON_DIGITS: usize = 17;

/// Tool, version and the configuration that produced an output.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub config: RunConfig,
}

impl Provenance {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            tool: TOOL.into(),
            version: VERSION.into(),
            config_sha256: config.hash(),
            config: config.clone(),
        }
    }

    /// Single `#` comment line for CSV and text outputs.
    pub fn comment_line(&self) -> String {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        format!("# {} {} config_sha256={} config={config}\n", self.tool, self.version, self.config_sha256)
    }
}

/// Write through a temporary file in the destination directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| CliError::io(parent, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    // Temporary files are private; outputs are ordinary files.
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(std::fs::Permissions::from_mode(0o644))
            .map_err(|e| CliError::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Pretty JSON with every float printed to 17 significant digits, which
/// round-trips exactly and is identical across runs.
pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FixedDigits(PrettyFormatter::new()));
    value.serialize(&mut ser).expect("report serializes");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, &to_json(value))
}

struct FixedDigits<'a>(PrettyFormatter<'a>);

impl Formatter for FixedDigits<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(json_number(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// `%.17g`; integral values keep a trailing `.0` so they stay floats.
fn json_number(x: f64) -> String {
    let s = format_g(x, JSON_DIGITS);
    if s.contains(['.', 'e']) {
        s
    } else {
        format!("{s}.0")
    }
}

/// Number cell for CSV output.
pub fn csv_number(x: f64, digits: usize) -> String {
    format_g(x, digits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_use_seventeen_digits_and_round_trip() {
        let v = serde_json::json!({"a": 0.1, "b": [1.0, -2.5e-300, 12345678.9], "c": 3, "d": null});
        let text = String::from_utf8(to_json(&v)).unwrap();
        assert!(text.contains("0.10000000000000001"), "{text}");
        assert!(text.contains("1.0,"), "{text}");
        assert!(text.contains("\"c\": 3"), "{text}");
        let back: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn non_finite_becomes_null() {
        let text = String::from_utf8(to_json(&vec![f64::NAN, 1.0])).unwrap();
        assert!(text.contains("null"));
    }

    #[test]
    fn atomic_write_replaces_and_creates_parents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
        let leftovers = std::fs::read_dir(p.parent().unwrap()).unwrap().count();
        assert_eq!(leftovers, 1);
    }

    #[test]
    fn comment_line_carries_version_and_hash() {
        let cfg = RunConfig::default();
        let line = Provenance::new(&cfg).comment_line();
        assert!(line.starts_with("# driftlab "));
        assert!(line.contains(&cfg.hash()));
        assert!(line.ends_with("config={}\n"));
    }
}
