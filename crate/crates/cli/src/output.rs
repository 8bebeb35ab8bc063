//! Artifact writing: JSON with full-precision floats, atomic file placement.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::Serialize;

/// Prints every float with 17 significant digits so a round trip through
/// text reproduces the exact bits.
struct PreciseFormatter;

impl serde_json::ser::Formatter for PreciseFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

pub fn to_json_precise<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PreciseFormatter);
    value.serialize(&mut ser)?;
    let mut text = String::from_utf8(buf).expect("serde_json emits UTF-8");
    text.push('\n');
    Ok(text)
}

/// Writes through a sibling temp file and renames, so a crash never leaves a
/// half-written artifact under the final name.
pub fn write_atomic(dir: &Path, name: &str, contents: &str) -> io::Result<()> {
    let tmp = dir.join(format!("{name}.part"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, dir.join(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Sample {
        value: f64,
        count: usize,
        label: String,
    }

    #[test]
    fn json_floats_round_trip() {
        let s = Sample {
            value: (0.1_f64).sin(),
            count: 3,
            label: "x".into(),
        };
        let text = to_json_precise(&s).unwrap();
        let back: serde_json::Value = serde_json::from_str(&text).unwrap();
        let v = back["value"].as_f64().unwrap();
        assert_eq!(v.to_bits(), (0.1_f64).sin().to_bits());
        assert_eq!(back["count"].as_u64(), Some(3));
    }

    #[test]
    fn atomic_write_replaces_only_on_success() {
        let dir = std::env::temp_dir().join(format!("hfcli-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        write_atomic(&dir, "a.json", "{}\n").unwrap();
        assert_eq!(fs::read_to_string(dir.join("a.json")).unwrap(), "{}\n");
        assert!(!dir.join("a.json.part").exists());
        fs::remove_dir_all(&dir).unwrap();
    }
}
