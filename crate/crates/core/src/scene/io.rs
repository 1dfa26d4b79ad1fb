//! JSON-lines scenario files, one scene per line. An optional first line of the
//! form `{"header": {...}}` carries provenance and is skipped on read.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::types::Scene;
use crate::error::{Error, Result};

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    write_scenes_with_header(path, None, scenes)
}

pub fn write_scenes_with_header(path: &Path, header: Option<&serde_json::Value>, scenes: &[Scene]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if let Some(h) = header {
        serde_json::to_writer(&mut w, &serde_json::json!({ "header": h }))?;
        w.write_all(b"\n")?;
    }
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// True for a `{"header": ...}` provenance line.
pub fn is_header_line(line: &str) -> bool {
    line.trim_start().starts_with("{\"header\":")
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || (i == 0 && is_header_line(&line)) {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        scene.validate()?;
        out.push(scene);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_dataset, GeneratorConfig};

    #[test]
    fn round_trip_with_and_without_header() {
        let scenes = generate_dataset(&GeneratorConfig::default(), 3, 2).unwrap();
        let dir = std::env::temp_dir().join(format!("mtr-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let plain = dir.join("plain.jsonl");
        let tagged = dir.join("tagged.jsonl");
        write_scenes(&plain, &scenes).unwrap();
        write_scenes_with_header(&tagged, Some(&serde_json::json!({"seed": 3})), &scenes).unwrap();
        assert_eq!(read_scenes(&plain).unwrap(), scenes);
        assert_eq!(read_scenes(&tagged).unwrap(), scenes);
        let first = std::fs::read_to_string(&tagged).unwrap();
        assert!(first.starts_with("{\"header\":{\"seed\":3}}\n"));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
