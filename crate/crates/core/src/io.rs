//! Line-delimited JSON datasets and atomic file output.
//!
//! Every dataset file starts with a header line
//! `{"kind":"header","format":...,"version":...,"env":...}` followed by one
//! JSON record per line.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::env::{Env, Trajectory};
use crate::error::{Error, Result};
use crate::preference::PreferenceRecord;

pub const FORMAT_VERSION: u32 = 1;
pub const TRAJECTORIES: &str = "trajectories";
pub const PREFERENCES: &str = "preferences";
pub const RELABELED: &str = "relabeled";
/// Environment variable naming the directory relative paths resolve against.
pub const DATA_ROOT_VAR: &str = "PTLAB_DATA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub format: String,
    pub version: u32,
    pub env: Env,
    /// Format-specific metadata.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

impl Header {
    pub fn new(format: &str, env: &Env) -> Self {
        Self {
            kind: "header".into(),
            format: format.into(),
            version: FORMAT_VERSION,
            env: env.clone(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn with_meta(mut self, meta: impl Serialize) -> Result<Self> {
        self.meta = serde_json::to_value(meta)?;
        Ok(self)
    }
}

/// Resolves `path` against the data root when it is relative.
pub fn resolve(path: impl AsRef<Path>) -> PathBuf {
    let path = path.as_ref();
    match std::env::var_os(DATA_ROOT_VAR) {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so a failure never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let perms = std::fs::Permissions::from_mode(0o644);
        tmp.as_file().set_permissions(perms).map_err(|e| Error::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn jsonl_bytes<T: Serialize>(header: Option<&Header>, items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    if let Some(h) = header {
        serde_json::to_writer(&mut out, h)?;
        out.push(b'\n');
    }
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: Option<&Header>, items: &[T]) -> Result<()> {
    write_atomic(path, &jsonl_bytes(header, items)?)
}

/// Reads a header plus records. A final line without a newline that fails
/// to parse is treated as a torn append and dropped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, format: &str) -> Result<(Header, Vec<T>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    let mut reader = BufReader::new(file);
    loop {
        let mut line = String::new();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        lines.push(line);
    }
    let mut it = lines.into_iter().filter(|l| !l.trim().is_empty()).peekable();
    let first = it
        .next()
        .ok_or_else(|| Error::Dataset(format!("{}: empty file", path.display())))?;
    let header: Header = serde_json::from_str(&first)
        .map_err(|e| Error::Dataset(format!("{}: bad header: {e}", path.display())))?;
    if header.kind != "header" || header.format != format {
        return Err(Error::Dataset(format!(
            "{}: expected a `{format}` file, found `{}`",
            path.display(),
            header.format
        )));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: FORMAT_VERSION,
        });
    }
    let mut items = Vec::new();
    while let Some(line) = it.next() {
        match serde_json::from_str(&line) {
            Ok(v) => items.push(v),
            Err(_) if it.peek().is_none() && !line.ends_with('\n') => break,
            Err(e) => {
                return Err(Error::Dataset(format!(
                    "{}: record {}: {e}",
                    path.display(),
                    items.len() + 1
                )))
            }
        }
    }
    Ok((header, items))
}

pub fn write_trajectories(path: &Path, env: &Env, trajectories: &[Trajectory]) -> Result<()> {
    write_jsonl(path, Some(&Header::new(TRAJECTORIES, env)), trajectories)
}

pub fn read_trajectories(path: &Path) -> Result<(Env, Vec<Trajectory>)> {
    let (h, t): (Header, Vec<Trajectory>) = read_jsonl(path, TRAJECTORIES)?;
    for tr in &t {
        tr.validate()?;
    }
    Ok((h.env, t))
}

pub fn write_preferences(path: &Path, env: &Env, records: &[PreferenceRecord]) -> Result<()> {
    write_jsonl(path, Some(&Header::new(PREFERENCES, env)), records)
}

pub fn read_preferences(path: &Path) -> Result<(Env, Vec<PreferenceRecord>)> {
    let (h, r): (Header, Vec<PreferenceRecord>) = read_jsonl(path, PREFERENCES)?;
    for rec in &r {
        rec.validate()?;
    }
    Ok((h.env, r))
}

/// Append-only preference store. Each record is flushed to disk before
/// [`Self::append`] returns.
#[derive(Debug)]
pub struct PreferenceLog {
    path: PathBuf,
    file: File,
}

impl PreferenceLog {
    /// Opens `path` for appending, writing a header if the file is new or
    /// empty.
    pub fn open(path: &Path, env: &Env) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if len == 0 {
            let bytes = jsonl_bytes::<()>(Some(&Header::new(PREFERENCES, env)), &[])?;
            file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
            file.sync_data().map_err(|e| Error::io(path, e))?;
        } else {
            let (existing, _) = read_preferences(path)?;
            if existing.id() != env.id() {
                return Err(Error::Dataset(format!(
                    "{} holds `{}` labels, not `{}`",
                    path.display(),
                    existing.id(),
                    env.id()
                )));
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, record: &PreferenceRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))?;
        self.file.sync_data().map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::generate_dataset;

    #[test]
    fn trajectories_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let env = Env::key_door();
        let t = generate_dataset(&env, 3, 1);
        write_trajectories(&path, &env, &t).unwrap();
        let (e, back) = read_trajectories(&path).unwrap();
        assert_eq!(e, env);
        assert_eq!(back, t);
    }

    #[test]
    fn wrong_format_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let env = Env::grid_nav();
        write_trajectories(&path, &env, &generate_dataset(&env, 1, 0)).unwrap();
        assert!(read_preferences(&path).is_err());
    }

    #[test]
    fn torn_final_line_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let env = Env::grid_nav();
        PreferenceLog::open(&path, &env).unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"query\":{\"id\":3,").unwrap();
        let (_, recs) = read_preferences(&path).unwrap();
        assert!(recs.is_empty());
    }
}
