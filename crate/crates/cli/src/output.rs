//! Output staging: everything is rendered to memory first, then written to
//! temporary files and renamed into place.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

/// Named in-memory outputs destined for one directory.
#[derive(Default)]
pub struct Staged {
    files: Vec<(String, Vec<u8>)>,
}

impl Staged {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    /// Writes every file as `.<name>.tmp` and renames only once all writes
    /// have succeeded.
    pub fn commit(self, dir: &Path) -> io::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut temps = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let tmp = dir.join(format!(".{name}.tmp"));
            if let Err(e) = write_synced(&tmp, bytes) {
                for (t, _) in &temps {
                    let _ = fs::remove_file(t);
                }
                let _ = fs::remove_file(&tmp);
                return Err(e);
            }
            temps.push((tmp, dir.join(name)));
        }
        let mut finals = Vec::with_capacity(temps.len());
        for (tmp, dest) in temps {
            fs::rename(&tmp, &dest)?;
            finals.push(dest);
        }
        Ok(finals)
    }
}

fn write_synced(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()
}

/// Writes `bytes` to `path` atomically, or to stdout when `path` is `None`.
pub fn emit(path: Option<&Path>, bytes: &[u8]) -> io::Result<()> {
    match path {
        None => {
            let mut out = io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()
        }
        Some(p) => {
            let dir = match p.parent() {
                Some(d) if !d.as_os_str().is_empty() => d,
                _ => Path::new("."),
            };
            let name = p
                .file_name()
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "output path has no file name"))?;
            let mut staged = Staged::default();
            staged.add(&name.to_string_lossy(), bytes.to_vec());
            staged.commit(dir).map(|_| ())
        }
    }
}

pub fn json_bytes<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_renames_all() {
        let dir = std::env::temp_dir().join(format!("spikelab-out-{}", std::process::id()));
        let mut s = Staged::default();
        s.add("a.csv", b"x\n".to_vec());
        s.add("b.json", b"{}".to_vec());
        let paths = s.commit(&dir).unwrap();
        assert_eq!(paths.len(), 2);
        assert_eq!(fs::read(dir.join("a.csv")).unwrap(), b"x\n");
        let leftovers: Vec<_> = fs::read_dir(&dir)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
        fs::remove_dir_all(&dir).unwrap();
    }
}
