use std::path::{Path, PathBuf};

use jdd_core::io::{commit, stage};

use crate::CliError;

/// Collects output files and publishes them together: everything is first
/// written to temporaries, and only renamed into place once all writes
/// succeeded. Dropping an uncommitted batch removes the temporaries.
#[derive(Default)]
pub struct Outputs {
    pending: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.pending.push((path.into(), bytes));
    }

    pub fn commit(self) -> Result<Vec<PathBuf>, CliError> {
        let mut staged: Vec<(PathBuf, PathBuf)> = Vec::new();
        for (path, bytes) in &self.pending {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                if !dir.is_dir() {
                    cleanup(&staged);
                    return Err(CliError::Io(format!("output directory {} does not exist", dir.display())));
                }
            }
            match stage(path, bytes) {
                Ok(tmp) => staged.push((tmp, path.clone())),
                Err(e) => {
                    cleanup(&staged);
                    return Err(e.into());
                }
            }
        }
        let mut done = Vec::new();
        for (i, (tmp, path)) in staged.iter().enumerate() {
            if let Err(e) = commit(tmp, path) {
                cleanup(&staged[i + 1..]);
                return Err(e.into());
            }
            done.push(path.clone());
        }
        Ok(done)
    }
}

fn cleanup(staged: &[(PathBuf, PathBuf)]) {
    for (tmp, _) in staged {
        let _ = std::fs::remove_file(tmp);
    }
}

pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}
