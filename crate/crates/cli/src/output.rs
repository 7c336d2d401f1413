//! Output files are collected in memory and written only once the whole
//! command has succeeded, each through a temporary file and a rename.

use std::path::{Path, PathBuf};

use crate::error::CliError;

#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub fn add_with<F>(&mut self, name: &str, f: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> fracimp::Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.add(name, buf);
        Ok(())
    }

    pub fn add_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(fracimp::Error::from)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    pub fn commit(&self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Output {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let mut written = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            fracimp::dataset::write_atomic(&path, bytes).map_err(|e| match e {
                fracimp::Error::Io { path, source } => CliError::Output { path, source },
                other => CliError::Core(other),
            })?;
            written.push(path);
        }
        Ok(written)
    }
}
