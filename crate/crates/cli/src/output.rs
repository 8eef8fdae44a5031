//! Output files of one invocation. Everything written here is removed again
//! if the command fails.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

pub struct OutputSet {
    dir: PathBuf,
    header: String,
    written: Vec<PathBuf>,
}

impl OutputSet {
    pub fn new(dir: &Path, header: String) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::runtime(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), header, written: Vec::new() })
    }

    /// Header line without the leading `# `.
    pub fn header(&self) -> &str {
        &self.header
    }

    /// Creates `name` in the output directory and registers it for cleanup.
    pub fn create(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.dir.join(name);
        let f = File::create(&path).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", path.display())))?;
        self.written.push(path);
        Ok(BufWriter::new(f))
    }

    /// Structured text: the header comment, then pretty-printed JSON.
    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut w = self.create(name)?;
        writeln!(w, "# {}", self.header)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::runtime(e.to_string()))?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.written
    }

    /// Removes everything written so far.
    pub fn discard(self) {
        for p in self.written {
            let _ = std::fs::remove_file(p);
        }
    }
}
