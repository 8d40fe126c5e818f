//! Output bookkeeping. Every file and directory a run creates is recorded and
//! removed again unless the run commits.

use std::fs;
use std::path::{Path, PathBuf};

use timix::error::Result;

#[derive(Debug)]
enum Created {
    Dir(PathBuf),
    File(PathBuf),
}

#[derive(Debug, Default)]
pub struct Outputs {
    created: Vec<Created>,
    committed: bool,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates `dir` and any missing ancestors, recording the ones it made.
    pub fn dir(&mut self, dir: &Path) -> Result<()> {
        let mut missing: Vec<&Path> =
            dir.ancestors().take_while(|p| !p.as_os_str().is_empty() && !p.exists()).collect();
        missing.reverse();
        for d in missing {
            fs::create_dir(d)?;
            self.created.push(Created::Dir(d.to_path_buf()));
        }
        Ok(())
    }

    /// Records `path` and then lets `write` fill it.
    pub fn file(&mut self, path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        if let Some(parent) = path.parent() {
            self.dir(parent)?;
        }
        self.created.push(Created::File(path.to_path_buf()));
        write(path)
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for c in self.created.iter().rev() {
            let _ = match c {
                Created::Dir(p) => fs::remove_dir(p),
                Created::File(p) => fs::remove_file(p),
            };
        }
    }
}
