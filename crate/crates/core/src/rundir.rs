//! On-disk layout of one benchmark run:
//! `<root>/<timestamp-id>/{config.snapshot, traces/, images/, report.json, report.txt}`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::evaluation::{EvalReport, TraceSink};
use crate::images::{ImageError, ImageStore};
use crate::trace::TraceRecord;

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    path: PathBuf,
}

fn io_at(path: &Path, e: io::Error) -> io::Error {
    io::Error::new(e.kind(), format!("{}: {e}", path.display()))
}

impl RunDir {
    /// Creates a fresh run directory under `root` and writes the snapshot.
    pub fn create(root: &Path, snapshot: &str) -> io::Result<Self> {
        fs::create_dir_all(root).map_err(|e| io_at(root, e))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
        let mut n = 1u32;
        let path = loop {
            let candidate = root.join(format!("{stamp}-{n:03}"));
            match fs::create_dir(&candidate) {
                Ok(()) => break candidate,
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => n += 1,
                Err(e) => return Err(io_at(&candidate, e)),
            }
        };
        let dir = RunDir { path };
        fs::create_dir(dir.traces_dir())?;
        fs::create_dir(dir.images_dir())?;
        fs::write(dir.path.join(SNAPSHOT_FILE), snapshot)?;
        Ok(dir)
    }

    pub fn open(path: &Path) -> io::Result<Self> {
        if !path.join(SNAPSHOT_FILE).is_file() {
            return Err(io::Error::new(
                io::ErrorKind::NotFound,
                format!("{} is not a run directory", path.display()),
            ));
        }
        Ok(RunDir { path: path.to_path_buf() })
    }

    /// Run directories directly under `root`, oldest first. `root` itself
    /// counts when it is a run directory.
    pub fn list(root: &Path) -> io::Result<Vec<RunDir>> {
        if let Ok(dir) = RunDir::open(root) {
            return Ok(vec![dir]);
        }
        let mut dirs: Vec<RunDir> = fs::read_dir(root)
            .map_err(|e| io_at(root, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| RunDir::open(&e.path()).ok())
            .collect();
        dirs.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(dirs)
    }

    /// Locates the run directory owning a trace file.
    pub fn of_trace(trace_file: &Path) -> Option<Self> {
        let parent = trace_file.parent()?;
        if parent.file_name()? != "traces" {
            return None;
        }
        RunDir::open(parent.parent()?).ok()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn id(&self) -> String {
        self.path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.path.join("traces")
    }

    pub fn images_dir(&self) -> PathBuf {
        self.path.join("images")
    }

    pub fn snapshot(&self) -> io::Result<String> {
        fs::read_to_string(self.path.join(SNAPSHOT_FILE))
    }

    /// Image store that persists into this run's `images/`.
    pub fn image_store(&self) -> Result<ImageStore, ImageError> {
        ImageStore::open(self.images_dir())
    }

    pub fn trace_path(&self, task_id: &str) -> PathBuf {
        let safe: String = task_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
            .collect();
        self.traces_dir().join(format!("{safe}.json"))
    }

    pub fn trace_files(&self) -> io::Result<Vec<PathBuf>> {
        let mut files: Vec<PathBuf> = fs::read_dir(self.traces_dir())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        Ok(files)
    }

    pub fn write_report(&self, report: &EvalReport) -> io::Result<()> {
        fs::write(self.path.join(REPORT_JSON), report.to_json())?;
        fs::write(self.path.join(REPORT_TXT), report.to_table())
    }

    pub fn read_report(&self) -> io::Result<EvalReport> {
        let path = self.path.join(REPORT_JSON);
        let text = fs::read_to_string(&path).map_err(|e| io_at(&path, e))?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))
    }
}

impl TraceSink for RunDir {
    fn write(&self, trace: &TraceRecord) -> Result<(), String> {
        let path = self.trace_path(&trace.task_id);
        fs::write(&path, trace.to_json()).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_listing() {
        let root = tempfile::tempdir().unwrap();
        let a = RunDir::create(root.path(), "x = 1\n").unwrap();
        let b = RunDir::create(root.path(), "x = 2\n").unwrap();
        assert_ne!(a, b);
        for d in [&a, &b] {
            assert!(d.traces_dir().is_dir());
            assert!(d.images_dir().is_dir());
        }
        assert_eq!(a.snapshot().unwrap(), "x = 1\n");
        assert_eq!(RunDir::list(root.path()).unwrap(), vec![a.clone(), b]);
        assert_eq!(RunDir::list(a.path()).unwrap(), vec![a.clone()]);
        let trace = a.trace_path("t/1");
        assert_eq!(trace.file_name().unwrap(), "t_1.json");
        assert_eq!(RunDir::of_trace(&trace), Some(a));
        assert!(RunDir::open(root.path()).is_err());
    }
}
