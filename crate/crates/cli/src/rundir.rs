use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use crate::{runtime, Failure};

const LOCK: &str = ".lock";

/// Exclusive hold on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, Failure> {
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(runtime(format!(
                "{} is locked by another process (remove {} if that process is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(runtime(format!("locking {}: {e}", dir.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Creates `<parent>/run-<YYYYmmdd-HHMMSS>-seed<N>`, adding `-2`, `-3`, ... if
/// the name is taken, and locks it.
pub fn create_run_dir(parent: &Path, seed: u64) -> Result<(PathBuf, DirLock), Failure> {
    fs::create_dir_all(parent).map_err(|e| runtime(format!("creating {}: {e}", parent.display())))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("run-{stamp}-seed{seed}");
    for n in 1.. {
        let name = if n == 1 { base.clone() } else { format!("{base}-{n}") };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => {
                let lock = DirLock::acquire(&dir)?;
                return Ok((dir, lock));
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(runtime(format!("creating {}: {e}", dir.display()))),
        }
    }
    unreachable!()
}

/// Creates `dir` if needed and locks it.
pub fn lock_output_dir(dir: &Path) -> Result<DirLock, Failure> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("creating {}: {e}", dir.display())))?;
    DirLock::acquire(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_fails_until_release() {
        let tmp = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(tmp.path()).unwrap();
        assert_eq!(DirLock::acquire(tmp.path()).unwrap_err().code(), 3);
        drop(a);
        DirLock::acquire(tmp.path()).unwrap();
    }

    #[test]
    fn run_dirs_never_collide() {
        let tmp = tempfile::tempdir().unwrap();
        let (a, _la) = create_run_dir(tmp.path(), 3).unwrap();
        let (b, _lb) = create_run_dir(tmp.path(), 3).unwrap();
        assert_ne!(a, b);
        assert!(a.file_name().unwrap().to_str().unwrap().ends_with("seed3"));
        assert!(a.join(LOCK).exists() && b.join(LOCK).exists());
    }
}
