use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const LOCK_FILE: &str = "voxclone.lock";

/// Exclusive claim on an output directory, released on drop.
///
/// The lock file holds the owner's pid. A lock whose owner is no longer running is
/// treated as stale and taken over.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

fn pid_alive(pid: u32) -> bool {
    let proc_root = Path::new("/proc");
    if !proc_root.is_dir() {
        // no way to tell; err on the side of refusing
        return true;
    }
    proc_root.join(pid.to_string()).exists()
}

impl RunLock {
    pub fn acquire(out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    writeln!(f, "{}", std::process::id())?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let owner = std::fs::read_to_string(&path)
                        .ok()
                        .and_then(|s| s.trim().parse::<u32>().ok());
                    match owner {
                        Some(pid) if !pid_alive(pid) => {
                            std::fs::remove_file(&path)?;
                        }
                        _ => return Err(Error::Locked(out_dir.to_path_buf())),
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(Error::Locked(out_dir.to_path_buf()))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_acquire_is_refused_until_release() {
        let tmp = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(tmp.path()).unwrap();
        assert!(matches!(RunLock::acquire(tmp.path()), Err(Error::Locked(_))));
        drop(lock);
        assert!(!tmp.path().join(LOCK_FILE).exists());
        RunLock::acquire(tmp.path()).unwrap();
    }

    #[test]
    fn stale_lock_is_taken_over() {
        let tmp = tempfile::tempdir().unwrap();
        // pid far above any default pid_max
        std::fs::write(tmp.path().join(LOCK_FILE), "4294967290\n").unwrap();
        RunLock::acquire(tmp.path()).unwrap();
    }

    #[test]
    fn unreadable_lock_is_respected() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join(LOCK_FILE), "garbage").unwrap();
        assert!(RunLock::acquire(tmp.path()).is_err());
    }
}
