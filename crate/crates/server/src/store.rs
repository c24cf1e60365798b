use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use intentloop_core::bandit::BanditModel;
use intentloop_core::session::Session;
use intentloop_core::IntentProfile;
use parking_lot::Mutex;

use crate::error::ApiError;

/// One JSON file per session under `<data_dir>/sessions`, plus one lock per
/// session id so requests to the same session run one at a time.
#[derive(Debug)]
pub struct SessionStore {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn io_error(path: &Path, e: std::io::Error) -> ApiError {
    ApiError::internal(format!("{}: {e}", path.display()))
}

/// Writes through a temporary file so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ApiError> {
    let parent = path.parent().expect("store paths have a parent");
    std::fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| io_error(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

impl SessionStore {
    pub fn new(data_dir: &Path) -> Self {
        Self {
            dir: data_dir.join("sessions"),
            locks: Mutex::new(HashMap::new()),
        }
    }

    /// The lock guarding `id`, created on first use.
    pub fn lock_for(&self, id: &str) -> Arc<Mutex<()>> {
        self.locks.lock().entry(id.to_string()).or_default().clone()
    }

    fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    pub fn load(&self, id: &str) -> Result<Session, ApiError> {
        if !valid_id(id) {
            return Err(ApiError::not_found(format!("no session {id:?}")));
        }
        let path = self.path(id);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(ApiError::not_found(format!("no session {id:?}")))
            }
            Err(e) => return Err(io_error(&path, e)),
        };
        serde_json::from_str(&text)
            .map_err(|e| ApiError::internal(format!("session {id} is corrupt: {e}")))
    }

    pub fn save(&self, session: &Session) -> Result<(), ApiError> {
        if !valid_id(&session.id) {
            return Err(ApiError::internal(format!("unstorable session id {:?}", session.id)));
        }
        let bytes = serde_json::to_vec(session).expect("session serializes");
        write_atomic(&self.path(&session.id), &bytes)
    }
}

pub(crate) fn save_profile(path: &Path, profile: &IntentProfile) -> Result<(), ApiError> {
    write_atomic(path, profile.to_json_string().as_bytes())
}

pub(crate) fn save_model(dir: &Path, model: &BanditModel) -> Result<(), ApiError> {
    let key = model.key();
    let name = format!("{}__{}.json", slug(&key.topic_id), slug(&key.intent_id));
    write_atomic(&dir.join(name), model.to_checkpoint_json().as_bytes())
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_with_path_characters_are_rejected() {
        for id in ["", "../x", "a/b", "a.b", "a b"] {
            assert!(!valid_id(id), "{id:?}");
        }
        assert!(valid_id("sim-000001"));
        assert!(valid_id("0f3a_b"));
    }

    #[test]
    fn missing_session_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(dir.path());
        assert_eq!(store.load("nope").unwrap_err().status.as_u16(), 404);
        assert_eq!(store.load("../etc").unwrap_err().status.as_u16(), 404);
    }

    #[test]
    fn same_id_shares_a_lock() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::new(dir.path());
        assert!(Arc::ptr_eq(&store.lock_for("a"), &store.lock_for("a")));
        assert!(!Arc::ptr_eq(&store.lock_for("a"), &store.lock_for("b")));
    }
}
