use std::collections::HashMap;
use std::path::{Path, PathBuf};

use indexmap::IndexSet;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::QueryError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortAction {
    Include,
    Exclude,
    Remove,
}

impl std::str::FromStr for CohortAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "include" => Ok(CohortAction::Include),
            "exclude" => Ok(CohortAction::Exclude),
            "remove" => Ok(CohortAction::Remove),
            other => Err(format!("unknown cohort action {other:?}")),
        }
    }
}

/// Patients a user has curated into or out of a cohort. The two sets are
/// disjoint and keep insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortWorkspace {
    pub workspace_id: String,
    pub included_mrns: IndexSet<String>,
    pub excluded_mrns: IndexSet<String>,
}

impl CohortWorkspace {
    pub fn new(workspace_id: impl Into<String>) -> Self {
        Self { workspace_id: workspace_id.into(), ..Self::default() }
    }

    pub fn apply(&mut self, action: CohortAction, mrn: &str) {
        match action {
            CohortAction::Include => {
                self.excluded_mrns.shift_remove(mrn);
                self.included_mrns.insert(mrn.to_string());
            }
            CohortAction::Exclude => {
                self.included_mrns.shift_remove(mrn);
                self.excluded_mrns.insert(mrn.to_string());
            }
            CohortAction::Remove => {
                self.included_mrns.shift_remove(mrn);
                self.excluded_mrns.shift_remove(mrn);
            }
        }
    }

    /// Included MRNs in insertion order.
    pub fn export(&self) -> Vec<String> {
        self.included_mrns.iter().cloned().collect()
    }
}

/// Workspaces by id, optionally persisted as one JSON file each.
#[derive(Debug)]
pub struct CohortStore {
    dir: Option<PathBuf>,
    workspaces: Mutex<HashMap<String, CohortWorkspace>>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl CohortStore {
    pub fn in_memory() -> Self {
        Self { dir: None, workspaces: Mutex::new(HashMap::new()) }
    }

    /// Loads every `*.json` workspace in `dir`, creating the directory if needed.
    pub fn open(dir: &Path) -> Result<Self, QueryError> {
        std::fs::create_dir_all(dir)?;
        let mut workspaces = HashMap::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let ws: CohortWorkspace = serde_json::from_slice(&std::fs::read(&path)?)
                    .map_err(|e| QueryError::Storage(format!("{}: {e}", path.display())))?;
                workspaces.insert(ws.workspace_id.clone(), ws);
            }
        }
        Ok(Self { dir: Some(dir.to_path_buf()), workspaces: Mutex::new(workspaces) })
    }

    pub fn get(&self, id: &str) -> Option<CohortWorkspace> {
        self.workspaces.lock().get(id).cloned()
    }

    /// Creates the workspace if absent; returns its current state.
    pub fn create(&self, id: &str) -> Result<CohortWorkspace, QueryError> {
        if !valid_id(id) {
            return Err(QueryError::InvalidRequest(format!("invalid workspace id {id:?}")));
        }
        let mut map = self.workspaces.lock();
        if let Some(ws) = map.get(id) {
            return Ok(ws.clone());
        }
        let ws = CohortWorkspace::new(id);
        self.persist(&ws)?;
        map.insert(id.to_string(), ws.clone());
        Ok(ws)
    }

    pub fn update(&self, id: &str, action: CohortAction, mrn: &str) -> Result<CohortWorkspace, QueryError> {
        if mrn.trim().is_empty() {
            return Err(QueryError::InvalidRequest("mrn must not be empty".into()));
        }
        let mut map = self.workspaces.lock();
        let ws = map.get(id).ok_or_else(|| QueryError::UnknownWorkspace(id.to_string()))?;
        let mut next = ws.clone();
        next.apply(action, mrn);
        self.persist(&next)?;
        map.insert(id.to_string(), next.clone());
        Ok(next)
    }

    fn persist(&self, ws: &CohortWorkspace) -> Result<(), QueryError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(format!("{}.json", ws.workspace_id));
        let tmp = dir.join(format!(".{}.json.tmp", ws.workspace_id));
        let bytes = serde_json::to_vec_pretty(ws).map_err(|e| QueryError::Storage(e.to_string()))?;
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn include_exclude_remove() {
        let mut ws = CohortWorkspace::new("w");
        ws.apply(CohortAction::Include, "001");
        ws.apply(CohortAction::Include, "001");
        assert_eq!(ws.export(), ["001"]);
        ws.apply(CohortAction::Include, "002");
        ws.apply(CohortAction::Exclude, "002");
        assert_eq!(ws.export(), ["001"]);
        assert_eq!(ws.excluded_mrns.iter().collect::<Vec<_>>(), ["002"]);
        ws.apply(CohortAction::Include, "003");
        assert_eq!(ws.export(), ["001", "003"]);
        ws.apply(CohortAction::Remove, "001");
        assert_eq!(ws.export(), ["003"]);
    }

    #[test]
    fn persisted_store() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = CohortStore::open(dir.path()).unwrap();
            assert!(matches!(store.update("w", CohortAction::Include, "1"), Err(QueryError::UnknownWorkspace(_))));
            store.create("w").unwrap();
            store.update("w", CohortAction::Include, "001").unwrap();
            store.update("w", CohortAction::Exclude, "002").unwrap();
            store.update("w", CohortAction::Include, "003").unwrap();
            assert!(store.create("../x").is_err());
        }
        let store = CohortStore::open(dir.path()).unwrap();
        let ws = store.get("w").unwrap();
        assert_eq!(ws.export(), ["001", "003"]);
        assert!(ws.excluded_mrns.contains("002"));
        // creating an existing workspace keeps its contents
        assert_eq!(store.create("w").unwrap(), ws);
    }
}
