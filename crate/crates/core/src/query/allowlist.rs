use std::collections::HashSet;
use std::path::Path;

use crate::ids::NoteId;

/// Note ids a deployment may display.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum Allowlist {
    #[default]
    Disabled,
    /// Only these ids may be shown. An empty set denies everything.
    Enforced(HashSet<NoteId>),
}

impl Allowlist {
    pub fn enforced(ids: impl IntoIterator<Item = NoteId>) -> Self {
        Allowlist::Enforced(ids.into_iter().collect())
    }

    /// Reads one decimal note id per line; blank lines and `#` comments are skipped.
    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut ids = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let id = line.parse::<u64>().map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            ids.insert(NoteId(id));
        }
        Ok(Allowlist::Enforced(ids))
    }

    pub fn is_enforced(&self) -> bool {
        matches!(self, Allowlist::Enforced(_))
    }

    pub fn permits(&self, id: NoteId) -> bool {
        match self {
            Allowlist::Disabled => true,
            Allowlist::Enforced(ids) => ids.contains(&id),
        }
    }

    /// Order-preserving filter.
    pub fn apply(&self, ids: &[NoteId]) -> Vec<NoteId> {
        ids.iter().copied().filter(|id| self.permits(*id)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &[u64]) -> Vec<NoteId> {
        v.iter().map(|&i| NoteId(i)).collect()
    }

    #[test]
    fn semantics() {
        assert!(Allowlist::enforced([]).apply(&ids(&[1, 2, 3])).is_empty());
        assert_eq!(Allowlist::Disabled.apply(&ids(&[3, 1, 2])), ids(&[3, 1, 2]));
        assert_eq!(Allowlist::enforced(ids(&[2])).apply(&ids(&[1, 2, 3])), ids(&[2]));
        assert_eq!(Allowlist::enforced(ids(&[3, 1])).apply(&ids(&[1, 2, 3])), ids(&[1, 3]));
    }

    #[test]
    fn file_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("allow.txt");
        std::fs::write(&p, "# approved\n10\n\n 11 \n").unwrap();
        assert_eq!(Allowlist::from_file(&p).unwrap(), Allowlist::enforced(ids(&[10, 11])));
        std::fs::write(&p, "10\nabc\n").unwrap();
        assert!(Allowlist::from_file(&p).is_err());
    }
}
