use std::sync::{Arc, Mutex};

use super::io::{load_hidden, DatasetManifest};
use super::scene::{GtInstance, Triplet};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum HiddenField {
    Instances,
    Triplets,
    Captions,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEntry {
    pub phase: String,
    pub field: HiddenField,
    pub image: String,
}

#[derive(Debug, Default)]
struct AuditState {
    phases: Vec<String>,
    entries: Vec<AuditEntry>,
}

/// Shared record of every ground-truth read, tagged with the active phase.
#[derive(Debug, Clone, Default)]
pub struct AuditLog {
    inner: Arc<Mutex<AuditState>>,
}

/// Restores the previous phase when dropped.
pub struct PhaseGuard {
    log: AuditLog,
}

impl Drop for PhaseGuard {
    fn drop(&mut self) {
        self.log.inner.lock().unwrap().phases.pop();
    }
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enter(&self, phase: impl Into<String>) -> PhaseGuard {
        self.inner.lock().unwrap().phases.push(phase.into());
        PhaseGuard { log: self.clone() }
    }

    pub fn phase(&self) -> String {
        self.inner
            .lock()
            .unwrap()
            .phases
            .last()
            .cloned()
            .unwrap_or_else(|| "unscoped".into())
    }

    fn record(&self, field: HiddenField, image: &str) {
        let mut s = self.inner.lock().unwrap();
        let phase = s.phases.last().cloned().unwrap_or_else(|| "unscoped".into());
        s.entries.push(AuditEntry {
            phase,
            field,
            image: image.to_string(),
        });
    }

    pub fn entries(&self) -> Vec<AuditEntry> {
        self.inner.lock().unwrap().entries.clone()
    }

    /// Reads of `field` during phases whose name starts with `prefix`.
    pub fn count(&self, field: HiddenField, prefix: &str) -> usize {
        self.inner
            .lock()
            .unwrap()
            .entries
            .iter()
            .filter(|e| e.field == field && e.phase.starts_with(prefix))
            .count()
    }
}

/// The only way to read hidden ground truth. Every call is logged.
#[derive(Debug, Clone)]
pub struct HiddenStore {
    manifest: DatasetManifest,
    audit: AuditLog,
}

impl HiddenStore {
    pub fn new(manifest: DatasetManifest, audit: AuditLog) -> Self {
        HiddenStore { manifest, audit }
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    fn id(&self, index: usize) -> &str {
        &self.manifest.records[index].id
    }

    pub fn captions(&self, index: usize) -> Result<Vec<String>> {
        self.audit.record(HiddenField::Captions, self.id(index));
        Ok(load_hidden(&self.manifest, index)?.captions)
    }

    pub fn triplets(&self, index: usize) -> Result<Vec<Triplet>> {
        self.audit.record(HiddenField::Triplets, self.id(index));
        Ok(load_hidden(&self.manifest, index)?.triplets)
    }

    pub fn instances(&self, index: usize) -> Result<Vec<GtInstance>> {
        self.audit.record(HiddenField::Instances, self.id(index));
        Ok(load_hidden(&self.manifest, index)?.instances)
    }
}

#[cfg(test)]
mod tests {
    use super::super::io::write_dataset;
    use super::super::scene::{generate_split, GeneratorConfig};
    use super::*;

    #[test]
    fn reads_are_logged_with_phase() {
        let dir = tempfile::tempdir().unwrap();
        let c = GeneratorConfig::default();
        let recs = generate_split(&c, 4, "test", 2).unwrap();
        let m = write_dataset(
            dir.path(),
            "test",
            &c.object_registry().unwrap(),
            &c.relation_registry().unwrap(),
            (64, 64),
            &recs,
            &[],
        )
        .unwrap();
        let log = AuditLog::new();
        let store = HiddenStore::new(m, log.clone());
        {
            let _g = log.enter("eval");
            assert_eq!(store.captions(1).unwrap(), recs[1].hidden.captions);
            {
                let _h = log.enter("eval:nested");
                store.triplets(0).unwrap();
            }
            assert_eq!(log.phase(), "eval");
        }
        assert_eq!(log.count(HiddenField::Captions, "eval"), 1);
        assert_eq!(log.count(HiddenField::Triplets, "eval:nested"), 1);
        assert_eq!(log.count(HiddenField::Captions, "train"), 0);
        assert_eq!(log.entries()[0].image, "test-00001");
    }
}
