use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ThreadId, TileId};
use crate::lockstep::Digest;

/// One thread's checkpoint record in a tile's validation memory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub checksum: Digest,
    pub epoch: u64,
    /// Sibling tiles whose checksum differs from this tile's.
    pub disagreement_flags: BTreeSet<TileId>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{writer} attempted to write validation memory owned by {owner}")]
pub struct WriteViolation {
    pub owner: TileId,
    pub writer: TileId,
}

/// Per-tile exposed memory: writable by the owner, readable by everyone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationMemory {
    owner: TileId,
    entries: BTreeMap<ThreadId, ValidationEntry>,
}

impl ValidationMemory {
    pub fn new(owner: TileId) -> Self {
        ValidationMemory {
            owner,
            entries: BTreeMap::new(),
        }
    }

    pub fn owner(&self) -> TileId {
        self.owner
    }

    pub fn entries(&self) -> &BTreeMap<ThreadId, ValidationEntry> {
        &self.entries
    }

    pub fn read(&self, thread: &ThreadId) -> Option<&ValidationEntry> {
        self.entries.get(thread)
    }

    /// Checksum phase: the owner publishes a digest for `thread`, clearing the
    /// previous epoch's disagreement flags.
    pub fn write_checksum(
        &mut self,
        writer: TileId,
        thread: &ThreadId,
        checksum: Digest,
        epoch: u64,
    ) -> Result<(), WriteViolation> {
        self.check_writer(writer)?;
        self.entries.insert(
            thread.clone(),
            ValidationEntry {
                checksum,
                epoch,
                disagreement_flags: BTreeSet::new(),
            },
        );
        Ok(())
    }

    /// Comparison phase: the owner records which siblings it disagrees with.
    pub fn write_disagreement(
        &mut self,
        writer: TileId,
        thread: &ThreadId,
        flags: BTreeSet<TileId>,
    ) -> Result<(), WriteViolation> {
        self.check_writer(writer)?;
        if let Some(e) = self.entries.get_mut(thread) {
            e.disagreement_flags = flags;
        }
        Ok(())
    }

    /// Adopting the majority digest after synchronization.
    pub fn write_synchronized(
        &mut self,
        writer: TileId,
        thread: &ThreadId,
        checksum: Digest,
    ) -> Result<(), WriteViolation> {
        self.check_writer(writer)?;
        if let Some(e) = self.entries.get_mut(thread) {
            e.checksum = checksum;
            e.disagreement_flags.clear();
        }
        Ok(())
    }

    /// Drops entries for threads no longer hosted by the owner.
    pub fn retain(
        &mut self,
        writer: TileId,
        keep: impl Fn(&ThreadId) -> bool,
    ) -> Result<(), WriteViolation> {
        self.check_writer(writer)?;
        self.entries.retain(|t, _| keep(t));
        Ok(())
    }

    fn check_writer(&self, writer: TileId) -> Result<(), WriteViolation> {
        if writer == self.owner {
            Ok(())
        } else {
            Err(WriteViolation {
                owner: self.owner,
                writer,
            })
        }
    }
}
