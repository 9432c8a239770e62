//! Per-mode memory table: stored trajectory segments and cached responses.

use std::sync::Arc;

use crate::sls::{Segment, SystemResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseSource {
    ModelBased,
    DataDriven,
}

impl ResponseSource {
    pub fn as_str(self) -> &'static str {
        match self {
            ResponseSource::ModelBased => "model",
            ResponseSource::DataDriven => "data",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CachedResponse {
    pub response: Arc<SystemResponse>,
    pub source: ResponseSource,
    /// Control step at which the response was synthesised.
    pub synthesized_at: usize,
}

#[derive(Debug, Clone, Default)]
pub struct MemoryEntry {
    pub segments: Vec<Segment>,
    pub cached: Option<CachedResponse>,
    /// A data-driven synthesis was tried on the current segment set.
    pub data_attempted: bool,
    /// Number of segments the last data-driven attempt saw.
    pub data_checked_segments: usize,
    pub stale: bool,
}

impl MemoryEntry {
    /// Number of complete `horizon`-windows across all stored segments.
    pub fn windows(&self, horizon: usize) -> usize {
        self.segments
            .iter()
            .map(|s| (s.len() + 1).saturating_sub(horizon))
            .sum()
    }

    pub fn transitions(&self) -> usize {
        self.segments.iter().map(Segment::len).sum()
    }
}

/// The table `U`: one entry per mode.
#[derive(Debug, Clone)]
pub struct MemoryTable {
    entries: Vec<MemoryEntry>,
}

impl MemoryTable {
    pub fn new(num_modes: usize) -> Self {
        Self {
            entries: vec![MemoryEntry::default(); num_modes],
        }
    }

    pub fn num_modes(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, mode: usize) -> &MemoryEntry {
        &self.entries[mode]
    }

    pub fn entry_mut(&mut self, mode: usize) -> &mut MemoryEntry {
        &mut self.entries[mode]
    }

    /// Stores a finished segment. Data-driven caches go stale when
    /// `invalidate` is set; model-based caches never do.
    pub fn append_segment(&mut self, mode: usize, seg: Segment, invalidate: bool) {
        let e = &mut self.entries[mode];
        e.segments.push(seg);
        if invalidate {
            if let Some(c) = &e.cached {
                if c.source == ResponseSource::DataDriven {
                    e.stale = true;
                }
            }
            e.data_attempted = false;
        }
    }
}
