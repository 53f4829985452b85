//! Session records and the line-delimited JSON interchange format.
//!
//! One line per session:
//! `{"session_id":..,"query":{"id":..,"fields":[..]},"blocks":[{"orientation":"v","items":[{"id":..,"fields":[..],"click":0}]}],"trace":[[t,j],..]}`
//!
//! Field order is fixed by the struct definitions below. `trace` is written
//! by the simulator only and omitted when absent.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::page_dag::{BlockSpec, LayoutError, NodeId, Orientation, PageLayout};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("session {session_id}: {message}")]
    Invalid { session_id: u64, message: String },
    #[error("session {session_id}: {source}")]
    Layout {
        session_id: u64,
        #[source]
        source: LayoutError,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub fields: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionItem {
    pub id: u64,
    pub fields: Vec<u32>,
    pub click: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionBlock {
    pub orientation: Orientation,
    pub items: Vec<SessionItem>,
}

/// One page impression: query features, per-slot items and click labels,
/// plus an optional examination trace from the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: u64,
    pub query: Query,
    pub blocks: Vec<SessionBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<(usize, usize)>>,
}

impl Session {
    pub fn layout(&self) -> Result<PageLayout, DataError> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockSpec { orientation: b.orientation, item_count: b.items.len() })
            .collect();
        PageLayout::new(blocks)
            .map_err(|source| DataError::Layout { session_id: self.session_id, source })
    }

    pub fn item(&self, node: NodeId) -> &SessionItem {
        &self.blocks[node.block - 1].items[node.pos - 1]
    }

    pub fn click(&self, node: NodeId) -> u8 {
        self.item(node).click
    }

    pub fn num_items(&self) -> usize {
        self.blocks.iter().map(|b| b.items.len()).sum()
    }

    pub fn num_clicks(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.items.iter())
            .filter(|i| i.click == 1)
            .count()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let invalid = |message: String| DataError::Invalid { session_id: self.session_id, message };
        let layout = self.layout()?;
        for block in &self.blocks {
            for item in &block.items {
                if item.click > 1 {
                    return Err(invalid(format!("item {} has click {}", item.id, item.click)));
                }
            }
        }
        if let Some(trace) = &self.trace {
            let mut prev: Option<(usize, usize)> = None;
            for &(t, j) in trace {
                if t == 0 || t > layout.num_blocks() || j == 0 || j > layout.block(t).item_count {
                    return Err(invalid(format!("trace step ({t},{j}) outside layout")));
                }
                if prev == Some((t, j)) {
                    return Err(invalid(format!("trace repeats ({t},{j}) consecutively")));
                }
                prev = Some((t, j));
            }
        }
        Ok(())
    }
}

pub fn read_sessions_from(reader: impl BufRead) -> Result<Vec<Session>, DataError> {
    let mut sessions = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let session: Session =
            serde_json::from_str(&line).map_err(|source| DataError::Parse { line: i + 1, source })?;
        session.validate()?;
        sessions.push(session);
    }
    Ok(sessions)
}

pub fn read_sessions(path: impl AsRef<Path>) -> Result<Vec<Session>, DataError> {
    read_sessions_from(BufReader::new(File::open(path)?))
}

pub fn write_sessions_to(mut writer: impl Write, sessions: &[Session]) -> Result<(), DataError> {
    for s in sessions {
        serde_json::to_writer(&mut writer, s).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_sessions(path: impl AsRef<Path>, sessions: &[Session]) -> Result<(), DataError> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_sessions_to(&mut writer, sessions)?;
    writer.flush()?;
    Ok(())
}
