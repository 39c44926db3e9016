//! Conversion from world-state snapshot logs into episodes.
//!
//! The external corpus records a sequence of world snapshots, each carrying the
//! cumulative chat history and the blocks present at that moment. Gold actions
//! are reconstructed from the net change between consecutive snapshots, with
//! removals first and placements ordered so each is supported when placed.
//! Only the reduced shape below is understood; field names of the original
//! release have to be mapped onto it by the caller.

use serde::Deserialize;

use super::{normalize_text, Episode, GoldTurn, Speaker, Split, Utterance};
use crate::gridworld::{diff, plan_actions, BlockColor, Cell, Grid, GridDims};

#[derive(Debug, Clone, Deserialize)]
pub struct StateBlock {
    pub x: i32,
    pub y: i32,
    pub z: i32,
    pub color: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct StateSnapshot {
    /// Cumulative chat lines, each prefixed `<Architect>` or `<Builder>`.
    pub chat: Vec<String>,
    pub blocks: Vec<StateBlock>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct StateLog {
    pub id: String,
    pub snapshots: Vec<StateSnapshot>,
}

fn parse_chat_line(line: &str) -> Option<(Speaker, String)> {
    let line = line.trim();
    let (speaker, rest) = if let Some(rest) = line.strip_prefix("<Architect>") {
        (Speaker::Architect, rest)
    } else if let Some(rest) = line.strip_prefix("<Builder>") {
        (Speaker::Builder, rest)
    } else {
        return None;
    };
    let text = normalize_text(rest);
    (!text.is_empty()).then_some((speaker, text))
}

/// Converts one snapshot log. `offset` is added to every coordinate to move
/// the source frame onto the grid origin.
pub fn convert_state_log(
    log: &StateLog,
    split: Split,
    dims: GridDims,
    offset: (i32, i32, i32),
) -> Result<Episode, String> {
    let to_grid = |snap: &StateSnapshot| -> Result<Grid, String> {
        let blocks = snap
            .blocks
            .iter()
            .map(|b| {
                let color: BlockColor = b.color.to_lowercase().parse().map_err(|e| format!("{e}"))?;
                Ok((Cell::new(b.x + offset.0, b.y + offset.1, b.z + offset.2), color))
            })
            .collect::<Result<Vec<_>, String>>()?;
        Grid::from_blocks(dims, blocks).map_err(|e| e.to_string())
    };
    let first = log.snapshots.first().ok_or("log has no snapshots")?;
    let last = log.snapshots.last().expect("non-empty");
    let dialogue: Vec<Utterance> = last
        .chat
        .iter()
        .filter_map(|l| parse_chat_line(l))
        .enumerate()
        .map(|(i, (speaker, text))| Utterance {
            speaker,
            text,
            turn_index: i,
        })
        .collect();
    let initial_world = to_grid(first)?;
    let mut prev = initial_world.clone();
    let mut gold_turns = Vec::new();
    for (si, snap) in log.snapshots.iter().enumerate().skip(1) {
        let grid = to_grid(snap)?;
        let change = diff(&prev, &grid).map_err(|e| e.to_string())?;
        if change.is_empty() {
            continue;
        }
        let visible = snap.chat.iter().filter(|l| parse_chat_line(l).is_some()).count();
        if visible == 0 {
            return Err(format!("snapshot {si}: builder acted before any dialogue"));
        }
        let actions = plan_actions(&prev, &change)
            .ok_or_else(|| format!("snapshot {si}: net change has no supported placement order"))?;
        gold_turns.push(GoldTurn {
            turn: (visible - 1).min(dialogue.len().saturating_sub(1)),
            actions,
        });
        prev = grid;
    }
    Ok(Episode {
        id: log.id.clone(),
        split,
        dialogue,
        initial_world,
        gold_turns,
    })
}
