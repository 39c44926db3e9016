//! Collaborative-building game logs: typed episodes, the newline-delimited
//! JSON episode format, text normalization and the MLM text stream.

mod convert;
pub mod synthetic;

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::gridworld::{BlockColor, Cell};
use crate::gridworld::{replay, Action, ActionSeq, Grid, GridDims, GridError};

pub use convert::{convert_state_log, StateLog, StateSnapshot};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("line {line}: unknown color `{color}`")]
    UnknownColor { line: usize, color: String },
    #[error("episode {episode}: gold action at step {step} is infeasible: {source}")]
    InfeasibleGoldAction {
        episode: String,
        step: usize,
        #[source]
        source: GridError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Architect,
    Builder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, valid or test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub speaker: Speaker,
    /// Normalized, non-empty.
    pub text: String,
    pub turn_index: usize,
}

/// Gold actions for one builder turn. `turn` is the dialogue position after
/// which the builder acts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldTurn {
    pub turn: usize,
    pub actions: ActionSeq,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub id: String,
    pub split: Split,
    pub dialogue: Vec<Utterance>,
    pub initial_world: Grid,
    pub gold_turns: Vec<GoldTurn>,
}

impl Episode {
    /// All gold actions in turn order.
    pub fn all_gold_actions(&self) -> ActionSeq {
        self.gold_turns.iter().flat_map(|t| t.actions.iter().copied()).collect()
    }

    /// Grid before each gold turn, following gold history, plus the final grid.
    pub fn gold_grids(&self) -> Result<Vec<Grid>, GridError> {
        let mut grids = Vec::with_capacity(self.gold_turns.len() + 1);
        let mut grid = self.initial_world.clone();
        grids.push(grid.clone());
        for t in &self.gold_turns {
            grid = replay(&grid, &t.actions)?;
            grids.push(grid.clone());
        }
        Ok(grids)
    }

    /// Dialogue text visible to the builder at gold turn `turn`, utterances
    /// joined oldest first.
    pub fn context_text(&self, turn: usize) -> String {
        let end = (turn + 1).min(self.dialogue.len());
        self.dialogue[..end]
            .iter()
            .map(|u| u.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn validate(&self) -> Result<(), CorpusError> {
        let mut grid = self.initial_world.clone();
        let mut step = 0;
        for t in &self.gold_turns {
            for a in &t.actions {
                grid.apply_mut(a).map_err(|source| CorpusError::InfeasibleGoldAction {
                    episode: self.id.clone(),
                    step,
                    source,
                })?;
                step += 1;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub dims: GridDims,
    /// Skip invalid episodes with a warning instead of failing.
    pub lenient: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            dims: GridDims::default(),
            lenient: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceRecord {
    speaker: Speaker,
    text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockRecord {
    x: i32,
    y: i32,
    z: i32,
    color: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum ActionRecord {
    Place { x: i32, y: i32, z: i32, color: String },
    Remove { x: i32, y: i32, z: i32 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnRecord {
    turn: usize,
    actions: Vec<ActionRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    id: String,
    split: Split,
    dialogue: Vec<UtteranceRecord>,
    initial_blocks: Vec<BlockRecord>,
    gold_turns: Vec<TurnRecord>,
}

fn parse_color(line: usize, s: &str) -> Result<BlockColor, CorpusError> {
    s.parse().map_err(|_| CorpusError::UnknownColor {
        line,
        color: s.to_string(),
    })
}

impl EpisodeRecord {
    fn into_episode(self, line: usize, dims: GridDims) -> Result<Episode, CorpusError> {
        let malformed = |message: String| CorpusError::MalformedRecord { line, message };
        let dialogue = self
            .dialogue
            .into_iter()
            .enumerate()
            .map(|(i, u)| {
                let text = normalize_text(&u.text);
                if text.is_empty() {
                    return Err(malformed(format!("dialogue[{i}]: empty utterance text")));
                }
                Ok(Utterance {
                    speaker: u.speaker,
                    text,
                    turn_index: i,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let blocks = self
            .initial_blocks
            .iter()
            .map(|b| Ok((Cell::new(b.x, b.y, b.z), parse_color(line, &b.color)?)))
            .collect::<Result<Vec<_>, CorpusError>>()?;
        let initial_world =
            Grid::from_blocks(dims, blocks).map_err(|e| malformed(format!("initial_blocks: {e}")))?;
        let mut gold_turns = Vec::with_capacity(self.gold_turns.len());
        for (ti, t) in self.gold_turns.into_iter().enumerate() {
            if t.turn >= dialogue.len() {
                return Err(malformed(format!(
                    "gold_turns[{ti}]: turn {} does not reference a dialogue position (dialogue has {})",
                    t.turn,
                    dialogue.len()
                )));
            }
            let actions = t
                .actions
                .into_iter()
                .map(|a| {
                    Ok(match a {
                        ActionRecord::Place { x, y, z, color } => {
                            Action::place(parse_color(line, &color)?, Cell::new(x, y, z))
                        }
                        ActionRecord::Remove { x, y, z } => Action::remove(Cell::new(x, y, z)),
                    })
                })
                .collect::<Result<Vec<_>, CorpusError>>()?;
            gold_turns.push(GoldTurn { turn: t.turn, actions });
        }
        let episode = Episode {
            id: self.id,
            split: self.split,
            dialogue,
            initial_world,
            gold_turns,
        };
        episode.validate()?;
        Ok(episode)
    }

    fn from_episode(e: &Episode) -> Self {
        let block = |c: Cell, k: BlockColor| BlockRecord {
            x: c.x,
            y: c.y,
            z: c.z,
            color: k.name().to_string(),
        };
        EpisodeRecord {
            id: e.id.clone(),
            split: e.split,
            dialogue: e
                .dialogue
                .iter()
                .map(|u| UtteranceRecord {
                    speaker: u.speaker,
                    text: u.text.clone(),
                })
                .collect(),
            initial_blocks: e.initial_world.blocks().map(|(c, k)| block(c, k)).collect(),
            gold_turns: e
                .gold_turns
                .iter()
                .map(|t| TurnRecord {
                    turn: t.turn,
                    actions: t
                        .actions
                        .iter()
                        .filter_map(|a| match *a {
                            Action::Place { cell, color } => Some(ActionRecord::Place {
                                x: cell.x,
                                y: cell.y,
                                z: cell.z,
                                color: color.name().to_string(),
                            }),
                            Action::Remove { cell } => Some(ActionRecord::Remove {
                                x: cell.x,
                                y: cell.y,
                                z: cell.z,
                            }),
                            Action::Stop => None,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Parses episodes from newline-delimited JSON text. `split = None` keeps every split.
pub fn parse_corpus(
    text: &str,
    split: Option<Split>,
    opts: &LoadOptions,
) -> Result<Vec<Episode>, CorpusError> {
    let mut episodes = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<EpisodeRecord>(raw)
            .map_err(|e| CorpusError::MalformedRecord {
                line,
                message: e.to_string(),
            })
            .and_then(|r| r.into_episode(line, opts.dims));
        match parsed {
            Ok(ep) if split.is_none_or(|s| s == ep.split) => episodes.push(ep),
            Ok(_) => {}
            Err(e) if opts.lenient => log::warn!("skipping record: {e}"),
            Err(e) => return Err(e),
        }
    }
    Ok(episodes)
}

/// Loads the episodes of one split (or all, with `None`) in file order.
pub fn load_corpus(
    path: impl AsRef<Path>,
    split: Option<Split>,
    opts: &LoadOptions,
) -> Result<Vec<Episode>, CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(io_err)?);
        text.push('\n');
    }
    parse_corpus(&text, split, opts)
}

/// Serializes one episode as a single JSON line (no trailing newline).
pub fn episode_to_json(e: &Episode) -> String {
    serde_json::to_string(&EpisodeRecord::from_episode(e)).expect("episode records always serialize")
}

pub fn write_corpus(mut out: impl Write, episodes: &[Episode]) -> std::io::Result<()> {
    for e in episodes {
        writeln!(out, "{}", episode_to_json(e))?;
    }
    Ok(())
}

/// Lowercases, splits every punctuation character into its own token and
/// collapses whitespace.
pub fn normalize_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len() + 8);
    let mut pending_space = false;
    let push_sep = |out: &mut String, pending: &mut bool| {
        if *pending && !out.is_empty() {
            out.push(' ');
        }
        *pending = false;
    };
    for ch in raw.chars() {
        if ch.is_whitespace() {
            pending_space = true;
        } else if ch.is_alphanumeric() {
            push_sep(&mut out, &mut pending_space);
            out.extend(ch.to_lowercase());
        } else {
            pending_space = true;
            push_sep(&mut out, &mut pending_space);
            out.push(ch);
            pending_space = true;
        }
    }
    out
}

/// One string per utterance, episode-major then turn order. Both speakers are
/// included; world state is not serialized into the text stream.
pub fn extract_mlm_texts(episodes: &[Episode]) -> Vec<String> {
    episodes
        .iter()
        .flat_map(|e| e.dialogue.iter().map(|u| u.text.clone()))
        .collect()
}
