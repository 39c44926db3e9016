//! Seeded generator for templated building dialogues.
//!
//! Instructions name a color and a column (`row <x> column <z>`); the builder
//! stacks onto or removes from the top of that column. The language is small
//! but fully grounded, so both the MLM objective and the builder head have
//! something to learn.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Episode, GoldTurn, Speaker, Split, Utterance};
use crate::gridworld::{Action, BlockColor, Cell, Grid, GridDims};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub episodes: usize,
    pub dims: GridDims,
    pub min_turns: usize,
    pub max_turns: usize,
    /// Max actions per turn.
    pub max_actions: usize,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            episodes: 50,
            dims: GridDims::new(5, 3, 5),
            min_turns: 3,
            max_turns: 5,
            max_actions: 2,
            valid_fraction: 0.2,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

const PLACE_TEMPLATES: &[&str] = &[
    "place a {c} block at row {x} column {z}",
    "put a {c} block on row {x} column {z}",
    "add one {c} block at row {x} column {z}",
    "now a {c} one at row {x} column {z}",
];
const STACK_TEMPLATES: &[&str] = &[
    "stack a {c} block on the {u} one at row {x} column {z}",
    "put a {c} block on top of the {u} block at row {x} column {z}",
];
const REMOVE_TEMPLATES: &[&str] = &[
    "remove the {c} block at row {x} column {z}",
    "take away the {c} block from row {x} column {z}",
];
const JOINERS: &[&str] = &["and then", "then", "and also"];
const BUILDER_REPLIES: &[&str] = &["ok", "done", "got it", "sure , done", "placed it", "okay what next ?"];
const ARCHITECT_FILLERS: &[&str] = &["great job", "nice , thanks", "perfect", "good , keep going"];

fn fill(template: &str, color: BlockColor, under: Option<BlockColor>, cell: Cell) -> String {
    template
        .replace("{c}", color.name())
        .replace("{u}", under.map_or("", |u| u.name()))
        .replace("{x}", &cell.x.to_string())
        .replace("{z}", &cell.z.to_string())
}

fn column_top(grid: &Grid, x: i32, z: i32) -> Option<(Cell, BlockColor)> {
    (0..grid.dims().height as i32)
        .rev()
        .map(|y| Cell::new(x, y, z))
        .find_map(|c| grid.get(c).map(|k| (c, k)))
}

/// One instruction and its action; mutates `grid`.
fn sample_step(rng: &mut ChaCha8Rng, grid: &mut Grid) -> (String, Action) {
    let dims = grid.dims();
    loop {
        let x = rng.random_range(0..dims.width as i32);
        let z = rng.random_range(0..dims.depth as i32);
        let top = column_top(grid, x, z);
        let want_remove = top.is_some() && rng.random_bool(0.25);
        if want_remove {
            let (cell, color) = top.expect("checked");
            let text = fill(REMOVE_TEMPLATES.choose(rng).expect("non-empty"), color, None, cell);
            let a = Action::remove(cell);
            grid.apply_mut(&a).expect("top block is removable");
            return (text, a);
        }
        let y = top.map_or(0, |(c, _)| c.y + 1);
        if y as usize >= dims.height {
            continue;
        }
        let cell = Cell::new(x, y, z);
        let color = *BlockColor::ALL.choose(rng).expect("non-empty");
        let text = match top {
            Some((_, under)) => fill(STACK_TEMPLATES.choose(rng).expect("non-empty"), color, Some(under), cell),
            None => fill(PLACE_TEMPLATES.choose(rng).expect("non-empty"), color, None, cell),
        };
        let a = Action::place(color, cell);
        grid.apply_mut(&a).expect("column top is supported");
        return (text, a);
    }
}

fn split_for(i: usize, n: usize, cfg: &SynthConfig) -> Split {
    let n_test = (n as f64 * cfg.test_fraction).round() as usize;
    let n_valid = (n as f64 * cfg.valid_fraction).round() as usize;
    if i >= n - n_test.min(n) {
        Split::Test
    } else if i >= n - (n_test + n_valid).min(n) {
        Split::Valid
    } else {
        Split::Train
    }
}

pub fn generate(cfg: &SynthConfig) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.episodes)
        .map(|i| {
            let mut grid = Grid::empty(cfg.dims);
            let initial_world = grid.clone();
            let mut dialogue = Vec::new();
            let mut gold_turns = Vec::new();
            let turns = rng.random_range(cfg.min_turns..=cfg.max_turns);
            let push = |dialogue: &mut Vec<Utterance>, speaker, text: String| {
                let turn_index = dialogue.len();
                dialogue.push(Utterance { speaker, text, turn_index });
            };
            for t in 0..turns {
                let n_actions = rng.random_range(1..=cfg.max_actions.max(1));
                let mut parts = Vec::new();
                let mut actions = Vec::new();
                for _ in 0..n_actions {
                    let (text, a) = sample_step(&mut rng, &mut grid);
                    parts.push(text);
                    actions.push(a);
                }
                let joiner = JOINERS.choose(&mut rng).expect("non-empty");
                push(&mut dialogue, Speaker::Architect, parts.join(&format!(" {joiner} ")));
                gold_turns.push(GoldTurn {
                    turn: dialogue.len() - 1,
                    actions,
                });
                push(
                    &mut dialogue,
                    Speaker::Builder,
                    BUILDER_REPLIES.choose(&mut rng).expect("non-empty").to_string(),
                );
                if t + 1 < turns && rng.random_bool(0.3) {
                    push(
                        &mut dialogue,
                        Speaker::Architect,
                        ARCHITECT_FILLERS.choose(&mut rng).expect("non-empty").to_string(),
                    );
                }
            }
            Episode {
                id: format!("synth-{:03}", i),
                split: split_for(i, cfg.episodes, cfg),
                dialogue,
                initial_world,
                gold_turns,
            }
        })
        .collect()
}

/// `n` single-turn episodes with exactly one placement each.
pub fn single_action_episodes(n: usize, dims: GridDims, seed: u64) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut grid = Grid::empty(dims);
            let initial_world = grid.clone();
            let (text, action) = loop {
                let step = sample_step(&mut rng, &mut grid);
                if matches!(step.1, Action::Place { .. }) {
                    break step;
                }
            };
            Episode {
                id: format!("single-{:03}", i),
                split: Split::Train,
                dialogue: vec![Utterance {
                    speaker: Speaker::Architect,
                    text,
                    turn_index: 0,
                }],
                initial_world,
                gold_turns: vec![GoldTurn {
                    turn: 0,
                    actions: vec![action],
                }],
            }
        })
        .collect()
}
