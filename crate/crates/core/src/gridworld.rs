//! Voxel world state: block colors, cells, the Place/Remove/Stop action algebra,
//! placement feasibility, net changes between two worlds, and replay.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GridError {
    #[error("cell {cell} is outside grid {dims}")]
    OutOfBounds { cell: Cell, dims: GridDims },
    #[error("cannot place onto occupied cell {0}")]
    OccupiedCell(Cell),
    #[error("cannot remove from empty cell {0}")]
    EmptyCell(Cell),
    #[error("placement at {0} has no ground or face-adjacent support")]
    UnsupportedPlacement(Cell),
    #[error("grid dimensions differ: {0} vs {1}")]
    DimsMismatch(GridDims, GridDims),
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<GridError>,
    },
    #[error("unknown block color `{0}`")]
    UnknownColor(String),
}

impl GridError {
    /// The underlying error, with any step annotation stripped.
    pub fn root(&self) -> &GridError {
        match self {
            GridError::AtStep { source, .. } => source.root(),
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockColor {
    Red,
    Orange,
    Yellow,
    Green,
    Blue,
    Purple,
}

impl BlockColor {
    pub const ALL: [BlockColor; 6] = [
        BlockColor::Red,
        BlockColor::Orange,
        BlockColor::Yellow,
        BlockColor::Green,
        BlockColor::Blue,
        BlockColor::Purple,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockColor::Red => "red",
            BlockColor::Orange => "orange",
            BlockColor::Yellow => "yellow",
            BlockColor::Green => "green",
            BlockColor::Blue => "blue",
            BlockColor::Purple => "purple",
        }
    }
}

impl fmt::Display for BlockColor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockColor {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| GridError::UnknownColor(s.to_string()))
    }
}

/// A voxel coordinate: `x` column, `y` height, `z` depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Cell { x, y, z }
    }

    fn face_neighbors(self) -> [Cell; 6] {
        let Cell { x, y, z } = self;
        [
            Cell::new(x - 1, y, z),
            Cell::new(x + 1, y, z),
            Cell::new(x, y - 1, z),
            Cell::new(x, y + 1, z),
            Cell::new(x, y, z - 1),
            Cell::new(x, y, z + 1),
        ]
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.x, self.y, self.z)
    }
}

/// Grid extent: `width` along x, `height` along y, `depth` along z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridDims {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
}

impl GridDims {
    pub const fn new(width: usize, height: usize, depth: usize) -> Self {
        GridDims { width, height, depth }
    }

    pub fn cell_count(&self) -> usize {
        self.width * self.height * self.depth
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.x >= 0
            && c.y >= 0
            && c.z >= 0
            && (c.x as usize) < self.width
            && (c.y as usize) < self.height
            && (c.z as usize) < self.depth
    }

    /// Linear index of an in-bounds cell, x-major then y then z.
    pub fn index_of(&self, c: Cell) -> usize {
        debug_assert!(self.contains(c));
        (c.x as usize * self.height + c.y as usize) * self.depth + c.z as usize
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        let z = index % self.depth;
        let y = (index / self.depth) % self.height;
        let x = index / (self.depth * self.height);
        Cell::new(x as i32, y as i32, z as i32)
    }

    /// All cells in linear-index order.
    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.cell_count()).map(|i| self.cell_at(i))
    }
}

impl Default for GridDims {
    fn default() -> Self {
        GridDims::new(11, 9, 11)
    }
}

impl fmt::Display for GridDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.depth)
    }
}

/// Builder action. The derived ordering is the canonical candidate order:
/// Stop first, then Place by cell then color, then Remove by cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    Stop,
    Place { cell: Cell, color: BlockColor },
    Remove { cell: Cell },
}

impl Action {
    pub fn place(color: BlockColor, cell: Cell) -> Self {
        Action::Place { cell, color }
    }

    pub fn remove(cell: Cell) -> Self {
        Action::Remove { cell }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Stop => f.write_str("stop"),
            Action::Place { cell, color } => write!(f, "place {color} {cell}"),
            Action::Remove { cell } => write!(f, "remove {cell}"),
        }
    }
}

pub type ActionSeq = Vec<Action>;

/// Dense voxel occupancy with value semantics.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grid {
    dims: GridDims,
    cells: Vec<Option<BlockColor>>,
}

impl Grid {
    pub fn empty(dims: GridDims) -> Self {
        Grid {
            dims,
            cells: vec![None; dims.cell_count()],
        }
    }

    /// Builds a grid from a block list. Blocks are set directly, without the
    /// support rule, since recorded worlds may contain floating blocks.
    pub fn from_blocks(
        dims: GridDims,
        blocks: impl IntoIterator<Item = (Cell, BlockColor)>,
    ) -> Result<Self, GridError> {
        let mut grid = Grid::empty(dims);
        for (cell, color) in blocks {
            grid.check_bounds(cell)?;
            let slot = &mut grid.cells[dims.index_of(cell)];
            if slot.is_some() {
                return Err(GridError::OccupiedCell(cell));
            }
            *slot = Some(color);
        }
        Ok(grid)
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn get(&self, cell: Cell) -> Option<BlockColor> {
        if self.dims.contains(cell) {
            self.cells[self.dims.index_of(cell)]
        } else {
            None
        }
    }

    pub fn is_occupied(&self, cell: Cell) -> bool {
        self.get(cell).is_some()
    }

    /// Occupied cells in linear-index order.
    pub fn blocks(&self) -> impl Iterator<Item = (Cell, BlockColor)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|color| (self.dims.cell_at(i), color)))
    }

    pub fn block_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Per-cell occupancy class in linear-index order: 0 = empty, 1 + color index otherwise.
    pub fn occupancy_classes(&self) -> Vec<usize> {
        self.cells
            .iter()
            .map(|c| c.map_or(0, |color| color.index() + 1))
            .collect()
    }

    fn check_bounds(&self, cell: Cell) -> Result<(), GridError> {
        if self.dims.contains(cell) {
            Ok(())
        } else {
            Err(GridError::OutOfBounds {
                cell,
                dims: self.dims,
            })
        }
    }

    /// Ground level or at least one occupied face neighbor.
    pub fn is_supported(&self, cell: Cell) -> bool {
        cell.y == 0 || cell.face_neighbors().iter().any(|&n| self.is_occupied(n))
    }

    fn check(&self, action: &Action) -> Result<(), GridError> {
        match *action {
            Action::Stop => Ok(()),
            Action::Place { cell, .. } => {
                self.check_bounds(cell)?;
                if self.is_occupied(cell) {
                    Err(GridError::OccupiedCell(cell))
                } else if !self.is_supported(cell) {
                    Err(GridError::UnsupportedPlacement(cell))
                } else {
                    Ok(())
                }
            }
            Action::Remove { cell } => {
                self.check_bounds(cell)?;
                if self.is_occupied(cell) {
                    Ok(())
                } else {
                    Err(GridError::EmptyCell(cell))
                }
            }
        }
    }

    /// Applies `action` in place.
    pub fn apply_mut(&mut self, action: &Action) -> Result<(), GridError> {
        self.check(action)?;
        match *action {
            Action::Stop => {}
            Action::Place { cell, color } => {
                let i = self.dims.index_of(cell);
                self.cells[i] = Some(color);
            }
            Action::Remove { cell } => {
                let i = self.dims.index_of(cell);
                self.cells[i] = None;
            }
        }
        Ok(())
    }

    pub fn is_feasible(&self, action: &Action) -> bool {
        self.check(action).is_ok()
    }
}

/// Every action that applies cleanly to `grid`, in canonical order. Always contains Stop.
pub fn feasible(grid: &Grid) -> BTreeSet<Action> {
    feasible_vec(grid).into_iter().collect()
}

/// Same as [`feasible`] but as a vector already in canonical order.
pub fn feasible_vec(grid: &Grid) -> Vec<Action> {
    let mut places = Vec::new();
    let mut removes = Vec::new();
    for (i, slot) in grid.cells.iter().enumerate() {
        let cell = grid.dims.cell_at(i);
        match slot {
            Some(_) => removes.push(Action::Remove { cell }),
            None if grid.is_supported(cell) => {
                places.extend(BlockColor::ALL.iter().map(|&color| Action::Place { cell, color }))
            }
            None => {}
        }
    }
    let mut out = Vec::with_capacity(1 + places.len() + removes.len());
    out.push(Action::Stop);
    out.append(&mut places);
    out.append(&mut removes);
    // linear index order is x,y,z lexicographic, which matches Cell's Ord
    debug_assert!(out.windows(2).all(|w| w[0] < w[1]));
    out
}

/// Returns a new grid with `action` applied; `grid` is left untouched.
pub fn apply(grid: &Grid, action: &Action) -> Result<Grid, GridError> {
    let mut next = grid.clone();
    next.apply_mut(action)?;
    Ok(next)
}

/// Left fold of [`apply`]. Support is only checked at placement time, so blocks
/// may be left floating after their support is removed.
pub fn replay(initial: &Grid, actions: &[Action]) -> Result<Grid, GridError> {
    let mut grid = initial.clone();
    for (step, action) in actions.iter().enumerate() {
        grid.apply_mut(action).map_err(|e| GridError::AtStep {
            step,
            source: Box::new(e),
        })?;
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Delta {
    Added(Cell, BlockColor),
    Removed(Cell, BlockColor),
}

impl Delta {
    pub fn mirrored(self) -> Delta {
        match self {
            Delta::Added(c, k) => Delta::Removed(c, k),
            Delta::Removed(c, k) => Delta::Added(c, k),
        }
    }
}

impl fmt::Display for Delta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Delta::Added(c, k) => write!(f, "+ {k} {c}"),
            Delta::Removed(c, k) => write!(f, "- {k} {c}"),
        }
    }
}

/// Signed block changes between two worlds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NetChange {
    deltas: BTreeSet<Delta>,
}

impl NetChange {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Delta> {
        self.deltas.iter()
    }

    pub fn contains(&self, d: &Delta) -> bool {
        self.deltas.contains(d)
    }

    pub fn as_set(&self) -> &BTreeSet<Delta> {
        &self.deltas
    }

    /// Swaps Added and Removed entries.
    pub fn mirrored(&self) -> NetChange {
        NetChange {
            deltas: self.deltas.iter().map(|d| d.mirrored()).collect(),
        }
    }

    /// Builds a net change from raw deltas, rejecting sets that violate the
    /// no-duplicate-cell invariants. A recolor (Removed and Added on the same
    /// cell with different colors) is allowed.
    pub fn from_deltas(deltas: impl IntoIterator<Item = Delta>) -> Option<NetChange> {
        let mut added = BTreeSet::new();
        let mut removed = BTreeSet::new();
        let mut out = BTreeSet::new();
        for d in deltas {
            let fresh = match d {
                Delta::Added(c, _) => added.insert(c),
                Delta::Removed(c, _) => removed.insert(c),
            };
            if !fresh {
                return None;
            }
            out.insert(d);
        }
        for d in &out {
            if let Delta::Added(c, k) = d {
                if out.contains(&Delta::Removed(*c, *k)) {
                    return None;
                }
            }
        }
        Some(NetChange { deltas: out })
    }
}

impl<'a> IntoIterator for &'a NetChange {
    type Item = &'a Delta;
    type IntoIter = std::collections::btree_set::Iter<'a, Delta>;

    fn into_iter(self) -> Self::IntoIter {
        self.deltas.iter()
    }
}

/// Net change from `before` to `after`. A recolored cell yields Removed(old) and Added(new).
pub fn diff(before: &Grid, after: &Grid) -> Result<NetChange, GridError> {
    if before.dims != after.dims {
        return Err(GridError::DimsMismatch(before.dims, after.dims));
    }
    let mut deltas = BTreeSet::new();
    for (i, (b, a)) in before.cells.iter().zip(&after.cells).enumerate() {
        let cell = before.dims.cell_at(i);
        match (*b, *a) {
            (None, Some(k)) => {
                deltas.insert(Delta::Added(cell, k));
            }
            (Some(k), None) => {
                deltas.insert(Delta::Removed(cell, k));
            }
            (Some(old), Some(new)) if old != new => {
                deltas.insert(Delta::Removed(cell, old));
                deltas.insert(Delta::Added(cell, new));
            }
            _ => {}
        }
    }
    Ok(NetChange { deltas })
}

/// Orders the net change into a feasible action sequence: all removals first,
/// then placements in an order where each one is supported when placed.
/// Returns `None` when some added block can never become supported.
pub fn plan_actions(before: &Grid, change: &NetChange) -> Option<ActionSeq> {
    let mut grid = before.clone();
    let mut actions = Vec::new();
    for d in change {
        if let Delta::Removed(cell, _) = *d {
            let a = Action::Remove { cell };
            grid.apply_mut(&a).ok()?;
            actions.push(a);
        }
    }
    let mut pending: Vec<(Cell, BlockColor)> = change
        .iter()
        .filter_map(|d| match *d {
            Delta::Added(c, k) => Some((c, k)),
            Delta::Removed(..) => None,
        })
        .collect();
    while !pending.is_empty() {
        let pos = pending.iter().position(|&(c, _)| grid.is_supported(c))?;
        let (cell, color) = pending.remove(pos);
        let a = Action::Place { cell, color };
        grid.apply_mut(&a).ok()?;
        actions.push(a);
    }
    Some(actions)
}

/// Renders a grid as horizontal layers from the top down; `.` is empty and
/// each block shows the first letter of its color.
pub fn render(grid: &Grid) -> String {
    let dims = grid.dims();
    let mut out = String::new();
    for y in (0..dims.height).rev() {
        let layer: Vec<String> = (0..dims.depth)
            .map(|z| {
                (0..dims.width)
                    .map(|x| match grid.get(Cell::new(x as i32, y as i32, z as i32)) {
                        Some(c) => c.name().chars().next().unwrap_or('?'),
                        None => '.',
                    })
                    .collect()
            })
            .collect();
        if layer.iter().all(|row| row.chars().all(|c| c == '.')) {
            continue;
        }
        out.push_str(&format!("y={y}\n"));
        for row in layer {
            out.push_str(&row);
            out.push('\n');
        }
    }
    if out.is_empty() {
        out.push_str("(empty)\n");
    }
    out
}
