use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    Wall,
    Floor,
    Water,
    Goal,
    Key,
    DoorClosed,
}

impl Cell {
    fn from_char(c: char) -> Option<Cell> {
        Some(match c {
            '#' => Cell::Wall,
            '.' | ' ' => Cell::Floor,
            '~' => Cell::Water,
            'G' => Cell::Goal,
            'K' => Cell::Key,
            'D' => Cell::DoorClosed,
            _ => return None,
        })
    }

    fn to_char(self) -> char {
        match self {
            Cell::Wall => '#',
            Cell::Floor => '.',
            Cell::Water => '~',
            Cell::Goal => 'G',
            Cell::Key => 'K',
            Cell::DoorClosed => 'D',
        }
    }

    /// Wall and Water never hold the agent.
    pub fn is_solid(self) -> bool {
        matches!(self, Cell::Wall | Cell::Water)
    }
}

/// Static part of a grid task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    name: String,
    width: usize,
    height: usize,
    cells: Vec<Cell>,
}

impl Layout {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.width + col]
    }

    /// Cell at a signed offset from `(row, col)`, or `None` off the grid.
    pub fn neighbor(&self, (row, col): (usize, usize), (dr, dc): (isize, isize)) -> Option<(usize, usize)> {
        let r = row.checked_add_signed(dr)?;
        let c = col.checked_add_signed(dc)?;
        (r < self.height && c < self.width).then_some((r, c))
    }

    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height).flat_map(move |r| (0..self.width).map(move |c| (r, c)))
    }

    pub fn find(&self, kind: Cell) -> Option<(usize, usize)> {
        self.positions().find(|&(r, c)| self.cell(r, c) == kind)
    }

    pub fn goal(&self) -> (usize, usize) {
        self.find(Cell::Goal).expect("validated layout has a goal")
    }

    pub fn key(&self) -> Option<(usize, usize)> {
        self.find(Cell::Key)
    }

    pub fn door(&self) -> Option<(usize, usize)> {
        self.find(Cell::DoorClosed)
    }

    pub fn has_key_and_door(&self) -> bool {
        self.key().is_some()
    }

    /// Cells a fresh episode may start on.
    pub fn start_cells(&self) -> Vec<(usize, usize)> {
        self.positions()
            .filter(|&(r, c)| self.cell(r, c) == Cell::Floor)
            .collect()
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..self.height {
            let line: String = (0..self.width).map(|c| self.cell(r, c).to_char()).collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

fn parse_error(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

/// Parses an ASCII map. Lines and columns in errors are 1-based.
pub fn parse_layout(name: &str, text: &str) -> Result<Layout> {
    let mut lines: Vec<&str> = text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l)).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    if lines.is_empty() {
        return Err(parse_error(1, 1, "empty layout"));
    }
    let width = lines[0].chars().count();
    let height = lines.len();
    let mut cells = Vec::with_capacity(width * height);
    let mut goal = None;
    let mut key = None;
    let mut door = None;
    for (r, line) in lines.iter().enumerate() {
        let len = line.chars().count();
        if len != width {
            return Err(parse_error(
                r + 1,
                len.min(width) + 1,
                format!("row has {len} characters, expected {width}"),
            ));
        }
        for (c, ch) in line.chars().enumerate() {
            let cell =
                Cell::from_char(ch).ok_or_else(|| parse_error(r + 1, c + 1, format!("unknown character {ch:?}")))?;
            let border = r == 0 || c == 0 || r + 1 == height || c + 1 == width;
            if border && cell != Cell::Wall {
                return Err(parse_error(r + 1, c + 1, "border cell must be a wall"));
            }
            let slot = match cell {
                Cell::Goal => Some((&mut goal, "goal")),
                Cell::Key => Some((&mut key, "key")),
                Cell::DoorClosed => Some((&mut door, "door")),
                _ => None,
            };
            if let Some((slot, what)) = slot {
                if slot.is_some() {
                    return Err(parse_error(r + 1, c + 1, format!("duplicate {what}")));
                }
                *slot = Some((r, c));
            }
            cells.push(cell);
        }
    }
    if goal.is_none() {
        return Err(parse_error(height, width, "missing goal"));
    }
    match (key, door) {
        (Some(_), None) => return Err(parse_error(height, width, "key without a door")),
        (None, Some((r, c))) => return Err(parse_error(r + 1, c + 1, "door without a key")),
        _ => {}
    }
    Ok(Layout {
        name: name.to_string(),
        width,
        height,
        cells,
    })
}
