//! A library of `transform` programs with native Rust equivalents.
//!
//! The mock chat backend emits these sources and the mock executor runs the
//! matching native function, so the whole loop can run without a model
//! server or a Python worker.

use std::sync::Arc;

use crate::arc::Grid;

/// Native stand-in for a program: returns a raw nested list (validated by
/// the executor, so it may be out of range) or an error message.
pub type NativeTransform = Arc<dyn Fn(&Grid) -> Result<Vec<Vec<i64>>, String> + Send + Sync>;

#[derive(Clone)]
pub struct LibraryEntry {
    pub name: String,
    pub source: String,
    pub transform: NativeTransform,
}

impl std::fmt::Debug for LibraryEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LibraryEntry").field("name", &self.name).finish()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ProgramLibrary {
    entries: Vec<LibraryEntry>,
}

fn raw(g: &Grid) -> Vec<Vec<i64>> {
    g.to_raw()
}

fn entry(
    name: &str,
    source: &str,
    f: impl Fn(&Grid) -> Result<Vec<Vec<i64>>, String> + Send + Sync + 'static,
) -> LibraryEntry {
    LibraryEntry {
        name: name.to_string(),
        source: source.to_string(),
        transform: Arc::new(f),
    }
}

pub fn transpose(g: &Grid) -> Vec<Vec<i64>> {
    (0..g.width())
        .map(|c| (0..g.height()).map(|r| i64::from(g.get(r, c))).collect())
        .collect()
}

pub fn flip_horizontal(g: &Grid) -> Vec<Vec<i64>> {
    raw(g)
        .into_iter()
        .map(|mut r| {
            r.reverse();
            r
        })
        .collect()
}

pub fn flip_vertical(g: &Grid) -> Vec<Vec<i64>> {
    let mut rows = raw(g);
    rows.reverse();
    rows
}

pub fn rotate_180(g: &Grid) -> Vec<Vec<i64>> {
    let mut rows = flip_horizontal(g);
    rows.reverse();
    rows
}

pub fn rotate_cw(g: &Grid) -> Vec<Vec<i64>> {
    (0..g.width())
        .map(|c| (0..g.height()).rev().map(|r| i64::from(g.get(r, c))).collect())
        .collect()
}

pub fn recolor(g: &Grid, from: u8, to: u8) -> Vec<Vec<i64>> {
    g.rows()
        .iter()
        .map(|r| r.iter().map(|&v| i64::from(if v == from { to } else { v })).collect())
        .collect()
}

pub fn tile_horizontal(g: &Grid) -> Vec<Vec<i64>> {
    raw(g)
        .into_iter()
        .map(|r| {
            let mut out = r.clone();
            out.extend(r);
            out
        })
        .collect()
}

pub fn upscale2(g: &Grid) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    for r in raw(g) {
        let row: Vec<i64> = r.iter().flat_map(|&v| [v, v]).collect();
        out.push(row.clone());
        out.push(row);
    }
    out
}

/// Python source of the recolor program `from -> to`.
pub fn recolor_source(from: u8, to: u8) -> String {
    format!("def transform(grid):\n    return [[{to} if v == {from} else v for v in row] for row in grid]")
}

impl ProgramLibrary {
    pub fn new(entries: Vec<LibraryEntry>) -> Self {
        ProgramLibrary { entries }
    }

    /// Geometric transforms, a few recolors and some failure modes.
    pub fn standard() -> Self {
        let mut entries = vec![
            entry(
                "identity",
                "def transform(grid):\n    return [row[:] for row in grid]",
                |g| Ok(raw(g)),
            ),
            entry(
                "transpose",
                "def transform(grid):\n    return [list(row) for row in zip(*grid)]",
                |g| Ok(transpose(g)),
            ),
            entry(
                "flip_horizontal",
                "def transform(grid):\n    return [row[::-1] for row in grid]",
                |g| Ok(flip_horizontal(g)),
            ),
            entry(
                "flip_vertical",
                "def transform(grid):\n    return [row[:] for row in grid[::-1]]",
                |g| Ok(flip_vertical(g)),
            ),
            entry(
                "rotate_180",
                "def transform(grid):\n    return [row[::-1] for row in grid[::-1]]",
                |g| Ok(rotate_180(g)),
            ),
            entry(
                "rotate_cw",
                "def transform(grid):\n    return [list(row) for row in zip(*grid[::-1])]",
                |g| Ok(rotate_cw(g)),
            ),
            entry(
                "tile_horizontal",
                "def transform(grid):\n    return [row + row for row in grid]",
                |g| Ok(tile_horizontal(g)),
            ),
            entry(
                "upscale2",
                "def transform(grid):\n    out = []\n    for row in grid:\n        wide = [v for v in row for _ in range(2)]\n        out.append(wide)\n        out.append(list(wide))\n    return out",
                |g| Ok(upscale2(g)),
            ),
            entry(
                "first_row",
                "def transform(grid):\n    return [grid[0][:]]",
                |g| Ok(vec![raw(g)[0].clone()]),
            ),
            entry(
                "raises",
                "def transform(grid):\n    raise ValueError('unsupported grid')",
                |_| Err("ValueError: unsupported grid".to_string()),
            ),
            entry(
                "too_tall",
                "def transform(grid):\n    return [[0] for _ in range(31)]",
                |_| Ok(vec![vec![0]; 31]),
            ),
            entry(
                "fails_on_wide",
                "def transform(grid):\n    if len(grid[0]) > 3:\n        raise IndexError('list index out of range')\n    return [row[::-1] for row in grid]",
                |g| {
                    if g.width() > 3 {
                        Err("IndexError: list index out of range".to_string())
                    } else {
                        Ok(flip_horizontal(g))
                    }
                },
            ),
        ];
        for (from, to) in [(1u8, 2u8), (2, 3), (3, 4), (5, 6), (0, 8)] {
            entries.push(entry(
                &format!("recolor_{from}_{to}"),
                &recolor_source(from, to),
                move |g| Ok(recolor(g, from, to)),
            ));
        }
        ProgramLibrary { entries }
    }

    pub fn push(&mut self, e: LibraryEntry) {
        self.entries.push(e);
    }

    pub fn entries(&self) -> &[LibraryEntry] {
        &self.entries
    }

    pub fn by_name(&self, name: &str) -> Option<&LibraryEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn by_source(&self, source: &str) -> Option<&LibraryEntry> {
        self.entries.iter().find(|e| e.source == source)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_transforms() {
        let g = Grid::new(vec![vec![1, 2, 3], vec![4, 5, 6]]).unwrap();
        assert_eq!(transpose(&g), vec![vec![1, 4], vec![2, 5], vec![3, 6]]);
        assert_eq!(rotate_cw(&g), vec![vec![4, 1], vec![5, 2], vec![6, 3]]);
        assert_eq!(rotate_180(&g), vec![vec![6, 5, 4], vec![3, 2, 1]]);
        assert_eq!(upscale2(&Grid::new(vec![vec![7]]).unwrap()), vec![vec![7, 7]; 2]);
    }

    #[test]
    fn sources_are_unique() {
        let lib = ProgramLibrary::standard();
        let mut sources: Vec<_> = lib.entries().iter().map(|e| &e.source).collect();
        sources.sort();
        sources.dedup();
        assert_eq!(sources.len(), lib.entries().len());
    }
}
