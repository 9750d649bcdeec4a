use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Real, Tensor};

/// Number of designable tile kinds.
pub const NUM_TILES: usize = 6;

/// Designable tile kinds, in channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TileType {
    Floor,
    Wall,
    Avatar,
    Key,
    Door,
    Monster,
}

impl TileType {
    pub const ALL: [TileType; NUM_TILES] = [
        TileType::Floor,
        TileType::Wall,
        TileType::Avatar,
        TileType::Key,
        TileType::Door,
        TileType::Monster,
    ];

    pub fn glyph(self) -> char {
        match self {
            TileType::Floor => '.',
            TileType::Wall => 'w',
            TileType::Avatar => 'A',
            TileType::Key => '+',
            TileType::Door => 'g',
            TileType::Monster => 'e',
        }
    }

    pub fn from_glyph(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.glyph() == c)
    }

    pub fn channel(self) -> usize {
        self as usize
    }

    /// Tile for a one-hot channel; reserved channels beyond the designable
    /// alphabet have no tile.
    pub fn from_channel(c: usize) -> Option<Self> {
        Self::ALL.get(c).copied()
    }
}

/// Where a level came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Origin {
    #[default]
    Generated,
    Curated,
    Elite,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Generated => "generated",
            Origin::Curated => "curated",
            Origin::Elite => "elite",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LevelError {
    #[error("unknown glyph {glyph:?} at row {row}, column {col}")]
    UnknownGlyph { row: usize, col: usize, glyph: char },
    #[error("row {row} has {found} cells, expected {expected}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("level text is empty")]
    Empty,
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: Box<LevelError>,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Static level design: a rectangular grid of tiles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelMap {
    height: usize,
    width: usize,
    cells: Vec<TileType>,
    pub origin: Origin,
}

impl LevelMap {
    pub fn new(height: usize, width: usize, cells: Vec<TileType>) -> Self {
        assert_eq!(cells.len(), height * width, "cell count must be height*width");
        Self {
            height,
            width,
            cells,
            origin: Origin::Generated,
        }
    }

    pub fn filled(height: usize, width: usize, tile: TileType) -> Self {
        Self::new(height, width, vec![tile; height * width])
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[TileType] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> TileType {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, tile: TileType) {
        self.cells[row * self.width + col] = tile;
    }

    pub fn count(&self, tile: TileType) -> usize {
        self.cells.iter().filter(|&&t| t == tile).count()
    }

    /// Parses the text form: one row per line, one glyph per cell.
    pub fn parse(text: &str) -> Result<Self, LevelError> {
        let rows: Vec<&str> = text
            .lines()
            .map(|l| l.strip_suffix('\r').unwrap_or(l))
            .collect();
        let rows = match rows.iter().rposition(|r| !r.is_empty()) {
            Some(last) => &rows[..=last],
            None => return Err(LevelError::Empty),
        };
        let width = rows[0].chars().count();
        let mut cells = Vec::with_capacity(rows.len() * width);
        for (r, line) in rows.iter().enumerate() {
            let found = line.chars().count();
            if found != width {
                return Err(LevelError::Ragged {
                    row: r,
                    expected: width,
                    found,
                });
            }
            for (c, ch) in line.chars().enumerate() {
                let tile = TileType::from_glyph(ch).ok_or(LevelError::UnknownGlyph {
                    row: r,
                    col: c,
                    glyph: ch,
                })?;
                cells.push(tile);
            }
        }
        if width == 0 {
            return Err(LevelError::Empty);
        }
        Ok(Self::new(rows.len(), width, cells))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LevelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LevelError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text).map_err(|e| LevelError::File {
            path: path.display().to_string(),
            source: Box::new(e),
        })
    }

    /// Glyph grid, one row per line, with a trailing newline.
    pub fn render(&self) -> String {
        let mut s = String::with_capacity((self.width + 1) * self.height);
        for row in self.cells.chunks(self.width) {
            s.extend(row.iter().map(|t| t.glyph()));
            s.push('\n');
        }
        s
    }

    /// `[channels, H, W]` one-hot view; channels past the designable
    /// alphabet stay zero.
    pub fn one_hot<T: Real>(&self, channels: usize) -> Tensor<T> {
        assert!(channels >= NUM_TILES);
        let plane = self.height * self.width;
        let mut t = Tensor::zeros(&[channels, self.height, self.width]);
        for (i, tile) in self.cells.iter().enumerate() {
            t.data_mut()[tile.channel() * plane + i] = T::one();
        }
        t
    }

    /// Exactly one avatar, at least one key and at least one door.
    pub fn is_playable_design(&self) -> bool {
        self.count(TileType::Avatar) == 1
            && self.count(TileType::Key) >= 1
            && self.count(TileType::Door) >= 1
    }
}

impl fmt::Display for LevelMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}
