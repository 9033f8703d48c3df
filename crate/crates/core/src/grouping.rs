//! How a weight matrix is cut into length-n sub-vectors.
//!
//! Matrices are `rows x cols` with one row per output neuron. Column
//! orientation slices each column into runs of `n` consecutive rows; row
//! orientation slices each row into runs of `n` consecutive columns.
//!
//! Sub-vectors are numbered in stream order: column orientation walks input
//! columns outermost (`s = col * (rows / n) + group`), row orientation walks
//! rows outermost (`s = row * (cols / n) + group`).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Orientation {
    #[default]
    Column,
    Row,
}

impl Orientation {
    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::Column => "column",
            Orientation::Row => "row",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Orientation::Column => 0,
            Orientation::Row => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Orientation::Column),
            1 => Some(Orientation::Row),
            _ => None,
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Orientation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "column" | "col" => Ok(Orientation::Column),
            "row" => Ok(Orientation::Row),
            other => Err(format!(
                "unknown orientation '{other}' (expected column or row)"
            )),
        }
    }
}

/// Sub-vector layout of one matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grouping {
    pub rows: usize,
    pub cols: usize,
    pub n: usize,
    pub orientation: Orientation,
}

impl Grouping {
    pub fn new(rows: usize, cols: usize, n: usize, orientation: Orientation) -> Result<Self> {
        let dim = match orientation {
            Orientation::Column => rows,
            Orientation::Row => cols,
        };
        if n == 0 || dim % n != 0 {
            return Err(Error::NotDivisible {
                dim,
                n,
                orientation: orientation.as_str(),
            });
        }
        Ok(Self {
            rows,
            cols,
            n,
            orientation,
        })
    }

    /// Sub-vectors per column (column orientation) or per row (row orientation).
    pub fn groups_per_line(&self) -> usize {
        match self.orientation {
            Orientation::Column => self.rows / self.n,
            Orientation::Row => self.cols / self.n,
        }
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols / self.n
    }

    /// Matrix coordinate of element `i` of sub-vector `s`.
    #[inline]
    pub fn coord(&self, s: usize, i: usize) -> (usize, usize) {
        let g = self.groups_per_line();
        let (line, group) = (s / g, s % g);
        match self.orientation {
            Orientation::Column => (group * self.n + i, line),
            Orientation::Row => (line, group * self.n + i),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divisibility() {
        assert!(Grouping::new(8, 3, 4, Orientation::Column).is_ok());
        assert!(matches!(
            Grouping::new(8, 3, 4, Orientation::Row),
            Err(Error::NotDivisible {
                dim: 3,
                n: 4,
                orientation: "row"
            })
        ));
    }

    #[test]
    fn stream_order() {
        let g = Grouping::new(4, 2, 2, Orientation::Column).unwrap();
        assert_eq!(g.count(), 4);
        assert_eq!(g.coord(0, 1), (1, 0));
        assert_eq!(g.coord(1, 0), (2, 0));
        assert_eq!(g.coord(2, 0), (0, 1));

        let g = Grouping::new(2, 4, 2, Orientation::Row).unwrap();
        assert_eq!(g.coord(1, 1), (0, 3));
        assert_eq!(g.coord(2, 0), (1, 0));
    }

    #[test]
    fn parse() {
        assert_eq!(
            "Column".parse::<Orientation>().unwrap(),
            Orientation::Column
        );
        assert_eq!("row".parse::<Orientation>().unwrap(), Orientation::Row);
        assert!("diag".parse::<Orientation>().is_err());
    }
}
