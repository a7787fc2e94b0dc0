//! Value parsers for compound flags.

use std::str::FromStr;

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Grid {
    pub nlat: usize,
    pub nlon: usize,
}

impl FromStr for Grid {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (h, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("grid must look like HxW, got {s}"))?;
        let dim = |v: &str| {
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| format!("bad grid dimension {v:?}"))
        };
        Ok(Grid {
            nlat: dim(h)?,
            nlon: dim(w)?,
        })
    }
}

/// Half-open day range written `START..END` or `START:END`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl FromStr for Window {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s
            .split_once("..")
            .or_else(|| s.split_once(':'))
            .ok_or_else(|| format!("window must look like START..END, got {s}"))?;
        let day = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad day index {v:?}"))
        };
        let w = Window {
            start: day(a)?,
            end: day(b)?,
        };
        if w.start >= w.end {
            return Err(format!("empty window {s}"));
        }
        Ok(w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QStar(pub Option<f64>);

impl FromStr for QStar {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(QStar(None)),
            "0.5" => Ok(QStar(Some(0.5))),
            "0.9" => Ok(QStar(Some(0.9))),
            _ => Err(format!("qstar must be none, 0.5 or 0.9, got {s}")),
        }
    }
}
