//! Accuracy-aware even grid over each observation unit's square sub-area.
//!
//! The cell count comes from the minimum grid number that keeps the
//! region-search accuracy `pi r^2 / gs` at or above `alpha` for every search
//! circle of radius `r >= r_min`. Cells are half-open `[lo, hi)` except the
//! outermost column and row, which are closed on the right/top so that every
//! point of the sub-area has exactly one owner.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::Region;
use crate::error::{DomainError, GridError};

/// Upper bound on cells per unit grid.
pub const MAX_CELLS: u64 = 1 << 28;

/// Partition id: owning unit plus row-major cell index `iy * gx + ix`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pid {
    pub unit: u32,
    pub cell: u32,
}

impl Pid {
    pub fn new(unit: u32, cell: u32) -> Self {
        Self { unit, cell }
    }
}

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.unit, self.cell)
    }
}

impl FromStr for Pid {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DomainError::MalformedRow(format!("bad partition id {s:?}"));
        let (u, c) = s.split_once(':').ok_or_else(bad)?;
        Ok(Pid {
            unit: u.parse().map_err(|_| bad())?,
            cell: c.parse().map_err(|_| bad())?,
        })
    }
}

/// Lower-left / upper-right corners of one partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionMeta {
    pub pid: Pid,
    pub lo: (f64, f64),
    pub hi: (f64, f64),
}

impl PartitionMeta {
    pub fn area(&self) -> f64 {
        (self.hi.0 - self.lo.0) * (self.hi.1 - self.lo.1)
    }

    /// Storage key `meta:<unit>:<cell>`.
    pub fn key(&self) -> String {
        meta_key(self.pid)
    }

    /// Storage value `lox,loy,hix,hiy`.
    pub fn encode(&self) -> String {
        format!("{},{},{},{}", self.lo.0, self.lo.1, self.hi.0, self.hi.1)
    }

    pub fn decode(pid: Pid, value: &str) -> Result<Self, DomainError> {
        let nums = value
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| DomainError::MalformedRow(format!("bad partition meta {value:?}")))?;
        match nums.as_slice() {
            &[lx, ly, hx, hy] => Ok(Self {
                pid,
                lo: (lx, ly),
                hi: (hx, hy),
            }),
            _ => Err(DomainError::MalformedRow(format!(
                "partition meta needs 4 fields: {value:?}"
            ))),
        }
    }
}

pub fn meta_key(pid: Pid) -> String {
    format!("meta:{}:{}", pid.unit, pid.cell)
}

/// Minimum grid number for accuracy `alpha`, radius `r`, and sub-area `s`:
/// `ceil(64 s alpha^2 / (pi r (1 - alpha))^2)`.
pub fn grid_number(alpha: f64, r: f64, s: f64) -> Result<u64, GridError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GridError::Accuracy(alpha));
    }
    if !(r > 0.0 && r.is_finite()) {
        return Err(GridError::Radius(r));
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(GridError::Area(s));
    }
    let denom = PI * r * (1.0 - alpha);
    let gn = (64.0 * s * alpha * alpha / (denom * denom)).ceil();
    if gn > MAX_CELLS as f64 {
        return Err(GridError::TooManyCells(gn));
    }
    Ok((gn as u64).max(1))
}

/// Lower bound on region-search accuracy for a disk of radius `r` over
/// `cell_w x cell_h` cells: `pi r / (4 (w + h) + pi r)`.
pub fn accuracy_bound(r: f64, cell_w: f64, cell_h: f64) -> f64 {
    PI * r / (4.0 * (cell_w + cell_h) + PI * r)
}

fn ceil_sqrt(n: u64) -> u64 {
    let mut s = (n as f64).sqrt().ceil() as u64;
    while s * s < n {
        s += 1;
    }
    while s > 1 && (s - 1) * (s - 1) >= n {
        s -= 1;
    }
    s.max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionGrid {
    pub unit: u32,
    pub origin: (f64, f64),
    pub side: f64,
    pub gx: u32,
    pub gy: u32,
    pub cell_w: f64,
    pub cell_h: f64,
}

impl PartitionGrid {
    /// Square-as-possible grid with `gx = gy = ceil(sqrt(gn))` for the grid
    /// number of `(alpha, r_min, s)`; `side = sqrt(s)`.
    pub fn build(
        unit: u32,
        origin: (f64, f64),
        s: f64,
        alpha: f64,
        r_min: f64,
    ) -> Result<Self, GridError> {
        let gn = grid_number(alpha, r_min, s)?;
        Self::with_cell_count(unit, origin, s.sqrt(), gn)
    }

    /// Square-as-possible grid holding at least `cells` cells.
    pub fn with_cell_count(
        unit: u32,
        origin: (f64, f64),
        side: f64,
        cells: u64,
    ) -> Result<Self, GridError> {
        if cells > MAX_CELLS {
            return Err(GridError::TooManyCells(cells as f64));
        }
        let g = ceil_sqrt(cells.max(1)) as u32;
        Self::with_shape(unit, origin, side, g, g)
    }

    pub fn with_shape(
        unit: u32,
        origin: (f64, f64),
        side: f64,
        gx: u32,
        gy: u32,
    ) -> Result<Self, GridError> {
        if gx == 0 || gy == 0 {
            return Err(GridError::Shape { gx, gy });
        }
        if u64::from(gx) * u64::from(gy) > MAX_CELLS {
            return Err(GridError::TooManyCells(f64::from(gx) * f64::from(gy)));
        }
        if !(side > 0.0 && side.is_finite()) {
            return Err(GridError::Area(side * side));
        }
        Ok(Self {
            unit,
            origin,
            side,
            gx,
            gy,
            cell_w: side / f64::from(gx),
            cell_h: side / f64::from(gy),
        })
    }

    pub fn cell_count(&self) -> u32 {
        self.gx * self.gy
    }

    pub fn area(&self) -> f64 {
        self.side * self.side
    }

    fn x_edge(&self, i: u32) -> f64 {
        if i == self.gx {
            self.origin.0 + self.side
        } else {
            self.origin.0 + f64::from(i) * self.cell_w
        }
    }

    fn y_edge(&self, i: u32) -> f64 {
        if i == self.gy {
            self.origin.1 + self.side
        } else {
            self.origin.1 + f64::from(i) * self.cell_h
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.origin.0 && x <= self.x_edge(self.gx) && y >= self.origin.1 && y <= self.y_edge(self.gy)
    }

    /// Column index of `x`, consistent with the stored cell edges.
    fn column(&self, x: f64) -> u32 {
        let raw = ((x - self.origin.0) / self.cell_w).floor();
        let mut ix = raw.clamp(0.0, f64::from(self.gx - 1)) as u32;
        while ix > 0 && x < self.x_edge(ix) {
            ix -= 1;
        }
        while ix + 1 < self.gx && x >= self.x_edge(ix + 1) {
            ix += 1;
        }
        ix
    }

    fn row(&self, y: f64) -> u32 {
        let raw = ((y - self.origin.1) / self.cell_h).floor();
        let mut iy = raw.clamp(0.0, f64::from(self.gy - 1)) as u32;
        while iy > 0 && y < self.y_edge(iy) {
            iy -= 1;
        }
        while iy + 1 < self.gy && y >= self.y_edge(iy + 1) {
            iy += 1;
        }
        iy
    }

    pub fn partition_of(&self, x: f64, y: f64) -> Result<Pid, GridError> {
        if !self.contains_point(x, y) {
            return Err(GridError::OutOfArea {
                unit: self.unit,
                x,
                y,
            });
        }
        Ok(Pid::new(self.unit, self.row(y) * self.gx + self.column(x)))
    }

    pub fn meta(&self, cell: u32) -> PartitionMeta {
        let ix = cell % self.gx;
        let iy = cell / self.gx;
        PartitionMeta {
            pid: Pid::new(self.unit, cell),
            lo: (self.x_edge(ix), self.y_edge(iy)),
            hi: (self.x_edge(ix + 1), self.y_edge(iy + 1)),
        }
    }

    pub fn metas(&self) -> impl Iterator<Item = PartitionMeta> + '_ {
        (0..self.cell_count()).map(|c| self.meta(c))
    }

    pub fn pids(&self) -> impl Iterator<Item = Pid> + '_ {
        (0..self.cell_count()).map(|c| Pid::new(self.unit, c))
    }

    /// Every partition whose closed rectangle meets the closed disk.
    pub fn parse_region(&self, reg: &Region) -> Vec<Pid> {
        let (x0, y0) = self.origin;
        let (x1, y1) = (self.x_edge(self.gx), self.y_edge(self.gy));
        if reg.x + reg.r < x0 || reg.x - reg.r > x1 || reg.y + reg.r < y0 || reg.y - reg.r > y1 {
            return Vec::new();
        }
        let ix_lo = self.column((reg.x - reg.r).clamp(x0, x1));
        let ix_hi = self.column((reg.x + reg.r).clamp(x0, x1));
        let iy_lo = self.row((reg.y - reg.r).clamp(y0, y1));
        let iy_hi = self.row((reg.y + reg.r).clamp(y0, y1));
        let r2 = reg.r * reg.r;
        let mut out = Vec::new();
        for iy in iy_lo..=iy_hi {
            let (ly, hy) = (self.y_edge(iy), self.y_edge(iy + 1));
            let dy = reg.y - reg.y.clamp(ly, hy);
            for ix in ix_lo..=ix_hi {
                let (lx, hx) = (self.x_edge(ix), self.x_edge(ix + 1));
                let dx = reg.x - reg.x.clamp(lx, hx);
                if dx * dx + dy * dy <= r2 {
                    out.push(Pid::new(self.unit, iy * self.gx + ix));
                }
            }
        }
        out
    }

    /// Rebuild a grid from its persisted partition metadata.
    pub fn from_metas(unit: u32, metas: &[PartitionMeta]) -> Result<Self, GridError> {
        let xs: BTreeSet<u64> = metas.iter().map(|m| m.lo.0.to_bits()).collect();
        let ys: BTreeSet<u64> = metas.iter().map(|m| m.lo.1.to_bits()).collect();
        let (gx, gy) = (xs.len() as u32, ys.len() as u32);
        if gx == 0 || gy == 0 || (gx as usize) * (gy as usize) != metas.len() {
            return Err(GridError::Shape { gx, gy });
        }
        let x0 = metas.iter().map(|m| m.lo.0).fold(f64::INFINITY, f64::min);
        let y0 = metas.iter().map(|m| m.lo.1).fold(f64::INFINITY, f64::min);
        let x1 = metas.iter().map(|m| m.hi.0).fold(f64::NEG_INFINITY, f64::max);
        Self::with_shape(unit, (x0, y0), x1 - x0, gx, gy)
    }
}

/// Grids of every observation unit; region parsing unions across them.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GridSet {
    grids: Vec<PartitionGrid>,
}

impl GridSet {
    pub fn new(mut grids: Vec<PartitionGrid>) -> Self {
        grids.sort_by_key(|g| g.unit);
        Self { grids }
    }

    pub fn grids(&self) -> &[PartitionGrid] {
        &self.grids
    }

    pub fn grid(&self, unit: u32) -> Option<&PartitionGrid> {
        self.grids
            .binary_search_by_key(&unit, |g| g.unit)
            .ok()
            .map(|i| &self.grids[i])
    }

    pub fn all_pids(&self) -> Vec<Pid> {
        self.grids.iter().flat_map(|g| g.pids()).collect()
    }

    pub fn parse_region(&self, reg: &Region) -> Vec<Pid> {
        self.grids.iter().flat_map(|g| g.parse_region(reg)).collect()
    }

    pub fn meta(&self, pid: Pid) -> Option<PartitionMeta> {
        self.grid(pid.unit)
            .filter(|g| pid.cell < g.cell_count())
            .map(|g| g.meta(pid.cell))
    }
}
