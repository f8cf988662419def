use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use aserv_core::datagen::{unit_origin, GenConfig};
use aserv_core::epgrid::accuracy_bound;
use aserv_core::{grid_number, GridSet, IngestConfig, MemoryStore, PartitionGrid, RespStore, SharedStore};

pub const CONFIG_ENV: &str = "ASERV_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Backend {
    Memory,
    Resp { addr: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub bind: String,
    /// Acceptable region-search accuracy.
    pub alpha: f64,
    /// Smallest query radius. Derived from `area_fraction` when absent.
    pub r_min: Option<f64>,
    /// Smallest query disk as a fraction of a unit's area.
    pub area_fraction: f64,
    /// Major attributes kept in partition data.
    pub c: usize,
    /// Partitions per unit, replacing the computed grid number.
    pub partitions: Option<u64>,
    pub retries: u32,
    pub maintain_epi: bool,
    pub gen: GenConfig,
    pub backend: Backend,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            alpha: 0.8,
            r_min: None,
            area_fraction: 0.03,
            c: 1,
            partitions: None,
            retries: 3,
            maintain_epi: false,
            gen: GenConfig::default(),
            backend: Backend::Memory,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: Config = toml::from_str(text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Explicit path, else `$ASERV_CONFIG`, else defaults.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let path: Option<PathBuf> = path
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("in {}", p.display()))
            }
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            bail!("alpha must be in (0, 1), got {}", self.alpha);
        }
        if !(self.area_fraction > 0.0 && self.area_fraction <= 1.0) {
            bail!("area_fraction must be in (0, 1], got {}", self.area_fraction);
        }
        if let Some(r) = self.r_min {
            if !(r > 0.0 && r.is_finite()) {
                bail!("r_min must be positive, got {r}");
            }
        }
        if self.c == 0 || self.c > self.gen.m {
            bail!("c must be in 1..={}, got {}", self.gen.m, self.c);
        }
        if self.partitions == Some(0) {
            bail!("partitions must be positive");
        }
        self.gen.validate().map_err(anyhow::Error::msg)?;
        Ok(())
    }

    pub fn unit_area(&self) -> f64 {
        self.gen.side * self.gen.side
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
            .unwrap_or_else(|| (self.area_fraction * self.unit_area() / std::f64::consts::PI).sqrt())
    }

    pub fn cells_per_unit(&self) -> anyhow::Result<u64> {
        match self.partitions {
            Some(p) => Ok(p),
            None => Ok(grid_number(self.alpha, self.r_min(), self.unit_area())?),
        }
    }

    pub fn grids(&self) -> anyhow::Result<GridSet> {
        let cells = self.cells_per_unit()?;
        let grids = (0..self.gen.units)
            .map(|u| PartitionGrid::with_cell_count(u, unit_origin(u, self.gen.side), self.gen.side, cells))
            .collect::<Result<_, _>>()?;
        Ok(GridSet::new(grids))
    }

    /// Warnings for settings that weaken the accuracy guarantee.
    pub fn warnings(&self) -> anyhow::Result<Vec<String>> {
        let mut out = Vec::new();
        if self.partitions.is_some() {
            if let Some(g) = self.grids()?.grids().first() {
                let bound = accuracy_bound(self.r_min(), g.cell_w, g.cell_h);
                if bound < self.alpha {
                    out.push(format!(
                        "partitions override gives a {}x{} grid with accuracy bound {bound:.3} below alpha {}",
                        g.gx, g.gy, self.alpha
                    ));
                }
            }
        }
        Ok(out)
    }

    pub fn ingest(&self) -> IngestConfig {
        IngestConfig {
            c: self.c,
            retries: self.retries,
            maintain_epi: self.maintain_epi,
        }
    }

    pub fn open_store(&self) -> anyhow::Result<SharedStore> {
        Ok(match &self.backend {
            Backend::Memory => MemoryStore::new().shared(),
            Backend::Resp { addr } => {
                let store = RespStore::connect(addr.as_str()).with_context(|| format!("connecting to {addr}"))?;
                store.ping()?;
                Arc::new(store)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_give_the_standard_grid() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.cells_per_unit().unwrap(), 10_865);
        let grids = cfg.grids().unwrap();
        assert_eq!(grids.grids().len(), 2);
        assert_eq!((grids.grids()[0].gx, grids.grids()[1].origin), (105, (1.0, 0.0)));
        assert!(cfg.warnings().unwrap().is_empty());
    }

    #[test]
    fn parses_toml() {
        let cfg = Config::from_toml(
            r#"
            bind = "0.0.0.0:9000"
            partitions = 100
            [gen]
            units = 1
            objects_per_unit = 50
            [backend]
            kind = "resp"
            addr = "127.0.0.1:6379"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.gen.units, 1);
        assert_eq!(cfg.gen.m, 21);
        assert_eq!(cfg.backend, Backend::Resp { addr: "127.0.0.1:6379".into() });
        let warnings = cfg.warnings().unwrap();
        assert_eq!(warnings.len(), 1, "{warnings:?}");
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::from_toml("alpha = 1.5").is_err());
        assert!(Config::from_toml("c = 0").is_err());
        assert!(Config::from_toml("nonsense = 1").is_err());
        assert!(Config::from_toml("[gen]\np = 0.0").is_err());
        assert!(Config::from_toml("partitions = 0").is_err());
    }
}
