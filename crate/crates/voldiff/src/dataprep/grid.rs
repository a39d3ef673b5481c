//! The fixed 9×9 moneyness/tenor grid and the surface value container.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points per axis.
pub const GRID_DIM: usize = 9;
/// Cells per surface.
pub const GRID_CELLS: usize = GRID_DIM * GRID_DIM;

/// A 9×9 grid of values, row-major with moneyness as the row axis and
/// tenor as the column axis. This layout is the bit-level contract for
/// every surface file in the system and is shared by raw implied vols,
/// log vols, normalized vols, and relative call prices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SurfaceGrid {
    data: Vec<f64>,
}

impl SurfaceGrid {
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.len() != GRID_CELLS {
            return Err(Error::Shape(format!(
                "surface needs {} cells, got {}",
                GRID_CELLS,
                data.len()
            )));
        }
        Ok(SurfaceGrid { data })
    }

    pub fn filled(value: f64) -> Self {
        SurfaceGrid { data: vec![value; GRID_CELLS] }
    }

    pub fn zeros() -> Self {
        Self::filled(0.0)
    }

    /// Value at moneyness index `i`, tenor index `j`.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * GRID_DIM + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * GRID_DIM + j] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SurfaceGrid {
        SurfaceGrid { data: self.data.iter().map(|v| f(*v)).collect() }
    }

    /// Cellwise combination of two surfaces.
    pub fn zip_with(&self, other: &SurfaceGrid, f: impl Fn(f64, f64) -> f64) -> SurfaceGrid {
        SurfaceGrid {
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.data.iter().all(|v| *v > 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of squared cell values.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

impl TryFrom<Vec<f64>> for SurfaceGrid {
    type Error = Error;
    fn try_from(data: Vec<f64>) -> Result<Self> {
        SurfaceGrid::from_vec(data)
    }
}

impl From<SurfaceGrid> for Vec<f64> {
    fn from(s: SurfaceGrid) -> Vec<f64> {
        s.data
    }
}

/// Moneyness levels and tenors (in years) of the fixed grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpecRaw", into = "GridSpecRaw")]
pub struct GridSpec {
    moneyness: Vec<f64>,
    tenors: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridSpecRaw {
    moneyness: Vec<f64>,
    tenors: Vec<f64>,
}

impl TryFrom<GridSpecRaw> for GridSpec {
    type Error = Error;
    fn try_from(raw: GridSpecRaw) -> Result<Self> {
        GridSpec::new(raw.moneyness, raw.tenors)
    }
}

impl From<GridSpec> for GridSpecRaw {
    fn from(g: GridSpec) -> GridSpecRaw {
        GridSpecRaw { moneyness: g.moneyness, tenors: g.tenors }
    }
}

impl GridSpec {
    pub fn new(moneyness: Vec<f64>, tenors: Vec<f64>) -> Result<Self> {
        if moneyness.len() != GRID_DIM || tenors.len() != GRID_DIM {
            return Err(Error::Shape(format!(
                "grid must be {GRID_DIM}x{GRID_DIM}, got {}x{}",
                moneyness.len(),
                tenors.len()
            )));
        }
        for axis in [&moneyness, &tenors] {
            if axis.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Validation("grid axes must be strictly increasing".into()));
            }
        }
        if tenors[0] <= 0.0 || moneyness[0] <= 0.0 {
            return Err(Error::Validation("grid axes must be positive".into()));
        }
        Ok(GridSpec { moneyness, tenors })
    }

    /// The fixed production grid: moneyness 0.6..1.4 in steps of 0.1 and
    /// tenors from one day to one year.
    pub fn standard() -> Self {
        GridSpec {
            moneyness: vec![0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4],
            tenors: vec![
                1.0 / 252.0,
                1.0 / 52.0,
                2.0 / 52.0,
                1.0 / 12.0,
                1.0 / 6.0,
                1.0 / 4.0,
                1.0 / 2.0,
                3.0 / 4.0,
                1.0,
            ],
        }
    }

    pub fn moneyness(&self) -> &[f64] {
        &self.moneyness
    }

    pub fn tenors(&self) -> &[f64] {
        &self.tenors
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_grid_is_valid_and_nine_by_nine() {
        let g = GridSpec::standard();
        assert_eq!(g.moneyness().len(), GRID_DIM);
        assert_eq!(g.tenors().len(), GRID_DIM);
        assert!(g.moneyness().windows(2).all(|w| w[0] < w[1]));
        assert!(g.tenors().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn surface_roundtrips_through_serde_as_plain_list() {
        let s = SurfaceGrid::from_vec((0..81).map(f64::from).collect()).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: SurfaceGrid = serde_json::from_str(&json).unwrap();
        assert_eq!(s, back);
        assert!(json.starts_with('['));
    }

    #[test]
    fn wrong_cell_count_is_rejected() {
        assert!(SurfaceGrid::from_vec(vec![0.0; 80]).is_err());
        assert!(serde_json::from_str::<SurfaceGrid>("[1.0, 2.0]").is_err());
    }
}
