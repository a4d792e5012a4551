//! Observed data: covariates `L`, treatment-side proxies `Z`, outcome-side
//! proxies `W`, binary treatment `A` and outcome `Y`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Treatment arm, coded `+1` / `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    Treated,
    Control,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::Treated, Arm::Control];

    pub fn sign(self) -> f64 {
        match self {
            Arm::Treated => 1.0,
            Arm::Control => -1.0,
        }
    }

    /// `sign(0) = +1`.
    pub fn from_score(score: f64) -> Arm {
        if score >= 0.0 {
            Arm::Treated
        } else {
            Arm::Control
        }
    }

    pub fn from_code(code: f64) -> Option<Arm> {
        if code == 1.0 {
            Some(Arm::Treated)
        } else if code == -1.0 {
            Some(Arm::Control)
        } else {
            None
        }
    }

    pub fn is_treated(self) -> bool {
        self == Arm::Treated
    }

    pub fn flip(self) -> Arm {
        match self {
            Arm::Treated => Arm::Control,
            Arm::Control => Arm::Treated,
        }
    }
}

/// Per-column affine map `x -> (x - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ColumnScaling {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0).max(1.0);
            let s = var.sqrt();
            mean.push(m);
            // constant columns are only centered
            scale.push(if s > 1e-12 { s } else { 1.0 });
        }
        Self { mean, scale }
    }

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.mean[j], self.scale[j]);
            col.apply(|v| *v = (*v - m) / s);
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Scalar affine map used for the outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarScaling {
    pub mean: f64,
    pub scale: f64,
}

impl ScalarScaling {
    pub fn fit(y: &DVector<f64>) -> Self {
        let c = ColumnScaling::fit(&DMatrix::from_column_slice(y.len(), 1, y.as_slice()));
        Self { mean: c.mean[0], scale: c.scale[0] }
    }

    pub fn identity() -> Self {
        Self { mean: 0.0, scale: 1.0 }
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.mean) / self.scale
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.scale + self.mean
    }
}

/// Standardization record for a whole table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub l: ColumnScaling,
    pub z: ColumnScaling,
    pub w: ColumnScaling,
    pub y: ScalarScaling,
}

/// Columnar `(L, Z, W, A, Y)` sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    l: DMatrix<f64>,
    z: DMatrix<f64>,
    w: DMatrix<f64>,
    a: Vec<Arm>,
    y: DVector<f64>,
    standardization: Option<Standardization>,
}

impl SampleTable {
    pub fn new(
        l: DMatrix<f64>,
        z: DMatrix<f64>,
        w: DMatrix<f64>,
        a: Vec<Arm>,
        y: DVector<f64>,
    ) -> Result<Self> {
        let n = a.len();
        for (name, rows) in [("L", l.nrows()), ("Z", z.nrows()), ("W", w.nrows()), ("Y", y.len())] {
            if rows != n {
                return Err(Error::InvalidArgument(format!(
                    "block {name} has {rows} rows but A has {n}"
                )));
            }
        }
        if l.ncols() == 0 || z.ncols() == 0 || w.ncols() == 0 {
            return Err(Error::InvalidArgument("L, Z and W need at least one column".into()));
        }
        for (name, m) in [("L", &l), ("Z", &z), ("W", &w)] {
            if let Some(pos) = m.iter().position(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow {
                    row: pos % n.max(1),
                    what: format!("non-finite entry in {name}"),
                });
            }
        }
        if let Some(row) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { row, what: "non-finite outcome".into() });
        }
        Ok(Self { l, z, w, a, y, standardization: None })
    }

    /// Builds a table from signed treatment codes, rejecting anything but ±1.
    pub fn from_codes(
        l: DMatrix<f64>,
        z: DMatrix<f64>,
        w: DMatrix<f64>,
        codes: &[f64],
        y: DVector<f64>,
    ) -> Result<Self> {
        let a = codes
            .iter()
            .enumerate()
            .map(|(row, &c)| {
                Arm::from_code(c).ok_or_else(|| Error::Parse {
                    row,
                    column: "A".into(),
                    message: format!("treatment must be +1 or -1, got {c}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(l, z, w, a, y)
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }
    pub fn a(&self) -> &[Arm] {
        &self.a
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn arm_indices(&self, arm: Arm) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.a[i] == arm).collect()
    }

    pub fn arm_count(&self, arm: Arm) -> usize {
        self.a.iter().filter(|&&a| a == arm).count()
    }

    /// Row subset, keeping order.
    pub fn subset(&self, rows: &[usize]) -> SampleTable {
        SampleTable {
            l: self.l.select_rows(rows),
            z: self.z.select_rows(rows),
            w: self.w.select_rows(rows),
            a: rows.iter().map(|&i| self.a[i]).collect(),
            y: self.y.select_rows(rows),
            standardization: self.standardization.clone(),
        }
    }

    /// `[W, L]` block.
    pub fn wl(&self) -> DMatrix<f64> {
        hstack(&[&self.w, &self.l])
    }

    /// `[Z, L]` block.
    pub fn zl(&self) -> DMatrix<f64> {
        hstack(&[&self.z, &self.l])
    }

    /// Fits mean/scale per column of `L`, `Z`, `W` and `Y`.
    pub fn fit_standardization(&self) -> Standardization {
        Standardization {
            l: ColumnScaling::fit(&self.l),
            z: ColumnScaling::fit(&self.z),
            w: ColumnScaling::fit(&self.w),
            y: ScalarScaling::fit(&self.y),
        }
    }

    /// Applies `s` and records it on the returned table.
    pub fn standardized_with(&self, s: &Standardization) -> SampleTable {
        SampleTable {
            l: s.l.apply(&self.l),
            z: s.z.apply(&self.z),
            w: s.w.apply(&self.w),
            a: self.a.clone(),
            y: self.y.map(|v| s.y.forward(v)),
            standardization: Some(s.clone()),
        }
    }

    pub fn standardized(&self) -> SampleTable {
        self.standardized_with(&self.fit_standardization())
    }
}

/// Horizontal concatenation of blocks with equal row counts.
pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks[0].nrows();
    let d: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, d);
    let mut c = 0;
    for b in blocks {
        out.columns_mut(c, b.ncols()).copy_from(*b);
        c += b.ncols();
    }
    out
}
