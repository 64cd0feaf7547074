//! Probability measures on `R^d`: uniform/weighted empirical measures over
//! particle positions and cell-averaged grid densities, plus the operations
//! the solvers need on either of them (kernel integrals, moments, pointwise
//! density, one-dimensional Wasserstein distances).
//!
//! [`MeasureView`] is the single read-only handle used to couple a model to a
//! population, whichever representation backs it. Empirical views may exclude
//! one atom, which is how leave-one-out measures `m_{-i}` are evaluated
//! without copying the remaining `N - 1` points.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use thiserror::Error;

/// Tolerance on the normalization of empirical weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Largest point count accepted by [`wasserstein_small_nd`].
pub const SMALL_ND_MAX: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("empty leave-one-out: measure has a single atom")]
    EmptyLeaveOneOut,
    #[error("leave-one-out requires uniform weights")]
    NonUniformLeaveOneOut,
    #[error("index {index} out of range for measure with {len} atoms")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid measure: {0}")]
    Invalid(String),
    #[error("kernel is not finite at point {point:?}")]
    NonFiniteKernel { point: Vec<f64> },
    #[error("wasserstein_1d needs one-dimensional measures (got d = {0}); use wasserstein_small_nd")]
    NotOneDimensional(usize),
    #[error("oracle scale exceeded: {0} points (max {SMALL_ND_MAX})")]
    OracleScaleExceeded(usize),
    #[error("unsupported Wasserstein order p = {0} (expected 1 or 2)")]
    UnsupportedOrder(u32),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Per-measure memo of values computed at every support point of the base
/// measure. Keys are chosen by the caller (see [`next_memo_key`]).
#[derive(Default)]
struct Memo(Mutex<HashMap<u64, Arc<Vec<f64>>>>);

impl Memo {
    fn get_or_insert(&self, key: u64, compute: impl FnOnce() -> Vec<f64>) -> Arc<Vec<f64>> {
        let mut map = self.0.lock().expect("memo poisoned");
        map.entry(key).or_insert_with(|| Arc::new(compute())).clone()
    }

    fn clear(&self) {
        self.0.lock().expect("memo poisoned").clear();
    }
}

impl std::fmt::Debug for Memo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Memo")
    }
}

static MEMO_KEYS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

/// Allocates a process-unique memo key.
pub fn next_memo_key() -> u64 {
    MEMO_KEYS.fetch_add(1, std::sync::atomic::Ordering::Relaxed)
}

/// Probability measure supported on finitely many points.
#[derive(Debug)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    /// `None` means uniform weights `1/N`.
    weights: Option<Vec<f64>>,
    mean: Vec<f64>,
    memo: Memo,
}

impl Clone for EmpiricalMeasure {
    fn clone(&self) -> Self {
        Self { dim: self.dim, points: self.points.clone(), weights: self.weights.clone(), mean: self.mean.clone(), memo: Memo::default() }
    }
}

impl EmpiricalMeasure {
    /// Uniform measure on the rows of `points` (row-major, `dim` columns).
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self, MeasureError> {
        if dim == 0 {
            return Err(MeasureError::Invalid("dimension must be at least 1".into()));
        }
        if points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(MeasureError::Invalid(format!("{} coordinates do not form a nonempty set of {dim}-dimensional points", points.len())));
        }
        let n = points.len() / dim;
        let mut mean = vec![0.0; dim];
        if dim == 1 {
            mean[0] = points.iter().fold(0.0, |acc, &x| acc + x);
        } else {
            for p in points.chunks_exact(dim) {
                for (m, &x) in mean.iter_mut().zip(p) {
                    *m += x;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        Ok(Self { dim, points, weights: None, mean, memo: Memo::default() })
    }

    /// Uniform measure on scalar samples.
    pub fn from_scalars(xs: &[f64]) -> Result<Self, MeasureError> {
        Self::uniform(1, xs.to_vec())
    }

    pub fn with_weights(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        let mut m = Self::uniform(dim, points)?;
        if weights.len() != m.len() {
            return Err(MeasureError::Invalid(format!("{} weights for {} points", weights.len(), m.len())));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(MeasureError::Invalid("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(MeasureError::Invalid(format!("weights sum to {total}, expected 1")));
        }
        let mut mean = vec![0.0; dim];
        for (p, &w) in m.points.chunks_exact(dim).zip(&weights) {
            for (acc, &x) in mean.iter_mut().zip(p) {
                *acc += w * x;
            }
        }
        m.mean = mean;
        m.weights = Some(weights);
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Gives back the coordinate buffer.
    pub fn into_points(self) -> Vec<f64> {
        self.points
    }

    pub fn weight(&self, j: usize) -> f64 {
        match &self.weights {
            Some(w) => w[j],
            None => 1.0 / self.len() as f64,
        }
    }

    pub fn is_uniform(&self) -> bool {
        self.weights.is_none()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn view(&self) -> MeasureView<'_> {
        MeasureView::Empirical { measure: self, exclude: None }
    }

    /// View of the measure with atom `i` removed and the rest renormalized.
    pub fn view_without(&self, i: usize) -> MeasureView<'_> {
        MeasureView::Empirical { measure: self, exclude: Some(i) }
    }

    /// Translates every atom by `shift`.
    pub fn translated(&self, shift: &[f64]) -> Self {
        let points = self.points.chunks_exact(self.dim).flat_map(|p| p.iter().zip(shift).map(|(x, s)| x + s)).collect();
        match &self.weights {
            None => Self::uniform(self.dim, points).expect("same shape"),
            Some(w) => Self::with_weights(self.dim, points, w.clone()).expect("same shape"),
        }
    }
}

/// Uniform empirical measure on all atoms except `i`.
pub fn leave_one_out(m: &EmpiricalMeasure, i: usize) -> Result<EmpiricalMeasure, MeasureError> {
    let n = m.len();
    if i >= n {
        return Err(MeasureError::IndexOutOfRange { index: i, len: n });
    }
    if n == 1 {
        return Err(MeasureError::EmptyLeaveOneOut);
    }
    if !m.is_uniform() {
        return Err(MeasureError::NonUniformLeaveOneOut);
    }
    let points = (0..n).filter(|&j| j != i).flat_map(|j| m.point(j).iter().copied()).collect();
    EmpiricalMeasure::uniform(m.dim, points)
}

/// One axis of a rectangular cell grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub cells: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, cells: usize) -> Self {
        Self { min, max, cells }
    }

    pub fn width(&self) -> f64 {
        (self.max - self.min) / self.cells as f64
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        self.min + (i as f64 + 0.5) * self.width()
    }

    /// Coordinate of face `j` (face 0 is `min`, face `cells` is `max`).
    pub fn face(&self, j: usize) -> f64 {
        self.min + j as f64 * self.width()
    }
}

/// Minimum cell count per axis.
pub const MIN_CELLS: usize = 8;

/// Axis-aligned tensor grid of dimension 1 or 2. Cells are indexed with
/// axis 0 varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FvGrid {
    axes: Vec<Axis>,
}

impl FvGrid {
    pub fn new(axes: Vec<Axis>) -> Result<Self, MeasureError> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(MeasureError::Invalid(format!("grids must have 1 or 2 axes, got {}", axes.len())));
        }
        for (k, a) in axes.iter().enumerate() {
            if !(a.min < a.max) || !a.min.is_finite() || !a.max.is_finite() {
                return Err(MeasureError::Invalid(format!("axis {k}: need min < max")));
            }
            if a.cells < MIN_CELLS {
                return Err(MeasureError::Invalid(format!("axis {k}: {} cells, need at least {MIN_CELLS}", a.cells)));
            }
        }
        Ok(Self { axes })
    }

    pub fn uniform_1d(min: f64, max: f64, cells: usize) -> Result<Self, MeasureError> {
        Self::new(vec![Axis::new(min, max, cells)])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn axis(&self, k: usize) -> &Axis {
        &self.axes[k]
    }

    pub fn cell_count(&self) -> usize {
        self.axes.iter().map(|a| a.cells).product()
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::width).product()
    }

    /// Stride of axis `k` in the flat cell index.
    pub fn stride(&self, k: usize) -> usize {
        self.axes[..k].iter().map(|a| a.cells).product()
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        idx.iter().enumerate().map(|(k, &i)| i * self.stride(k)).sum()
    }

    pub fn multi_index(&self, mut c: usize) -> [usize; 2] {
        let mut out = [0; 2];
        for (k, a) in self.axes.iter().enumerate() {
            out[k] = c % a.cells;
            c /= a.cells;
        }
        out
    }

    /// Midpoint of flat cell `c`, written into `out[..dim]`.
    pub fn midpoint_into(&self, c: usize, out: &mut [f64]) {
        let idx = self.multi_index(c);
        for (k, a) in self.axes.iter().enumerate() {
            out[k] = a.midpoint(idx[k]);
        }
    }

    pub fn midpoint(&self, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.midpoint_into(c, &mut out);
        out
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.axes.iter().zip(x).all(|(a, &v)| v >= a.min && v <= a.max)
    }
}

/// Cell-averaged density on an [`FvGrid`] (probability per unit volume).
#[derive(Debug)]
pub struct GridDensity {
    grid: FvGrid,
    values: Vec<f64>,
    mass: f64,
    mean: Vec<f64>,
    memo: Memo,
}

impl Clone for GridDensity {
    fn clone(&self) -> Self {
        Self { grid: self.grid.clone(), values: self.values.clone(), mass: self.mass, mean: self.mean.clone(), memo: Memo::default() }
    }
}

/// Compensated (Neumaier) summation.
pub fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

impl GridDensity {
    /// Wraps cell values; fails on negative or non-finite entries below
    /// `-neg_tol`.
    pub fn new(grid: FvGrid, values: Vec<f64>) -> Result<Self, MeasureError> {
        Self::with_tolerance(grid, values, 0.0)
    }

    pub(crate) fn with_tolerance(grid: FvGrid, values: Vec<f64>, neg_tol: f64) -> Result<Self, MeasureError> {
        if values.len() != grid.cell_count() {
            return Err(MeasureError::Invalid(format!("{} values for {} cells", values.len(), grid.cell_count())));
        }
        if let Some((c, v)) = values.iter().enumerate().find(|(_, &v)| !v.is_finite() || v < -neg_tol) {
            return Err(MeasureError::Invalid(format!("cell {c} has invalid density {v}")));
        }
        let mut g = Self { grid, values, mass: 0.0, mean: Vec::new(), memo: Memo::default() };
        g.refresh();
        Ok(g)
    }

    /// Samples `density` at cell midpoints and normalizes to unit mass.
    pub fn from_fn(grid: FvGrid, density: impl Fn(&[f64]) -> f64) -> Result<Self, MeasureError> {
        let values = (0..grid.cell_count()).map(|c| density(&grid.midpoint(c))).collect();
        let mut g = Self::new(grid, values)?;
        g.normalize()?;
        Ok(g)
    }

    fn refresh(&mut self) {
        let vol = self.grid.cell_volume();
        self.mass = neumaier_sum(self.values.iter().map(|v| v * vol));
        let dim = self.grid.dim();
        let mut mean = vec![0.0; dim];
        let mut x = [0.0; 2];
        for (c, &v) in self.values.iter().enumerate() {
            self.grid.midpoint_into(c, &mut x);
            for k in 0..dim {
                mean[k] += v * vol * x[k];
            }
        }
        if self.mass > 0.0 {
            mean.iter_mut().for_each(|m| *m /= self.mass);
        }
        self.mean = mean;
        self.memo.clear();
    }

    pub fn grid(&self) -> &FvGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// Mean of the normalized measure (midpoint quadrature).
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Replaces the cell values, recomputing cached mass and mean.
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<(), MeasureError> {
        if values.len() != self.values.len() {
            return Err(MeasureError::Invalid("cell count changed".into()));
        }
        self.values = values;
        self.refresh();
        Ok(())
    }

    pub fn normalize(&mut self) -> Result<(), MeasureError> {
        if !(self.mass > 0.0) {
            return Err(MeasureError::Invalid("cannot normalize zero mass".into()));
        }
        let s = 1.0 / self.mass;
        let values = self.values.iter().map(|v| v * s).collect();
        self.set_values(values)
    }

    pub fn view(&self) -> MeasureView<'_> {
        MeasureView::Grid(self)
    }

    /// `∑ |a - b| · vol` over cells.
    pub fn l1_distance(&self, other: &GridDensity) -> f64 {
        let vol = self.grid.cell_volume();
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum::<f64>() * vol
    }

    /// Mass in the outermost layer of cells along every axis.
    pub fn boundary_mass(&self) -> f64 {
        let vol = self.grid.cell_volume();
        let dim = self.grid.dim();
        self.values
            .iter()
            .enumerate()
            .filter(|(c, _)| {
                let idx = self.grid.multi_index(*c);
                (0..dim).any(|k| idx[k] == 0 || idx[k] + 1 == self.grid.axis(k).cells)
            })
            .map(|(_, v)| v * vol)
            .sum()
    }

    /// Linear combination `a·self + b·other` on the same grid.
    pub fn blend(&self, a: f64, other: &GridDensity, b: f64) -> Result<GridDensity, MeasureError> {
        if self.grid != other.grid {
            return Err(MeasureError::Invalid("blending densities on different grids".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        GridDensity::with_tolerance(self.grid.clone(), values, f64::INFINITY)
    }

    /// Multilinear interpolation of cell values, constant beyond the outer
    /// midpoints and zero outside the grid box.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        if !self.grid.contains(x) {
            return 0.0;
        }
        let dim = self.grid.dim();
        let mut lo = [0usize; 2];
        let mut frac = [0.0; 2];
        for k in 0..dim {
            let (l, f, _) = self.locate(k, x[k]);
            lo[k] = l;
            frac[k] = f;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << dim) {
            let mut w = 1.0;
            let mut c = 0;
            for k in 0..dim {
                let up = (corner >> k) & 1 == 1;
                let i = if up { (lo[k] + 1).min(self.grid.axis(k).cells - 1) } else { lo[k] };
                w *= if up { frac[k] } else { 1.0 - frac[k] };
                c += i * self.grid.stride(k);
            }
            acc += w * self.values[c];
        }
        acc
    }

    /// Gradient of the multilinear interpolant. On a midpoint line the
    /// interval to the right is used.
    pub fn interpolate_gradient(&self, x: &[f64], out: &mut [f64]) {
        let dim = self.grid.dim();
        out[..dim].iter_mut().for_each(|g| *g = 0.0);
        if !self.grid.contains(x) {
            return;
        }
        let mut lo = [0usize; 2];
        let mut frac = [0.0; 2];
        let mut slope_scale = [0.0; 2];
        for k in 0..dim {
            let (l, f, inside) = self.locate(k, x[k]);
            lo[k] = l;
            frac[k] = f;
            slope_scale[k] = if inside { 1.0 / self.grid.axis(k).width() } else { 0.0 };
        }
        for corner in 0..(1usize << dim) {
            let mut c = 0;
            for k in 0..dim {
                let up = (corner >> k) & 1 == 1;
                let i = if up { (lo[k] + 1).min(self.grid.axis(k).cells - 1) } else { lo[k] };
                c += i * self.grid.stride(k);
            }
            let v = self.values[c];
            for g in 0..dim {
                let mut w = 1.0;
                for k in 0..dim {
                    let up = (corner >> k) & 1 == 1;
                    if k == g {
                        w *= if up { slope_scale[k] } else { -slope_scale[k] };
                    } else {
                        w *= if up { frac[k] } else { 1.0 - frac[k] };
                    }
                }
                out[g] += w * v;
            }
        }
    }

    /// Lower midpoint index, fractional offset toward the next midpoint and
    /// whether `x` lies strictly between two midpoints.
    fn locate(&self, k: usize, x: f64) -> (usize, f64, bool) {
        let a = self.grid.axis(k);
        let s = (x - a.min) / a.width() - 0.5;
        if s < 0.0 {
            return (0, 0.0, false);
        }
        let l = s.floor() as usize;
        if l + 1 >= a.cells {
            return (a.cells - 1, 0.0, false);
        }
        (l, s - l as f64, true)
    }
}

/// Read-only handle over either measure representation.
#[derive(Debug, Clone, Copy)]
pub enum MeasureView<'a> {
    Empirical { measure: &'a EmpiricalMeasure, exclude: Option<usize> },
    Grid(&'a GridDensity),
}

impl<'a> MeasureView<'a> {
    pub fn dim(&self) -> usize {
        match self {
            MeasureView::Empirical { measure, .. } => measure.dim,
            MeasureView::Grid(g) => g.grid.dim(),
        }
    }

    /// Unchecked `∫ K dm`: weighted sum for particles, midpoint quadrature
    /// for grids.
    pub fn integrate(&self, kernel: impl Fn(&[f64]) -> f64) -> f64 {
        match *self {
            MeasureView::Empirical { measure, exclude } => {
                let n = measure.len();
                match (&measure.weights, exclude) {
                    (None, None) => measure.points.chunks_exact(measure.dim).map(&kernel).sum::<f64>() / n as f64,
                    (None, Some(i)) => {
                        measure.points.chunks_exact(measure.dim).enumerate().filter(|(j, _)| *j != i).map(|(_, p)| kernel(p)).sum::<f64>()
                            / (n - 1) as f64
                    }
                    (Some(w), ex) => {
                        let norm = ex.map_or(1.0, |i| 1.0 - w[i]);
                        measure
                            .points
                            .chunks_exact(measure.dim)
                            .zip(w)
                            .enumerate()
                            .filter(|(j, _)| Some(*j) != ex)
                            .map(|(_, (p, &wj))| wj * kernel(p))
                            .sum::<f64>()
                            / norm
                    }
                }
            }
            MeasureView::Grid(g) => {
                let vol = g.grid.cell_volume();
                let mut x = [0.0; 2];
                let dim = g.grid.dim();
                let mut acc = 0.0;
                for (c, &v) in g.values.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    g.grid.midpoint_into(c, &mut x);
                    acc += v * vol * kernel(&x[..dim]);
                }
                acc
            }
        }
    }

    /// Vector-valued integral `∫ K dm` accumulated into `out`.
    pub fn integrate_vec(&self, out: &mut [f64], kernel: impl Fn(&[f64], &mut [f64])) {
        let k = out.len();
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut buf = smallvec::SmallVec::<[f64; 4]>::from_elem(0.0, k);
        self.for_each_atom(|p, w| {
            kernel(p, &mut buf);
            for (o, b) in out.iter_mut().zip(&buf) {
                *o += w * b;
            }
        });
    }

    /// Visits `(point, weight)` pairs; grid atoms are cell midpoints with
    /// weight `value · cellVolume`.
    pub fn for_each_atom(&self, mut visit: impl FnMut(&[f64], f64)) {
        self.for_each_indexed_atom(|_, p, w| visit(p, w));
    }

    /// As [`MeasureView::for_each_atom`], also passing the atom's index in
    /// the underlying support (the indexing of [`MeasureView::support_memo`]).
    pub fn for_each_indexed_atom(&self, mut visit: impl FnMut(usize, &[f64], f64)) {
        match *self {
            MeasureView::Empirical { measure, exclude } => {
                let n = measure.len();
                let norm = match (&measure.weights, exclude) {
                    (_, None) => 1.0,
                    (None, Some(_)) => (n - 1) as f64 / n as f64,
                    (Some(w), Some(i)) => 1.0 - w[i],
                };
                for j in 0..n {
                    if Some(j) == exclude {
                        continue;
                    }
                    visit(j, measure.point(j), measure.weight(j) / norm);
                }
            }
            MeasureView::Grid(g) => {
                let vol = g.grid.cell_volume();
                let dim = g.grid.dim();
                let mut x = [0.0; 2];
                for (c, &v) in g.values.iter().enumerate() {
                    g.grid.midpoint_into(c, &mut x);
                    visit(c, &x[..dim], v * vol);
                }
            }
        }
    }

    /// Weight the underlying (non-excluded) measure gives atom `j`.
    pub fn base_weight(&self, j: usize) -> f64 {
        match *self {
            MeasureView::Empirical { measure, .. } => measure.weight(j),
            MeasureView::Grid(g) => g.values[j] * g.grid.cell_volume(),
        }
    }

    /// Location of atom `j` of the underlying support.
    pub fn base_point(&self, j: usize, out: &mut [f64]) {
        match *self {
            MeasureView::Empirical { measure, .. } => out[..measure.dim].copy_from_slice(measure.point(j)),
            MeasureView::Grid(g) => g.grid.midpoint_into(j, out),
        }
    }

    /// Per-axis mean (O(d) for empirical views thanks to cached sums).
    pub fn mean_into(&self, out: &mut [f64]) {
        match *self {
            MeasureView::Empirical { measure, exclude } => {
                let dim = measure.dim;
                match exclude {
                    None => out[..dim].copy_from_slice(&measure.mean),
                    Some(i) => {
                        let wi = measure.weight(i);
                        let xi = measure.point(i);
                        for k in 0..dim {
                            out[k] = (measure.mean[k] - wi * xi[k]) / (1.0 - wi);
                        }
                    }
                }
            }
            MeasureView::Grid(g) => out[..g.grid.dim()].copy_from_slice(&g.mean),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        self.mean_into(&mut m);
        m
    }

    /// Values of `f` at every atom of the underlying (non-excluded) measure,
    /// memoized on that measure under `key`.
    pub fn support_memo(&self, key: u64, f: impl Fn(&[f64]) -> f64) -> Arc<Vec<f64>> {
        match *self {
            MeasureView::Empirical { measure, .. } => measure.memo.get_or_insert(key, || measure.points.chunks_exact(measure.dim).map(&f).collect()),
            MeasureView::Grid(g) => g.memo.get_or_insert(key, || (0..g.grid.cell_count()).map(|c| f(&g.grid.midpoint(c))).collect()),
        }
    }

    pub fn excluded(&self) -> Option<usize> {
        match *self {
            MeasureView::Empirical { exclude, .. } => exclude,
            MeasureView::Grid(_) => None,
        }
    }

    /// Pointwise density: multilinear interpolation for grids, Gaussian KDE
    /// with the given bandwidth for particles.
    pub fn density_at(&self, x: &[f64], bandwidth: f64) -> f64 {
        match self {
            MeasureView::Grid(g) => g.interpolate(x),
            MeasureView::Empirical { .. } => {
                let dim = self.dim();
                let norm = (2.0 * PI).powf(-(dim as f64) / 2.0) / bandwidth.powi(dim as i32);
                let inv2h2 = 0.5 / (bandwidth * bandwidth);
                norm * self.integrate(|y| {
                    let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                    (-r2 * inv2h2).exp()
                })
            }
        }
    }

    /// Spatial gradient of [`MeasureView::density_at`].
    pub fn density_gradient(&self, x: &[f64], bandwidth: f64, out: &mut [f64]) {
        match self {
            MeasureView::Grid(g) => g.interpolate_gradient(x, out),
            MeasureView::Empirical { .. } => {
                let dim = self.dim();
                let norm = (2.0 * PI).powf(-(dim as f64) / 2.0) / bandwidth.powi(dim as i32);
                let inv_h2 = 1.0 / (bandwidth * bandwidth);
                self.integrate_vec(&mut out[..dim], |y, o| {
                    let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                    let k = norm * (-0.5 * r2 * inv_h2).exp();
                    for d in 0..dim {
                        o[d] = -(x[d] - y[d]) * inv_h2 * k;
                    }
                });
            }
        }
    }
}

/// Checked `∫ K dm`; fails naming the first atom where `K` is not finite.
pub fn kernel_integral(m: &MeasureView<'_>, kernel: impl Fn(&[f64]) -> f64) -> Result<f64, MeasureError> {
    let mut bad: Option<Vec<f64>> = None;
    let mut acc = 0.0;
    m.for_each_atom(|p, w| {
        if bad.is_some() || w == 0.0 {
            return;
        }
        let k = kernel(p);
        if !k.is_finite() {
            bad = Some(p.to_vec());
        } else {
            acc += w * k;
        }
    });
    match bad {
        Some(point) => Err(MeasureError::NonFiniteKernel { point }),
        None => Ok(acc),
    }
}

/// Per-axis mean and (for `order >= 2`) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub variance: Option<Vec<f64>>,
}

/// Moments of a normalized measure. Grid densities are treated as piecewise
/// constant, so each cell contributes its within-cell variance `Δx²/12`.
pub fn moments(m: &MeasureView<'_>, order: u32) -> Moments {
    let dim = m.dim();
    let mut total = 0.0;
    let mut s1 = vec![0.0; dim];
    let mut s2 = vec![0.0; dim];
    m.for_each_atom(|p, w| {
        total += w;
        for k in 0..dim {
            s1[k] += w * p[k];
            s2[k] += w * p[k] * p[k];
        }
    });
    let mean: Vec<f64> = s1.iter().map(|s| s / total).collect();
    let variance = (order >= 2).then(|| {
        (0..dim)
            .map(|k| {
                let cell = match m {
                    MeasureView::Grid(g) => g.grid.axis(k).width().powi(2) / 12.0,
                    _ => 0.0,
                };
                (s2[k] / total - mean[k] * mean[k]).max(0.0) + cell
            })
            .collect()
    });
    Moments { mean, variance }
}

/// Silverman's rule-of-thumb bandwidth `1.06 · stdev · N^{-1/5}` (first axis
/// standard deviation, or the average over axes).
pub fn silverman_bandwidth(m: &EmpiricalMeasure) -> f64 {
    let mo = moments(&m.view(), 2);
    let var = mo.variance.expect("order 2");
    let sd = var.iter().map(|v| v.sqrt()).sum::<f64>() / var.len() as f64;
    1.06 * sd * (m.len() as f64).powf(-0.2)
}

/// Piece of a one-dimensional quantile function, linear from `x0` to `x1`
/// while the probability level runs from `u0` to `u1`.
#[derive(Debug, Clone, Copy)]
struct QuantilePiece {
    u0: f64,
    u1: f64,
    x0: f64,
    x1: f64,
}

impl QuantilePiece {
    fn at(&self, u: f64) -> f64 {
        if self.u1 <= self.u0 {
            return self.x0;
        }
        self.x0 + (self.x1 - self.x0) * (u - self.u0) / (self.u1 - self.u0)
    }
}

fn quantile_pieces(m: &MeasureView<'_>) -> Vec<QuantilePiece> {
    let mut pieces = Vec::new();
    match m {
        MeasureView::Empirical { .. } => {
            let mut atoms: Vec<(f64, f64)> = Vec::new();
            m.for_each_atom(|p, w| atoms.push((p[0], w)));
            atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
            let total: f64 = atoms.iter().map(|a| a.1).sum();
            let mut u = 0.0;
            for (x, w) in atoms {
                if w <= 0.0 {
                    continue;
                }
                let u1 = u + w / total;
                pieces.push(QuantilePiece { u0: u, u1, x0: x, x1: x });
                u = u1;
            }
        }
        MeasureView::Grid(g) => {
            let a = g.grid.axis(0);
            let w = a.width();
            let total: f64 = g.values.iter().map(|v| v.max(0.0)).sum();
            let mut u = 0.0;
            for (i, &v) in g.values.iter().enumerate() {
                if v <= 0.0 {
                    continue;
                }
                let u1 = u + v / total;
                pieces.push(QuantilePiece { u0: u, u1, x0: a.face(i), x1: a.face(i) + w });
                u = u1;
            }
        }
    }
    if let Some(last) = pieces.last_mut() {
        last.u1 = 1.0;
    }
    pieces
}

/// `∫_a^b |d(u)|^p du` for `d` linear from `d0` to `d1`.
fn segment_cost(d0: f64, d1: f64, len: f64, p: u32) -> f64 {
    match p {
        1 => {
            if d0 * d1 >= 0.0 {
                0.5 * len * (d0.abs() + d1.abs())
            } else {
                0.5 * len * (d0 * d0 + d1 * d1) / (d0.abs() + d1.abs())
            }
        }
        _ => len * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0,
    }
}

/// Exact `W_p` between one-dimensional measures via the quantile coupling.
pub fn wasserstein_1d(mu: &MeasureView<'_>, nu: &MeasureView<'_>, p: u32) -> Result<f64, MeasureError> {
    if p != 1 && p != 2 {
        return Err(MeasureError::UnsupportedOrder(p));
    }
    for d in [mu.dim(), nu.dim()] {
        if d != 1 {
            return Err(MeasureError::NotOneDimensional(d));
        }
    }
    // Equal-size uniform samples: sorted matching.
    if let (MeasureView::Empirical { measure: a, exclude: None }, MeasureView::Empirical { measure: b, exclude: None }) = (mu, nu) {
        if a.is_uniform() && b.is_uniform() && a.len() == b.len() {
            let mut xs = a.points.clone();
            let mut ys = b.points.clone();
            xs.sort_by(f64::total_cmp);
            ys.sort_by(f64::total_cmp);
            let n = xs.len() as f64;
            let s: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - y).abs().powi(p as i32)).sum();
            return Ok((s / n).powf(1.0 / p as f64));
        }
    }
    let qa = quantile_pieces(mu);
    let qb = quantile_pieces(nu);
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < qa.len() && j < qb.len() {
        let end = qa[i].u1.min(qb[j].u1);
        if end > u {
            let d0 = qa[i].at(u) - qb[j].at(u);
            let d1 = qa[i].at(end) - qb[j].at(end);
            acc += segment_cost(d0, d1, end - u, p);
            u = end;
        }
        if qa[i].u1 <= end {
            i += 1;
        }
        if qb[j].u1 <= end {
            j += 1;
        }
    }
    Ok(acc.max(0.0).powf(1.0 / p as f64))
}

/// Exact `W_p` between equal-size uniform empirical measures in any
/// dimension by enumerating all assignments. Test-oracle scale only.
pub fn wasserstein_small_nd(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: u32) -> Result<f64, MeasureError> {
    if p != 1 && p != 2 {
        return Err(MeasureError::UnsupportedOrder(p));
    }
    if mu.dim() != nu.dim() {
        return Err(MeasureError::DimensionMismatch(mu.dim(), nu.dim()));
    }
    let n = mu.len();
    if n > SMALL_ND_MAX || nu.len() > SMALL_ND_MAX {
        return Err(MeasureError::OracleScaleExceeded(n.max(nu.len())));
    }
    if nu.len() != n || !mu.is_uniform() || !nu.is_uniform() {
        return Err(MeasureError::Invalid("need equal-size uniform measures".into()));
    }
    let cost: Vec<f64> = (0..n * n)
        .map(|ij| {
            let (a, b) = (mu.point(ij / n), nu.point(ij % n));
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            if p == 1 {
                d2.sqrt()
            } else {
                d2
            }
        })
        .collect();
    // Heap's algorithm over assignments.
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |perm: &[usize]| -> f64 { perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum() };
    let mut best = eval(&perm);
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok((best / n as f64).powf(1.0 / p as f64))
}
