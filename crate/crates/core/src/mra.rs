//! Multiresolution hierarchy over nested non-uniform spline grids.
//!
//! Level `j + 1` is level `j` with the midpoints of some level-`j` spans added.
//! Each refined span owns exactly one detail coefficient (one column vector per
//! unknown): the deviation of the level-`j+1` coefficient sitting at the new
//! knot from the value predicted by knot insertion of the level-`j` expansion.
//! The remaining level-`j+1` coefficients are reproduced exactly by the
//! prediction, which fixes the level-`j` coefficients. Synthesis is therefore
//!
//! ```text
//! f = Σ c_k φ_k  +  Σ_j Σ_{s refined at j} d_{js} ψ_{js},
//! ```
//!
//! where `ψ_{js}` is the level-`j+1` B-spline centred on the inserted knot.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::banded::BandMatrix;
use crate::spline::{KnotGrid, SplineCoeffs, SplineError};

/// Ternary-search steps locating the peak of a detail function.
const NORM_SEARCH_STEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MraError {
    #[error("span {span} at level {level} is already refined")]
    AlreadyRefined { level: usize, span: usize },
    #[error("level {level} reaches the level cap {cap}")]
    LevelCapExceeded { level: usize, cap: usize },
    #[error("level {0} does not exist")]
    InvalidLevel(usize),
    #[error("span {span} does not exist at level {level}")]
    InvalidSpan { level: usize, span: usize },
    #[error("expansion grid does not match the finest hierarchy level")]
    GridMismatch,
    #[error("two-scale system is singular")]
    Singular,
    #[error(transparent)]
    Spline(#[from] SplineError),
}

/// Nested grids, level 0 coarsest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridHierarchy {
    order: usize,
    max_level: usize,
    /// Midpoints inserted when passing from level `j` to `j + 1`, sorted.
    inserted: Vec<Vec<f64>>,
    levels: Vec<KnotGrid>,
    active: Vec<BTreeSet<usize>>,
}

impl GridHierarchy {
    pub fn new(base: KnotGrid, max_level: usize) -> Self {
        Self {
            order: base.order(),
            max_level,
            inserted: Vec::new(),
            levels: vec![base],
            active: Vec::new(),
        }
    }

    fn rebuild(
        base: KnotGrid,
        max_level: usize,
        mut inserted: Vec<Vec<f64>>,
    ) -> Result<Self, MraError> {
        while inserted.last().is_some_and(|v| v.is_empty()) {
            inserted.pop();
        }
        let order = base.order();
        let mut levels = vec![base];
        let mut active = Vec::with_capacity(inserted.len());
        for mids in inserted.iter_mut() {
            mids.sort_by(|a, b| a.partial_cmp(b).unwrap());
            mids.dedup();
            let cur = levels.last().unwrap();
            let mut spans = BTreeSet::new();
            for &m in mids.iter() {
                spans.insert(cur.span_of(m)?);
            }
            let mut bp = Vec::with_capacity(cur.breakpoints().len() + mids.len());
            let (mut i, mut k) = (0, 0);
            let old = cur.breakpoints();
            while i < old.len() || k < mids.len() {
                if k == mids.len() || (i < old.len() && old[i] < mids[k]) {
                    bp.push(old[i]);
                    i += 1;
                } else {
                    bp.push(mids[k]);
                    k += 1;
                }
            }
            levels.push(KnotGrid::new(bp, order)?);
            active.push(spans);
        }
        Ok(Self {
            order,
            max_level,
            inserted,
            levels,
            active,
        })
    }

    /// Rebuilds a hierarchy from a flat grid whose breakpoints carry the level
    /// at which they were created (0 for the base grid). Every breakpoint of
    /// level `j + 1` must be the midpoint of a span of the level-`j` grid.
    pub fn from_leveled_breakpoints(
        breakpoints: &[f64],
        levels: &[usize],
        order: usize,
        max_level: usize,
    ) -> Result<Self, MraError> {
        let base: Vec<f64> = breakpoints
            .iter()
            .zip(levels)
            .filter(|(_, &l)| l == 0)
            .map(|(&b, _)| b)
            .collect();
        let top = levels.iter().copied().max().unwrap_or(0);
        let mut inserted = vec![Vec::new(); top];
        for (&b, &l) in breakpoints.iter().zip(levels) {
            if l > 0 {
                inserted[l - 1].push(b);
            }
        }
        let h = Self::rebuild(KnotGrid::new(base, order)?, max_level, inserted)?;
        // midpoint property
        for j in 0..h.inserted.len() {
            for &m in &h.inserted[j] {
                let s = h.levels[j].span_of(m)?;
                let (a, b) = h.levels[j].span_bounds(s);
                if m != 0.5 * (a + b) {
                    return Err(MraError::InvalidSpan { level: j, span: s });
                }
            }
        }
        Ok(h)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, j: usize) -> &KnotGrid {
        &self.levels[j]
    }

    pub fn finest(&self) -> &KnotGrid {
        self.levels.last().unwrap()
    }

    /// Spans of level `j` that are refined into level `j + 1`.
    pub fn active_spans(&self, j: usize) -> &BTreeSet<usize> {
        static EMPTY: BTreeSet<usize> = BTreeSet::new();
        self.active.get(j).unwrap_or(&EMPTY)
    }

    /// Midpoint inserted for refined span `span` of level `j`.
    pub fn midpoint(&self, j: usize, span: usize) -> f64 {
        let (a, b) = self.levels[j].span_bounds(span);
        0.5 * (a + b)
    }

    pub fn refine_spans(&self, level: usize, spans: &[usize]) -> Result<GridHierarchy, MraError> {
        if level >= self.max_level {
            return Err(MraError::LevelCapExceeded {
                level,
                cap: self.max_level,
            });
        }
        if level >= self.levels.len() {
            return Err(MraError::InvalidLevel(level));
        }
        let grid = &self.levels[level];
        let mut inserted = self.inserted.clone();
        if inserted.len() <= level {
            inserted.resize(level + 1, Vec::new());
        }
        for &s in spans {
            if s >= grid.num_spans() {
                return Err(MraError::InvalidSpan { level, span: s });
            }
            if self.active_spans(level).contains(&s) {
                return Err(MraError::AlreadyRefined { level, span: s });
            }
            inserted[level].push(self.midpoint(level, s));
        }
        Self::rebuild(self.levels[0].clone(), self.max_level, inserted)
    }

    /// Two-scale data between level `j` and `j + 1`.
    fn two_scale(&self, j: usize) -> TwoScale {
        let coarse = &self.levels[j];
        let fine = &self.levels[j + 1];
        let k = self.order;
        let n = coarse.dim();
        // rows[i]: fine coefficient i as a combination of coarse coefficients
        let mut rows: Vec<Vec<(usize, f64)>> = (0..n).map(|c| vec![(c, 1.0)]).collect();
        let mut knots = coarse.knots().to_vec();
        for &t in &self.inserted[j] {
            let p = k - 1;
            let mu = knots.partition_point(|&x| x <= t) - 1;
            let mut next = Vec::with_capacity(rows.len() + 1);
            for i in 0..=rows.len() {
                if i + p <= mu {
                    next.push(rows[i].clone());
                } else if i > mu {
                    next.push(std::mem::take(&mut rows[i - 1]));
                } else {
                    let alpha = (t - knots[i]) / (knots[i + p] - knots[i]);
                    next.push(combine(&rows[i], alpha, &rows[i - 1], 1.0 - alpha));
                }
            }
            rows = next;
            knots.insert(mu + 1, t);
        }
        let half = k.div_ceil(2);
        let fknots = fine.knots();
        let mut new_index = BTreeMap::new();
        for (&s, &m) in self.active[j].iter().zip(self.inserted[j].iter()) {
            let p = fknots.partition_point(|&x| x < m);
            debug_assert_eq!(fknots[p], m);
            new_index.insert(s, p - half);
        }
        TwoScale { rows, new_index }
    }
}

fn combine(a: &[(usize, f64)], wa: f64, b: &[(usize, f64)], wb: f64) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut k) = (0, 0);
    while i < a.len() || k < b.len() {
        if k == b.len() || (i < a.len() && a[i].0 < b[k].0) {
            out.push((a[i].0, wa * a[i].1));
            i += 1;
        } else if i == a.len() || b[k].0 < a[i].0 {
            out.push((b[k].0, wb * b[k].1));
            k += 1;
        } else {
            out.push((a[i].0, wa * a[i].1 + wb * b[k].1));
            i += 1;
            k += 1;
        }
    }
    out
}

struct TwoScale {
    rows: Vec<Vec<(usize, f64)>>,
    /// refined coarse span -> index of the fine coefficient carrying its detail
    new_index: BTreeMap<usize, usize>,
}

impl TwoScale {
    fn prolong(&self, coarse: &DMatrix<f64>) -> DMatrix<f64> {
        let mut fine = DMatrix::zeros(coarse.nrows(), self.rows.len());
        for (i, row) in self.rows.iter().enumerate() {
            for &(c, w) in row {
                for v in 0..coarse.nrows() {
                    fine[(v, i)] += w * coarse[(v, c)];
                }
            }
        }
        fine
    }

    fn restrict(&self, fine: &DMatrix<f64>, n_coarse: usize) -> Result<DMatrix<f64>, MraError> {
        let is_new: BTreeSet<usize> = self.new_index.values().copied().collect();
        let old: Vec<usize> = (0..self.rows.len()).filter(|i| !is_new.contains(i)).collect();
        debug_assert_eq!(old.len(), n_coarse);
        let (mut kl, mut ku) = (0usize, 0usize);
        for (r, &i) in old.iter().enumerate() {
            for &(c, _) in &self.rows[i] {
                if c > r {
                    ku = ku.max(c - r);
                } else {
                    kl = kl.max(r - c);
                }
            }
        }
        let mut a = BandMatrix::new(n_coarse, kl, ku);
        for (r, &i) in old.iter().enumerate() {
            for &(c, w) in &self.rows[i] {
                a.add(r, c, w);
            }
        }
        let lu = a.factor().map_err(|_| MraError::Singular)?;
        let mut coarse = DMatrix::zeros(fine.nrows(), n_coarse);
        let mut rhs = vec![0.0; n_coarse];
        for v in 0..fine.nrows() {
            for (r, &i) in old.iter().enumerate() {
                rhs[r] = fine[(v, i)];
            }
            lu.solve_in_place(&mut rhs);
            for (c, &x) in rhs.iter().enumerate() {
                coarse[(v, c)] = x;
            }
        }
        Ok(coarse)
    }
}

/// Coarse coefficients plus per-level sparse detail coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalExpansion {
    pub hierarchy: GridHierarchy,
    /// One row per unknown, one column per level-0 basis function.
    pub coarse: DMatrix<f64>,
    /// `details[j]` maps a refined level-`j` span to its detail vector.
    pub details: Vec<BTreeMap<usize, DVector<f64>>>,
}

impl HierarchicalExpansion {
    pub fn max_level(&self) -> usize {
        self.hierarchy.max_level()
    }

    pub fn num_details(&self) -> usize {
        self.details.iter().map(|d| d.len()).sum()
    }

    /// Coarse basis count plus stored details.
    pub fn num_coefficients(&self) -> usize {
        self.coarse.ncols() + self.num_details()
    }

    /// Max-norm of the detail function attached to span `span` of level `j`.
    pub fn detail_norm(&self, j: usize, span: usize) -> f64 {
        detail_function_norm(&self.hierarchy, j, span)
    }

    /// `‖d‖_∞ · ω` for every stored detail, keyed by `(level, span)`.
    pub fn scaled_magnitudes(&self) -> Vec<((usize, usize), f64)> {
        let mut out = Vec::with_capacity(self.num_details());
        for (j, map) in self.details.iter().enumerate() {
            for (&s, d) in map {
                out.push(((j, s), d.amax() * self.detail_norm(j, s)));
            }
        }
        out
    }

    /// Keeps the details selected by `keep` and coarsens the grid where that
    /// leaves refined spans without any remaining influence.
    fn retain<F>(&self, keep: F) -> Result<(HierarchicalExpansion, Vec<(usize, usize)>), MraError>
    where
        F: Fn(usize, usize, &DVector<f64>) -> bool,
    {
        let h = &self.hierarchy;
        let k = h.order();
        let mut dropped = Vec::new();
        // surviving details keyed by inserted midpoint value
        let mut surviving: Vec<Vec<(f64, DVector<f64>)>> = vec![Vec::new(); self.details.len()];
        for (j, map) in self.details.iter().enumerate() {
            for (&s, d) in map {
                if keep(j, s, d) {
                    surviving[j].push((h.midpoint(j, s), d.clone()));
                } else {
                    dropped.push((j, s));
                }
            }
        }
        // supports of surviving detail functions, on the original grids
        let mut supports: Vec<(f64, f64)> = Vec::new();
        for (j, map) in self.details.iter().enumerate() {
            let fine = h.level(j + 1);
            for &s in map.keys() {
                if keep(j, s, &map[&s]) {
                    let idx = center_index(fine, h.midpoint(j, s), k);
                    supports.push(fine.support(idx));
                }
            }
        }
        let mut inserted: Vec<Vec<f64>> = h.inserted.clone();
        // top-down: a midpoint can go if it carries no detail, has no refined
        // children left, and lies outside every surviving detail support
        for j in (0..inserted.len()).rev() {
            let with_detail: BTreeSet<u64> =
                surviving[j].iter().map(|(m, _)| m.to_bits()).collect();
            let children: Vec<f64> = inserted.get(j + 1).cloned().unwrap_or_default();
            let level_grid = h.level(j);
            inserted[j].retain(|&m| {
                if with_detail.contains(&m.to_bits()) {
                    return true;
                }
                let s = level_grid.span_of(m).unwrap();
                let (a, b) = level_grid.span_bounds(s);
                if children.iter().any(|&c| c > a && c < b) {
                    return true;
                }
                supports.iter().any(|&(lo, hi)| m >= lo && m <= hi)
            });
        }
        let nh = GridHierarchy::rebuild(h.level(0).clone(), h.max_level(), inserted)?;
        let mut details = vec![BTreeMap::new(); nh.num_levels() - 1];
        for (j, list) in surviving.into_iter().enumerate() {
            for (m, d) in list {
                let s = nh.level(j).span_of(m)?;
                details[j].insert(s, d);
            }
        }
        Ok((
            HierarchicalExpansion {
                hierarchy: nh,
                coarse: self.coarse.clone(),
                details,
            },
            dropped,
        ))
    }

    /// Linear approximation: all details of levels `< levels` kept, the rest
    /// removed.
    pub fn truncate_levels(&self, levels: usize) -> Result<HierarchicalExpansion, MraError> {
        Ok(self.retain(|j, _, _| j < levels)?.0)
    }

    /// Nonlinear approximation keeping the `n` details of largest scaled
    /// magnitude.
    pub fn best_n_term(&self, n: usize) -> Result<HierarchicalExpansion, MraError> {
        let mut mags = self.scaled_magnitudes();
        mags.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let keep: BTreeSet<(usize, usize)> = mags.iter().take(n).map(|(key, _)| *key).collect();
        Ok(self.retain(|j, s, _| keep.contains(&(j, s)))?.0)
    }
}

/// Index of the level grid's B-spline centred on knot `m`.
fn center_index(grid: &KnotGrid, m: f64, order: usize) -> usize {
    let p = grid.knots().partition_point(|&x| x < m);
    p - order.div_ceil(2)
}

fn detail_function_norm(h: &GridHierarchy, j: usize, span: usize) -> f64 {
    let fine = h.level(j + 1);
    let idx = center_index(fine, h.midpoint(j, span), h.order());
    let value = |t: f64| fine.eval(idx, t).unwrap_or(0.0);
    // B-splines are unimodal on their support
    let (mut a, mut b) = fine.support(idx);
    for _ in 0..NORM_SEARCH_STEPS {
        let (l, r) = (a + (b - a) / 3.0, b - (b - a) / 3.0);
        if value(l) < value(r) {
            a = l;
        } else {
            b = r;
        }
    }
    value(0.5 * (a + b))
}

pub fn refine_spans(
    h: &GridHierarchy,
    level: usize,
    spans: &[usize],
) -> Result<GridHierarchy, MraError> {
    h.refine_spans(level, spans)
}

pub fn decompose(fine: &SplineCoeffs, h: &GridHierarchy) -> Result<HierarchicalExpansion, MraError> {
    let top = h.finest();
    if fine.grid.order() != top.order() || fine.grid.breakpoints() != top.breakpoints() {
        return Err(MraError::GridMismatch);
    }
    let levels = h.num_levels();
    let mut details = vec![BTreeMap::new(); levels - 1];
    let mut cur = fine.coeffs.clone();
    for j in (0..levels - 1).rev() {
        let ts = h.two_scale(j);
        let coarse = ts.restrict(&cur, h.level(j).dim())?;
        let predicted = ts.prolong(&coarse);
        for (&s, &i) in &ts.new_index {
            let d = cur.column(i) - predicted.column(i);
            details[j].insert(s, d);
        }
        cur = coarse;
    }
    Ok(HierarchicalExpansion {
        hierarchy: h.clone(),
        coarse: cur,
        details,
    })
}

pub fn reconstruct(he: &HierarchicalExpansion) -> Result<SplineCoeffs, MraError> {
    let h = &he.hierarchy;
    let mut cur = he.coarse.clone();
    for j in 0..h.num_levels() - 1 {
        let ts = h.two_scale(j);
        let mut fine = ts.prolong(&cur);
        if let Some(map) = he.details.get(j) {
            for (s, d) in map {
                let i = *ts.new_index.get(s).ok_or(MraError::InvalidSpan { level: j, span: *s })?;
                let mut col = fine.column_mut(i);
                col += d;
            }
        }
        cur = fine;
    }
    Ok(SplineCoeffs::new(h.finest().clone(), cur)?)
}

/// Removes every detail with `‖d‖_∞ · ω < eps` and un-refines the spans left
/// without influence. Returns the dropped `(level, span)` pairs (indices into
/// the input hierarchy).
pub fn threshold(
    he: &HierarchicalExpansion,
    eps: f64,
) -> Result<(HierarchicalExpansion, Vec<(usize, usize)>), MraError> {
    he.retain(|j, s, d| !(d.amax() * he.detail_norm(j, s) < eps))
}

/// Spans whose indicator is at least `eta` times the largest one. Empty when
/// no indicator is positive.
pub fn select_refinement(indicators: &[f64], eta: f64) -> Vec<usize> {
    let eta = eta.clamp(f64::MIN_POSITIVE, 1.0);
    let max = indicators
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    if !(max > 0.0) {
        return Vec::new();
    }
    let cut = eta * max;
    indicators
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= cut)
        .map(|(i, _)| i)
        .collect()
}
