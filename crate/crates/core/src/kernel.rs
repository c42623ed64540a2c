//! The extraction/distribution double attention.
//!
//! Extraction pools a reference feature map into `k` neural textures using
//! row-stochastic weights over positions; distribution spreads the textures
//! back over target positions using column-stochastic weights over the `k`
//! semantics. Composed, the two give an implicit `(hw)_t x (hw)_r`
//! deformation `C_d^T C_e` of rank at most `k` that is never materialized on
//! the hot path.
//!
//! The module also carries the dense softmax attention used as the quadratic
//! baseline, and graph-building variants of every operation for training.

use log::warn;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::spatial::Grid;
use crate::tensor::{Axis, Real, Tensor};

/// Position-wise features of an `h x w` map, stored as `(h*w) x c`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Real = f64> {
    grid: Grid,
    values: Tensor<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(grid: Grid, values: Tensor<T>) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() != grid.positions() {
            return Err(Error::dims("feature_map", values.shape(), &[grid.h, grid.w]));
        }
        Ok(FeatureMap { grid, values })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn positions(&self) -> usize {
        self.grid.positions()
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }
}

/// `k x c` bank of position-wise (1x1) semantic filters.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticFilters<T: Real = f64> {
    weights: Tensor<T>,
}

impl<T: Real> SemanticFilters<T> {
    pub fn new(weights: Tensor<T>) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::Config(format!("filters must be k x c, got {:?}", weights.shape())));
        }
        Ok(SemanticFilters { weights })
    }

    pub fn k(&self) -> usize {
        self.weights.rows()
    }

    pub fn channels(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }
}

/// Learned position-wise linear map with bias producing the attention values.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T: Real = f64> {
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
}

impl<T: Real> Projection<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let c = weight.rows();
        if weight.shape() != [c, c] {
            return Err(Error::dims("projection", weight.shape(), &[c, c]));
        }
        if let Some(b) = &bias {
            if b.shape() != [1, c] {
                return Err(Error::dims("projection bias", b.shape(), &[1, c]));
            }
        }
        Ok(Projection { weight, bias })
    }

    pub fn identity(c: usize) -> Self {
        Projection {
            weight: Tensor::eye(c),
            bias: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        self.bias.as_ref()
    }

    /// Values `F W + b` for every position.
    pub fn apply(&self, features: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        if features.channels() != self.channels() {
            return Err(Error::dims("projection", features.values.shape(), self.weight.shape()));
        }
        let mut values = features.values.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            values.add_row_in_place(b)?;
        }
        FeatureMap::new(features.grid, values)
    }
}

/// A `k x hw` attention matrix together with its normalization direction.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix<T: Real = f64> {
    matrix: Tensor<T>,
    axis: Axis,
}

impl<T: Real> CorrelationMatrix<T> {
    /// Normalizes raw logits along `axis`, reusing the buffer.
    pub fn from_logits(mut logits: Tensor<T>, axis: Axis) -> Result<Self> {
        logits.softmax_in_place(axis)?;
        Ok(CorrelationMatrix { matrix: logits, axis })
    }

    /// Wraps an already normalized matrix, checking its sums within `tol`.
    pub fn from_normalized(matrix: Tensor<T>, axis: Axis, tol: f64) -> Result<Self> {
        let sums = match axis {
            Axis::Rows => matrix.row_sums(),
            Axis::Columns => matrix.col_sums(),
        };
        if matrix.data().iter().any(|v| *v < T::zero())
            || sums.data().iter().any(|s| (s.as_f64() - 1.0).abs() > tol)
        {
            return Err(Error::Config("correlation matrix is not stochastic along its axis".into()));
        }
        Ok(CorrelationMatrix { matrix, axis })
    }

    pub fn k(&self) -> usize {
        self.matrix.rows()
    }

    pub fn positions(&self) -> usize {
        self.matrix.cols()
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.matrix
    }

    /// Largest deviation of the normalized sums from one.
    pub fn normalization_error(&self) -> f64 {
        let sums = match self.axis {
            Axis::Rows => self.matrix.row_sums(),
            Axis::Columns => self.matrix.col_sums(),
        };
        sums.data().iter().fold(0.0, |m, s| m.max((s.as_f64() - 1.0).abs()))
    }
}

/// `k x c` appearance vectors, one per semantic.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralTextures<T: Real = f64>(pub Tensor<T>);

impl<T: Real> NeuralTextures<T> {
    pub fn k(&self) -> usize {
        self.0.rows()
    }
}

/// Materialized `(hw)_t x (hw)_r` warp.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationMatrix<T: Real = f64>(pub Tensor<T>);

impl<T: Real> DeformationMatrix<T> {
    pub fn max_row_sum_error(&self) -> f64 {
        self.0
            .row_sums()
            .data()
            .iter()
            .fold(0.0, |m, s| m.max((s.as_f64() - 1.0).abs()))
    }

    /// Applies the warp to `(hw)_r x c` values.
    pub fn apply(&self, values: &Tensor<T>) -> Result<Tensor<T>> {
        self.0.matmul(values)
    }
}

fn check_semantics(k: usize, positions: usize) {
    if k > positions {
        warn!("k = {k} semantics exceed {positions} positions; textures will be redundant");
    }
}

/// Extraction: `C_e = W_e F_r^T`, softmax over positions, `F_e = C_e f(F_r)`.
pub fn extract<T: Real>(
    reference: &FeatureMap<T>,
    filters: &SemanticFilters<T>,
    proj: &Projection<T>,
) -> Result<(NeuralTextures<T>, CorrelationMatrix<T>)> {
    if filters.channels() != reference.channels() {
        return Err(Error::dims("extract", filters.weights.shape(), reference.values.shape()));
    }
    check_semantics(filters.k(), reference.positions());
    let values = proj.apply(reference)?;
    let corr = CorrelationMatrix::from_logits(filters.weights.matmul_nt(&reference.values)?, Axis::Rows)?;
    let textures = corr.matrix.matmul(&values.values)?;
    Ok((NeuralTextures(textures), corr))
}

/// Distribution: `C_d = W_d F_t^T`, softmax over semantics, `F_o = C_d^T F_e`.
pub fn distribute<T: Real>(
    target: &FeatureMap<T>,
    filters: &SemanticFilters<T>,
    textures: &NeuralTextures<T>,
) -> Result<(FeatureMap<T>, CorrelationMatrix<T>)> {
    if filters.channels() != target.channels() {
        return Err(Error::dims("distribute", filters.weights.shape(), target.values.shape()));
    }
    if textures.k() != filters.k() {
        return Err(Error::dims("distribute", textures.0.shape(), filters.weights.shape()));
    }
    let corr = CorrelationMatrix::from_logits(filters.weights.matmul_nt(&target.values)?, Axis::Columns)?;
    let out = corr.matrix.matmul_tn(&textures.0)?;
    Ok((FeatureMap::new(target.grid, out)?, corr))
}

/// Full operation: extract from `reference`, distribute over `target`.
pub fn nted<T: Real>(
    reference: &FeatureMap<T>,
    target: &FeatureMap<T>,
    extraction: &SemanticFilters<T>,
    distribution: &SemanticFilters<T>,
    proj: &Projection<T>,
) -> Result<FeatureMap<T>> {
    let (textures, _) = extract(reference, extraction, proj)?;
    let (out, _) = distribute(target, distribution, &textures)?;
    Ok(out)
}

fn check_pair<T: Real>(extraction: &CorrelationMatrix<T>, distribution: &CorrelationMatrix<T>) -> Result<()> {
    if extraction.axis != Axis::Rows || distribution.axis != Axis::Columns {
        return Err(Error::Config("expected a row-normalized extraction and column-normalized distribution".into()));
    }
    if extraction.k() != distribution.k() {
        return Err(Error::dims("warp", extraction.matrix.shape(), distribution.matrix.shape()));
    }
    Ok(())
}

/// `C_d^T (C_e values)`, evaluated right to left so the `(hw)^2` product
/// never exists.
pub fn nted_warp<T: Real>(
    values: &Tensor<T>,
    extraction: &CorrelationMatrix<T>,
    distribution: &CorrelationMatrix<T>,
    target_grid: Grid,
) -> Result<FeatureMap<T>> {
    check_pair(extraction, distribution)?;
    if values.rows() != extraction.positions() {
        return Err(Error::dims("nted_warp", values.shape(), extraction.matrix.shape()));
    }
    if distribution.positions() != target_grid.positions() {
        return Err(Error::dims("nted_warp", distribution.matrix.shape(), &[target_grid.h, target_grid.w]));
    }
    let textures = extraction.matrix.matmul(values)?;
    FeatureMap::new(target_grid, distribution.matrix.matmul_tn(&textures)?)
}

/// Explicit `C_d^T C_e`. Only for coarse-scale losses and diagnostics.
pub fn materialize_deformation<T: Real>(
    extraction: &CorrelationMatrix<T>,
    distribution: &CorrelationMatrix<T>,
) -> Result<DeformationMatrix<T>> {
    check_pair(extraction, distribution)?;
    Ok(DeformationMatrix(distribution.matrix.matmul_tn(&extraction.matrix)?))
}

/// Dense attention `softmax_rows(F_t F_r^T) f(F_r)` over all position pairs.
pub fn vanilla_attention<T: Real>(
    target: &FeatureMap<T>,
    reference: &FeatureMap<T>,
    proj: &Projection<T>,
) -> Result<FeatureMap<T>> {
    if target.channels() != reference.channels() {
        return Err(Error::dims("vanilla_attention", target.values.shape(), reference.values.shape()));
    }
    let values = proj.apply(reference)?;
    let mut scores = target.values.matmul_nt(&reference.values)?;
    scores.softmax_in_place(Axis::Rows)?;
    FeatureMap::new(target.grid, scores.matmul(&values.values)?)
}

/// Average distribution weight of every semantic over the masked positions,
/// as a `k x 1` tensor. `mask` holds one 0/1 entry per position.
pub fn region_texture_usage<T: Real>(distribution: &CorrelationMatrix<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, n) = (distribution.k(), distribution.positions());
    if mask.len() != n {
        return Err(Error::dims("region_texture_usage", mask.shape(), distribution.matrix.shape()));
    }
    let area = mask.sum();
    if area <= T::zero() {
        return Err(Error::EmptyMask("region_texture_usage"));
    }
    let m = distribution.matrix.data();
    let mut out = Tensor::zeros(&[k, 1]);
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let mut s = T::zero();
        for (j, w) in mask.data().iter().enumerate() {
            s += m[i * n + j] * *w;
        }
        *o = s / area;
    }
    Ok(out)
}

/// Graph-building counterparts used by training and gradient checks.
pub mod diff {
    use super::*;

    /// Differentiable projection weights and bias.
    #[derive(Debug, Clone, Copy)]
    pub struct ProjectionVars {
        pub weight: Var,
        pub bias: Option<Var>,
    }

    pub fn project<T: Real>(g: &mut Graph<T>, features: Var, proj: ProjectionVars) -> Result<Var> {
        let v = g.matmul(features, proj.weight)?;
        match proj.bias {
            Some(b) => g.add_row(v, b),
            None => Ok(v),
        }
    }

    /// Returns `(textures, C_e)`.
    pub fn extract<T: Real>(
        g: &mut Graph<T>,
        reference: Var,
        filters: Var,
        proj: ProjectionVars,
    ) -> Result<(Var, Var)> {
        let values = project(g, reference, proj)?;
        let logits = g.matmul_nt(filters, reference)?;
        let corr = g.softmax(logits, Axis::Rows)?;
        let textures = g.matmul(corr, values)?;
        Ok((textures, corr))
    }

    /// Returns `(output, C_d)`.
    pub fn distribute<T: Real>(g: &mut Graph<T>, target: Var, filters: Var, textures: Var) -> Result<(Var, Var)> {
        let logits = g.matmul_nt(filters, target)?;
        let corr = g.softmax(logits, Axis::Columns)?;
        let out = g.matmul_tn(corr, textures)?;
        Ok((out, corr))
    }

    /// Factored `C_d^T (C_e values)`.
    pub fn warp<T: Real>(g: &mut Graph<T>, values: Var, extraction: Var, distribution: Var) -> Result<Var> {
        let pooled = g.matmul(extraction, values)?;
        g.matmul_tn(distribution, pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::cost::{account_cost, measure, Mechanism};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Instance {
        reference: FeatureMap,
        target: FeatureMap,
        we: SemanticFilters,
        wd: SemanticFilters,
        proj: Projection,
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-scale..scale)).unwrap()
    }

    fn instance(seed: u64, hw: usize, k: usize, c: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::new(1, hw);
        Instance {
            reference: FeatureMap::new(grid, random(&mut rng, &[hw, c], 1.0)).unwrap(),
            target: FeatureMap::new(grid, random(&mut rng, &[hw, c], 1.0)).unwrap(),
            we: SemanticFilters::new(random(&mut rng, &[k, c], 1.0)).unwrap(),
            wd: SemanticFilters::new(random(&mut rng, &[k, c], 1.0)).unwrap(),
            proj: Projection::new(random(&mut rng, &[c, c], 0.5), Some(random(&mut rng, &[1, c], 0.5))).unwrap(),
        }
    }

    #[test]
    fn zero_filters_give_uniform_extraction() {
        let inst = instance(1, 6, 1, 3);
        let zero = SemanticFilters::new(Tensor::zeros(&[1, 3])).unwrap();
        let (tex, ce) = extract(&inst.reference, &zero, &inst.proj).unwrap();
        assert!(ce.matrix().data().iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
        let values = inst.proj.apply(&inst.reference).unwrap();
        let mean = values.values().col_sums().scale(1.0 / 6.0).unwrap();
        assert!(tex.0.max_abs_diff(&mean) < 1e-12);
    }

    #[test]
    fn two_position_hand_case() {
        let fr = FeatureMap::new(Grid::new(1, 2), Tensor::eye(2)).unwrap();
        let we = SemanticFilters::new(Tensor::eye(2)).unwrap();
        let (tex, _) = extract(&fr, &we, &Projection::identity(2)).unwrap();
        let e = std::f64::consts::E;
        let (hi, lo) = (e / (e + 1.0), 1.0 / (e + 1.0));
        let expect = Tensor::from_rows(&[&[hi, lo], &[lo, hi]]).unwrap();
        assert!(tex.0.max_abs_diff(&expect) < 1e-12);
        assert!((tex.0.get(0, 0) - 0.7311).abs() < 1e-4);
        assert!((tex.0.get(0, 1) - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn single_semantic_distribution_copies_texture() {
        let inst = instance(2, 5, 1, 3);
        let tex = NeuralTextures(Tensor::from_rows(&[&[0.3, -0.1, 2.0]]).unwrap());
        let (out, cd) = distribute(&inst.target, &inst.wd, &tex).unwrap();
        assert!(cd.matrix().data().iter().all(|v| *v == 1.0));
        for p in 0..5 {
            assert_eq!(out.values().row(p), tex.0.row(0));
        }
    }

    #[test]
    fn duplicated_target_positions_match() {
        let inst = instance(3, 4, 3, 2);
        let mut t = inst.target.values().clone();
        let row0 = t.row(0).to_vec();
        for (j, v) in row0.iter().enumerate() {
            t.set(2, j, *v);
        }
        let target = FeatureMap::new(inst.target.grid(), t).unwrap();
        let (tex, _) = extract(&inst.reference, &inst.we, &inst.proj).unwrap();
        let (out, _) = distribute(&target, &inst.wd, &tex).unwrap();
        assert_eq!(out.values().row(0), out.values().row(2));
    }

    #[test]
    fn distribution_matches_loop_oracle() {
        let inst = instance(4, 12, 4, 5);
        let (tex, _) = extract(&inst.reference, &inst.we, &inst.proj).unwrap();
        let (out, _) = distribute(&inst.target, &inst.wd, &tex).unwrap();
        // independent evaluation: per-position softmax over semantics, then
        // weighted sum of textures
        for p in 0..12 {
            let logits: Vec<f64> = (0..4)
                .map(|i| (0..5).map(|ch| inst.wd.weights().get(i, ch) * inst.target.values().get(p, ch)).sum())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for ch in 0..5 {
                let v: f64 = (0..4).map(|i| logits[i].exp() / z * tex.0.get(i, ch)).sum();
                assert!((out.values().get(p, ch) - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn textures_lie_in_value_hull() {
        let inst = instance(5, 30, 6, 4);
        let (tex, _) = extract(&inst.reference, &inst.we, &inst.proj).unwrap();
        let values = inst.proj.apply(&inst.reference).unwrap();
        for ch in 0..4 {
            let col: Vec<f64> = (0..30).map(|p| values.values().get(p, ch)).collect();
            let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
            for i in 0..6 {
                let v = tex.0.get(i, ch);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn warp_preserves_constants() {
        let inst = instance(6, 20, 5, 3);
        let (_, ce) = extract(&inst.reference, &inst.we, &inst.proj).unwrap();
        let (_, cd) = distribute(&inst.target, &inst.wd, &NeuralTextures(Tensor::zeros(&[5, 3]))).unwrap();
        let constant = Tensor::from_fn(&[20, 3], |i| [0.25, -1.5, 3.0][i % 3]).unwrap();
        let out = nted_warp(&constant, &ce, &cd, inst.target.grid()).unwrap();
        assert!(out.values().max_abs_diff(&constant) <= 1e-12);
    }

    #[test]
    fn warp_is_invariant_to_reference_relabeling() {
        let inst = instance(7, 16, 4, 3);
        let (_, ce) = extract(&inst.reference, &inst.we, &inst.proj).unwrap();
        let (_, cd) = distribute(&inst.target, &inst.wd, &NeuralTextures(Tensor::zeros(&[4, 3]))).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let values = random(&mut rng, &[16, 3], 1.0);
        let mut perm: Vec<usize> = (0..16).collect();
        perm.shuffle(&mut rng);
        let pv = Tensor::from_fn(&[16, 3], |i| values.get(perm[i / 3], i % 3)).unwrap();
        let pce = Tensor::from_fn(&[4, 16], |i| ce.matrix().get(i / 16, perm[i % 16])).unwrap();
        let pce = CorrelationMatrix::from_normalized(pce, Axis::Rows, 1e-12).unwrap();
        let a = nted_warp(&values, &ce, &cd, inst.target.grid()).unwrap();
        let b = nted_warp(&pv, &pce, &cd, inst.target.grid()).unwrap();
        assert!(a.values().max_abs_diff(b.values()) <= 1e-12);
    }

    #[test]
    fn single_semantic_deformation_is_rank_one() {
        let inst = instance(8, 9, 1, 2);
        let (_, ce) = extract(&inst.reference, &inst.we, &inst.proj).unwrap();
        let (_, cd) = distribute(&inst.target, &inst.wd, &NeuralTextures(Tensor::zeros(&[1, 2]))).unwrap();
        let d = materialize_deformation(&ce, &cd).unwrap();
        for r in 0..9 {
            assert_eq!(d.0.row(r), ce.matrix().row(0));
        }
    }

    #[test]
    fn deformation_rank_bounded_by_k() {
        let inst = instance(9, 64, 4, 8);
        let (_, ce) = extract(&inst.reference, &inst.we, &inst.proj).unwrap();
        let (_, cd) = distribute(&inst.target, &inst.wd, &NeuralTextures(Tensor::zeros(&[4, 8]))).unwrap();
        let d = materialize_deformation(&ce, &cd).unwrap();
        assert!(d.max_row_sum_error() <= 1e-10);
        let m = nalgebra::DMatrix::from_row_slice(64, 64, d.0.data());
        let sv = m.singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(sv[4] <= 1e-8 * sv[0], "sigma_5 = {}, sigma_1 = {}", sv[4], sv[0]);
    }

    #[test]
    fn vanilla_single_reference_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let reference = FeatureMap::new(Grid::new(1, 1), random(&mut rng, &[1, 3], 1.0)).unwrap();
        let target = FeatureMap::new(Grid::new(2, 3), random(&mut rng, &[6, 3], 1.0)).unwrap();
        let proj = Projection::new(random(&mut rng, &[3, 3], 1.0), None).unwrap();
        let out = vanilla_attention(&target, &reference, &proj).unwrap();
        let v = proj.apply(&reference).unwrap();
        for p in 0..6 {
            assert_eq!(out.values().row(p), v.values().row(0));
        }
    }

    #[test]
    fn vanilla_sharp_self_attention_is_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // unit-norm rows scaled by 100: the self score dominates every other
        let raw = random(&mut rng, &[10, 4], 1.0);
        let normed = Tensor::from_fn(&[10, 4], |i| {
            let r = raw.row(i / 4);
            r[i % 4] / r.iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .unwrap();
        let fr = FeatureMap::new(Grid::new(2, 5), normed.scale(100.0).unwrap()).unwrap();
        let proj = Projection::new(random(&mut rng, &[4, 4], 1.0), None).unwrap();
        let out = vanilla_attention(&fr, &fr, &proj).unwrap();
        let values = proj.apply(&fr).unwrap();
        assert!(out.values().max_abs_diff(values.values()) <= 1e-3);
    }

    #[test]
    fn vanilla_matches_loop_oracle() {
        let inst = instance(12, 7, 2, 3);
        let out = vanilla_attention(&inst.target, &inst.reference, &inst.proj).unwrap();
        let values = inst.proj.apply(&inst.reference).unwrap();
        for t in 0..7 {
            let s: Vec<f64> = (0..7)
                .map(|r| (0..3).map(|ch| inst.target.values().get(t, ch) * inst.reference.values().get(r, ch)).sum())
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
            for ch in 0..3 {
                let v: f64 = (0..7).map(|r| (s[r] - mx).exp() / z * values.values().get(r, ch)).sum();
                assert!((out.values().get(t, ch) - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn region_usage_examples() {
        let inst = instance(13, 10, 4, 3);
        let (_, cd) = distribute(&inst.target, &inst.wd, &NeuralTextures(Tensor::zeros(&[4, 3]))).unwrap();
        let all = Tensor::ones(&[1, 10]);
        let usage = region_texture_usage(&cd, &all).unwrap();
        assert!((usage.sum() - 1.0).abs() <= 1e-12);
        let mut one = Tensor::zeros(&[1, 10]);
        one.data_mut()[6] = 1.0;
        let usage = region_texture_usage(&cd, &one).unwrap();
        for i in 0..4 {
            assert_eq!(usage.get(i, 0), cd.matrix().get(i, 6));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(130);
        let mask = Tensor::from_fn(&[1, 10], |i| if i == 0 || rng.random_bool(0.5) { 1.0 } else { 0.0 }).unwrap();
        let usage = region_texture_usage(&cd, &mask).unwrap();
        let area: f64 = mask.data().iter().sum();
        for i in 0..4 {
            let mut s = 0.0;
            for j in 0..10 {
                if mask.data()[j] == 1.0 {
                    s += cd.matrix().get(i, j);
                }
            }
            assert!((usage.get(i, 0) - s / area).abs() <= 1e-12);
        }
        assert!(matches!(region_texture_usage(&cd, &Tensor::zeros(&[1, 10])), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn shape_errors() {
        let inst = instance(14, 4, 2, 3);
        let wrong = SemanticFilters::new(Tensor::zeros(&[2, 5])).unwrap();
        assert!(matches!(extract(&inst.reference, &wrong, &inst.proj), Err(Error::Dimension { .. })));
        let tex = NeuralTextures(Tensor::zeros(&[3, 3]));
        assert!(distribute(&inst.target, &inst.wd, &tex).is_err());
        assert!(Projection::new(Tensor::<f64>::zeros(&[2, 3]), None).is_err());
    }

    #[test]
    fn more_semantics_than_positions_still_normalizes() {
        let inst = instance(15, 3, 8, 2);
        let (_, ce) = extract(&inst.reference, &inst.we, &inst.proj).unwrap();
        assert!(ce.normalization_error() <= 1e-12);
    }

    #[test]
    fn instrumented_counts_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (h, w, c, k) = (4, 6, 5, 3);
        let grid = Grid::new(h, w);
        let fr = FeatureMap::new(grid, random(&mut rng, &[24, c], 1.0)).unwrap();
        let ft = FeatureMap::new(grid, random(&mut rng, &[24, c], 1.0)).unwrap();
        let we = SemanticFilters::new(random(&mut rng, &[k, c], 1.0)).unwrap();
        let wd = SemanticFilters::new(random(&mut rng, &[k, c], 1.0)).unwrap();
        let proj = Projection::new(random(&mut rng, &[c, c], 1.0), Some(random(&mut rng, &[1, c], 1.0))).unwrap();
        let (_, counts) = measure(|| nted(&fr, &ft, &we, &wd, &proj).unwrap());
        assert_eq!(counts, account_cost(h, w, c, k, Mechanism::Nted));
        let (_, counts) = measure(|| vanilla_attention(&ft, &fr, &proj).unwrap());
        assert_eq!(counts, account_cost(h, w, c, k, Mechanism::Vanilla));
    }

    #[test]
    fn warp_gradients_pass_check() {
        for seed in 0..10 {
            let inst = instance(100 + seed, 6, 3, 4);
            let inputs = vec![
                inst.reference.values().clone(),
                inst.target.values().clone(),
                inst.we.weights().clone(),
                inst.wd.weights().clone(),
                inst.proj.weight().clone(),
                inst.proj.bias().unwrap().clone(),
            ];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probe = random(&mut rng, &[6, 4], 1.0);
            let report = grad_check(
                |g, v| {
                    let proj = diff::ProjectionVars { weight: v[4], bias: Some(v[5]) };
                    let (tex, _) = diff::extract(g, v[0], v[2], proj)?;
                    let (out, _) = diff::distribute(g, v[1], v[3], tex)?;
                    let p = g.constant(probe.clone());
                    let m = g.mul(out, p)?;
                    g.sum(m)
                },
                &inputs,
                1e-6,
                1e-5,
            );
            assert!(report.passed(), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let inst = instance(17, 8, 3, 4);
        let plain = nted(&inst.reference, &inst.target, &inst.we, &inst.wd, &inst.proj).unwrap();
        let mut g = Graph::new();
        let fr = g.constant(inst.reference.values().clone());
        let ft = g.constant(inst.target.values().clone());
        let we = g.constant(inst.we.weights().clone());
        let wd = g.constant(inst.wd.weights().clone());
        let pw = g.constant(inst.proj.weight().clone());
        let pb = g.constant(inst.proj.bias().unwrap().clone());
        let (tex, _) = diff::extract(&mut g, fr, we, diff::ProjectionVars { weight: pw, bias: Some(pb) }).unwrap();
        let (out, _) = diff::distribute(&mut g, ft, wd, tex).unwrap();
        assert_eq!(g.value(out), plain.values());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn factored_equals_materialized(seed in 0u64..10_000, hw in 1usize..64, k in 1usize..16, c in 1usize..32) {
            let inst = instance(seed, hw, k, c);
            let (tex, ce) = extract(&inst.reference, &inst.we, &inst.proj).unwrap();
            let (out, cd) = distribute(&inst.target, &inst.wd, &tex).unwrap();
            let values = inst.proj.apply(&inst.reference).unwrap();
            let d = materialize_deformation(&ce, &cd).unwrap();
            let dense = d.apply(values.values()).unwrap();
            prop_assert!(out.values().max_abs_diff(&dense) <= 1e-10);
            let warped = nted_warp(values.values(), &ce, &cd, inst.target.grid()).unwrap();
            prop_assert!(warped.values().max_abs_diff(&dense) <= 1e-10);
            prop_assert!(ce.normalization_error() <= 1e-12);
            prop_assert!(cd.normalization_error() <= 1e-12);
            prop_assert!(d.max_row_sum_error() <= 1e-10);
            prop_assert!(d.0.data().iter().all(|v| *v >= 0.0 && *v <= 1.0 + 1e-12));
        }

        #[test]
        fn extraction_ignores_reference_order(seed in 0u64..10_000, hw in 2usize..40) {
            let inst = instance(seed, hw, 4, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
            let mut perm: Vec<usize> = (0..hw).collect();
            perm.shuffle(&mut rng);
            let shuffled = Tensor::from_fn(&[hw, 3], |i| inst.reference.values().get(perm[i / 3], i % 3)).unwrap();
            let shuffled = FeatureMap::new(inst.reference.grid(), shuffled).unwrap();
            let (a, _) = extract(&inst.reference, &inst.we, &inst.proj).unwrap();
            let (b, _) = extract(&shuffled, &inst.we, &inst.proj).unwrap();
            prop_assert!(a.0.max_abs_diff(&b.0) <= 1e-12);
        }

        #[test]
        fn distribution_follows_target_order(seed in 0u64..10_000, hw in 2usize..40) {
            let inst = instance(seed, hw, 4, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
            let mut perm: Vec<usize> = (0..hw).collect();
            perm.shuffle(&mut rng);
            let shuffled = Tensor::from_fn(&[hw, 3], |i| inst.target.values().get(perm[i / 3], i % 3)).unwrap();
            let shuffled = FeatureMap::new(inst.target.grid(), shuffled).unwrap();
            let (tex, _) = extract(&inst.reference, &inst.we, &inst.proj).unwrap();
            let (a, _) = distribute(&inst.target, &inst.wd, &tex).unwrap();
            let (b, _) = distribute(&shuffled, &inst.wd, &tex).unwrap();
            for p in 0..hw {
                prop_assert_eq!(b.values().row(p), a.values().row(perm[p]));
            }
        }

        #[test]
        fn warp_stays_within_value_range(seed in 0u64..10_000, hw in 1usize..40, k in 1usize..8) {
            let inst = instance(seed, hw, k, 3);
            let (tex, _) = extract(&inst.reference, &inst.we, &inst.proj).unwrap();
            let (out, _) = distribute(&inst.target, &inst.wd, &tex).unwrap();
            let values = inst.proj.apply(&inst.reference).unwrap();
            for ch in 0..3 {
                let col: Vec<f64> = (0..hw).map(|p| values.values().get(p, ch)).collect();
                let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
                for p in 0..hw {
                    let v = out.values().get(p, ch);
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }
}
