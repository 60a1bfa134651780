//! Softmax attention pooling and its hand-derived gradients.
//!
//! One pooling stage maps a group of `n` row vectors `x_j` to a single vector:
//!
//! ```text
//! u_j   = tanh(W x_j + b)
//! α     = softmax_j(u_j · v)
//! out   = Σ_j α_j x_j
//! ```
//!
//! The primary stage pools the 16 sub-images of each backbone row with one
//! shared `(W, b, v)` triple (or one per backbone when configured); the
//! secondary stage pools the 4 backbone vectors with a separate triple per
//! task. Both are evaluated on stacks of groups so that a whole mini-batch
//! turns into one matrix product.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument("softmax input is not finite".into()));
    }
    let mut out = Array1::from(v.to_vec());
    softmax_inplace(out.view_mut());
    Ok(out.to_vec())
}

pub(crate) fn softmax_inplace(mut v: ArrayViewMut1<'_, f64>) {
    let max = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    v.mapv_inplace(|x| (x - max).exp());
    let sum = v.sum();
    v.mapv_inplace(|x| x / sum);
}

/// Borrowed `(W, b, v)` of one attention operation; `W` is `d_a × dim`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams<'a> {
    pub w: ArrayView2<'a, f64>,
    pub b: ArrayView1<'a, f64>,
    pub v: ArrayView1<'a, f64>,
}

impl AttentionParams<'_> {
    pub fn hidden(&self) -> usize {
        self.w.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    fn check(&self, dim: usize) -> Result<()> {
        let d_a = self.hidden();
        if self.b.len() != d_a || self.v.len() != d_a {
            return Err(Error::Argument(format!(
                "attention params: W has {d_a} rows but b has {} and v has {}",
                self.b.len(),
                self.v.len()
            )));
        }
        if self.input_dim() != dim {
            return Err(Error::Argument(format!(
                "attention params expect input width {}, got {dim}",
                self.input_dim()
            )));
        }
        Ok(())
    }
}

/// Mutable gradient accumulators matching [`AttentionParams`].
#[derive(Debug)]
pub struct AttentionGrads<'a> {
    pub w: ArrayViewMut2<'a, f64>,
    pub b: ArrayViewMut1<'a, f64>,
    pub v: ArrayViewMut1<'a, f64>,
}

/// Owned attention parameters, used where the flat model buffer is not.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub v: Array1<f64>,
}

impl AttentionWeights {
    pub fn zeros(hidden: usize, dim: usize) -> Self {
        Self {
            w: Array2::zeros((hidden, dim)),
            b: Array1::zeros(hidden),
            v: Array1::zeros(hidden),
        }
    }

    /// Uniform entries in `[-scale, scale]`, mostly for tests.
    pub fn random<R: Rng>(hidden: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-scale..=scale)).collect() };
        Self {
            w: Array2::from_shape_vec((hidden, dim), draw(hidden * dim)).unwrap(),
            b: Array1::from(draw(hidden)),
            v: Array1::from(draw(hidden)),
        }
    }

    pub fn view(&self) -> AttentionParams<'_> {
        AttentionParams {
            w: self.w.view(),
            b: self.b.view(),
            v: self.v.view(),
        }
    }

    pub fn grads_mut(&mut self) -> AttentionGrads<'_> {
        AttentionGrads {
            w: self.w.view_mut(),
            b: self.b.view_mut(),
            v: self.v.view_mut(),
        }
    }
}

/// Intermediates kept by [`attend`] for [`attend_backward`].
#[derive(Debug, Clone)]
pub struct AttentionCache {
    /// `tanh(W x + b)` for every input row.
    pub hidden: Array2<f64>,
    /// Attention weights, one row per group.
    pub alpha: Array2<f64>,
}

/// Pools consecutive groups of `group` rows of `x`.
///
/// Returns the pooled vectors (`rows / group × dim`) and the cache holding
/// one simplex row of weights per group.
pub fn attend(
    x: ArrayView2<'_, f64>,
    group: usize,
    params: AttentionParams<'_>,
) -> Result<(Array2<f64>, AttentionCache)> {
    let (rows, dim) = x.dim();
    if group == 0 || rows % group != 0 || rows == 0 {
        return Err(Error::Argument(format!(
            "{rows} input rows do not split into groups of {group}"
        )));
    }
    params.check(dim)?;
    let groups = rows / group;

    let mut hidden = Array2::zeros((rows, params.hidden()));
    general_mat_mul(1.0, &x, &params.w.t(), 0.0, &mut hidden);
    hidden += &params.b;
    hidden.mapv_inplace(f64::tanh);

    let logits = hidden.dot(&params.v);
    let mut alpha = logits
        .into_shape_with_order((groups, group))
        .expect("contiguous logits");
    for row in alpha.rows_mut() {
        softmax_inplace(row);
    }

    let mut pooled = Array2::zeros((groups, dim));
    for g in 0..groups {
        let xg = x.slice(s![g * group..(g + 1) * group, ..]);
        pooled.row_mut(g).assign(&alpha.row(g).dot(&xg));
    }
    Ok((pooled, AttentionCache { hidden, alpha }))
}

/// Gradient of [`attend`]: accumulates parameter gradients into `grads` and
/// returns the gradient with respect to `x`.
pub fn attend_backward(
    x: ArrayView2<'_, f64>,
    group: usize,
    params: AttentionParams<'_>,
    cache: &AttentionCache,
    upstream: ArrayView2<'_, f64>,
    grads: &mut AttentionGrads<'_>,
) -> Result<Array2<f64>> {
    attend_backward_impl(x, group, params, cache, upstream, grads, true)
        .map(|dx| dx.expect("input gradient requested"))
}

/// Like [`attend_backward`]; skips the input gradient when `want_dx` is false.
pub(crate) fn attend_backward_impl(
    x: ArrayView2<'_, f64>,
    group: usize,
    params: AttentionParams<'_>,
    cache: &AttentionCache,
    upstream: ArrayView2<'_, f64>,
    grads: &mut AttentionGrads<'_>,
    want_dx: bool,
) -> Result<Option<Array2<f64>>> {
    let (rows, dim) = x.dim();
    let groups = cache.alpha.nrows();
    if cache.alpha.ncols() != group
        || groups * group != rows
        || cache.hidden.dim() != (rows, params.hidden())
    {
        return Err(Error::State(format!(
            "attention cache ({} groups of {}) does not belong to {rows} rows of group {group}",
            groups,
            cache.alpha.ncols()
        )));
    }
    if upstream.dim() != (groups, dim) {
        return Err(Error::State(format!(
            "upstream gradient has shape {:?}, expected ({groups}, {dim})",
            upstream.dim()
        )));
    }
    params.check(dim)?;

    let mut dx = want_dx.then(|| Array2::zeros((rows, dim)));
    let mut d_logits = Array1::zeros(rows);
    for g in 0..groups {
        let xg = x.slice(s![g * group..(g + 1) * group, ..]);
        let up = upstream.row(g);
        let alpha = cache.alpha.row(g);
        let d_alpha = xg.dot(&up);
        let mean = alpha.dot(&d_alpha);
        for j in 0..group {
            d_logits[g * group + j] = alpha[j] * (d_alpha[j] - mean);
            if let Some(dx) = dx.as_mut() {
                dx.row_mut(g * group + j).scaled_add(alpha[j], &up);
            }
        }
    }

    grads.v.scaled_add(1.0, &cache.hidden.t().dot(&d_logits));

    // dZ = (d_logits ⊗ v) ⊙ (1 - u²)
    let mut dz = cache.hidden.mapv(|u| 1.0 - u * u);
    for (mut row, &dl) in dz.rows_mut().into_iter().zip(d_logits.iter()) {
        row *= &(&params.v * dl);
    }
    general_mat_mul(1.0, &dz.t(), &x, 1.0, &mut grads.w);
    grads.b.scaled_add(1.0, &dz.sum_axis(Axis(0)));
    if let Some(dx) = dx.as_mut() {
        general_mat_mul(1.0, &dz, &params.w, 1.0, dx);
    }
    Ok(dx)
}

/// Attention weights of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    /// `n_models × n_sub_images`.
    pub alpha_primary: Array2<f64>,
    /// `n_tasks × n_models`.
    pub alpha_secondary: Array2<f64>,
}

/// Primary attention parameters: one shared triple, or one per backbone row.
#[derive(Debug, Clone, Copy)]
pub struct PrimaryAttentionParams<'a> {
    triples: &'a [AttentionParams<'a>],
}

impl<'a> PrimaryAttentionParams<'a> {
    pub fn new(triples: &'a [AttentionParams<'a>], n_models: usize) -> Result<Self> {
        if triples.len() != 1 && triples.len() != n_models {
            return Err(Error::Argument(format!(
                "primary attention needs 1 or {n_models} parameter triples, got {}",
                triples.len()
            )));
        }
        Ok(Self { triples })
    }

    pub fn for_model(&self, model: usize) -> AttentionParams<'a> {
        if self.triples.len() == 1 {
            self.triples[0]
        } else {
            self.triples[model]
        }
    }

    pub fn is_shared(&self) -> bool {
        self.triples.len() == 1
    }
}

/// Cache of a single-image primary pass.
#[derive(Debug, Clone)]
pub struct PrimaryCache {
    per_model: Vec<AttentionCache>,
}

/// Pools the sub-image axis of one `(models, sub_images, dim)` tensor.
/// Returns `(models × dim, models × sub_images)`.
pub fn primary_attend(
    features: ArrayView3<'_, f64>,
    params: PrimaryAttentionParams<'_>,
) -> Result<(Array2<f64>, Array2<f64>, PrimaryCache)> {
    let (models, subs, dim) = features.dim();
    let mut pooled = Array2::zeros((models, dim));
    let mut alpha = Array2::zeros((models, subs));
    let mut per_model = Vec::with_capacity(models);
    for i in 0..models {
        let (p, cache) = attend(features.index_axis(Axis(0), i), subs, params.for_model(i))?;
        pooled.row_mut(i).assign(&p.row(0));
        alpha.row_mut(i).assign(&cache.alpha.row(0));
        per_model.push(cache);
    }
    Ok((pooled, alpha, PrimaryCache { per_model }))
}

/// Backward of [`primary_attend`]. `grads` holds one accumulator per
/// parameter triple, matching `params`.
pub fn primary_backward(
    features: ArrayView3<'_, f64>,
    params: PrimaryAttentionParams<'_>,
    cache: &PrimaryCache,
    upstream: ArrayView2<'_, f64>,
    grads: &mut [AttentionGrads<'_>],
) -> Result<ndarray::Array3<f64>> {
    let (models, subs, dim) = features.dim();
    if cache.per_model.len() != models {
        return Err(Error::State(format!(
            "primary cache holds {} models, input has {models}",
            cache.per_model.len()
        )));
    }
    if grads.len() != if params.is_shared() { 1 } else { models } {
        return Err(Error::Argument("gradient accumulators do not match parameters".into()));
    }
    let mut dx = ndarray::Array3::zeros((models, subs, dim));
    for i in 0..models {
        let g = if params.is_shared() { &mut grads[0] } else { &mut grads[i] };
        let d = attend_backward(
            features.index_axis(Axis(0), i),
            subs,
            params.for_model(i),
            &cache.per_model[i],
            upstream.slice(s![i..i + 1, ..]),
            g,
        )?;
        dx.index_axis_mut(Axis(0), i).assign(&d);
    }
    Ok(dx)
}

/// Pools the backbone axis for one task. Returns `(dim, models)`.
pub fn secondary_attend(
    pooled: ArrayView2<'_, f64>,
    params: AttentionParams<'_>,
) -> Result<(Array1<f64>, Array1<f64>, AttentionCache)> {
    let rows = pooled.nrows();
    let (fused, cache) = attend(pooled, rows, params)?;
    let alpha = cache.alpha.row(0).to_owned();
    Ok((fused.row(0).to_owned(), alpha, cache))
}

/// Backward of [`secondary_attend`].
pub fn secondary_backward(
    pooled: ArrayView2<'_, f64>,
    params: AttentionParams<'_>,
    cache: &AttentionCache,
    upstream: ArrayView1<'_, f64>,
    grads: &mut AttentionGrads<'_>,
) -> Result<Array2<f64>> {
    let up = upstream.insert_axis(Axis(0));
    attend_backward(pooled, pooled.nrows(), params, cache, up, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random3(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Scalar-loop evaluation of one pooling group.
    fn oracle_pool(x: &[Vec<f64>], w: &AttentionWeights) -> (Vec<f64>, Vec<f64>) {
        let d_a = w.b.len();
        let logits: Vec<f64> = x
            .iter()
            .map(|xj| {
                let mut s = 0.0;
                for a in 0..d_a {
                    let mut z = w.b[a];
                    for (d, &xv) in xj.iter().enumerate() {
                        z += w.w[[a, d]] * xv;
                    }
                    s += z.tanh() * w.v[a];
                }
                s
            })
            .collect();
        let exps: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
        let total: f64 = exps.iter().sum();
        let alpha: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let mut out = vec![0.0; x[0].len()];
        for (j, xj) in x.iter().enumerate() {
            for d in 0..out.len() {
                out[d] += alpha[j] * xj[d];
            }
        }
        (out, alpha)
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        let p = softmax(&[0.0, 2f64.ln()]).unwrap();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(softmax(&[]).is_err());
        let big = softmax(&[1000.0, 1000.0]).unwrap();
        assert_eq!(big, vec![0.5, 0.5]);
    }

    #[test]
    fn zero_context_gives_uniform_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random3((4, 16, 8), &mut rng);
        let mut w = AttentionWeights::random(3, 8, 0.5, &mut rng);
        w.v.fill(0.0);
        let triples = [w.view()];
        let params = PrimaryAttentionParams::new(&triples, 4).unwrap();
        let (pooled, alpha, _) = primary_attend(f.view(), params).unwrap();
        for a in alpha.iter() {
            assert!((a - 1.0 / 16.0).abs() < 1e-15);
        }
        let mean = f.mean_axis(Axis(1)).unwrap();
        for (p, m) in pooled.iter().zip(mean.iter()) {
            assert!((p - m).abs() < 1e-14);
        }
    }

    #[test]
    fn identical_rows_pool_to_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let row: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = Array3::from_shape_fn((4, 16, 8), |(_, _, d)| row[d]);
        let w = AttentionWeights::random(3, 8, 2.0, &mut rng);
        let triples = [w.view()];
        let (pooled, _, _) =
            primary_attend(f.view(), PrimaryAttentionParams::new(&triples, 4).unwrap()).unwrap();
        for i in 0..4 {
            for d in 0..8 {
                assert!((pooled[[i, d]] - row[d]).abs() < 1e-14);
            }
        }
        let (fused, alpha, _) = secondary_attend(pooled.view(), w.view()).unwrap();
        assert!((alpha.sum() - 1.0).abs() < 1e-12);
        for d in 0..8 {
            assert!((fused[d] - row[d]).abs() < 1e-14);
        }
    }

    #[test]
    fn secondary_zero_context_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pooled = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0));
        let w = AttentionWeights::zeros(3, 8);
        let (fused, alpha, _) = secondary_attend(pooled.view(), w.view()).unwrap();
        assert_eq!(alpha.to_vec(), vec![0.25; 4]);
        let mean = pooled.mean_axis(Axis(0)).unwrap();
        for (a, b) in fused.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn primary_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random3((4, 16, 8), &mut rng);
        let w = AttentionWeights::random(3, 8, 1.0, &mut rng);
        let triples = [w.view()];
        let (pooled, alpha, _) =
            primary_attend(f.view(), PrimaryAttentionParams::new(&triples, 4).unwrap()).unwrap();
        for i in 0..4 {
            let rows: Vec<Vec<f64>> = (0..16).map(|j| f.slice(s![i, j, ..]).to_vec()).collect();
            let (out, a) = oracle_pool(&rows, &w);
            for d in 0..8 {
                assert!((pooled[[i, d]] - out[d]).abs() < 1e-12);
            }
            for j in 0..16 {
                assert!((alpha[[i, j]] - a[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn secondary_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pooled = Array2::from_shape_fn((4, 8), |_| rng.gen_range(-1.0..1.0));
        let w = AttentionWeights::random(3, 8, 1.0, &mut rng);
        let (fused, alpha, _) = secondary_attend(pooled.view(), w.view()).unwrap();
        let rows: Vec<Vec<f64>> = pooled.rows().into_iter().map(|r| r.to_vec()).collect();
        let (out, a) = oracle_pool(&rows, &w);
        for d in 0..8 {
            assert!((fused[d] - out[d]).abs() < 1e-12);
        }
        for i in 0..4 {
            assert!((alpha[i] - a[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_argument_error() {
        let f = Array3::<f64>::zeros((4, 16, 8));
        let w = AttentionWeights::zeros(3, 7);
        let triples = [w.view()];
        let params = PrimaryAttentionParams::new(&triples, 4).unwrap();
        assert!(matches!(primary_attend(f.view(), params), Err(Error::Argument(_))));
        let two = [w.view(), w.view()];
        assert!(PrimaryAttentionParams::new(&two, 4).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random3((4, 16, 6), &mut rng);
        let w = AttentionWeights::random(3, 6, 1.0, &mut rng);
        let triples = [w.view()];
        let params = PrimaryAttentionParams::new(&triples, 4).unwrap();
        let (_, _, cache) = primary_attend(f.view(), params).unwrap();
        let mut g = AttentionWeights::zeros(3, 6);
        let dx = primary_backward(
            f.view(),
            params,
            &cache,
            Array2::zeros((4, 6)).view(),
            &mut [g.grads_mut()],
        )
        .unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
        assert!(g.w.iter().chain(g.b.iter()).chain(g.v.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_input_gradient_is_upstream_over_sixteen() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random3((4, 16, 5), &mut rng);
        let w = AttentionWeights::zeros(2, 5);
        let triples = [w.view()];
        let params = PrimaryAttentionParams::new(&triples, 4).unwrap();
        let (_, _, cache) = primary_attend(f.view(), params).unwrap();
        let up = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0..1.0));
        let mut g = AttentionWeights::zeros(2, 5);
        let dx = primary_backward(f.view(), params, &cache, up.view(), &mut [g.grads_mut()]).unwrap();
        for i in 0..4 {
            for j in 0..16 {
                for d in 0..5 {
                    assert!((dx[[i, j, d]] - up[[i, d]] / 16.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn cache_mismatch_is_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pooled = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
        let other = Array2::from_shape_fn((3, 6), |_| rng.gen_range(-1.0..1.0));
        let w = AttentionWeights::random(2, 6, 1.0, &mut rng);
        let (_, _, cache) = secondary_attend(other.view(), w.view()).unwrap();
        let mut g = AttentionWeights::zeros(2, 6);
        let err = secondary_backward(
            pooled.view(),
            w.view(),
            &cache,
            Array1::zeros(6).view(),
            &mut g.grads_mut(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    /// Central-difference check of a scalar objective `Σ c ⊙ out` through
    /// the primary stage, over inputs and parameters.
    fn check_primary_gradients(seed: u64, per_model: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n, dim, d_a) = (4, 16, 6, 3);
        let f = random3((m, n, dim), &mut rng);
        let count = if per_model { m } else { 1 };
        let weights: Vec<AttentionWeights> =
            (0..count).map(|_| AttentionWeights::random(d_a, dim, 1.0, &mut rng)).collect();
        let coef = Array2::from_shape_fn((m, dim), |_| rng.gen_range(-1.0..1.0));

        let objective = |f: &Array3<f64>, ws: &[AttentionWeights]| -> f64 {
            let views: Vec<_> = ws.iter().map(|w| w.view()).collect();
            let p = PrimaryAttentionParams::new(&views, m).unwrap();
            let (pooled, _, _) = primary_attend(f.view(), p).unwrap();
            (&pooled * &coef).sum()
        };

        let views: Vec<_> = weights.iter().map(|w| w.view()).collect();
        let params = PrimaryAttentionParams::new(&views, m).unwrap();
        let (_, _, cache) = primary_attend(f.view(), params).unwrap();
        let mut grads: Vec<AttentionWeights> =
            (0..count).map(|_| AttentionWeights::zeros(d_a, dim)).collect();
        let dx = {
            let mut accs: Vec<_> = grads.iter_mut().map(|g| g.grads_mut()).collect();
            primary_backward(f.view(), params, &cache, coef.view(), &mut accs).unwrap()
        };

        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
        for idx in [(0, 0, 0), (1, 3, 2), (3, 15, 5), (2, 7, 1)] {
            let mut plus = f.clone();
            plus[idx] += h;
            let mut minus = f.clone();
            minus[idx] -= h;
            let fd = (objective(&plus, &weights) - objective(&minus, &weights)) / (2.0 * h);
            assert!(rel(fd, dx[idx]) < 1e-6, "dx{idx:?}: fd {fd} vs {}", dx[idx]);
        }
        for t in 0..count {
            for (a, d) in [(0, 0), (1, 4), (2, 5)] {
                let mut plus = weights.clone();
                plus[t].w[[a, d]] += h;
                let mut minus = weights.clone();
                minus[t].w[[a, d]] -= h;
                let fd = (objective(&f, &plus) - objective(&f, &minus)) / (2.0 * h);
                assert!(rel(fd, grads[t].w[[a, d]]) < 1e-6);
            }
            for a in 0..d_a {
                for which in 0..2 {
                    let mut plus = weights.clone();
                    let mut minus = weights.clone();
                    let analytic = if which == 0 {
                        plus[t].b[a] += h;
                        minus[t].b[a] -= h;
                        grads[t].b[a]
                    } else {
                        plus[t].v[a] += h;
                        minus[t].v[a] -= h;
                        grads[t].v[a]
                    };
                    let fd = (objective(&f, &plus) - objective(&f, &minus)) / (2.0 * h);
                    assert!(rel(fd, analytic) < 1e-6, "b/v[{a}] fd {fd} vs {analytic}");
                }
            }
        }
    }

    #[test]
    fn primary_gradients_match_finite_differences() {
        for seed in 0..5 {
            check_primary_gradients(seed, false);
            check_primary_gradients(100 + seed, true);
        }
    }

    #[test]
    fn secondary_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pooled = Array2::from_shape_fn((4, 7), |_| rng.gen_range(-1.0..1.0));
        let w = AttentionWeights::random(4, 7, 1.0, &mut rng);
        let coef = Array1::from_shape_fn(7, |_| rng.gen_range(-1.0..1.0));
        let objective = |p: &Array2<f64>, w: &AttentionWeights| {
            secondary_attend(p.view(), w.view()).unwrap().0.dot(&coef)
        };
        let (_, _, cache) = secondary_attend(pooled.view(), w.view()).unwrap();
        let mut g = AttentionWeights::zeros(4, 7);
        let dp = secondary_backward(pooled.view(), w.view(), &cache, coef.view(), &mut g.grads_mut())
            .unwrap();
        let h = 1e-5;
        for i in 0..4 {
            for d in 0..7 {
                let mut plus = pooled.clone();
                plus[[i, d]] += h;
                let mut minus = pooled.clone();
                minus[[i, d]] -= h;
                let fd = (objective(&plus, &w) - objective(&minus, &w)) / (2.0 * h);
                assert!((fd - dp[[i, d]]).abs() / fd.abs().max(1e-3) < 1e-6);
            }
        }
        for a in 0..4 {
            let mut plus = w.clone();
            plus.v[a] += h;
            let mut minus = w.clone();
            minus.v[a] -= h;
            let fd = (objective(&pooled, &plus) - objective(&pooled, &minus)) / (2.0 * h);
            assert!((fd - g.v[a]).abs() / fd.abs().max(1e-3) < 1e-6);
        }
    }

    #[test]
    fn shared_params_commute_with_model_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let f = random3((4, 16, 6), &mut rng);
        let w = AttentionWeights::random(3, 6, 1.0, &mut rng);
        let triples = [w.view()];
        let params = PrimaryAttentionParams::new(&triples, 4).unwrap();
        let perm = [2, 0, 3, 1];
        let permuted = f.select(Axis(0), &perm);
        let (a, alpha_a, _) = primary_attend(f.view(), params).unwrap();
        let (b, alpha_b, _) = primary_attend(permuted.view(), params).unwrap();
        assert_eq!(a.select(Axis(0), &perm), b);
        assert_eq!(alpha_a.select(Axis(0), &perm), alpha_b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn attention_rows_are_simplex(seed in any::<u64>(), scale in 0.01f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random3((4, 16, 5), &mut rng) * scale;
            let w = AttentionWeights::random(3, 5, scale, &mut rng);
            let triples = [w.view()];
            let (pooled, alpha, _) =
                primary_attend(f.view(), PrimaryAttentionParams::new(&triples, 4).unwrap()).unwrap();
            for row in alpha.rows() {
                prop_assert!(row.iter().all(|&a| a >= 0.0));
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            }
            // Convex hull: pooled coordinates lie between the min and max of the inputs.
            for i in 0..4 {
                for d in 0..5 {
                    let col = f.slice(s![i, .., d]);
                    let lo = col.fold(f64::INFINITY, |m, &x| m.min(x));
                    let hi = col.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    let tol = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
                    prop_assert!(pooled[[i, d]] >= lo - tol && pooled[[i, d]] <= hi + tol);
                }
            }
        }

        #[test]
        fn softmax_shift_invariant(v in proptest::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
            let a = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
