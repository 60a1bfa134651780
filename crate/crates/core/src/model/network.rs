//! Batched forward and backward passes for every variant.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;

use super::config::HiddenActivation;
use super::params::{matrix_mut, triple_grads, ModelParams, Structure};
use crate::attention::{attend, attend_backward_impl, AttentionCache, AttentionRecord};
use crate::dataset::{FeatureTensor, Layout};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active (inverted scaling).
    Train,
    /// Deterministic.
    Eval,
}

/// Model inputs promoted to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    /// `(batch, models, sub_images, dim)`.
    Tiled(Array4<f64>),
    /// `(batch, whole_dim)`.
    Whole(Array2<f64>),
}

impl Batch {
    pub fn from_features(records: &[&FeatureTensor]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Argument("empty batch".into()))?;
        let layout = first.layout();
        if let Some(r) = records.iter().find(|r| r.layout() != layout) {
            return Err(Error::Argument(format!(
                "record {:?} is {} in a {layout} batch",
                r.image_id(),
                r.layout()
            )));
        }
        let n = records.len();
        Ok(match layout {
            Layout::Tiled => {
                let shape = first.tiled_view().unwrap().dim();
                let mut out = Array4::zeros((n, shape.0, shape.1, shape.2));
                for (mut dst, r) in out.outer_iter_mut().zip(records) {
                    dst.zip_mut_with(&r.tiled_view().unwrap(), |d, &s| *d = f64::from(s));
                }
                Batch::Tiled(out)
            }
            Layout::Whole => {
                let width = first.data().len();
                let mut out = Array2::zeros((n, width));
                for (mut dst, r) in out.outer_iter_mut().zip(records) {
                    dst.zip_mut_with(&r.whole_view().unwrap(), |d, &s| *d = f64::from(s));
                }
                Batch::Whole(out)
            }
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Batch::Tiled(x) => x.dim().0,
            Batch::Whole(x) => x.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layout(&self) -> Layout {
        match self {
            Batch::Tiled(_) => Layout::Tiled,
            Batch::Whole(_) => Layout::Whole,
        }
    }
}

/// Outputs of a batched forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    /// `(batch, n_tasks)`, every entry in `(-1, 1)`.
    pub y: Array2<f64>,
    /// `(batch, models, sub_images)`; attentive variants only.
    pub alpha_primary: Option<Array3<f64>>,
    /// `(batch, n_tasks, models)`; attentive variants only.
    pub alpha_secondary: Option<Array3<f64>>,
}

impl BatchOutput {
    pub fn attention(&self, row: usize) -> Option<AttentionRecord> {
        Some(AttentionRecord {
            alpha_primary: self.alpha_primary.as_ref()?.index_axis(Axis(0), row).to_owned(),
            alpha_secondary: self.alpha_secondary.as_ref()?.index_axis(Axis(0), row).to_owned(),
        })
    }
}

/// One image's prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub values: Vec<f64>,
    pub attention: Option<AttentionRecord>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    /// Post-activation values before dropout.
    act: Array2<f64>,
    /// Inverted-dropout multipliers (0 or 1/(1-p)).
    mask: Option<Array2<f64>>,
    /// `act ⊙ mask`, the input of the next layer.
    out: Array2<f64>,
}

#[derive(Debug, Clone)]
struct HeadCache {
    hidden: LayerCache,
    output: LayerCache,
}

#[derive(Debug, Clone)]
enum CacheKind {
    Attentive {
        /// Per backbone, `(batch · sub_images, dim)`.
        model_inputs: Vec<Array2<f64>>,
        primary: Vec<AttentionCache>,
        /// Pooled backbone vectors, `(batch · models, dim)`.
        stacked: Array2<f64>,
        secondary: Vec<AttentionCache>,
        fused: Vec<Array2<f64>>,
        heads: Vec<HeadCache>,
        models: usize,
        subs: usize,
    },
    Dense {
        input: Array2<f64>,
        shared: Vec<LayerCache>,
        tasks: Vec<Vec<LayerCache>>,
    },
}

/// Intermediates of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    param_len: usize,
    batch_len: usize,
    kind: CacheKind,
}

fn dense_forward<R: Rng + ?Sized>(
    input: ArrayView2<'_, f64>,
    w: ArrayView2<'_, f64>,
    b: ArrayView1<'_, f64>,
    act: HiddenActivation,
    dropout: Option<(f64, &mut R)>,
) -> LayerCache {
    let mut z = Array2::zeros((input.nrows(), w.nrows()));
    general_mat_mul(1.0, &input, &w.t(), 0.0, &mut z);
    z += &b;
    z.mapv_inplace(|v| act.apply(v));
    match dropout {
        Some((rate, rng)) if rate > 0.0 => {
            let scale = 1.0 / (1.0 - rate);
            let mask = Array2::from_shape_simple_fn(z.dim(), || {
                if rng.gen::<f64>() < rate {
                    0.0
                } else {
                    scale
                }
            });
            let out = &z * &mask;
            LayerCache {
                act: z,
                mask: Some(mask),
                out,
            }
        }
        _ => LayerCache {
            out: z.clone(),
            act: z,
            mask: None,
        },
    }
}

#[allow(clippy::too_many_arguments)]
fn dense_backward(
    input: ArrayView2<'_, f64>,
    w: ArrayView2<'_, f64>,
    cache: &LayerCache,
    act: HiddenActivation,
    d_out: ArrayView2<'_, f64>,
    mut gw: ArrayViewMut2<'_, f64>,
    mut gb: ArrayViewMut1<'_, f64>,
    want_dx: bool,
) -> Option<Array2<f64>> {
    let mut dz = d_out.to_owned();
    if let Some(mask) = &cache.mask {
        dz *= mask;
    }
    dz.zip_mut_with(&cache.act, |d, &a| *d *= act.derivative_from_output(a));
    general_mat_mul(1.0, &dz.t(), &input, 1.0, &mut gw);
    gb.scaled_add(1.0, &dz.sum_axis(Axis(0)));
    want_dx.then(|| dz.dot(&w))
}

/// Runs the network on a batch. `rng` only drives dropout in train mode.
pub fn forward<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &Batch,
    mode: Mode,
    rng: &mut R,
) -> Result<(BatchOutput, ForwardCache)> {
    let config = params.config();
    let layout = params.layout();
    let values = params.values();
    let rate = match mode {
        Mode::Train => config.dropout_rate,
        Mode::Eval => 0.0,
    };
    let act = config.hidden_activation;
    let batch_len = batch.len();
    if batch_len == 0 {
        return Err(Error::Argument("empty batch".into()));
    }

    let (output, kind) = match (layout.structure(), batch) {
        (
            Structure::Attentive {
                primary,
                secondary,
                heads,
            },
            Batch::Tiled(x),
        ) => {
            let (b, models, subs, dim) = x.dim();
            if dim != config.feature_dim {
                return Err(Error::Argument(format!(
                    "feature width {dim} does not match model feature_dim {}",
                    config.feature_dim
                )));
            }
            if primary.len() > 1 && primary.len() != models {
                return Err(Error::Argument(format!(
                    "{} primary attentions for {models} backbone rows",
                    primary.len()
                )));
            }
            let mut model_inputs = Vec::with_capacity(models);
            let mut primary_caches = Vec::with_capacity(models);
            let mut stacked = Array2::zeros((b * models, dim));
            let mut alpha_primary = Array3::zeros((b, models, subs));
            for i in 0..models {
                let xi = x
                    .index_axis(Axis(1), i)
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((b * subs, dim))
                    .expect("contiguous");
                let triple = layout.triple(values, primary[if primary.len() == 1 { 0 } else { i }]);
                let (pooled, cache) = attend(xi.view(), subs, triple)?;
                stacked.slice_mut(s![i..;models, ..]).assign(&pooled);
                alpha_primary.slice_mut(s![.., i, ..]).assign(&cache.alpha);
                model_inputs.push(xi);
                primary_caches.push(cache);
            }

            let n_tasks = secondary.len();
            let mut y = Array2::zeros((b, n_tasks));
            let mut alpha_secondary = Array3::zeros((b, n_tasks, models));
            let mut secondary_caches = Vec::with_capacity(n_tasks);
            let mut fused_all = Vec::with_capacity(n_tasks);
            let mut head_caches = Vec::with_capacity(n_tasks);
            for k in 0..n_tasks {
                let (fused, cache) = attend(stacked.view(), models, layout.triple(values, secondary[k]))?;
                alpha_secondary.slice_mut(s![.., k, ..]).assign(&cache.alpha);
                let h = heads[k];
                let hidden = dense_forward(
                    fused.view(),
                    layout.matrix(values, h),
                    layout.vector(values, h + 1),
                    act,
                    Some((rate, &mut *rng)),
                );
                let output = dense_forward::<R>(
                    hidden.out.view(),
                    layout.matrix(values, h + 2),
                    layout.vector(values, h + 3),
                    HiddenActivation::Tanh,
                    None,
                );
                y.column_mut(k).assign(&output.act.column(0));
                secondary_caches.push(cache);
                fused_all.push(fused);
                head_caches.push(HeadCache { hidden, output });
            }
            (
                BatchOutput {
                    y,
                    alpha_primary: Some(alpha_primary),
                    alpha_secondary: Some(alpha_secondary),
                },
                CacheKind::Attentive {
                    model_inputs,
                    primary: primary_caches,
                    stacked,
                    secondary: secondary_caches,
                    fused: fused_all,
                    heads: head_caches,
                    models,
                    subs,
                },
            )
        }
        (Structure::Dense { shared, tasks }, Batch::Whole(x)) => {
            if x.ncols() != config.whole_dim {
                return Err(Error::Argument(format!(
                    "input width {} does not match model whole_dim {}",
                    x.ncols(),
                    config.whole_dim
                )));
            }
            let mut shared_caches: Vec<LayerCache> = Vec::with_capacity(shared.len());
            for &l in shared {
                let input = shared_caches.last().map_or(x.view(), |c| c.out.view());
                let cache = dense_forward(
                    input,
                    layout.matrix(values, l),
                    layout.vector(values, l + 1),
                    act,
                    Some((rate, &mut *rng)),
                );
                shared_caches.push(cache);
            }
            let trunk = shared_caches.last().map_or(x.view(), |c| c.out.view());
            let mut y = Array2::zeros((batch_len, tasks.len()));
            let mut task_caches = Vec::with_capacity(tasks.len());
            for (k, layers) in tasks.iter().enumerate() {
                let mut caches: Vec<LayerCache> = Vec::with_capacity(layers.len());
                for (pos, &l) in layers.iter().enumerate() {
                    let is_output = pos + 1 == layers.len();
                    let input = caches.last().map_or_else(|| trunk.view(), |c| c.out.view());
                    let cache = if is_output {
                        dense_forward::<R>(
                            input,
                            layout.matrix(values, l),
                            layout.vector(values, l + 1),
                            HiddenActivation::Tanh,
                            None,
                        )
                    } else {
                        dense_forward(
                            input,
                            layout.matrix(values, l),
                            layout.vector(values, l + 1),
                            act,
                            Some((rate, &mut *rng)),
                        )
                    };
                    caches.push(cache);
                }
                y.column_mut(k).assign(&caches.last().unwrap().act.column(0));
                task_caches.push(caches);
            }
            (
                BatchOutput {
                    y,
                    alpha_primary: None,
                    alpha_secondary: None,
                },
                CacheKind::Dense {
                    input: x.clone(),
                    shared: shared_caches,
                    tasks: task_caches,
                },
            )
        }
        (_, batch) => {
            return Err(Error::Argument(format!(
                "variant {} expects {} features, got {}",
                config.variant,
                config.variant.layout(),
                batch.layout()
            )))
        }
    };
    Ok((
        output,
        ForwardCache {
            param_len: params.len(),
            batch_len,
            kind,
        },
    ))
}

/// Gradient of a scalar objective with respect to the flat parameter vector,
/// given `d_y`, its gradient with respect to the outputs `(batch, n_tasks)`.
pub fn backward(params: &ModelParams, cache: &ForwardCache, d_y: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let layout = params.layout();
    let values = params.values();
    let act = params.config().hidden_activation;
    if cache.param_len != params.len() {
        return Err(Error::State(format!(
            "forward cache was built for {} parameters, model has {}",
            cache.param_len,
            params.len()
        )));
    }
    let mut grad = vec![0.0; layout.len()];
    let mut pieces = layout.carve(&mut grad);

    match (&cache.kind, layout.structure()) {
        (
            CacheKind::Attentive {
                model_inputs,
                primary: primary_caches,
                stacked,
                secondary: secondary_caches,
                fused,
                heads: head_caches,
                models,
                subs,
            },
            Structure::Attentive {
                primary,
                secondary,
                heads,
            },
        ) => {
            check_dy(d_y, cache.batch_len, secondary.len())?;
            let mut d_stacked = Array2::zeros(stacked.dim());
            for k in 0..secondary.len() {
                let h = heads[k];
                let hc = &head_caches[k];
                let d_out = d_y.slice(s![.., k..k + 1]);
                let d_hidden = {
                    let (w2, rest) = pieces[h + 2..h + 4].split_at_mut(1);
                    dense_backward(
                        hc.hidden.out.view(),
                        layout.matrix(values, h + 2),
                        &hc.output,
                        HiddenActivation::Tanh,
                        d_out,
                        matrix_mut(layout.slot(h + 2), w2[0]),
                        ArrayViewMut1::from(&mut *rest[0]),
                        true,
                    )
                    .unwrap()
                };
                let d_fused = {
                    let (w1, rest) = pieces[h..h + 2].split_at_mut(1);
                    dense_backward(
                        fused[k].view(),
                        layout.matrix(values, h),
                        &hc.hidden,
                        act,
                        d_hidden.view(),
                        matrix_mut(layout.slot(h), w1[0]),
                        ArrayViewMut1::from(&mut *rest[0]),
                        true,
                    )
                    .unwrap()
                };
                let mut g = triple_grads(layout, &mut pieces, secondary[k]);
                let d = attend_backward_impl(
                    stacked.view(),
                    *models,
                    layout.triple(values, secondary[k]),
                    &secondary_caches[k],
                    d_fused.view(),
                    &mut g,
                    true,
                )?
                .unwrap();
                d_stacked += &d;
            }
            for i in 0..*models {
                let idx = primary[if primary.len() == 1 { 0 } else { i }];
                let mut g = triple_grads(layout, &mut pieces, idx);
                attend_backward_impl(
                    model_inputs[i].view(),
                    *subs,
                    layout.triple(values, idx),
                    &primary_caches[i],
                    d_stacked.slice(s![i..;*models, ..]),
                    &mut g,
                    false,
                )?;
            }
        }
        (
            CacheKind::Dense {
                input,
                shared: shared_caches,
                tasks: task_caches,
            },
            Structure::Dense { shared, tasks },
        ) => {
            check_dy(d_y, cache.batch_len, tasks.len())?;
            let trunk = shared_caches.last().map_or(input.view(), |c| c.out.view());
            let mut d_trunk = Array2::<f64>::zeros(trunk.dim());
            for (k, layers) in tasks.iter().enumerate() {
                let caches = &task_caches[k];
                let mut d_cur = d_y.slice(s![.., k..k + 1]).to_owned();
                for pos in (0..layers.len()).rev() {
                    let l = layers[pos];
                    let is_output = pos + 1 == layers.len();
                    let layer_input = if pos == 0 { trunk } else { caches[pos - 1].out.view() };
                    let (w, rest) = pieces[l..l + 2].split_at_mut(1);
                    d_cur = dense_backward(
                        layer_input,
                        layout.matrix(values, l),
                        &caches[pos],
                        if is_output { HiddenActivation::Tanh } else { act },
                        d_cur.view(),
                        matrix_mut(layout.slot(l), w[0]),
                        ArrayViewMut1::from(&mut *rest[0]),
                        true,
                    )
                    .unwrap();
                }
                d_trunk += &d_cur;
            }
            let mut d_cur = d_trunk;
            for pos in (0..shared.len()).rev() {
                let l = shared[pos];
                let layer_input = if pos == 0 { input.view() } else { shared_caches[pos - 1].out.view() };
                let (w, rest) = pieces[l..l + 2].split_at_mut(1);
                match dense_backward(
                    layer_input,
                    layout.matrix(values, l),
                    &shared_caches[pos],
                    act,
                    d_cur.view(),
                    matrix_mut(layout.slot(l), w[0]),
                    ArrayViewMut1::from(&mut *rest[0]),
                    pos > 0,
                ) {
                    Some(d) => d_cur = d,
                    None => break,
                }
            }
        }
        _ => {
            return Err(Error::State(
                "forward cache belongs to a different model structure".into(),
            ))
        }
    }
    drop(pieces);
    Ok(grad)
}

fn check_dy(d_y: ArrayView2<'_, f64>, batch: usize, tasks: usize) -> Result<()> {
    if d_y.dim() != (batch, tasks) {
        return Err(Error::State(format!(
            "output gradient has shape {:?}, cache expects ({batch}, {tasks})",
            d_y.dim()
        )));
    }
    Ok(())
}

/// Per-task mean squared error over the batch: `Σ_b (y - t)² / B`, summed in
/// row order.
pub fn per_task_mse(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    if pred.dim() != target.dim() {
        return Err(Error::Argument(format!(
            "prediction shape {:?} does not match target shape {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.nrows() as f64;
    Ok(pred
        .columns()
        .into_iter()
        .zip(target.columns())
        .map(|(p, t)| {
            let mut sum = 0.0;
            for (a, b) in p.iter().zip(t.iter()) {
                sum += (a - b) * (a - b);
            }
            sum / n
        })
        .collect())
}

/// Joint objective: the sum of the per-task mean squared errors.
pub fn joint_loss(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    let mut total = 0.0;
    for mse in per_task_mse(pred, target)? {
        total += mse;
    }
    Ok(total)
}

/// Single-sample loss `Σ_k (pred_k - target_k)²`.
pub fn loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let p = ArrayView2::from_shape((1, pred.len()), pred).unwrap();
    let t = ArrayView2::from_shape((1, target.len()), target).unwrap();
    joint_loss(p, t)
}

/// Joint loss of a batch and its gradient with respect to all parameters.
pub fn loss_and_gradient<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &Batch,
    targets: ArrayView2<'_, f64>,
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let (out, cache) = forward(params, batch, mode, rng)?;
    let value = joint_loss(out.y.view(), targets)?;
    let scale = 2.0 / batch.len() as f64;
    let d_y = (&out.y - &targets) * scale;
    let grad = backward(params, &cache, d_y.view())?;
    Ok((value, grad))
}

/// Eval-mode outputs for many records, evaluated `chunk` at a time.
pub fn predict_records(params: &ModelParams, records: &[&FeatureTensor], chunk: usize) -> Result<BatchOutput> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let (mut ys, mut primary, mut secondary) = (Vec::new(), Vec::new(), Vec::new());
    for part in records.chunks(chunk.max(1)) {
        let batch = Batch::from_features(part)?;
        let (out, _) = forward(params, &batch, Mode::Eval, &mut rng)?;
        ys.push(out.y);
        primary.extend(out.alpha_primary);
        secondary.extend(out.alpha_secondary);
    }
    if ys.is_empty() {
        return Ok(BatchOutput {
            y: Array2::zeros((0, params.config().n_tasks)),
            alpha_primary: None,
            alpha_secondary: None,
        });
    }
    let cat3 = |parts: &[Array3<f64>]| -> Option<Array3<f64>> {
        if parts.is_empty() {
            return None;
        }
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        Some(ndarray::concatenate(Axis(0), &views).expect("matching shapes"))
    };
    let views: Vec<_> = ys.iter().map(|a| a.view()).collect();
    Ok(BatchOutput {
        y: ndarray::concatenate(Axis(0), &views).expect("matching shapes"),
        alpha_primary: cat3(&primary),
        alpha_secondary: cat3(&secondary),
    })
}

/// Forward pass for one image.
pub fn predict<R: Rng + ?Sized>(
    params: &ModelParams,
    record: &FeatureTensor,
    mode: Mode,
    rng: &mut R,
) -> Result<Prediction> {
    let expected = params.config().variant.layout();
    if record.layout() != expected {
        return Err(Error::Argument(format!(
            "variant {} expects {expected} features, {:?} is {}",
            params.config().variant,
            record.image_id(),
            record.layout()
        )));
    }
    let batch = Batch::from_features(&[record])?;
    let (out, _) = forward(params, &batch, mode, rng)?;
    Ok(Prediction {
        values: out.y.row(0).to_vec(),
        attention: out.attention(0),
    })
}
