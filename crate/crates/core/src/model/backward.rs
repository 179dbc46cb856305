//! Image-level cross-entropy over the two abnormality posteriors and its exact
//! gradient. Selection masks, max-region argmax and dropout masks are treated as
//! constants of the forward pass.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::data::manifest::{LesionClass, WeakLabel};
use crate::model::forward::{class_column, class_slot, ForwardTrace, Posteriors, ABNORMAL};
use crate::model::params::{ModelParams, ParamSet};

/// Probability clamp inside the logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    /// Mean cross-entropy over the batch.
    pub data: f64,
    /// `l2 / 2 · Σ‖w‖²` over active non-bias weights.
    pub l2_term: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.data + self.l2_term
    }
}

fn class_target(label: WeakLabel, class: LesionClass) -> bool {
    label.has(class)
}

/// `-log p(y_c | x)` summed over both abnormality classes.
pub fn image_loss(posteriors: &Posteriors, label: WeakLabel) -> f64 {
    ABNORMAL
        .iter()
        .map(|&c| {
            let p = posteriors.get(c).clamp(PROB_EPS, 1.0 - PROB_EPS);
            if class_target(label, c) {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

fn loss_slope(posterior: f64, positive: bool) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&posterior) {
        return 0.0;
    }
    if positive {
        -1.0 / posterior
    } else {
        1.0 / (1.0 - posterior)
    }
}

/// Active non-bias tensors in the current mode.
fn penalized<'a>(params: &'a ModelParams, set: &'a ParamSet) -> Vec<&'a [f64]> {
    let names = crate::model::params::TENSOR_NAMES;
    set.slices()
        .into_iter()
        .zip(names)
        .filter(|(_, name)| *name != "b3" && params.is_active(name))
        .map(|(s, _)| s)
        .collect()
}

pub fn l2_penalty(params: &ModelParams) -> f64 {
    let sq: f64 = penalized(params, &params.weights)
        .iter()
        .map(|s| s.iter().map(|v| v * v).sum::<f64>())
        .sum();
    0.5 * params.hyper.l2 * sq
}

fn add_l2_gradient(params: &ModelParams, grads: &mut ParamSet) {
    let l2 = params.hyper.l2;
    if l2 == 0.0 {
        return;
    }
    let names = crate::model::params::TENSOR_NAMES;
    for ((g, w), name) in grads.slices_mut().into_iter().zip(params.weights.slices()).zip(names) {
        if name != "b3" && params.is_active(name) {
            for (gv, wv) in g.iter_mut().zip(w) {
                *gv += l2 * wv;
            }
        }
    }
}

pub fn batch_loss(params: &ModelParams, traces: &[ForwardTrace], labels: &[WeakLabel]) -> LossParts {
    let n = traces.len().max(1) as f64;
    let data = traces
        .iter()
        .zip(labels)
        .map(|(t, &y)| image_loss(&t.posteriors(), y))
        .sum::<f64>()
        / n;
    LossParts {
        data,
        l2_term: l2_penalty(params),
    }
}

/// Gradient of `scale · image_loss` for one image (no regularizer).
pub fn backward_image(
    params: &ModelParams,
    features: ArrayView2<f64>,
    trace: &ForwardTrace,
    label: WeakLabel,
    scale: f64,
) -> ParamSet {
    let w = &params.weights;
    let mode = trace.mode;
    let m = trace.n_regions();
    let mut grads = ParamSet::zeros_like(w);
    let mut g_pcls = Array2::<f64>::zeros(trace.p_cls.dim());
    let mut g_hidden = Array2::<f64>::zeros(trace.hidden.dim());

    for class in ABNORMAL {
        let ct = &trace.classes[class_slot(class)];
        let slope = scale * loss_slope(ct.posterior, class_target(label, class));
        if slope == 0.0 {
            continue;
        }
        let col = class_column(mode, class);
        if !mode.uses_detection() {
            g_pcls[[ct.argmax, col]] += slope;
            continue;
        }
        let probs = trace.p_cls.column(col);
        let mut g_det = Array1::<f64>::zeros(m);
        for i in 0..m {
            if ct.selection[i] {
                g_pcls[[i, col]] += slope * ct.p_det[i];
                g_det[i] = slope * ct.p_det[i] * (probs[i] - ct.posterior);
            }
        }
        let (u, g_u) = match class {
            LesionClass::Benign => (&w.u_b, &mut grads.u_b),
            LesionClass::Malignant => (&w.u_m, &mut grads.u_m),
        };
        *g_u += &trace.hidden.t().dot(&g_det);
        g_hidden += &g_det.view().insert_axis(Axis(1)).dot(&u.view().insert_axis(Axis(0)));
    }

    // softmax backward, row by row
    let mut g_logits = g_pcls;
    for (mut g_row, p_row) in g_logits.rows_mut().into_iter().zip(trace.p_cls.rows()) {
        let dot: f64 = g_row.iter().zip(p_row).map(|(g, p)| g * p).sum();
        for (g, &p) in g_row.iter_mut().zip(p_row) {
            *g = p * (*g - dot);
        }
    }
    let heads: Vec<(&Array1<f64>, &mut Array1<f64>)> = if mode.has_normal_class() {
        vec![(&w.w_n, &mut grads.w_n), (&w.w_b, &mut grads.w_b), (&w.w_m, &mut grads.w_m)]
    } else {
        vec![(&w.w_b, &mut grads.w_b), (&w.w_m, &mut grads.w_m)]
    };
    for (j, (head, g_head)) in heads.into_iter().enumerate() {
        let g_col = g_logits.column(j);
        *g_head += &trace.hidden.t().dot(&g_col);
        g_hidden += &g_col.insert_axis(Axis(1)).dot(&head.view().insert_axis(Axis(0)));
    }

    if let Some(mask) = &trace.dropout {
        g_hidden *= mask;
    }
    let g_pre = ndarray::Zip::from(&g_hidden)
        .and(&trace.pre_activation)
        .map_collect(|&g, &z| if z > 0.0 { g } else { 0.0 });
    grads.w3 = g_pre.t().dot(&features);
    grads.b3 = g_pre.sum_axis(Axis(0));
    grads
}

/// Mean-loss gradient over a batch plus the l2 term. Per-image gradients may be
/// computed in parallel; they are summed in batch order.
pub fn backward(
    params: &ModelParams,
    features: &[ArrayView2<f64>],
    traces: &[ForwardTrace],
    labels: &[WeakLabel],
) -> ParamSet {
    let scale = 1.0 / traces.len().max(1) as f64;
    let per_image: Vec<ParamSet> = (0..traces.len())
        .into_par_iter()
        .map(|i| backward_image(params, features[i], &traces[i], labels[i], scale))
        .collect();
    let mut total = ParamSet::zeros_like(&params.weights);
    for g in &per_image {
        total.add_scaled(g, 1.0);
    }
    add_l2_gradient(params, &mut total);
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::{forward, Dropout};
    use crate::model::params::{init_params, Hyper, Mode};

    #[test]
    fn perfect_posteriors_give_zero_loss() {
        let p = Posteriors { malignant: 1.0, benign: 0.0 };
        let l = image_loss(&p, WeakLabel::new(true, false));
        assert!(l < 2.1e-7, "{l}");
    }

    #[test]
    fn half_posteriors_give_two_ln_two() {
        let p = Posteriors { malignant: 0.5, benign: 0.5 };
        for label in [WeakLabel::NORMAL, WeakLabel::new(true, true), WeakLabel::new(false, true)] {
            assert!((image_loss(&p, label) - 1.386294).abs() < 1e-6);
        }
    }

    #[test]
    fn regularizer_isolated() {
        let params = init_params(2, 3, 4, Hyper { l2: 0.5, ..Hyper::default() }).unwrap();
        let w = &params.weights;
        let sq: f64 = [&w.w_n, &w.w_b, &w.w_m, &w.u_b, &w.u_m]
            .iter()
            .map(|a| a.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            + w.w3.iter().map(|v| v * v).sum::<f64>();
        assert!((l2_penalty(&params) - 0.25 * sq).abs() < 1e-14);
    }

    #[test]
    fn unused_heads_get_zero_gradient() {
        for mode in [Mode::NoNormalClass, Mode::MaxRegion] {
            let params = init_params(4, 3, 5, Hyper { mode, l2: 0.1, ..Hyper::default() }).unwrap();
            let x = Array2::from_shape_fn((6, 3), |(i, j)| ((i + 2 * j) as f64).sin());
            let t = forward(&params, x.view(), Dropout::Off).unwrap();
            let g = backward(&params, &[x.view()], &[t], &[WeakLabel::new(true, false)]);
            if mode == Mode::NoNormalClass {
                assert!(g.w_n.iter().all(|&v| v == 0.0));
            } else {
                assert!(g.u_b.iter().chain(g.u_m.iter()).all(|&v| v == 0.0));
            }
            assert!(g.is_finite());
        }
    }

    #[test]
    fn classification_gauge_direction_is_flat() {
        // zero heads make every region probability 1/3; the summed head
        // gradient vanishes because logits are shift invariant
        let mut params = init_params(5, 3, 4, Hyper { l2: 0.0, ..Hyper::default() }).unwrap();
        params.weights.w_n.fill(0.0);
        params.weights.w_b.fill(0.0);
        params.weights.w_m.fill(0.0);
        let x = Array2::from_shape_fn((5, 3), |(i, j)| ((i * 3 + j) as f64).cos());
        let t = forward(&params, x.view(), Dropout::Off).unwrap();
        let g = backward(&params, &[x.view()], &[t], &[WeakLabel::new(false, true)]);
        let sum = &g.w_n + &g.w_b + &g.w_m;
        assert!(sum.iter().all(|v| v.abs() < 1e-15), "{sum}");
    }
}
