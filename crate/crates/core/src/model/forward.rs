//! Forward pass: shared region encoder, per-region classification softmax,
//! classification-guided top-k selection, masked detection softmax over regions
//! and the detection-weighted image posteriors.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::manifest::LesionClass;
use crate::error::{Error, Result};
use crate::model::params::{Mode, ModelParams};

/// Abnormality classes in the fixed order used by every per-class array.
pub const ABNORMAL: [LesionClass; 2] = [LesionClass::Benign, LesionClass::Malignant];

pub fn class_slot(class: LesionClass) -> usize {
    match class {
        LesionClass::Benign => 0,
        LesionClass::Malignant => 1,
    }
}

/// Column of `class` in the region softmax for `mode`.
pub fn class_column(mode: Mode, class: LesionClass) -> usize {
    class_slot(class) + usize::from(mode.has_normal_class())
}

pub enum Dropout<'a> {
    Off,
    Sample { rng: &'a mut ChaCha8Rng, rate: f64 },
    /// Precomputed multiplicative mask (`0` or `1 / (1 - rate)`), `m × hidden`.
    Fixed(&'a Array2<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Posteriors {
    pub malignant: f64,
    pub benign: f64,
}

impl Posteriors {
    pub fn get(&self, class: LesionClass) -> f64 {
        match class {
            LesionClass::Benign => self.benign,
            LesionClass::Malignant => self.malignant,
        }
    }

    pub fn normal(&self) -> f64 {
        normal_probability(self.malignant, self.benign)
    }
}

/// Binary evaluation tasks built by grouping neighbouring classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Malignant against benign or normal; scored by `p_M`.
    #[serde(rename = "m-vs-bn")]
    MVsBn,
    /// Any finding against normal; scored by `max(p_M, p_B)`.
    #[serde(rename = "mb-vs-n")]
    MbVsN,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::MVsBn, Task::MbVsN];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::MVsBn => "m-vs-bn",
            Task::MbVsN => "mb-vs-n",
        }
    }

    pub fn is_positive(self, label: crate::data::WeakLabel) -> bool {
        match self {
            Task::MVsBn => label.malignant,
            Task::MbVsN => label.malignant || label.benign,
        }
    }

    /// Lesion class localized on this task's true positives.
    pub fn localized_class(self) -> LesionClass {
        match self {
            Task::MVsBn => LesionClass::Malignant,
            Task::MbVsN => LesionClass::Benign,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task `{s}`")))
    }
}

pub fn normal_probability(p_malignant: f64, p_benign: f64) -> f64 {
    (1.0 - p_malignant) * (1.0 - p_benign)
}

pub fn image_scores_for_task(posteriors: &Posteriors, task: Task) -> f64 {
    match task {
        Task::MVsBn => posteriors.malignant,
        Task::MbVsN => posteriors.malignant.max(posteriors.benign),
    }
}

/// Per-class part of a forward trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTrace {
    pub selection: Vec<bool>,
    /// Detection logits `u_c · h_i` (zeros in max-region mode).
    pub det_logits: Array1<f64>,
    pub p_det: Array1<f64>,
    /// Region carrying the image score in max-region mode.
    pub argmax: usize,
    pub posterior: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub mode: Mode,
    /// `W3 x_i + b3`, `m × hidden`.
    pub pre_activation: Array2<f64>,
    /// Encoder output after ReLU and dropout.
    pub hidden: Array2<f64>,
    pub dropout: Option<Array2<f64>>,
    /// Region class probabilities, columns `(N, B, M)` or `(B, M)`.
    pub p_cls: Array2<f64>,
    /// Indexed by [`class_slot`].
    pub classes: [ClassTrace; 2],
}

impl ForwardTrace {
    pub fn n_regions(&self) -> usize {
        self.p_cls.nrows()
    }

    pub fn posteriors(&self) -> Posteriors {
        Posteriors {
            benign: self.classes[0].posterior,
            malignant: self.classes[1].posterior,
        }
    }

    pub fn class_probs(&self, class: LesionClass) -> ArrayView1<'_, f64> {
        self.p_cls.column(class_column(self.mode, class))
    }
}

fn dropout_mask(rng: &mut ChaCha8Rng, rate: f64, shape: (usize, usize)) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn(shape, || if rng.gen::<f64>() < rate { 0.0 } else { keep })
}

/// Encodes all regions: returns `(pre_activation, hidden, dropout mask)`.
pub fn encode_regions(
    params: &ModelParams,
    features: ArrayView2<f64>,
    dropout: Dropout<'_>,
) -> Result<(Array2<f64>, Array2<f64>, Option<Array2<f64>>)> {
    if features.ncols() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            actual: features.ncols(),
        });
    }
    let w = &params.weights;
    let mut pre = features.dot(&w.w3.t());
    pre += &w.b3;
    let mut hidden = pre.mapv(|v| v.max(0.0));
    let shape = (features.nrows(), params.hidden_dim());
    let mask = match dropout {
        Dropout::Off => None,
        Dropout::Sample { rng, rate } if rate > 0.0 => Some(dropout_mask(rng, rate, shape)),
        Dropout::Sample { .. } => None,
        Dropout::Fixed(mask) => {
            if mask.dim() != shape {
                return Err(Error::Data(format!(
                    "dropout mask shape {:?} does not match {:?}",
                    mask.dim(),
                    shape
                )));
            }
            Some(mask.clone())
        }
    };
    if let Some(mask) = &mask {
        hidden *= mask;
    }
    Ok((pre, hidden, mask))
}

/// Single-region encoder `relu(W3 x + b3)` with optional inverted dropout.
pub fn encode(params: &ModelParams, x: ArrayView1<f64>, dropout: Dropout<'_>) -> Result<Array1<f64>> {
    let row = x.insert_axis(Axis(0));
    let (_, hidden, _) = encode_regions(params, row, dropout)?;
    Ok(hidden.row(0).to_owned())
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Region softmax over the classification heads active in the current mode.
pub fn classify_regions(params: &ModelParams, hidden: ArrayView2<f64>) -> Array2<f64> {
    let w = &params.weights;
    let heads: Vec<ArrayView1<f64>> = if params.mode().has_normal_class() {
        vec![w.w_n.view(), w.w_b.view(), w.w_m.view()]
    } else {
        vec![w.w_b.view(), w.w_m.view()]
    };
    let mut out = Array2::zeros((hidden.nrows(), heads.len()));
    for (j, head) in heads.iter().enumerate() {
        out.column_mut(j).assign(&hidden.dot(head));
    }
    for mut row in out.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("row-major"));
    }
    out
}

/// k-hot mask over the highest scores; ties go to the lower index; `k >= m` selects all.
pub fn select_top_k(scores: ArrayView1<f64>, k: usize) -> Vec<bool> {
    let m = scores.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![false; m];
    for &i in order.iter().take(k.min(m)) {
        mask[i] = true;
    }
    mask
}

pub fn select_regions(p_cls: ArrayView2<f64>, mode: Mode, class: LesionClass, k: usize) -> Vec<bool> {
    select_top_k(p_cls.column(class_column(mode, class)), k)
}

/// Softmax of `logits` restricted to `mask`; zero outside it.
pub fn masked_softmax(logits: ArrayView1<f64>, mask: &[bool]) -> Result<Array1<f64>> {
    if !mask.iter().any(|&b| b) {
        return Err(Error::InvalidArgument("selection mask selects no region".into()));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &on)| on)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = Array1::zeros(logits.len());
    let mut sum = 0.0;
    for (i, (&v, &on)) in logits.iter().zip(mask).enumerate() {
        if on {
            out[i] = (v - max).exp();
            sum += out[i];
        }
    }
    out /= sum;
    Ok(out)
}

pub fn detection_logits(params: &ModelParams, hidden: ArrayView2<f64>, class: LesionClass) -> Array1<f64> {
    let u = match class {
        LesionClass::Benign => &params.weights.u_b,
        LesionClass::Malignant => &params.weights.u_m,
    };
    hidden.dot(u)
}

pub fn detect_regions(
    params: &ModelParams,
    hidden: ArrayView2<f64>,
    mask: &[bool],
    class: LesionClass,
) -> Result<Array1<f64>> {
    if mask.len() != hidden.nrows() {
        return Err(Error::DimensionMismatch {
            expected: hidden.nrows(),
            actual: mask.len(),
        });
    }
    masked_softmax(detection_logits(params, hidden, class).view(), mask)
}

/// Detection-weighted average of region class probabilities.
pub fn image_posterior(class_probs: ArrayView1<f64>, p_det: ArrayView1<f64>) -> f64 {
    class_probs.dot(&p_det)
}

/// Max-pooling image score and the region attaining it (lowest index on ties).
pub fn baseline_max_region(class_probs: ArrayView1<f64>) -> (f64, usize) {
    class_probs
        .iter()
        .enumerate()
        .fold((f64::NEG_INFINITY, 0), |(best, arg), (i, &v)| if v > best { (v, i) } else { (best, arg) })
}

/// Localization scores `d^c(x_i) = p_cls(c|x_i) · p_det^c(i|x)` with the
/// detection softmax over all regions. Columns are `(B, M)`. Without a detection
/// branch (max-region) the detection factor is uniform.
pub fn localization_scores(params: &ModelParams, hidden: ArrayView2<f64>, p_cls: ArrayView2<f64>) -> Array2<f64> {
    let m = hidden.nrows();
    let all = vec![true; m];
    let mut out = Array2::zeros((m, 2));
    for class in ABNORMAL {
        let det = if params.mode().uses_detection() {
            detect_regions(params, hidden, &all, class).expect("nonempty region set")
        } else {
            Array1::from_elem(m, 1.0 / m as f64)
        };
        let probs = p_cls.column(class_column(params.mode(), class));
        out.column_mut(class_slot(class)).assign(&(&probs * &det));
    }
    out
}

/// Full forward pass for one image.
pub fn forward(params: &ModelParams, features: ArrayView2<f64>, dropout: Dropout<'_>) -> Result<ForwardTrace> {
    forward_with_selection(params, features, dropout, None)
}

/// Forward pass with optionally frozen selection masks (indexed by [`class_slot`]).
pub fn forward_with_selection(
    params: &ModelParams,
    features: ArrayView2<f64>,
    dropout: Dropout<'_>,
    selection: Option<&[Vec<bool>; 2]>,
) -> Result<ForwardTrace> {
    let m = features.nrows();
    if m == 0 {
        return Err(Error::Data("image has no regions".into()));
    }
    let mode = params.mode();
    let (pre_activation, hidden, dropout) = encode_regions(params, features, dropout)?;
    let p_cls = classify_regions(params, hidden.view());

    let class_trace = |class: LesionClass| -> Result<ClassTrace> {
        let probs = p_cls.column(class_column(mode, class));
        if !mode.uses_detection() {
            let (score, argmax) = baseline_max_region(probs);
            return Ok(ClassTrace {
                selection: (0..m).map(|i| i == argmax).collect(),
                det_logits: Array1::zeros(m),
                p_det: Array1::zeros(m),
                argmax,
                posterior: score,
            });
        }
        let selection = match selection {
            Some(fixed) => fixed[class_slot(class)].clone(),
            None if mode.uses_selection() => select_top_k(probs, params.hyper.k),
            None => vec![true; m],
        };
        let det_logits = detection_logits(params, hidden.view(), class);
        let p_det = masked_softmax(det_logits.view(), &selection)?;
        let posterior = image_posterior(probs, p_det.view());
        Ok(ClassTrace {
            selection,
            det_logits,
            p_det,
            argmax: 0,
            posterior,
        })
    };
    let classes = [class_trace(ABNORMAL[0])?, class_trace(ABNORMAL[1])?];
    Ok(ForwardTrace {
        mode,
        pre_activation,
        hidden,
        dropout,
        p_cls,
        classes,
    })
}

/// Inference-mode posteriors and localization scores for one image.
pub fn predict(params: &ModelParams, features: ArrayView2<f64>) -> Result<(Posteriors, Array2<f64>)> {
    let trace = forward(params, features, Dropout::Off)?;
    let loc = localization_scores(params, trace.hidden.view(), trace.p_cls.view());
    Ok((trace.posteriors(), loc))
}

/// Columns `(N, B, M)` of the region softmax regardless of mode (N is zero
/// when the normal class is absent).
pub fn region_class_table(trace: &ForwardTrace) -> Array2<f64> {
    let m = trace.n_regions();
    let mut out = Array2::zeros((m, 3));
    if trace.mode.has_normal_class() {
        out.assign(&trace.p_cls);
    } else {
        out.slice_mut(s![.., 1..]).assign(&trace.p_cls);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{init_params, Hyper};
    use ndarray::array;

    fn params(mode: Mode) -> ModelParams {
        init_params(3, 4, 5, Hyper { mode, ..Hyper::default() }).unwrap()
    }

    #[test]
    fn softmax_of_123() {
        let mut row = [1.0, 2.0, 3.0];
        softmax_in_place(&mut row);
        let expected = [0.09003, 0.24473, 0.66524];
        for (a, b) in row.iter().zip(expected) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn equal_heads_give_uniform_rows() {
        let mut p = params(Mode::Full);
        p.weights.w_b = p.weights.w_n.clone();
        p.weights.w_m = p.weights.w_n.clone();
        let h = Array2::from_shape_fn((4, 5), |(i, j)| (i * 5 + j) as f64 * 0.1);
        for row in classify_regions(&p, h.view()).rows() {
            for v in row {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let zero = Array2::zeros((2, 5));
        for v in classify_regions(&params(Mode::Full), zero.view()) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn top_k_cases() {
        assert_eq!(select_top_k(array![0.9, 0.1, 0.5].view(), 2), vec![true, false, true]);
        assert_eq!(select_top_k(array![0.2, 0.2, 0.2].view(), 2), vec![true, true, false]);
        assert_eq!(select_top_k(array![0.2, 0.7, 0.1].view(), 5), vec![true, true, true]);
    }

    #[test]
    fn masked_softmax_cases() {
        let p = masked_softmax(array![0.3, 0.3, 9.0].view(), &[true, true, false]).unwrap();
        assert_eq!(p, array![0.5, 0.5, 0.0]);
        let p = masked_softmax(array![0.3, -2.0, 9.0].view(), &[false, true, false]).unwrap();
        assert_eq!(p, array![0.0, 1.0, 0.0]);
        let ln2 = 2f64.ln();
        let p = masked_softmax(array![0.0, ln2, 2.0 * ln2].view(), &[true; 3]).unwrap();
        for (a, b) in p.iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(masked_softmax(array![1.0].view(), &[false]).is_err());
    }

    #[test]
    fn posterior_cases() {
        assert_eq!(image_posterior(array![0.4].view(), array![1.0].view()), 0.4);
        let q = image_posterior(array![0.3, 0.3, 0.3].view(), array![0.1, 0.6, 0.3].view());
        assert!((q - 0.3).abs() < 1e-15);
        let q = image_posterior(array![0.2, 0.6, 0.9].view(), array![0.25, 0.75, 0.0].view());
        assert!((q - 0.5).abs() < 1e-15);
    }

    #[test]
    fn normal_probability_cases() {
        assert_eq!(normal_probability(0.0, 0.0), 1.0);
        assert_eq!(normal_probability(1.0, 0.4), 0.0);
        assert!((normal_probability(0.3, 0.5) - 0.35).abs() < 1e-15);
    }

    #[test]
    fn task_scores() {
        let p = Posteriors { malignant: 0.7, benign: 0.2 };
        assert_eq!(image_scores_for_task(&p, Task::MVsBn), 0.7);
        let p = Posteriors { malignant: 0.1, benign: 0.6 };
        assert_eq!(image_scores_for_task(&p, Task::MbVsN), 0.6);
        let p = Posteriors::default();
        for t in Task::ALL {
            assert_eq!(image_scores_for_task(&p, t), 0.0);
        }
    }

    #[test]
    fn max_region_cases() {
        assert_eq!(baseline_max_region(array![0.2, 0.9, 0.4].view()), (0.9, 1));
        assert_eq!(baseline_max_region(array![0.3].view()), (0.3, 0));
    }

    #[test]
    fn zero_input_encodes_to_zero() {
        let p = params(Mode::Full);
        let h = encode(&p, Array1::zeros(4).view(), Dropout::Off).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        assert!(encode(&p, Array1::zeros(3).view(), Dropout::Off).is_err());
    }

    #[test]
    fn zero_rate_dropout_is_identity() {
        let p = params(Mode::Full);
        let x = array![0.3, -0.2, 0.9, 0.1];
        let mut rng = crate::seed::rng_for(1, &[]);
        let a = encode(&p, x.view(), Dropout::Sample { rng: &mut rng, rate: 0.0 }).unwrap();
        let b = encode(&p, x.view(), Dropout::Off).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_region_localization() {
        let p = params(Mode::Full);
        let x = array![[0.3, -0.2, 0.9, 0.1]];
        let t = forward(&p, x.view(), Dropout::Off).unwrap();
        let loc = localization_scores(&p, t.hidden.view(), t.p_cls.view());
        assert_eq!(loc[[0, 1]], t.p_cls[[0, 2]]);
        assert_eq!(loc[[0, 0]], t.p_cls[[0, 1]]);
    }

    #[test]
    fn uniform_localization() {
        let mut p = params(Mode::Full);
        for head in [&mut p.weights.w_n, &mut p.weights.w_b, &mut p.weights.w_m, &mut p.weights.u_b, &mut p.weights.u_m] {
            head.fill(0.0);
        }
        let x = Array2::from_shape_fn((6, 4), |(i, j)| (i as f64 - j as f64) * 0.2);
        let t = forward(&p, x.view(), Dropout::Off).unwrap();
        let loc = localization_scores(&p, t.hidden.view(), t.p_cls.view());
        for v in loc {
            assert!((v - 1.0 / 18.0).abs() < 1e-15);
        }
    }

    #[test]
    fn no_normal_class_rows_are_two_way() {
        let p = params(Mode::NoNormalClass);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 3 + j) as f64).sin());
        let t = forward(&p, x.view(), Dropout::Off).unwrap();
        assert_eq!(t.p_cls.ncols(), 2);
        for row in t.p_cls.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(t.classes.iter().all(|c| c.selection.iter().all(|&b| b)));
    }

    #[test]
    fn relaxing_selection_widens_support() {
        let p = init_params(3, 4, 5, Hyper { k: 2, ..Hyper::default() }).unwrap();
        let x = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 7 + j) as f64).cos());
        let full = forward(&p, x.view(), Dropout::Off).unwrap();
        assert!(full.classes.iter().all(|c| c.p_det.iter().filter(|&&v| v > 0.0).count() == 2));
        let relaxed = forward(&p.clone().with_mode(Mode::NoSelection), x.view(), Dropout::Off).unwrap();
        assert!(relaxed.classes.iter().all(|c| c.p_det.iter().all(|&v| v > 0.0)));
    }

    #[test]
    fn empty_image_is_an_error() {
        let p = params(Mode::Full);
        assert!(forward(&p, Array2::zeros((0, 4)).view(), Dropout::Off).is_err());
    }
}
