use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_for, TAG_INIT};

/// Model variant. `Full` is the classification-guided dual-branch model; the
/// others are the ablations it is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Full,
    /// Detection softmax over every region (no top-k mask).
    NoSelection,
    /// Two-stream baseline: 2-way B/M region softmax and no region selection.
    NoNormalClass,
    /// Image score is the best region's class probability; no detection branch.
    MaxRegion,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::NoSelection, Mode::NoNormalClass, Mode::MaxRegion];

    pub fn has_normal_class(self) -> bool {
        self != Mode::NoNormalClass
    }

    pub fn uses_selection(self) -> bool {
        self == Mode::Full
    }

    pub fn uses_detection(self) -> bool {
        self != Mode::MaxRegion
    }

    pub fn n_classes(self) -> usize {
        if self.has_normal_class() {
            3
        } else {
            2
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoSelection => "no-selection",
            Mode::NoNormalClass => "no-normal-class",
            Mode::MaxRegion => "max-region",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    /// Regions kept per abnormality class by the selection mask.
    pub k: usize,
    pub l2: f64,
    pub dropout_rate: f64,
    pub mode: Mode,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            k: 10,
            l2: 1e-4,
            dropout_rate: 0.25,
            mode: Mode::Full,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidArgument(format!("l2 {} must be >= 0", self.l2)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

pub const TENSOR_NAMES: [&str; 7] = ["W3", "b3", "w_N", "w_B", "w_M", "u_B", "u_M"];

/// Weight tensors of the model. Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    /// Encoder weights, `hidden × d`.
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    pub w_n: Array1<f64>,
    pub w_b: Array1<f64>,
    pub w_m: Array1<f64>,
    pub u_b: Array1<f64>,
    pub u_m: Array1<f64>,
}

impl ParamSet {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        ParamSet {
            w3: Array2::zeros((hidden, d)),
            b3: Array1::zeros(hidden),
            w_n: Array1::zeros(hidden),
            w_b: Array1::zeros(hidden),
            w_m: Array1::zeros(hidden),
            u_b: Array1::zeros(hidden),
            u_m: Array1::zeros(hidden),
        }
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        Self::zeros(other.input_dim(), other.hidden_dim())
    }

    pub fn input_dim(&self) -> usize {
        self.w3.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w3.nrows()
    }

    /// Flat views in [`TENSOR_NAMES`] order.
    pub fn slices(&self) -> [&[f64]; 7] {
        [
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
            self.w_n.as_slice().expect("standard layout"),
            self.w_b.as_slice().expect("standard layout"),
            self.w_m.as_slice().expect("standard layout"),
            self.u_b.as_slice().expect("standard layout"),
            self.u_m.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
            self.w_n.as_slice_mut().expect("standard layout"),
            self.w_b.as_slice_mut().expect("standard layout"),
            self.w_m.as_slice_mut().expect("standard layout"),
            self.u_b.as_slice_mut().expect("standard layout"),
            self.u_m.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn shapes(&self) -> [Vec<usize>; 7] {
        let h = self.hidden_dim();
        [vec![h, self.input_dim()], vec![h], vec![h], vec![h], vec![h], vec![h], vec![h]]
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            Zip::from(a).and(b).for_each(|x, &y| *x += scale * y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Rounds every entry to the nearest `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for s in self.slices_mut() {
            for v in s.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub weights: ParamSet,
    pub hyper: Hyper,
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.weights.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.weights.hidden_dim()
    }

    pub fn mode(&self) -> Mode {
        self.hyper.mode
    }

    /// Switches variant in place; weights are untouched.
    pub fn set_mode(&mut self, mode: Mode) {
        self.hyper.mode = mode;
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.set_mode(mode);
        self
    }

    /// Whether tensor `name` takes part in the current mode.
    pub fn is_active(&self, name: &str) -> bool {
        match name {
            "w_N" => self.mode().has_normal_class(),
            "u_B" | "u_M" => self.mode().uses_detection(),
            _ => true,
        }
    }
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> f64 {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.gen_range(-a..a)
}

/// Glorot-uniform weights, zero encoder bias. Each head is a `hidden → 1` map.
pub fn init_params(seed: u64, d: usize, hidden: usize, hyper: Hyper) -> Result<ModelParams> {
    if d == 0 || hidden == 0 {
        return Err(Error::InvalidArgument("dimensions must be at least 1".into()));
    }
    hyper.validate()?;
    let mut rng = rng_for(seed, &[TAG_INIT]);
    let w3 = Array2::from_shape_simple_fn((hidden, d), || glorot(&mut rng, d, hidden));
    let mut head = || Array1::from_shape_simple_fn(hidden, || glorot(&mut rng, hidden, 1));
    let (w_n, w_b, w_m, u_b, u_m) = (head(), head(), head(), head(), head());
    Ok(ModelParams {
        weights: ParamSet {
            w3,
            b3: Array1::zeros(hidden),
            w_n,
            w_b,
            w_m,
            u_b,
            u_m,
        },
        hyper,
    })
}
