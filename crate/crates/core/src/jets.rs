//! Second-order directional Taylor jets.
//!
//! A jet carries `(u, Du[v], D²u[v,v])` for one direction `v`. Linear maps
//! act on each coefficient plane independently; an elementwise activation
//! follows the chain rule
//! `d1' = σ'(u) d1`, `d2' = σ''(u) d1² + σ'(u) d2`.

use std::ops::{Add, Mul, Neg, Sub};

use ndarray::{Array2, Zip};

use crate::error::{invalid, Result, SdzeError};

/// Elementwise nonlinearity of the hidden layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Sin,
    /// `c * tanh(u)`.
    TanhScaled(f64),
}

impl Activation {
    pub fn parse(tag: &str, tanh_scale: f64) -> Result<Self> {
        match tag {
            "sin" => Ok(Activation::Sin),
            "tanh" | "tanh_scaled" => Ok(Activation::TanhScaled(tanh_scale)),
            other => Err(SdzeError::Config(format!("unknown activation `{other}`"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Activation::Sin => "sin",
            Activation::TanhScaled(_) => "tanh_scaled",
        }
    }

    #[inline]
    pub fn value(&self, u: f64) -> f64 {
        match *self {
            Activation::Sin => u.sin(),
            Activation::TanhScaled(c) => c * u.tanh(),
        }
    }

    /// `(σ(u), σ'(u), σ''(u))`.
    #[inline]
    pub fn eval3(&self, u: f64) -> (f64, f64, f64) {
        match *self {
            Activation::Sin => {
                let (s, c) = u.sin_cos();
                (s, c, -s)
            }
            Activation::TanhScaled(c) => {
                let t = u.tanh();
                let sech2 = 1.0 - t * t;
                (c * t, c * sech2, -2.0 * c * t * sech2)
            }
        }
    }
}

/// Scalar jet.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jet2 {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Jet2 {
    pub const fn new(value: f64, d1: f64, d2: f64) -> Self {
        Self { value, d1, d2 }
    }

    pub const fn constant(value: f64) -> Self {
        Self::new(value, 0.0, 0.0)
    }

    /// The coordinate being differentiated along.
    pub const fn variable(value: f64) -> Self {
        Self::new(value, 1.0, 0.0)
    }

    /// Push through a scalar function given its value and first two derivatives.
    #[inline]
    pub fn chain(self, f: f64, df: f64, d2f: f64) -> Self {
        Self::new(f, df * self.d1, d2f * self.d1 * self.d1 + df * self.d2)
    }

    pub fn exp(self) -> Self {
        let e = self.value.exp();
        self.chain(e, e, e)
    }

    pub fn sin(self) -> Self {
        let (s, c) = self.value.sin_cos();
        self.chain(s, c, -s)
    }

    pub fn activate(self, act: Activation) -> Self {
        let (s, ds, d2s) = act.eval3(self.value);
        self.chain(s, ds, d2s)
    }

    pub fn scale(self, k: f64) -> Self {
        Self::new(k * self.value, k * self.d1, k * self.d2)
    }
}

impl Add for Jet2 {
    type Output = Jet2;
    fn add(self, o: Jet2) -> Jet2 {
        Jet2::new(self.value + o.value, self.d1 + o.d1, self.d2 + o.d2)
    }
}

impl Sub for Jet2 {
    type Output = Jet2;
    fn sub(self, o: Jet2) -> Jet2 {
        Jet2::new(self.value - o.value, self.d1 - o.d1, self.d2 - o.d2)
    }
}

impl Neg for Jet2 {
    type Output = Jet2;
    fn neg(self) -> Jet2 {
        self.scale(-1.0)
    }
}

impl Mul for Jet2 {
    type Output = Jet2;
    fn mul(self, o: Jet2) -> Jet2 {
        Jet2::new(
            self.value * o.value,
            self.d1 * o.value + self.value * o.d1,
            self.d2 * o.value + 2.0 * self.d1 * o.d1 + self.value * o.d2,
        )
    }
}

/// A batch of jets stored as three aligned `rows × width` planes.
#[derive(Debug, Clone, PartialEq)]
pub struct JetBatch {
    pub value: Array2<f64>,
    pub d1: Array2<f64>,
    pub d2: Array2<f64>,
}

impl JetBatch {
    pub fn width(&self) -> usize {
        self.value.ncols()
    }

    pub fn rows(&self) -> usize {
        self.value.nrows()
    }

    pub fn get(&self, row: usize, col: usize) -> Jet2 {
        Jet2::new(self.value[[row, col]], self.d1[[row, col]], self.d2[[row, col]])
    }
}

pub fn jet_linear(w: &Array2<f64>, jets: &JetBatch) -> Result<JetBatch> {
    if jets.width() != w.nrows() {
        return invalid(format!(
            "jet width {} does not match weight rows {}",
            jets.width(),
            w.nrows()
        ));
    }
    Ok(JetBatch {
        value: jets.value.dot(w),
        d1: jets.d1.dot(w),
        d2: jets.d2.dot(w),
    })
}

pub fn jet_activation(act: Activation, jets: &JetBatch) -> JetBatch {
    let mut out = jets.clone();
    Zip::from(&mut out.value)
        .and(&mut out.d1)
        .and(&mut out.d2)
        .for_each(|v, a, b| {
            let j = Jet2::new(*v, *a, *b).activate(act);
            *v = j.value;
            *a = j.d1;
            *b = j.d2;
        });
    out
}

/// Seed the jet of the identity map at `x` along coordinate `i`.
pub fn coordinate_jet_seed(x: &[f64], i: usize) -> Result<JetBatch> {
    let d = x.len();
    if i >= d {
        return invalid(format!("coordinate {i} out of range for dimension {d}"));
    }
    let value = Array2::from_shape_vec((1, d), x.to_vec()).expect("1 x d");
    let mut d1 = Array2::zeros((1, d));
    d1[[0, i]] = 1.0;
    Ok(JetBatch {
        value,
        d1,
        d2: Array2::zeros((1, d)),
    })
}
