//! VT-Micro, ARRB and AA-Micro energy models.
//!
//! Every model is a coefficient vector paired with a layout of term
//! descriptors. A term is a monomial `v^n1 * a^n2`, or `v^n1 * max(0, a)^n2`
//! for the positive-part variants; `x^0` is 1 for any base.
//!
//! * VT-Micro: `exp(sum f_{n1 n2} v^n1 a^n2)` over `n1, n2 in 0..=3`.
//! * ARRB: `f1 + f2 v + f3 v^2 + f4 v^3 + f5 v a + f6 v max(0, a)^2`.
//! * AA-Micro: `L(v, a) + exp(G(v, a))` where `L` and `G` share one 15-term
//!   basis: the nine `v^n1 a^n2` terms with `n1, n2 in 0..=2` and the six
//!   positive-part terms with `n2 in 1..=2`. Positive-part terms with
//!   `n2 = 0` reduce to the base terms once `v > 0` and are left out.
//!
//! Exponent arguments are clamped to `±exponent_clamp` before `exp`, which
//! keeps predictions finite for any finite coefficients.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EXPONENT_CLAMP: f64 = 30.0;

pub const VTMICRO_TERMS: usize = 16;
pub const ARRB_TERMS: usize = 6;
/// Terms in one half (linear or exponent) of the AA-Micro basis.
pub const AAMICRO_BASIS: usize = 15;
pub const AAMICRO_TERMS: usize = 2 * AAMICRO_BASIS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    VtMicro,
    Arrb,
    AaMicro,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::VtMicro, ModelKind::Arrb, ModelKind::AaMicro];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::VtMicro => "vt_micro",
            ModelKind::Arrb => "arrb",
            ModelKind::AaMicro => "aa_micro",
        }
    }

    /// Human-facing label.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::VtMicro => "VT-Micro",
            ModelKind::Arrb => "ARRB",
            ModelKind::AaMicro => "AA-Micro",
        }
    }

    pub fn layout(self) -> Vec<Term> {
        match self {
            ModelKind::VtMicro => vtmicro_layout(),
            ModelKind::Arrb => arrb_layout(),
            ModelKind::AaMicro => aamicro_layout(),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s
            .trim()
            .to_ascii_lowercase()
            .replace(['-', '_'], "")
            .as_str()
        {
            "vtmicro" | "vtm" => Ok(ModelKind::VtMicro),
            "arrb" => Ok(ModelKind::Arrb),
            "aamicro" | "aam" => Ok(ModelKind::AaMicro),
            other => Err(Error::InvalidInput(format!("unknown model kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermPart {
    /// Linear part, `v^n1 a^n2`.
    Linear,
    /// Linear part, `v^n1 max(0,a)^n2`.
    LinearPos,
    /// Exponent argument, `v^n1 a^n2`.
    Exp,
    /// Exponent argument, `v^n1 max(0,a)^n2`.
    ExpPos,
    /// ARRB term. `(1, 2)` is the only positive-part ARRB term,
    /// `v * max(0,a)^2`; every other pair is a plain monomial.
    ArrbTerm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Term {
    pub part: TermPart,
    pub n1: u8,
    pub n2: u8,
}

impl Term {
    const fn new(part: TermPart, n1: u8, n2: u8) -> Self {
        Self { part, n1, n2 }
    }

    fn positive_part(&self) -> bool {
        match self.part {
            TermPart::LinearPos | TermPart::ExpPos => true,
            TermPart::ArrbTerm => self.n1 == 1 && self.n2 == 2,
            TermPart::Linear | TermPart::Exp => false,
        }
    }

    fn in_exponent(&self) -> bool {
        matches!(self.part, TermPart::Exp | TermPart::ExpPos)
    }

    pub fn eval(&self, v: f64, a: f64) -> f64 {
        let a_base = if self.positive_part() { a.max(0.0) } else { a };
        pow(v, self.n1) * pow(a_base, self.n2)
    }
}

/// `x^n` with `x^0 = 1` for every `x`.
fn pow(x: f64, n: u8) -> f64 {
    match n {
        0 => 1.0,
        1 => x,
        2 => x * x,
        3 => x * x * x,
        _ => x.powi(i32::from(n)),
    }
}

fn vtmicro_layout() -> Vec<Term> {
    (0..=3)
        .flat_map(|n1| (0..=3).map(move |n2| Term::new(TermPart::Exp, n1, n2)))
        .collect()
}

fn arrb_layout() -> Vec<Term> {
    [(0, 0), (1, 0), (2, 0), (3, 0), (1, 1), (1, 2)]
        .into_iter()
        .map(|(n1, n2)| Term::new(TermPart::ArrbTerm, n1, n2))
        .collect()
}

fn aamicro_half(base: TermPart, pos: TermPart) -> impl Iterator<Item = Term> {
    let plain = (0..=2).flat_map(move |n1| (0..=2).map(move |n2| Term::new(base, n1, n2)));
    let positive = (0..=2).flat_map(move |n1| (1..=2).map(move |n2| Term::new(pos, n1, n2)));
    plain.chain(positive)
}

fn aamicro_layout() -> Vec<Term> {
    aamicro_half(TermPart::Linear, TermPart::LinearPos)
        .chain(aamicro_half(TermPart::Exp, TermPart::ExpPos))
        .collect()
}

/// Index of the `(n1, n2)` plain term inside one AA-Micro half.
pub fn aamicro_slot(n1: u8, n2: u8) -> usize {
    assert!(n1 <= 2 && n2 <= 2);
    usize::from(n1) * 3 + usize::from(n2)
}

/// Index of the `(n1, n2)` positive-part term inside one AA-Micro half.
pub fn aamicro_pos_slot(n1: u8, n2: u8) -> usize {
    assert!(n1 <= 2 && (1..=2).contains(&n2));
    9 + usize::from(n1) * 2 + usize::from(n2 - 1)
}

/// The shared 15-term AA-Micro basis evaluated at `(v, a)`. Returned twice,
/// once for the linear part and once for the exponent argument.
pub fn aamicro_features(v: f64, a: f64) -> ([f64; AAMICRO_BASIS], [f64; AAMICRO_BASIS]) {
    let mut out = [0.0; AAMICRO_BASIS];
    for (slot, term) in aamicro_half(TermPart::Linear, TermPart::LinearPos).enumerate() {
        out[slot] = term.eval(v, a);
    }
    (out, out)
}

/// Optional provenance attached to a fitted model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitMeta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tool_version: Option<String>,
    /// SHA-256 over the training samples, see [`crate::calibration::training_hash`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    /// Span of the training data as `(mode, run_id, t)` of the first and
    /// last training sample.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training_span: Option<(String, String)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCoefficients {
    pub kind: ModelKind,
    pub layout: Vec<Term>,
    pub theta: Vec<f64>,
    #[serde(default = "default_clamp")]
    pub exponent_clamp: f64,
    #[serde(default)]
    pub fit_meta: FitMeta,
}

fn default_clamp() -> f64 {
    DEFAULT_EXPONENT_CLAMP
}

impl ModelCoefficients {
    pub fn new(kind: ModelKind, theta: Vec<f64>) -> Result<Self> {
        let c = Self {
            kind,
            layout: kind.layout(),
            theta,
            exponent_clamp: DEFAULT_EXPONENT_CLAMP,
            fit_meta: FitMeta::default(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn zeros(kind: ModelKind) -> Self {
        let layout = kind.layout();
        Self {
            kind,
            theta: vec![0.0; layout.len()],
            layout,
            exponent_clamp: DEFAULT_EXPONENT_CLAMP,
            fit_meta: FitMeta::default(),
        }
    }

    /// AA-Micro coefficients from separate linear and exponent halves.
    pub fn aamicro(linear: [f64; AAMICRO_BASIS], exponent: [f64; AAMICRO_BASIS]) -> Self {
        let mut theta = linear.to_vec();
        theta.extend_from_slice(&exponent);
        Self::new(ModelKind::AaMicro, theta).expect("30 AA-Micro coefficients")
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.kind.layout();
        if self.theta.len() != expected.len() {
            return Err(Error::Schema(format!(
                "{} expects {} coefficients, got {}",
                self.kind,
                expected.len(),
                self.theta.len()
            )));
        }
        if self.layout != expected {
            return Err(Error::Schema(format!(
                "layout does not match the canonical {} layout",
                self.kind
            )));
        }
        if !(self.exponent_clamp.is_finite() && self.exponent_clamp > 0.0) {
            return Err(Error::Schema(format!(
                "exponent_clamp must be finite and > 0, got {}",
                self.exponent_clamp
            )));
        }
        if let Some(bad) = self.theta.iter().position(|x| !x.is_finite()) {
            return Err(Error::Schema(format!("coefficient {bad} is not finite")));
        }
        Ok(())
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::InvalidInput(format!(
                "expected {kind} coefficients, got {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn clamp_exponent(&self, x: f64) -> f64 {
        x.clamp(-self.exponent_clamp, self.exponent_clamp)
    }

    /// Unclamped exponent argument (VT-Micro, or the AA-Micro `G` part).
    pub fn exponent_arg(&self, v: f64, a: f64) -> f64 {
        self.layout
            .iter()
            .zip(&self.theta)
            .filter(|(t, _)| t.in_exponent())
            .map(|(t, c)| c * t.eval(v, a))
            .sum()
    }

    /// Sum of the terms outside the exponential.
    pub fn linear_part(&self, v: f64, a: f64) -> f64 {
        self.layout
            .iter()
            .zip(&self.theta)
            .filter(|(t, _)| !t.in_exponent())
            .map(|(t, c)| c * t.eval(v, a))
            .sum()
    }

    pub fn predict(&self, v: f64, a: f64) -> f64 {
        match self.kind {
            ModelKind::VtMicro => self.clamp_exponent(self.exponent_arg(v, a)).exp(),
            ModelKind::Arrb => self.linear_part(v, a),
            ModelKind::AaMicro => {
                self.linear_part(v, a) + self.clamp_exponent(self.exponent_arg(v, a)).exp()
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

pub fn vtmicro_predict(v: f64, a: f64, coeffs: &ModelCoefficients) -> Result<f64> {
    coeffs.expect_kind(ModelKind::VtMicro)?;
    Ok(coeffs.predict(v, a))
}

pub fn arrb_predict(v: f64, a: f64, coeffs: &ModelCoefficients) -> Result<f64> {
    coeffs.expect_kind(ModelKind::Arrb)?;
    Ok(coeffs.predict(v, a))
}

pub fn aamicro_predict(v: f64, a: f64, coeffs: &ModelCoefficients) -> Result<f64> {
    coeffs.expect_kind(ModelKind::AaMicro)?;
    Ok(coeffs.predict(v, a))
}
