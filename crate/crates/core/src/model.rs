//! Physical and geometric configuration, closed-form reference spectra,
//! oscillator eigenfunctions and the commensurability bookkeeping.
//!
//! Units are fixed so that the Hamiltonian reads `(-i∇ - A)²` with the
//! Landau gauge `A = (0, Bx, 0)`; the Landau levels are then exactly
//! `B(2n + 1)`.

use std::f64::consts::PI;

use num_integer::Integer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LANDAU_GAUGE: &str = "Landau, A = (0, Bx, 0)";

/// Two analytic levels closer than this are treated as one degenerate level.
///
/// The field `B` is a float, so rational relations involving it are only
/// detected as numerical coincidences.
pub const COINCIDENCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConfig {
    #[serde(rename = "B")]
    pub field: f64,
}

impl PhysicalConfig {
    pub fn new(field: f64) -> Result<Self> {
        let cfg = PhysicalConfig { field };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.field.is_finite() && self.field > 0.0) {
            return Err(Error::config("B", format!("field must be positive, got {}", self.field)));
        }
        Ok(())
    }

    pub fn gauge(&self) -> &'static str {
        LANDAU_GAUGE
    }

    /// Landau level `B(2n+1)`.
    pub fn landau(&self, n: u32) -> f64 {
        self.field * (2 * n + 1) as f64
    }
}

/// A layer width stored as the exact rational `num/den` times a real `scale`.
///
/// Two widths are commensurate exactly when they share the scale (bitwise);
/// different scales declare the pair incommensurate.
///
/// In JSON the scale may be written as a number or as `"pi"`; a scale equal
/// to `π` bit for bit is written back as `"pi"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WidthRepr", into = "WidthRepr")]
pub struct Width {
    pub num: i64,
    pub den: i64,
    pub scale: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScaleRepr {
    Number(f64),
    Named(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WidthRepr {
    num: i64,
    den: i64,
    #[serde(default = "unit_scale")]
    scale: ScaleRepr,
}

fn unit_scale() -> ScaleRepr {
    ScaleRepr::Number(1.0)
}

impl TryFrom<WidthRepr> for Width {
    type Error = String;
    fn try_from(r: WidthRepr) -> std::result::Result<Self, String> {
        let scale = match r.scale {
            ScaleRepr::Number(x) => x,
            ScaleRepr::Named(name) if name == "pi" || name == "π" => PI,
            ScaleRepr::Named(name) => return Err(format!("unknown width scale `{name}`; use a number or \"pi\"")),
        };
        // Range checks are left to `validate` so errors can name the field.
        Ok(Width { num: r.num, den: r.den, scale })
    }
}

impl From<Width> for WidthRepr {
    fn from(w: Width) -> Self {
        let scale = if w.scale.to_bits() == PI.to_bits() { ScaleRepr::Named("pi".into()) } else { ScaleRepr::Number(w.scale) };
        WidthRepr { num: w.num, den: w.den, scale }
    }
}

impl Width {
    pub fn new(num: i64, den: i64, scale: f64) -> Result<Self> {
        let w = Width { num, den, scale };
        w.validate("width")?;
        Ok(w)
    }

    pub fn integer(n: i64) -> Self {
        Width { num: n, den: 1, scale: 1.0 }
    }

    /// `num/den · π`
    pub fn pi_fraction(num: i64, den: i64) -> Self {
        Width { num, den, scale: PI }
    }

    /// A width carrying its own scale tag; never commensurate with anything
    /// built on a different scale.
    pub fn tagged(value: f64) -> Self {
        Width { num: 1, den: 1, scale: value }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if self.den == 0 {
            return Err(Error::config(format!("{field}.den"), "denominator must be nonzero"));
        }
        if self.den < 0 {
            return Err(Error::config(format!("{field}.den"), "denominator must be positive"));
        }
        if self.num <= 0 {
            return Err(Error::config(format!("{field}.num"), "numerator must be positive"));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::config(format!("{field}.scale"), "scale must be positive and finite"));
        }
        Ok(())
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64 * self.scale
    }

    pub fn same_scale(&self, other: &Width) -> bool {
        self.scale.to_bits() == other.scale.to_bits()
    }

    /// Reduced `(num, den)`.
    pub fn reduced(&self) -> (i64, i64) {
        let g = self.num.gcd(&self.den);
        (self.num / g, self.den / g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometryKind {
    NeumannWindowLayer,
    DoubleLayer,
    OneSidedBarrier,
}

/// Cross-section of the layer system.
///
/// * `NeumannWindowLayer`: `ℝ×(0,d)`, Dirichlet everywhere except a Neumann
///   strip `|x| < a` on the top boundary `z = d`.
/// * `DoubleLayer`: `ℝ×(-d2,d1)` with a Dirichlet barrier on `z = 0`,
///   `|x| ≥ a`; the window `|x| < a` couples the layers.
/// * `OneSidedBarrier`: `ℝ×(-d2,d1)` with the barrier on `z = 0`, `x ≤ 0`;
///   the layers merge for `x > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometryConfig {
    NeumannWindowLayer { d: Width, a: f64 },
    DoubleLayer { d1: Width, d2: Width, a: f64 },
    OneSidedBarrier { d1: Width, d2: Width },
}

impl GeometryConfig {
    pub fn kind(&self) -> GeometryKind {
        match self {
            GeometryConfig::NeumannWindowLayer { .. } => GeometryKind::NeumannWindowLayer,
            GeometryConfig::DoubleLayer { .. } => GeometryKind::DoubleLayer,
            GeometryConfig::OneSidedBarrier { .. } => GeometryKind::OneSidedBarrier,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_a = |a: f64| {
            if !(a.is_finite() && a >= 0.0) {
                Err(Error::config("a", format!("window half-width must be >= 0, got {a}")))
            } else {
                Ok(())
            }
        };
        match self {
            GeometryConfig::NeumannWindowLayer { d, a } => {
                d.validate("d")?;
                check_a(*a)
            }
            GeometryConfig::DoubleLayer { d1, d2, a } => {
                d1.validate("d1")?;
                d2.validate("d2")?;
                check_a(*a)
            }
            GeometryConfig::OneSidedBarrier { d1, d2 } => {
                d1.validate("d1")?;
                d2.validate("d2")
            }
        }
    }

    pub fn half_window(&self) -> Option<f64> {
        match self {
            GeometryConfig::NeumannWindowLayer { a, .. } | GeometryConfig::DoubleLayer { a, .. } => Some(*a),
            GeometryConfig::OneSidedBarrier { .. } => None,
        }
    }

    /// Same geometry with a different window half-width (no-op for the
    /// one-sided barrier).
    pub fn with_half_window(&self, a: f64) -> Self {
        let mut g = *self;
        match &mut g {
            GeometryConfig::NeumannWindowLayer { a: slot, .. } | GeometryConfig::DoubleLayer { a: slot, .. } => *slot = a,
            GeometryConfig::OneSidedBarrier { .. } => {}
        }
        g
    }

    /// Layer widths, upper layer first.
    pub fn widths(&self) -> Vec<Width> {
        match self {
            GeometryConfig::NeumannWindowLayer { d, .. } => vec![*d],
            GeometryConfig::DoubleLayer { d1, d2, .. } | GeometryConfig::OneSidedBarrier { d1, d2 } => vec![*d1, *d2],
        }
    }

    pub fn total_width(&self) -> f64 {
        self.widths().iter().map(Width::value).sum()
    }

    /// True when the cross-section is symmetric under `x -> -x`.
    pub fn is_mirror_symmetric(&self) -> bool {
        !matches!(self, GeometryConfig::OneSidedBarrier { .. })
    }

    /// Levels every fiber eigenvalue is bounded above by (λ_k(p) ≤ λ_k).
    pub fn upper_catalog(&self, physics: &PhysicalConfig, e_max: f64) -> Result<LevelCatalog> {
        match self {
            GeometryConfig::NeumannWindowLayer { d, .. } => single_layer_levels(physics.field, d.value(), e_max),
            GeometryConfig::DoubleLayer { d1, d2, .. } | GeometryConfig::OneSidedBarrier { d1, d2 } => {
                decoupled_double_levels(physics.field, d1.value(), d2.value(), e_max)
            }
        }
    }

    /// Levels every fiber eigenvalue is bounded below by.
    pub fn lower_catalog(&self, physics: &PhysicalConfig, e_max: f64) -> Result<LevelCatalog> {
        match self {
            GeometryConfig::NeumannWindowLayer { d, .. } => neumann_limit_levels(physics.field, d.value(), e_max),
            GeometryConfig::DoubleLayer { d1, d2, .. } | GeometryConfig::OneSidedBarrier { d1, d2 } => {
                merged_free_levels(physics.field, d1.value(), d2.value(), e_max)
            }
        }
    }

    /// Certified lower bound of the whole fiber spectrum.
    pub fn spectral_floor(&self, physics: &PhysicalConfig) -> f64 {
        let b = physics.field;
        match self {
            GeometryConfig::NeumannWindowLayer { d, .. } => b + (PI / (2.0 * d.value())).powi(2),
            _ => b + (PI / self.total_width()).powi(2),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            GeometryConfig::NeumannWindowLayer { d, a } => format!("neumann_window_layer d={} a={}", d.value(), a),
            GeometryConfig::DoubleLayer { d1, d2, a } => {
                format!("double_layer d1={} d2={} a={}", d1.value(), d2.value(), a)
            }
            GeometryConfig::OneSidedBarrier { d1, d2 } => {
                format!("one_sided_barrier d1={} d2={}", d1.value(), d2.value())
            }
        }
    }
}

/// Which layer of a double layer a mode lives in: 1 is `z > 0`, 2 is `z < 0`.
pub type LayerTag = u8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModeIndex {
    pub n: u32,
    pub m: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub layer: Option<LayerTag>,
}

impl ModeIndex {
    pub fn new(n: u32, m: u32) -> Self {
        ModeIndex { n, m, layer: None }
    }

    pub fn in_layer(n: u32, m: u32, layer: LayerTag) -> Self {
        ModeIndex { n, m, layer: Some(layer) }
    }

    pub fn label(&self) -> String {
        match self.layer {
            Some(l) => format!("({},{},{})", self.n, self.m, l),
            None => format!("({},{})", self.n, self.m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatalogKind {
    /// Per-layer Dirichlet levels; a single layer has `layer = None`.
    Decoupled,
    /// Dirichlet/Neumann layer, i.e. the infinitely wide window.
    NeumannLimit,
    /// Both layers merged into one of width `d1 + d2`.
    MergedFree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEntry {
    pub value: f64,
    pub indices: Vec<ModeIndex>,
}

impl LevelEntry {
    pub fn multiplicity(&self) -> usize {
        self.indices.len()
    }
}

/// Sorted analytic levels below a cutoff, degenerate values merged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCatalog {
    pub kind: CatalogKind,
    pub e_max: f64,
    pub entries: Vec<LevelEntry>,
}

impl LevelCatalog {
    fn build(kind: CatalogKind, e_max: f64, ground: f64, mut levels: Vec<(f64, ModeIndex)>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::EmptyCatalog { e_max, ground });
        }
        levels.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut entries: Vec<LevelEntry> = Vec::new();
        for (value, idx) in levels {
            match entries.last_mut() {
                Some(last) if (value - last.value).abs() <= COINCIDENCE_TOL => last.indices.push(idx),
                _ => entries.push(LevelEntry { value, indices: vec![idx] }),
            }
        }
        for e in &mut entries {
            e.indices.sort();
        }
        Ok(LevelCatalog { kind, e_max, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Levels repeated by multiplicity in rank order, ties broken
    /// lexicographically in `(n, m, layer)`.
    pub fn ranked(&self) -> Vec<(f64, ModeIndex)> {
        self.entries
            .iter()
            .flat_map(|e| e.indices.iter().map(move |i| (e.value, *i)))
            .collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.ranked().into_iter().map(|(v, _)| v).collect()
    }

    /// `k`-th level, 1-based.
    pub fn level(&self, k: usize) -> Option<(f64, ModeIndex)> {
        if k == 0 {
            return None;
        }
        self.ranked().get(k - 1).copied()
    }

    /// 1-based rank of a mode.
    pub fn rank_of(&self, mode: ModeIndex) -> Option<usize> {
        self.ranked().iter().position(|(_, i)| *i == mode).map(|p| p + 1)
    }

    pub fn nearest(&self, value: f64) -> Option<&LevelEntry> {
        self.entries
            .iter()
            .min_by(|a, b| (a.value - value).abs().total_cmp(&(b.value - value).abs()))
    }
}

fn check_mode(n: u32, m: u32, b: f64, d: f64) -> Result<()> {
    let _ = n;
    if m < 1 {
        return Err(Error::invalid("transverse index m must be >= 1"));
    }
    if !(b.is_finite() && b > 0.0) {
        return Err(Error::invalid(format!("field B must be positive, got {b}")));
    }
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::invalid(format!("width must be positive, got {d}")));
    }
    Ok(())
}

/// `B(2n+1) + (πm/d)²`
pub fn free_level(n: u32, m: u32, b: f64, d: f64) -> Result<f64> {
    check_mode(n, m, b, d)?;
    Ok(b * (2 * n + 1) as f64 + (PI * m as f64 / d).powi(2))
}

/// `B(2n+1) + (πm/(2d))²`, the Dirichlet/Neumann layer level.
pub fn neumann_limit_level(n: u32, m: u32, b: f64, d: f64) -> Result<f64> {
    check_mode(n, m, b, d)?;
    Ok(b * (2 * n + 1) as f64 + (PI * m as f64 / (2.0 * d)).powi(2))
}

/// `B(2n+1) + (πm/(d1+d2))²`
pub fn merged_free_level(n: u32, m: u32, b: f64, d1: f64, d2: f64) -> Result<f64> {
    check_mode(n, m, b, d1)?;
    check_mode(n, m, b, d2)?;
    free_level(n, m, b, d1 + d2)
}

fn enumerate(b: f64, e_max: f64, transverse: impl Fn(u32) -> f64, mut push: impl FnMut(f64, u32, u32)) {
    let mut n = 0u32;
    while b * (2 * n + 1) as f64 + transverse(1) <= e_max + COINCIDENCE_TOL {
        let mut m = 1u32;
        loop {
            let v = b * (2 * n + 1) as f64 + transverse(m);
            if v > e_max + COINCIDENCE_TOL {
                break;
            }
            push(v, n, m);
            m += 1;
        }
        n += 1;
    }
}

fn check_cutoff(b: f64, widths: &[f64], e_max: f64) -> Result<()> {
    check_mode(0, 1, b, 1.0)?;
    for &d in widths {
        check_mode(0, 1, b, d)?;
    }
    if !e_max.is_finite() {
        return Err(Error::invalid("cutoff must be finite"));
    }
    Ok(())
}

/// Free levels of a single Dirichlet layer.
pub fn single_layer_levels(b: f64, d: f64, e_max: f64) -> Result<LevelCatalog> {
    check_cutoff(b, &[d], e_max)?;
    let mut levels = Vec::new();
    enumerate(b, e_max, |m| (PI * m as f64 / d).powi(2), |v, n, m| levels.push((v, ModeIndex::new(n, m))));
    LevelCatalog::build(CatalogKind::Decoupled, e_max, b + (PI / d).powi(2), levels)
}

/// Dirichlet/Neumann layer levels `B(2n+1) + (π(2j-1)/(2d))²`.
///
/// The stored `m` is the odd half-wave number `2j - 1`.
pub fn neumann_limit_levels(b: f64, d: f64, e_max: f64) -> Result<LevelCatalog> {
    check_cutoff(b, &[d], e_max)?;
    let mut levels = Vec::new();
    enumerate(
        b,
        e_max,
        |j| (PI * (2 * j - 1) as f64 / (2.0 * d)).powi(2),
        |v, n, j| levels.push((v, ModeIndex::new(n, 2 * j - 1))),
    );
    LevelCatalog::build(CatalogKind::NeumannLimit, e_max, b + (PI / (2.0 * d)).powi(2), levels)
}

/// Spectrum of the decoupled double layer: the union over both layers of
/// `B(2n+1) + (πm/d_j)²`, each mode tagged with its layer.
pub fn decoupled_double_levels(b: f64, d1: f64, d2: f64, e_max: f64) -> Result<LevelCatalog> {
    check_cutoff(b, &[d1, d2], e_max)?;
    let mut levels = Vec::new();
    for (layer, d) in [(1u8, d1), (2u8, d2)] {
        enumerate(
            b,
            e_max,
            |m| (PI * m as f64 / d).powi(2),
            |v, n, m| levels.push((v, ModeIndex::in_layer(n, m, layer))),
        );
    }
    let ground = b + (PI / d1.max(d2)).powi(2);
    LevelCatalog::build(CatalogKind::Decoupled, e_max, ground, levels)
}

/// Levels of the barrier-free layer of width `d1 + d2`.
pub fn merged_free_levels(b: f64, d1: f64, d2: f64, e_max: f64) -> Result<LevelCatalog> {
    check_cutoff(b, &[d1, d2], e_max)?;
    let d = d1 + d2;
    let mut levels = Vec::new();
    enumerate(b, e_max, |m| (PI * m as f64 / d).powi(2), |v, n, m| levels.push((v, ModeIndex::new(n, m))));
    LevelCatalog::build(CatalogKind::MergedFree, e_max, b + (PI / d).powi(2), levels)
}

/// All `(m1, m2)` with `m1/m2 = d1/d2` and both indices `<= m_max`.
///
/// Widths on different scales are incommensurate by declaration.
pub fn commensurate_pairs(d1: &Width, d2: &Width, m_max: u32) -> Vec<(u32, u32)> {
    if !d1.same_scale(d2) {
        return Vec::new();
    }
    // d1/d2 = (n1 den2) / (den1 n2)
    let p = d1.num as i128 * d2.den as i128;
    let q = d1.den as i128 * d2.num as i128;
    let g = p.gcd(&q);
    let (p, q) = (p / g, q / g);
    let mut out = Vec::new();
    let mut k = 1i128;
    while k * p <= m_max as i128 && k * q <= m_max as i128 {
        out.push(((k * p) as u32, (k * q) as u32));
        k += 1;
    }
    out
}

fn is_commensurate_pair(m1: u32, m2: u32, d1: &Width, d2: &Width) -> bool {
    if !d1.same_scale(d2) || m1 == 0 || m2 == 0 {
        return false;
    }
    // m1/m2 == (n1 den2)/(den1 n2)
    m1 as i128 * d1.den as i128 * d2.num as i128 == m2 as i128 * d1.num as i128 * d2.den as i128
}

/// Energy of the flat band carried by the commensurate pair `(m1, m2)`:
/// the per-layer level shared by both layers.
pub fn flat_band_value(n: u32, m1: u32, m2: u32, b: f64, d1: &Width, d2: &Width) -> Result<f64> {
    if !is_commensurate_pair(m1, m2, d1, d2) {
        return Err(Error::invalid(format!(
            "({m1},{m2}) is not commensurate with widths {} and {}",
            d1.value(),
            d2.value()
        )));
    }
    free_level(n, m1, b, d1.value())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatLevel {
    pub value: f64,
    pub n: u32,
    pub m1: u32,
    pub m2: u32,
}

/// Predicted flat bands below `e_max`, ascending.
pub fn flat_band_levels(b: f64, d1: &Width, d2: &Width, e_max: f64) -> Vec<FlatLevel> {
    let m_max = ((e_max.max(0.0)).sqrt() * d1.value() / PI).ceil() as u32 + 1;
    let mut out = Vec::new();
    for (m1, m2) in commensurate_pairs(d1, d2, m_max.max(1)) {
        let mut n = 0;
        while let Ok(v) = flat_band_value(n, m1, m2, b, d1, d2) {
            if v > e_max {
                break;
            }
            out.push(FlatLevel { value: v, n, m1, m2 });
            n += 1;
        }
    }
    out.sort_by(|a, b| a.value.total_cmp(&b.value));
    out
}

/// Normalized oscillator eigenfunction of `-d²/du² + B²u²` (eigenvalue
/// `B(2n+1)`), evaluated by the three-term recurrence on normalized
/// functions so that no raw Hermite polynomial is ever formed.
pub fn hermite_mode(n: u32, b: f64, u: f64) -> f64 {
    let xi = b.sqrt() * u;
    let mut prev = 0.0;
    let mut cur = (b / PI).powf(0.25) * (-0.5 * xi * xi).exp();
    for k in 0..n {
        let k = k as f64;
        let next = (2.0 / (k + 1.0)).sqrt() * xi * cur - (k / (k + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Decoupled eigenfunction `√(2/d_j) h_n(x + p/B) sin(πm z'/d_j)` with
/// `z' = ±z` inside layer `j`.
#[derive(Debug, Clone, Copy)]
pub struct ModeFunction {
    pub mode: ModeIndex,
    pub field: f64,
    pub width: f64,
    pub momentum: f64,
}

impl ModeFunction {
    pub fn new(mode: ModeIndex, physics: &PhysicalConfig, width: f64, momentum: f64) -> Self {
        ModeFunction { mode, field: physics.field, width, momentum }
    }

    pub fn oscillator(&self, x: f64) -> f64 {
        hermite_mode(self.mode.n, self.field, x + self.momentum / self.field)
    }

    pub fn eval(&self, x: f64, z: f64) -> f64 {
        let zl = match self.mode.layer {
            Some(2) => -z,
            _ => z,
        };
        if !(0.0..=self.width).contains(&zl) {
            return 0.0;
        }
        (2.0 / self.width).sqrt() * self.oscillator(x) * (PI * self.mode.m as f64 * zl / self.width).sin()
    }
}
