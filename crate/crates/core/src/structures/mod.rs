//! Sub-Riemannian and Carnot-Caratheodory structures given by a frame of
//! vector fields on an axis-aligned coordinate box.
//!
//! The metric is always the one that makes the frame orthonormal where it is
//! linearly independent. For dependent frames (regularity `C0`) lengths are
//! measured through minimal-norm controls, see [`crate::distance`].

mod builtins;
mod definition;

use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::sampling;

pub use builtins::{builtin, BUILTIN_NAMES};
pub use definition::{DomainDef, StructureDef};

/// Default relative rank threshold.
pub const RANK_TOL: f64 = 1e-9;

/// A point in chart coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChartPoint(pub Vec<f64>);

impl ChartPoint {
    pub fn new(coords: Vec<f64>) -> Self {
        ChartPoint(coords)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for ChartPoint {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ChartPoint {
    fn from(v: Vec<f64>) -> Self {
        ChartPoint(v)
    }
}

impl From<&[f64]> for ChartPoint {
    fn from(v: &[f64]) -> Self {
        ChartPoint(v.to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regularity {
    C11,
    C0,
}

impl fmt::Display for Regularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regularity::C11 => write!(f, "C11"),
            Regularity::C0 => write!(f, "C0"),
        }
    }
}

/// Closed axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl DomainBox {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() {
            return Err(Error::invalid("box bounds have different lengths"));
        }
        if min
            .iter()
            .zip(&max)
            .any(|(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite())
        {
            return Err(Error::invalid("box bounds must be finite with min <= max"));
        }
        Ok(DomainBox { min, max })
    }

    /// `[-half, half]^n`.
    pub fn cube(n: usize, half: f64) -> Self {
        DomainBox {
            min: vec![-half; n],
            max: vec![half; n],
        }
    }

    /// Box of the given half-width centred at `c`.
    pub fn centered(c: &[f64], half: f64) -> Self {
        DomainBox {
            min: c.iter().map(|v| v - half).collect(),
            max: c.iter().map(|v| v + half).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.min.iter().zip(&self.max))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn center(&self) -> Vec<f64> {
        self.min.iter().zip(&self.max).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.min.iter().zip(&self.max).map(|(a, b)| 0.5 * (b - a)).collect()
    }

    pub fn min_half_width(&self) -> f64 {
        self.half_widths().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Euclidean distance from an interior point to the boundary; zero outside.
    pub fn distance_to_boundary(&self, x: &[f64]) -> f64 {
        if !self.contains(x) {
            return 0.0;
        }
        x.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(v, (lo, hi))| (v - lo).min(hi - v))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn intersect(&self, other: &DomainBox) -> Option<DomainBox> {
        let min: Vec<f64> = self.min.iter().zip(&other.min).map(|(a, b)| a.max(*b)).collect();
        let max: Vec<f64> = self.max.iter().zip(&other.max).map(|(a, b)| a.min(*b)).collect();
        if min.iter().zip(&max).all(|(a, b)| a <= b) {
            Some(DomainBox { min, max })
        } else {
            None
        }
    }

    /// Same centre, half-widths multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> DomainBox {
        let c = self.center();
        let h = self.half_widths();
        DomainBox {
            min: c.iter().zip(&h).map(|(c, h)| c - factor * h).collect(),
            max: c.iter().zip(&h).map(|(c, h)| c + factor * h).collect(),
        }
    }

    pub fn contains_box(&self, other: &DomainBox) -> bool {
        self.contains(&other.min) && self.contains(&other.max)
    }
}

/// A smooth or continuous vector field in chart coordinates.
pub trait VectorField: Send + Sync {
    fn eval(&self, x: &[f64], out: &mut [f64]);

    /// Writes the row-major jacobian `out[r * n + c] = dX^r/dx_c` and returns
    /// `true`, or returns `false` when no analytic jacobian is available.
    fn jacobian(&self, _x: &[f64], _out: &mut [f64]) -> bool {
        false
    }
}

/// Vector field backed by closures.
pub struct FnField<F, J> {
    f: F,
    df: Option<J>,
}

impl<F, J> VectorField for FnField<F, J>
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
    J: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }

    fn jacobian(&self, x: &[f64], out: &mut [f64]) -> bool {
        match &self.df {
            Some(df) => {
                df(x, out);
                true
            }
            None => false,
        }
    }
}

pub fn fn_field<F, J>(f: F, df: Option<J>) -> Arc<dyn VectorField>
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    J: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
{
    Arc::new(FnField { f, df })
}

/// One member `X_i` of a frame.
#[derive(Clone)]
pub struct FrameField {
    /// One-based position in the frame.
    pub index: usize,
    pub field: Arc<dyn VectorField>,
}

impl fmt::Debug for FrameField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FrameField(X{})", self.index)
    }
}

/// Where a structure came from; needed to re-create it when reloading exported objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StructureSource {
    Builtin {
        name: String,
    },
    Definition {
        definition: StructureDef,
    },
    /// Built programmatically (transformed, rescaled...); cannot be serialized.
    Derived,
}

impl StructureSource {
    /// Re-creates the structure this source describes.
    pub fn instantiate(&self) -> Result<SRStructure> {
        match self {
            StructureSource::Builtin { name } => builtin(name),
            StructureSource::Definition { definition } => definition.build(),
            StructureSource::Derived => Err(Error::Schema(
                "derived structures cannot be re-created from a file".into(),
            )),
        }
    }
}

/// Central finite-difference step at `x`.
pub fn fd_step(x: &[f64]) -> f64 {
    1e-5 * (1.0 + linalg::norm(x))
}

/// Access to a frame of vector fields, implemented by [`SRStructure`] and by
/// adapted-coordinate views of it.
pub trait Frame: Sync {
    /// Ambient dimension `n`.
    fn dim(&self) -> usize;
    /// Frame size `m`.
    fn size(&self) -> usize;
    fn field(&self, i: usize, x: &[f64], out: &mut [f64]);
    fn field_jacobian(&self, i: usize, x: &[f64], out: &mut [f64]) -> Result<()>;
    fn contains(&self, x: &[f64]) -> bool;
    /// Whether every field has an analytic jacobian.
    fn analytic_jacobians(&self) -> bool;

    /// Column-major `n x m` frame matrix.
    fn frame_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for i in 0..self.size() {
            self.field(i, x, &mut out[i * n..(i + 1) * n]);
        }
    }

    fn frame_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let mut buf = vec![0.0; self.dim() * self.size()];
        self.frame_into(x, &mut buf);
        DMatrix::from_vec(self.dim(), self.size(), buf)
    }
}

/// Row-major central-difference jacobian of `f` at `x`.
pub fn fd_jacobian(f: &dyn Fn(&[f64], &mut [f64]), x: &[f64], out: &mut [f64]) {
    let n = x.len();
    let h = fd_step(x);
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    for c in 0..n {
        xp[c] = x[c] + h;
        f(&xp, &mut fp);
        xp[c] = x[c] - h;
        f(&xp, &mut fm);
        xp[c] = x[c];
        for r in 0..n {
            out[r * n + c] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
}

/// A frame-defined structure `(M, Delta, g)` on a coordinate box.
#[derive(Clone)]
pub struct SRStructure {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub frame: Vec<FrameField>,
    pub domain: DomainBox,
    pub regularity: Regularity,
    pub source: StructureSource,
    /// When false, a missing analytic jacobian is an error instead of
    /// falling back to central differences.
    pub fd_fallback: bool,
}

impl fmt::Debug for SRStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SRStructure")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("m", &self.m)
            .field("regularity", &self.regularity)
            .field("domain", &self.domain)
            .finish()
    }
}

impl Frame for SRStructure {
    fn dim(&self) -> usize {
        self.n
    }

    fn size(&self) -> usize {
        self.m
    }

    fn field(&self, i: usize, x: &[f64], out: &mut [f64]) {
        self.frame[i].field.eval(x, out)
    }

    fn field_jacobian(&self, i: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        let field = &self.frame[i].field;
        if field.jacobian(x, out) {
            return Ok(());
        }
        if !self.fd_fallback {
            return Err(Error::JacobianUnavailable { field: i + 1 });
        }
        fd_jacobian(&|y, o| field.eval(y, o), x, out);
        Ok(())
    }

    fn contains(&self, x: &[f64]) -> bool {
        self.domain.contains(x)
    }

    fn analytic_jacobians(&self) -> bool {
        let mut buf = vec![0.0; self.n * self.n];
        let x = self.domain.center();
        self.frame.iter().all(|f| f.field.jacobian(&x, &mut buf))
    }
}

impl SRStructure {
    pub fn new(
        name: impl Into<String>,
        fields: Vec<Arc<dyn VectorField>>,
        domain: DomainBox,
        regularity: Regularity,
    ) -> Result<Self> {
        let n = domain.dim();
        let m = fields.len();
        if n == 0 || m == 0 {
            return Err(Error::invalid("structures need n >= 1 and m >= 1"));
        }
        if regularity == Regularity::C11 && m > n {
            return Err(Error::invalid("a C11 frame of rank m needs m <= n"));
        }
        Ok(SRStructure {
            name: name.into(),
            n,
            m,
            frame: fields
                .into_iter()
                .enumerate()
                .map(|(i, field)| FrameField { index: i + 1, field })
                .collect(),
            domain,
            regularity,
            source: StructureSource::Derived,
            fd_fallback: true,
        })
    }

    pub fn check_point(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.n || !p.iter().all(|v| v.is_finite()) || !self.domain.contains(p) {
            return Err(Error::outside(p));
        }
        Ok(())
    }

    /// Same fields, different regularity tag (used to probe the C11/C0 rules).
    pub fn with_regularity(&self, regularity: Regularity) -> SRStructure {
        let mut s = self.clone();
        s.regularity = regularity;
        s.source = StructureSource::Derived;
        s
    }

    /// Drops analytic jacobians so every derivative goes through finite differences.
    pub fn without_jacobians(&self) -> SRStructure {
        struct Plain(Arc<dyn VectorField>);
        impl VectorField for Plain {
            fn eval(&self, x: &[f64], out: &mut [f64]) {
                self.0.eval(x, out)
            }
        }
        let mut s = self.clone();
        for f in &mut s.frame {
            f.field = Arc::new(Plain(f.field.clone()));
        }
        s.source = StructureSource::Derived;
        s
    }

    /// Multiplies every frame field by `c`.
    pub fn scaled(&self, c: f64) -> SRStructure {
        struct Scaled(Arc<dyn VectorField>, f64);
        impl VectorField for Scaled {
            fn eval(&self, x: &[f64], out: &mut [f64]) {
                self.0.eval(x, out);
                out.iter_mut().for_each(|v| *v *= self.1);
            }
            fn jacobian(&self, x: &[f64], out: &mut [f64]) -> bool {
                let ok = self.0.jacobian(x, out);
                out.iter_mut().for_each(|v| *v *= self.1);
                ok
            }
        }
        let mut s = self.clone();
        for f in &mut s.frame {
            f.field = Arc::new(Scaled(f.field.clone(), c));
        }
        s.source = StructureSource::Derived;
        s
    }

    /// Pushes the structure forward by the affine map `y = a x + b` (`a` invertible).
    ///
    /// The new domain is the bounding box of the image of the old one; fields
    /// are evaluated through the inverse map, so they must make sense there.
    pub fn affine_image(&self, a: &DMatrix<f64>, b: &[f64]) -> Result<SRStructure> {
        let n = self.n;
        let a_inv = a
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::invalid("affine map is singular"))?;
        struct Pushed {
            inner: Arc<dyn VectorField>,
            a: DMatrix<f64>,
            a_inv: DMatrix<f64>,
            b: Vec<f64>,
        }
        impl Pushed {
            fn pull(&self, y: &[f64]) -> Vec<f64> {
                let n = y.len();
                (0..n)
                    .map(|r| (0..n).map(|c| self.a_inv[(r, c)] * (y[c] - self.b[c])).sum())
                    .collect()
            }
        }
        impl VectorField for Pushed {
            fn eval(&self, y: &[f64], out: &mut [f64]) {
                let n = y.len();
                let x = self.pull(y);
                let mut v = vec![0.0; n];
                self.inner.eval(&x, &mut v);
                for r in 0..n {
                    out[r] = (0..n).map(|c| self.a[(r, c)] * v[c]).sum();
                }
            }
            fn jacobian(&self, y: &[f64], out: &mut [f64]) -> bool {
                let n = y.len();
                let x = self.pull(y);
                let mut j = vec![0.0; n * n];
                if !self.inner.jacobian(&x, &mut j) {
                    return false;
                }
                let j = DMatrix::from_row_slice(n, n, &j);
                let pushed = &self.a * j * &self.a_inv;
                for r in 0..n {
                    for c in 0..n {
                        out[r * n + c] = pushed[(r, c)];
                    }
                }
                true
            }
        }
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for mask in 0..(1usize << n) {
            let corner: Vec<f64> = (0..n)
                .map(|d| {
                    if mask >> d & 1 == 1 {
                        self.domain.max[d]
                    } else {
                        self.domain.min[d]
                    }
                })
                .collect();
            for r in 0..n {
                let y: f64 = (0..n).map(|c| a[(r, c)] * corner[c]).sum::<f64>() + b[r];
                lo[r] = lo[r].min(y);
                hi[r] = hi[r].max(y);
            }
        }
        let fields = self
            .frame
            .iter()
            .map(|f| {
                Arc::new(Pushed {
                    inner: f.field.clone(),
                    a: a.clone(),
                    a_inv: a_inv.clone(),
                    b: b.to_vec(),
                }) as Arc<dyn VectorField>
            })
            .collect();
        let mut s = SRStructure::new(
            format!("{}~affine", self.name),
            fields,
            DomainBox::new(lo, hi)?,
            self.regularity,
        )?;
        s.fd_fallback = self.fd_fallback;
        Ok(s)
    }
}

/// `n x m` matrix whose columns are `X_i(p)`.
pub fn evaluate_frame(s: &SRStructure, p: &[f64]) -> Result<DMatrix<f64>> {
    s.check_point(p)?;
    Ok(s.frame_matrix(p))
}

/// Number of singular values of the frame matrix above `tol * sigma_max`.
pub fn frame_rank(s: &SRStructure, p: &[f64], tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(Error::invalid("rank tolerance must be positive"));
    }
    let a = evaluate_frame(s, p)?;
    Ok(linalg::numerical_rank(&a, tol))
}

/// Row-major jacobian of field `i` (zero-based) at `p`, using the analytic one when present.
pub fn field_jacobian(s: &SRStructure, i: usize, p: &[f64]) -> Result<DMatrix<f64>> {
    s.check_point(p)?;
    let mut buf = vec![0.0; s.n * s.n];
    s.field_jacobian(i, p, &mut buf)?;
    Ok(DMatrix::from_row_slice(s.n, s.n, &buf))
}

/// Central finite-difference jacobian of field `i`, regardless of analytic availability.
pub fn fd_field_jacobian(s: &SRStructure, i: usize, p: &[f64]) -> DMatrix<f64> {
    let mut buf = vec![0.0; s.n * s.n];
    let field = &s.frame[i].field;
    fd_jacobian(&|y, o| field.eval(y, o), p, &mut buf);
    DMatrix::from_row_slice(s.n, s.n, &buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub structure: String,
    pub regularity: Regularity,
    pub samples: usize,
    pub min_rank: usize,
    pub max_rank: usize,
    /// Smallest value over the sample of `max_i |X_i(p)|`.
    pub min_max_field_norm: f64,
    pub passed: bool,
    pub first_violation: Option<ChartPoint>,
}

/// Checks the rank invariant of the structure's regularity class on a quasi-random sample.
///
/// C11 structures need rank exactly `m` everywhere; C0 structures need some
/// non-vanishing frame field everywhere.
pub fn validate(s: &SRStructure, sample_count: usize, seed: u64) -> Result<ValidationReport> {
    if sample_count == 0 {
        return Err(Error::invalid("sample_count must be at least 1"));
    }
    let points = sampling::box_sample(&s.domain, sample_count, seed);
    let mut min_rank = usize::MAX;
    let mut max_rank = 0;
    let mut min_norm = f64::INFINITY;
    let mut first_violation = None;
    for p in &points {
        let a = s.frame_matrix(p);
        let rank = linalg::numerical_rank(&a, RANK_TOL);
        let biggest = (0..s.m).map(|i| a.column(i).norm()).fold(0.0, f64::max);
        min_rank = min_rank.min(rank);
        max_rank = max_rank.max(rank);
        min_norm = min_norm.min(biggest);
        let ok = match s.regularity {
            Regularity::C11 => rank == s.m,
            Regularity::C0 => biggest > 0.0,
        };
        if !ok && first_violation.is_none() {
            first_violation = Some(ChartPoint(p.clone()));
        }
    }
    Ok(ValidationReport {
        structure: s.name.clone(),
        regularity: s.regularity,
        samples: points.len(),
        min_rank,
        max_rank,
        min_max_field_norm: min_norm,
        passed: first_violation.is_none(),
        first_violation,
    })
}
