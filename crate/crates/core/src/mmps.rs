//! Max-min-plus-scaling functions in Kripfganz form,
//! `f(z) = max_p phi+_p(z) - max_q phi-_q(z)` with affine `phi`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MmpsError {
    #[error("parameter vector has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("an MMPS function needs at least one plus and one minus term")]
    EmptyTerms,
    #[error("term dimension mismatch: expected n={n}, m={m}")]
    DimensionMismatch { n: usize, m: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineTerm {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub h: f64,
}

impl AffineTerm {
    pub fn new(a: Vec<f64>, b: Vec<f64>, h: f64) -> Self {
        Self { a, b, h }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        let (x, u) = z.split_at(self.a.len());
        let ax: f64 = self.a.iter().zip(x).map(|(w, v)| w * v).sum();
        let bu: f64 = self.b.iter().zip(u).map(|(w, v)| w * v).sum();
        ax + bu + self.h
    }

    /// `(a..., b..., h)`.
    pub fn packed(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.a.len() + self.b.len() + 1);
        out.extend_from_slice(&self.a);
        out.extend_from_slice(&self.b);
        out.push(self.h);
        out
    }

    fn from_packed(row: &[f64], n: usize) -> Self {
        let d = row.len() - 1;
        Self {
            a: row[..n].to_vec(),
            b: row[n..d].to_vec(),
            h: row[d],
        }
    }
}

/// `w . z + h` for a packed row `(w..., h)`.
#[inline]
pub fn affine(row: &[f64], z: &[f64]) -> f64 {
    let d = z.len();
    row[..d].iter().zip(z).fold(row[d], |acc, (w, v)| acc + w * v)
}

/// Flat parameter layout of an MMPS function: all plus terms, then all minus
/// terms, each packed as `(a..., b..., h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmpsLayout {
    pub dim: usize,
    pub p_plus: usize,
    pub p_minus: usize,
}

impl MmpsLayout {
    pub fn new(dim: usize, p_plus: usize, p_minus: usize) -> Self {
        Self { dim, p_plus, p_minus }
    }

    pub fn stride(&self) -> usize {
        self.dim + 1
    }

    pub fn n_params(&self) -> usize {
        (self.p_plus + self.p_minus) * self.stride()
    }

    fn argmax(&self, theta: &[f64], z: &[f64], first: usize, count: usize) -> (usize, f64) {
        let s = self.stride();
        let mut best = (0, f64::NEG_INFINITY);
        for k in 0..count {
            let off = (first + k) * s;
            let v = affine(&theta[off..off + s], z);
            if v > best.1 || k == 0 {
                best = (k, v);
            }
        }
        best
    }

    /// `(value, p*, q*)` with ties resolved to the lowest index.
    pub fn eval_active(&self, theta: &[f64], z: &[f64]) -> (f64, usize, usize) {
        let (p, vp) = self.argmax(theta, z, 0, self.p_plus);
        let (q, vq) = self.argmax(theta, z, self.p_plus, self.p_minus);
        (vp - vq, p, q)
    }

    pub fn eval(&self, theta: &[f64], z: &[f64]) -> f64 {
        self.eval_active(theta, z).0
    }

    /// Offset of plus term `p` in the flat vector.
    pub fn plus_offset(&self, p: usize) -> usize {
        p * self.stride()
    }

    pub fn minus_offset(&self, q: usize) -> usize {
        (self.p_plus + q) * self.stride()
    }

    /// Appends `scale * d f / d theta` at the given active pair to `out`.
    pub fn push_gradient(&self, z: &[f64], p: usize, q: usize, scale: f64, out: &mut Vec<(usize, f64)>) {
        let (op, oq) = (self.plus_offset(p), self.minus_offset(q));
        let d = self.dim;
        out.extend(z.iter().enumerate().map(|(k, v)| (op + k, scale * v)));
        out.push((op + d, scale));
        out.extend(z.iter().enumerate().map(|(k, v)| (oq + k, -scale * v)));
        out.push((oq + d, -scale));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmpsFunction {
    n: usize,
    m: usize,
    plus: Vec<AffineTerm>,
    minus: Vec<AffineTerm>,
}

impl MmpsFunction {
    pub fn new(
        n: usize,
        m: usize,
        plus: Vec<AffineTerm>,
        minus: Vec<AffineTerm>,
    ) -> Result<Self, MmpsError> {
        if plus.is_empty() || minus.is_empty() {
            return Err(MmpsError::EmptyTerms);
        }
        if plus.iter().chain(&minus).any(|t| t.a.len() != n || t.b.len() != m) {
            return Err(MmpsError::DimensionMismatch { n, m });
        }
        Ok(Self { n, m, plus, minus })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn plus_terms(&self) -> &[AffineTerm] {
        &self.plus
    }

    pub fn minus_terms(&self) -> &[AffineTerm] {
        &self.minus
    }

    pub fn layout(&self) -> MmpsLayout {
        MmpsLayout::new(self.n + self.m, self.plus.len(), self.minus.len())
    }

    pub fn n_params(&self) -> usize {
        self.layout().n_params()
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        let (p, q) = self.active_indices(z);
        self.plus[p].eval(z) - self.minus[q].eval(z)
    }

    /// Maximizing plus and minus term, lowest index on ties.
    pub fn active_indices(&self, z: &[f64]) -> (usize, usize) {
        let pick = |terms: &[AffineTerm]| {
            let mut best = (0, terms[0].eval(z));
            for (k, t) in terms.iter().enumerate().skip(1) {
                let v = t.eval(z);
                if v > best.1 {
                    best = (k, v);
                }
            }
            best.0
        };
        (pick(&self.plus), pick(&self.minus))
    }

    /// Sparse gradient with respect to the flat parameter vector.
    pub fn gradient_params(&self, z: &[f64]) -> Vec<(usize, f64)> {
        let (p, q) = self.active_indices(z);
        let mut out = Vec::with_capacity(2 * (z.len() + 1));
        self.layout().push_gradient(z, p, q, 1.0, &mut out);
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.plus.iter().chain(&self.minus).flat_map(|t| t.packed()).collect()
    }

    pub fn unflatten(
        n: usize,
        m: usize,
        p_plus: usize,
        p_minus: usize,
        theta: &[f64],
    ) -> Result<Self, MmpsError> {
        if p_plus == 0 || p_minus == 0 {
            return Err(MmpsError::EmptyTerms);
        }
        let layout = MmpsLayout::new(n + m, p_plus, p_minus);
        if theta.len() != layout.n_params() {
            return Err(MmpsError::LengthMismatch {
                expected: layout.n_params(),
                got: theta.len(),
            });
        }
        let mut terms = theta.chunks_exact(layout.stride()).map(|r| AffineTerm::from_packed(r, n));
        let plus = terms.by_ref().take(p_plus).collect();
        let minus = terms.collect();
        Self::new(n, m, plus, minus)
    }
}

/// One MMPS function per output component.
#[derive(Debug, Clone, PartialEq)]
pub struct MmpsVectorFunction {
    pub n: usize,
    pub m: usize,
    pub components: Vec<MmpsFunction>,
}

impl MmpsVectorFunction {
    pub fn new(components: Vec<MmpsFunction>) -> Result<Self, MmpsError> {
        let first = components.first().ok_or(MmpsError::EmptyTerms)?;
        let (n, m) = (first.n, first.m);
        if components.iter().any(|c| c.n != n || c.m != m) {
            return Err(MmpsError::DimensionMismatch { n, m });
        }
        Ok(Self { n, m, components })
    }

    pub fn eval(&self, z: &[f64]) -> Vec<f64> {
        self.components.iter().map(|c| c.eval(z)).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ComponentJson {
    plus: Vec<Vec<f64>>,
    minus: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct VectorJson {
    n: usize,
    m: usize,
    components: Vec<ComponentJson>,
}

impl From<&MmpsFunction> for ComponentJson {
    fn from(f: &MmpsFunction) -> Self {
        Self {
            plus: f.plus.iter().map(AffineTerm::packed).collect(),
            minus: f.minus.iter().map(AffineTerm::packed).collect(),
        }
    }
}

fn component_from_json(n: usize, m: usize, c: ComponentJson) -> Result<MmpsFunction, MmpsError> {
    let unpack = |rows: Vec<Vec<f64>>| -> Result<Vec<AffineTerm>, MmpsError> {
        rows.iter()
            .map(|r| {
                if r.len() == n + m + 1 {
                    Ok(AffineTerm::from_packed(r, n))
                } else {
                    Err(MmpsError::DimensionMismatch { n, m })
                }
            })
            .collect()
    };
    MmpsFunction::new(n, m, unpack(c.plus)?, unpack(c.minus)?)
}

impl Serialize for MmpsVectorFunction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        VectorJson {
            n: self.n,
            m: self.m,
            components: self.components.iter().map(ComponentJson::from).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MmpsVectorFunction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = VectorJson::deserialize(d)?;
        let comps = raw
            .components
            .into_iter()
            .map(|c| component_from_json(raw.n, raw.m, c))
            .collect::<Result<Vec<_>, _>>()
            .map_err(serde::de::Error::custom)?;
        MmpsVectorFunction::new(comps).map_err(serde::de::Error::custom)
    }
}

/// Single MMPS function in the `{"n", "m", "plus", "minus"}` shape.
impl Serialize for MmpsFunction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Single<'a> {
            n: usize,
            m: usize,
            #[serde(flatten)]
            body: &'a ComponentJson,
        }
        Single {
            n: self.n,
            m: self.m,
            body: &ComponentJson::from(self),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MmpsFunction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Single {
            n: usize,
            m: usize,
            plus: Vec<Vec<f64>>,
            minus: Vec<Vec<f64>>,
        }
        let raw = Single::deserialize(d)?;
        component_from_json(
            raw.n,
            raw.m,
            ComponentJson {
                plus: raw.plus,
                minus: raw.minus,
            },
        )
        .map_err(serde::de::Error::custom)
    }
}
