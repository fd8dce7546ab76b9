//! Minimal arena-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records scalar operations as they execute; [`Tape::backward`]
//! replays them in reverse to accumulate gradients. Heavy inner products are
//! recorded as single fused nodes, and the 3x3 SVD is a primitive with an
//! analytic vector-Jacobian product rather than a traced decomposition.
//!
//! All numeric routines in this crate are written against [`Real`] and can
//! therefore run either on plain scalars (no recording) or on [`Var`]s from
//! a tape.

use crate::error::{Error, Result};
use crate::mat3::Mat3;
use crate::scalar::{Real, Scalar, Svd3Parts};
use std::cell::RefCell;

const CONST_IDX: u32 = u32::MAX;

/// Gap threshold on squared singular values below which the strict SVD
/// differential is refused (and below which the clamped mode saturates).
pub const SVD_GAP_THRESHOLD: f64 = 1e-8;

/// How the SVD vector-Jacobian product treats small singular-value gaps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SvdGradMode {
    /// Error on gaps below [`SVD_GAP_THRESHOLD`]; exact otherwise.
    #[default]
    Strict,
    /// Tikhonov-regularized cross terms `g / (g^2 + delta^2)`: identical to
    /// the exact differential for healthy gaps, bounded near degeneracy.
    /// Used by the training loop, which must survive the tightly clustered
    /// spectra of freshly initialized models.
    Clamped,
}

#[derive(Clone, Copy)]
enum Node<S> {
    Leaf,
    Unary { p: u32, d: S },
    Binary { p0: u32, p1: u32, d0: S, d1: S },
    /// Fused dot product; `a` and `b` are offsets into the index arena.
    Dot { a: u32, b: u32, len: u32 },
    /// Dot against constants; `c` is an offset into the constant arena.
    DotConst { a: u32, c: u32, len: u32 },
    Sum { a: u32, len: u32 },
    /// Placeholder owning an SVD vector-Jacobian product (side table).
    SvdAnchor,
    /// One scalar output of an SVD anchor.
    SvdOut,
}

struct SvdHook<S> {
    anchor: u32,
    m_idx: [u32; 9],
    /// Output node ids: u row-major (9), sigma (3), v row-major (9).
    out_base: u32,
    u: Mat3<S>,
    sigma: [S; 3],
    v: Mat3<S>,
    mode: SvdGradMode,
}

struct Inner<S> {
    nodes: Vec<Node<S>>,
    values: Vec<S>,
    idx_arena: Vec<u32>,
    const_arena: Vec<S>,
    svd_hooks: Vec<SvdHook<S>>,
}

/// Records a scalar computation for reverse-mode differentiation.
pub struct Tape<S: Scalar> {
    inner: RefCell<Inner<S>>,
    svd_mode: std::cell::Cell<SvdGradMode>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                values: Vec::new(),
                idx_arena: Vec::new(),
                const_arena: Vec::new(),
                svd_hooks: Vec::new(),
            }),
            svd_mode: std::cell::Cell::new(SvdGradMode::Strict),
        }
    }

    /// Selects how SVD differentials treat near-degenerate spectra.
    pub fn set_svd_mode(&self, mode: SvdGradMode) {
        self.svd_mode.set(mode);
    }

    /// Drops all recorded nodes but keeps allocations for reuse.
    pub fn clear(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.values.clear();
        inner.idx_arena.clear();
        inner.const_arena.clear();
        inner.svd_hooks.clear();
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<S>, value: S) -> u32 {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len() as u32;
        inner.nodes.push(node);
        inner.values.push(value);
        idx
    }

    /// A tracked input variable.
    pub fn leaf(&self, value: S) -> Var<'_, S> {
        let idx = self.push(Node::Leaf, value);
        Var {
            tape: self,
            idx,
            value,
        }
    }

    /// An untracked constant; creates no node.
    pub fn constant(&self, value: S) -> Var<'_, S> {
        Var {
            tape: self,
            idx: CONST_IDX,
            value,
        }
    }

    /// Ensures a variable has a node index (materializes constants).
    fn materialize(&self, v: Var<'_, S>) -> u32 {
        if v.idx == CONST_IDX {
            self.push(Node::Leaf, v.value)
        } else {
            v.idx
        }
    }

    /// Gradients of `root` with respect to every tracked node.
    pub fn backward(&self, root: Var<'_, S>) -> Gradients<S> {
        self.backward_seeded(&[(root, S::one())])
    }

    /// Gradients of the weighted sum of the seeded variables.
    pub fn backward_seeded(&self, seeds: &[(Var<'_, S>, S)]) -> Gradients<S> {
        let inner = self.inner.borrow();
        let n = inner.nodes.len();
        let mut g = vec![S::zero(); n];
        for (var, s) in seeds {
            if var.idx != CONST_IDX {
                g[var.idx as usize] = g[var.idx as usize] + *s;
            }
        }

        let mut next_hook = inner.svd_hooks.len();
        for i in (0..n).rev() {
            while next_hook > 0 && inner.svd_hooks[next_hook - 1].anchor == i as u32 {
                next_hook -= 1;
                apply_svd_hook(&inner.svd_hooks[next_hook], &mut g);
            }
            let gi = g[i];
            if gi == S::zero() {
                continue;
            }
            match inner.nodes[i] {
                Node::Leaf | Node::SvdAnchor | Node::SvdOut => {}
                Node::Unary { p, d } => {
                    g[p as usize] = g[p as usize] + d * gi;
                }
                Node::Binary { p0, p1, d0, d1 } => {
                    g[p0 as usize] = g[p0 as usize] + d0 * gi;
                    g[p1 as usize] = g[p1 as usize] + d1 * gi;
                }
                Node::Dot { a, b, len } => {
                    let (a, b, len) = (a as usize, b as usize, len as usize);
                    for k in 0..len {
                        let ia = inner.idx_arena[a + k] as usize;
                        let ib = inner.idx_arena[b + k] as usize;
                        let va = inner.values[ia];
                        let vb = inner.values[ib];
                        g[ia] = g[ia] + vb * gi;
                        g[ib] = g[ib] + va * gi;
                    }
                }
                Node::DotConst { a, c, len } => {
                    let (a, c, len) = (a as usize, c as usize, len as usize);
                    for k in 0..len {
                        let ia = inner.idx_arena[a + k] as usize;
                        g[ia] = g[ia] + inner.const_arena[c + k] * gi;
                    }
                }
                Node::Sum { a, len } => {
                    let (a, len) = (a as usize, len as usize);
                    for k in 0..len {
                        let ia = inner.idx_arena[a + k] as usize;
                        g[ia] = g[ia] + gi;
                    }
                }
            }
        }
        Gradients { g }
    }
}

/// Reverse-mode SVD differential for a square 3x3 factorization
/// `M = U diag(s) V^T` with cross terms `1 / (s_j^2 - s_i^2)`.
fn apply_svd_hook<S: Scalar>(hook: &SvdHook<S>, g: &mut [S]) {
    use crate::mat3::{m_mul, m_transpose};
    let base = hook.out_base as usize;
    let mut u_bar = [[S::zero(); 3]; 3];
    let mut v_bar = [[S::zero(); 3]; 3];
    let mut s_bar = [S::zero(); 3];
    for r in 0..3 {
        for c in 0..3 {
            u_bar[r][c] = g[base + 3 * r + c];
            v_bar[r][c] = g[base + 12 + 3 * r + c];
        }
    }
    for k in 0..3 {
        s_bar[k] = g[base + 9 + k];
    }

    let s = hook.sigma;
    let mut f = [[S::zero(); 3]; 3];
    let delta_sq = S::of(SVD_GAP_THRESHOLD) * S::of(SVD_GAP_THRESHOLD);
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                let gap = s[j] * s[j] - s[i] * s[i];
                f[i][j] = match hook.mode {
                    SvdGradMode::Strict => S::one() / gap,
                    SvdGradMode::Clamped => gap / (gap * gap + delta_sq),
                };
            }
        }
    }

    let a = m_mul(&m_transpose(&hook.u), &u_bar);
    let b = m_mul(&m_transpose(&hook.v), &v_bar);
    let mut innerm = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let skew_u = f[i][j] * (a[i][j] - a[j][i]);
            let skew_v = f[i][j] * (b[i][j] - b[j][i]);
            innerm[i][j] = skew_u * s[j] + s[i] * skew_v;
        }
        innerm[i][i] = innerm[i][i] + s_bar[i];
    }
    let m_bar = m_mul(&m_mul(&hook.u, &innerm), &m_transpose(&hook.v));
    for r in 0..3 {
        for c in 0..3 {
            let idx = hook.m_idx[3 * r + c] as usize;
            g[idx] = g[idx] + m_bar[r][c];
        }
    }
}

/// Gradients resulting from a backward pass.
pub struct Gradients<S: Scalar> {
    g: Vec<S>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to `v`; zero for constants.
    pub fn get(&self, v: Var<'_, S>) -> S {
        if v.idx == CONST_IDX {
            S::zero()
        } else {
            self.g[v.idx as usize]
        }
    }
}

/// A scalar tracked on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    idx: u32,
    value: S,
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn val(self) -> S {
        self.value
    }

    fn unary(self, value: S, d: S) -> Self {
        if self.idx == CONST_IDX {
            return self.tape.constant(value);
        }
        let idx = self.tape.push(Node::Unary { p: self.idx, d }, value);
        Var {
            tape: self.tape,
            idx,
            value,
        }
    }

    fn binary(self, rhs: Self, value: S, d0: S, d1: S) -> Self {
        debug_assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
        let node = match (self.idx, rhs.idx) {
            (CONST_IDX, CONST_IDX) => return self.tape.constant(value),
            (CONST_IDX, p) => Node::Unary { p, d: d1 },
            (p, CONST_IDX) => Node::Unary { p, d: d0 },
            (p0, p1) => Node::Binary { p0, p1, d0, d1 },
        };
        let idx = self.tape.push(node, value);
        Var {
            tape: self.tape,
            idx,
            value,
        }
    }
}

impl<'t, S: Scalar> std::ops::Add for Var<'t, S> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.value + rhs.value, S::one(), S::one())
    }
}

impl<'t, S: Scalar> std::ops::Sub for Var<'t, S> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.value - rhs.value, S::one(), -S::one())
    }
}

impl<'t, S: Scalar> std::ops::Mul for Var<'t, S> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t, S: Scalar> std::ops::Div for Var<'t, S> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let value = self.value / rhs.value;
        let d0 = S::one() / rhs.value;
        let d1 = -self.value / (rhs.value * rhs.value);
        self.binary(rhs, value, d0, d1)
    }
}

impl<'t, S: Scalar> std::ops::Neg for Var<'t, S> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.value, -S::one())
    }
}

impl<'t, S: Scalar> Real for Var<'t, S> {
    type Repr = S;
    type Ctx = &'t Tape<S>;

    fn lift(ctx: Self::Ctx, value: S) -> Self {
        ctx.constant(value)
    }

    fn value(self) -> S {
        self.value
    }

    fn sqrt(self) -> Self {
        let v = self.value.sqrt();
        self.unary(v, S::one() / (S::of(2.0) * v))
    }

    fn exp(self) -> Self {
        let v = self.value.exp();
        self.unary(v, v)
    }

    fn ln(self) -> Self {
        self.unary(self.value.ln(), S::one() / self.value)
    }

    fn tanh(self) -> Self {
        let v = self.value.tanh();
        self.unary(v, S::one() - v * v)
    }

    fn dot(ctx: Self::Ctx, a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        let mut value = S::zero();
        for (x, y) in a.iter().zip(b) {
            value = value + x.value * y.value;
        }
        if a.iter().chain(b).all(|v| v.idx == CONST_IDX) {
            return ctx.constant(value);
        }
        let (a_off, b_off);
        {
            let a_idx: Vec<u32> = a.iter().map(|v| ctx.materialize(*v)).collect();
            let b_idx: Vec<u32> = b.iter().map(|v| ctx.materialize(*v)).collect();
            let mut inner = ctx.inner.borrow_mut();
            a_off = inner.idx_arena.len() as u32;
            inner.idx_arena.extend_from_slice(&a_idx);
            b_off = inner.idx_arena.len() as u32;
            inner.idx_arena.extend_from_slice(&b_idx);
        }
        let idx = ctx.push(
            Node::Dot {
                a: a_off,
                b: b_off,
                len: a.len() as u32,
            },
            value,
        );
        Var {
            tape: ctx,
            idx,
            value,
        }
    }

    fn dot_const(ctx: Self::Ctx, a: &[Self], coeff: &[S]) -> Self {
        debug_assert_eq!(a.len(), coeff.len());
        let mut value = S::zero();
        for (x, c) in a.iter().zip(coeff) {
            value = value + x.value * *c;
        }
        if a.iter().all(|v| v.idx == CONST_IDX) {
            return ctx.constant(value);
        }
        let (a_off, c_off);
        {
            let a_idx: Vec<u32> = a.iter().map(|v| ctx.materialize(*v)).collect();
            let mut inner = ctx.inner.borrow_mut();
            a_off = inner.idx_arena.len() as u32;
            inner.idx_arena.extend_from_slice(&a_idx);
            c_off = inner.const_arena.len() as u32;
            inner.const_arena.extend_from_slice(coeff);
        }
        let idx = ctx.push(
            Node::DotConst {
                a: a_off,
                c: c_off,
                len: a.len() as u32,
            },
            value,
        );
        Var {
            tape: ctx,
            idx,
            value,
        }
    }

    fn sum(ctx: Self::Ctx, xs: &[Self]) -> Self {
        let mut value = S::zero();
        for x in xs {
            value = value + x.value;
        }
        if xs.iter().all(|v| v.idx == CONST_IDX) {
            return ctx.constant(value);
        }
        let a_off;
        {
            let idxs: Vec<u32> = xs.iter().map(|v| ctx.materialize(*v)).collect();
            let mut inner = ctx.inner.borrow_mut();
            a_off = inner.idx_arena.len() as u32;
            inner.idx_arena.extend_from_slice(&idxs);
        }
        let idx = ctx.push(
            Node::Sum {
                a: a_off,
                len: xs.len() as u32,
            },
            value,
        );
        Var {
            tape: ctx,
            idx,
            value,
        }
    }

    fn svd3(ctx: Self::Ctx, m: &Mat3<Self>) -> Result<Svd3Parts<Self>> {
        let mut mv = [[S::zero(); 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                mv[r][c] = m[r][c].value;
            }
        }
        let parts = crate::mat3::svd3_values(&mv);

        if m.iter().flatten().all(|v| v.idx == CONST_IDX) {
            let wrap = |x: S| ctx.constant(x);
            return Ok(Svd3Parts {
                u: parts.u.map(|row| row.map(wrap)),
                sigma: parts.sigma.map(wrap),
                v: parts.v.map(|row| row.map(wrap)),
            });
        }

        // The differential has 1/(s_j^2 - s_i^2) cross terms.
        let mode = ctx.svd_mode.get();
        if mode == SvdGradMode::Strict {
            let threshold = S::of(SVD_GAP_THRESHOLD);
            for i in 0..3 {
                for j in (i + 1)..3 {
                    let gap =
                        (parts.sigma[i] * parts.sigma[i] - parts.sigma[j] * parts.sigma[j]).abs();
                    if gap <= threshold {
                        return Err(Error::NearDegenerateSpectrum {
                            gap: gap.to_f64_lossy(),
                        });
                    }
                }
            }
        }

        let mut m_idx = [0u32; 9];
        for r in 0..3 {
            for c in 0..3 {
                m_idx[3 * r + c] = ctx.materialize(m[r][c]);
            }
        }
        let anchor = ctx.push(Node::SvdAnchor, S::zero());
        let out = |value: S| {
            let idx = ctx.push(Node::SvdOut, value);
            Var {
                tape: ctx,
                idx,
                value,
            }
        };
        let mut u = [[ctx.constant(S::zero()); 3]; 3];
        let mut v = [[ctx.constant(S::zero()); 3]; 3];
        let mut sigma = [ctx.constant(S::zero()); 3];
        for r in 0..3 {
            for c in 0..3 {
                u[r][c] = out(parts.u[r][c]);
            }
        }
        for k in 0..3 {
            sigma[k] = out(parts.sigma[k]);
        }
        for r in 0..3 {
            for c in 0..3 {
                v[r][c] = out(parts.v[r][c]);
            }
        }
        let out_base = anchor + 1;
        ctx.inner.borrow_mut().svd_hooks.push(SvdHook {
            anchor,
            m_idx,
            out_base,
            u: parts.u,
            sigma: parts.sigma,
            v: parts.v,
            mode,
        });
        Ok(Svd3Parts { u, sigma, v })
    }
}
