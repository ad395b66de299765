//! Tape-based reverse-mode differentiation over a fixed op vocabulary.
//!
//! Every value is a 2-D block (`rows × cols`); vectors are `1 × n` and
//! scalars `1 × 1`. Parameter reads record a [`ParamKey`] so that
//! [`Tape::backward`] can route gradients back to their store.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{axpy, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{ParamId, ParamKey, ParamStore, Real};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Param(ParamKey),
    Gather {
        key: ParamKey,
        table_rows: usize,
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        q: Vec<F>,
        k: Vec<F>,
        probs: Vec<F>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Concat(Vec<Var>),
    Sum(Vec<Var>),
    SumSquares(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Cosine {
        a: Var,
        b: Var,
        na: F,
        nb: F,
        cos: F,
    },
    Bce {
        p: Var,
        y: F,
        clamped: bool,
    },
}

struct Node<F> {
    rows: usize,
    cols: usize,
    value: Vec<F>,
    op: Op<F>,
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients<F> {
    entries: BTreeMap<ParamKey, Vec<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, key: ParamKey) -> Option<&[F]> {
        self.entries.get(&key).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Vec<F>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn slot(&mut self, key: ParamKey, len: usize) -> &mut Vec<F> {
        self.entries.entry(key).or_insert_with(|| vec![F::zero(); len])
    }
}

/// Records operations and replays them backwards.
pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamKey, Var>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> F {
        let n = &self.nodes[v.0];
        debug_assert_eq!(n.value.len(), 1);
        n.value[0]
    }

    pub fn row(&self, v: Var, i: usize) -> &[F] {
        let n = &self.nodes[v.0];
        &n.value[i * n.cols..(i + 1) * n.cols]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<F>, op: Op<F>) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<F>) -> Var {
        assert_eq!(rows * cols, value.len(), "constant shape mismatch");
        self.push(rows, cols, value, Op::Leaf)
    }

    pub fn constant_f32(&mut self, rows: usize, cols: usize, value: &[f32]) -> Var {
        let v = value.iter().map(|&x| F::from_f32(x)).collect();
        self.constant(rows, cols, v)
    }

    /// Leaf for a stored parameter. Repeated requests on one tape share a
    /// node, so weights are copied once per tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = store.key(id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let p = store.get(id);
        let (rows, cols) = p.value.dims2();
        let v = p.value.data().iter().map(|&x| F::from_f32(x)).collect();
        let var = self.push(rows, cols, v, Op::Param(key));
        self.params.insert(key, var);
        var
    }

    /// Embedding lookup: rows `ids` of a `(table_rows × cols)` parameter.
    pub fn gather(&mut self, store: &ParamStore, id: ParamId, ids: &[u32]) -> Var {
        let p = store.get(id);
        let (table_rows, cols) = p.value.dims2();
        let mut v = Vec::with_capacity(ids.len() * cols);
        for &t in ids {
            let t = t as usize;
            assert!(t < table_rows, "gather index {t} out of range {table_rows}");
            v.extend(p.value.row(t).iter().map(|&x| F::from_f32(x)));
        }
        let ids = ids.iter().map(|&t| t as usize).collect();
        self.push(
            ids_len(&ids),
            cols,
            v,
            Op::Gather {
                key: store.key(id),
                table_rows,
                ids,
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![F::zero(); m * n];
        matmul_acc(&mut out, self.value(a), self.value(b), m, k, n);
        self.push(m, n, out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = vec![F::zero(); m * n];
        matmul_nt_acc(&mut out, self.value(a), self.value(b), m, k, n);
        self.push(m, n, out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.push(r, c, out, Op::Add(a, b))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(bias), (1, c), "add_row bias shape");
        let b = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, &x) in row.iter_mut().zip(b) {
                *o = *o + x;
            }
        }
        self.push(r, c, out, Op::AddRow(a, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        self.push(r, c, out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        self.push(r, c, out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push(r, c, out, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        self.push(r, c, out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(r, c, out, Op::Sigmoid(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_row(row);
        }
        self.push(r, c, out, Op::Softmax(a))
    }

    /// Row-wise layer normalisation with `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gain), (1, c));
        assert_eq!(self.shape(bias), (1, c));
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let eps = F::from_f64(LN_EPS);
        let inv_c = F::one() / F::from_f64(c as f64);
        let mut xhat = vec![F::zero(); r * c];
        let mut rstd = vec![F::zero(); r];
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<F>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_c;
            let rs = F::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Causal multi-head self-attention with rotary position encoding.
    ///
    /// `qkv` is `T × 3d` laid out as `[q | k | v]`; the result is `T × d`.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Var {
        let (t_len, c3) = self.shape(qkv);
        assert_eq!(c3 % 3, 0, "qkv width must be 3d");
        let d = c3 / 3;
        assert_eq!(d % heads, 0, "d must divide into heads");
        let dh = d / heads;
        assert_eq!(dh % 2, 0, "head dim must be even for rotary encoding");
        let (cos, sin) = rope_tables::<F>(t_len, dh);
        let src = self.value(qkv);
        // (heads, T, dh) layouts
        let mut q = vec![F::zero(); heads * t_len * dh];
        let mut k = vec![F::zero(); heads * t_len * dh];
        let mut v = vec![F::zero(); heads * t_len * dh];
        for t in 0..t_len {
            let row = &src[t * c3..(t + 1) * c3];
            for h in 0..heads {
                let dst = (h * t_len + t) * dh;
                rope_apply(&mut q[dst..dst + dh], &row[h * dh..(h + 1) * dh], &cos, &sin, t);
                rope_apply(&mut k[dst..dst + dh], &row[d + h * dh..d + (h + 1) * dh], &cos, &sin, t);
                v[dst..dst + dh].copy_from_slice(&row[2 * d + h * dh..2 * d + (h + 1) * dh]);
            }
        }
        let scale = F::one() / F::from_f64(dh as f64).sqrt();
        let mut probs = vec![F::zero(); heads * t_len * t_len];
        let mut out = vec![F::zero(); t_len * d];
        for h in 0..heads {
            let qh = &q[h * t_len * dh..(h + 1) * t_len * dh];
            let kh = &k[h * t_len * dh..(h + 1) * t_len * dh];
            let vh = &v[h * t_len * dh..(h + 1) * t_len * dh];
            for t in 0..t_len {
                let p = &mut probs[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                let qt = &qh[t * dh..(t + 1) * dh];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(qt, &kh[j * dh..(j + 1) * dh]) * scale;
                }
                softmax_row(p);
                let o = &mut out[t * d + h * dh..t * d + (h + 1) * dh];
                for (j, &pj) in p.iter().enumerate() {
                    axpy(o, pj, &vh[j * dh..(j + 1) * dh]);
                }
            }
        }
        self.push(t_len, d, out, Op::Attention { qkv, heads, q, k, probs })
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            assert!(i < r, "row {i} out of range {r}");
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        self.push(
            rows.len(),
            c,
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Concatenates `1 × n_i` blocks into one row.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(self.shape(p).0, 1, "concat expects single rows");
            out.extend_from_slice(self.value(p));
        }
        let n = out.len();
        self.push(1, n, out, Op::Concat(parts.to_vec()))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut s = F::zero();
        for &p in parts {
            assert_eq!(self.shape(p), (1, 1), "sum expects scalars");
            s = s + self.value(p)[0];
        }
        self.push(1, 1, vec![s], Op::Sum(parts.to_vec()))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|&x| x * x).sum::<F>();
        self.push(1, 1, vec![s], Op::SumSquares(a))
    }

    /// Mean cross-entropy of each logits row against its target index.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (r, c) = self.shape(logits);
        assert_eq!(r, targets.len(), "one target per logits row");
        assert!(r > 0, "cross entropy over zero rows");
        let mut probs = self.value(logits).to_vec();
        let mut loss = F::zero();
        for (i, row) in probs.chunks_exact_mut(c).enumerate() {
            let t = targets[i];
            assert!(t < c, "target {t} out of range {c}");
            let m = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - m).exp()).sum::<F>().ln() + m;
            loss = loss + (lse - row[t]);
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = loss / F::from_f64(r as f64);
        self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(Error::DimensionMismatch {
                expected: av.len(),
                found: bv.len(),
            });
        }
        let na = dot(av, av).sqrt();
        let nb = dot(bv, bv).sqrt();
        if na == F::zero() || nb == F::zero() {
            return Err(Error::Domain("cosine similarity of an all-zero vector".into()));
        }
        let cos = dot(av, bv) / (na * nb);
        Ok(self.push(1, 1, vec![cos], Op::Cosine { a, b, na, nb, cos }))
    }

    /// Binary cross-entropy of a probability node against label `y`, with the
    /// probability clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, y: F, eps: F) -> Var {
        assert_eq!(self.shape(p), (1, 1), "bce expects a scalar probability");
        let raw = self.value(p)[0];
        let lo = eps;
        let hi = F::one() - eps;
        let clamped = raw < lo || raw > hi;
        let pc = raw.max(lo).min(hi);
        let loss = -(y * pc.ln() + (F::one() - y) * (F::one() - pc).ln());
        self.push(1, 1, vec![loss], Op::Bce { p, y, clamped })
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        if self.shape(root) != (1, 1) {
            let (r, c) = self.shape(root);
            return Err(Error::invalid(format!("backward root must be scalar, got {r}×{c}")));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![F::one()]);
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(key) => {
                    let slot = out.slot(*key, g.len());
                    for (s, &x) in slot.iter_mut().zip(&g) {
                        *s = *s + x;
                    }
                }
                Op::Gather { key, table_rows, ids } => {
                    let c = node.cols;
                    let slot = out.slot(*key, table_rows * c);
                    for (r, &t) in ids.iter().enumerate() {
                        axpy(&mut slot[t * c..(t + 1) * c], F::one(), &g[r * c..(r + 1) * c]);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = node.cols;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = acc(&mut grads, *a, m * k);
                    matmul_nt_acc(ga, &g, bv, m, n, k);
                    let gb = acc(&mut grads, *b, k * n);
                    matmul_tn_acc(gb, av, &g, m, k, n);
                }
                Op::MatMulNT(a, b) => {
                    let (m, k) = self.shape(*a);
                    let n = node.cols;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = acc(&mut grads, *a, m * k);
                    matmul_acc(ga, &g, bv, m, n, k);
                    let gb = acc(&mut grads, *b, n * k);
                    matmul_tn_acc(gb, &g, av, m, n, k);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::AddRow(a, bias) => {
                    let c = node.cols;
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    let gb = acc(&mut grads, *bias, c);
                    for row in g.chunks_exact(c) {
                        add_into(gb, row);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = acc(&mut grads, *a, g.len());
                    for ((s, &gi), &y) in ga.iter_mut().zip(&g).zip(bv) {
                        *s = *s + gi * y;
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for ((s, &gi), &x) in gb.iter_mut().zip(&g).zip(av) {
                        *s = *s + gi * x;
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut grads, *a, g.len());
                    axpy(ga, *s, &g);
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let ga = acc(&mut grads, *a, g.len());
                    for ((s, &gi), &x) in ga.iter_mut().zip(&g).zip(av) {
                        *s = *s + gi * gelu_grad(x);
                    }
                }
                Op::Tanh(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for ((s, &gi), &y) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *s = *s + gi * (F::one() - y * y);
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for ((s, &gi), &y) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *s = *s + gi * y * (F::one() - y);
                    }
                }
                Op::Softmax(a) => {
                    let c = node.cols;
                    let ga = acc(&mut grads, *a, g.len());
                    for ((gr, yr), sr) in g.chunks_exact(c).zip(node.value.chunks_exact(c)).zip(ga.chunks_exact_mut(c)) {
                        let inner = dot(gr, yr);
                        for j in 0..c {
                            sr[j] = sr[j] + yr[j] * (gr[j] - inner);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (r, c) = (node.rows, node.cols);
                    let gv = self.value(*gain).to_vec();
                    let inv_c = F::one() / F::from_f64(c as f64);
                    {
                        let gg = acc(&mut grads, *gain, c);
                        for i in 0..r {
                            for j in 0..c {
                                gg[j] = gg[j] + g[i * c + j] * xhat[i * c + j];
                            }
                        }
                    }
                    {
                        let gb = acc(&mut grads, *bias, c);
                        for row in g.chunks_exact(c) {
                            add_into(gb, row);
                        }
                    }
                    let gx = acc(&mut grads, *x, r * c);
                    let mut dxhat = vec![F::zero(); c];
                    for i in 0..r {
                        let xh = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gv[j];
                        }
                        let m1 = dxhat.iter().copied().sum::<F>() * inv_c;
                        let m2 = dot(&dxhat, xh) * inv_c;
                        for j in 0..c {
                            gx[i * c + j] = gx[i * c + j] + rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
                Op::Attention { qkv, heads, q, k, probs } => {
                    let t_len = node.rows;
                    let d = node.cols;
                    let heads = *heads;
                    let dh = d / heads;
                    let c3 = 3 * d;
                    let scale = F::one() / F::from_f64(dh as f64).sqrt();
                    let (cos, sin) = rope_tables::<F>(t_len, dh);
                    let src = self.value(*qkv);
                    let gq_all = acc(&mut grads, *qkv, t_len * c3);
                    let mut dq = vec![F::zero(); t_len * dh];
                    let mut dk = vec![F::zero(); t_len * dh];
                    let mut dp = vec![F::zero(); t_len];
                    for h in 0..heads {
                        dq.fill(F::zero());
                        dk.fill(F::zero());
                        let qh = &q[h * t_len * dh..(h + 1) * t_len * dh];
                        let kh = &k[h * t_len * dh..(h + 1) * t_len * dh];
                        for t in 0..t_len {
                            let go = &g[t * d + h * dh..t * d + (h + 1) * dh];
                            let p = &probs[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                            let mut inner = F::zero();
                            for j in 0..=t {
                                let vj = &src[j * c3 + 2 * d + h * dh..j * c3 + 2 * d + (h + 1) * dh];
                                dp[j] = dot(go, vj);
                                inner = inner + p[j] * dp[j];
                                // dv_j += p_tj * dout_t
                                let gv = &mut gq_all[j * c3 + 2 * d + h * dh..j * c3 + 2 * d + (h + 1) * dh];
                                axpy(gv, p[j], go);
                            }
                            let qt = &qh[t * dh..(t + 1) * dh];
                            for j in 0..=t {
                                let ds = p[j] * (dp[j] - inner) * scale;
                                if ds == F::zero() {
                                    continue;
                                }
                                axpy(&mut dq[t * dh..(t + 1) * dh], ds, &kh[j * dh..(j + 1) * dh]);
                                axpy(&mut dk[j * dh..(j + 1) * dh], ds, qt);
                            }
                        }
                        for t in 0..t_len {
                            let row = &mut gq_all[t * c3..(t + 1) * c3];
                            rope_unapply_acc(&mut row[h * dh..(h + 1) * dh], &dq[t * dh..(t + 1) * dh], &cos, &sin, t);
                            rope_unapply_acc(
                                &mut row[d + h * dh..d + (h + 1) * dh],
                                &dk[t * dh..(t + 1) * dh],
                                &cos,
                                &sin,
                                t,
                            );
                        }
                    }
                }
                Op::SelectRows { x, rows } => {
                    let c = node.cols;
                    let (xr, _) = self.shape(*x);
                    let gx = acc(&mut grads, *x, xr * c);
                    for (r, &i) in rows.iter().enumerate() {
                        add_into(&mut gx[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.shape(p).1;
                        add_into(acc(&mut grads, p, n), &g[off..off + n]);
                        off += n;
                    }
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        let gp = acc(&mut grads, p, 1);
                        gp[0] = gp[0] + g[0];
                    }
                }
                Op::SumSquares(a) => {
                    let av = self.value(*a);
                    let ga = acc(&mut grads, *a, av.len());
                    let two = F::from_f64(2.0) * g[0];
                    axpy(ga, two, av);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let (r, c) = self.shape(*logits);
                    let s = g[0] / F::from_f64(r as f64);
                    let gl = acc(&mut grads, *logits, r * c);
                    for (i, &t) in targets.iter().enumerate() {
                        let pr = &probs[i * c..(i + 1) * c];
                        let gr = &mut gl[i * c..(i + 1) * c];
                        axpy(gr, s, pr);
                        gr[t] = gr[t] - s;
                    }
                }
                Op::Cosine { a, b, na, nb, cos } => {
                    let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                    let inv = F::one() / (*na * *nb);
                    let ca = *cos / (*na * *na);
                    let cb = *cos / (*nb * *nb);
                    let ga = acc(&mut grads, *a, av.len());
                    for j in 0..av.len() {
                        ga[j] = ga[j] + g[0] * (bv[j] * inv - av[j] * ca);
                    }
                    let gb = acc(&mut grads, *b, bv.len());
                    for j in 0..bv.len() {
                        gb[j] = gb[j] + g[0] * (av[j] * inv - bv[j] * cb);
                    }
                }
                Op::Bce { p, y, clamped } => {
                    if !*clamped {
                        let pv = self.value(*p)[0];
                        let d = -*y / pv + (F::one() - *y) / (F::one() - pv);
                        let gp = acc(&mut grads, *p, 1);
                        gp[0] = gp[0] + g[0] * d;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn ids_len(ids: &Vec<usize>) -> usize {
    ids.len()
}

fn acc<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len]).as_mut_slice()
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn softmax_row<F: Real>(row: &mut [F]) {
    let m = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let mut z = F::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z = z + *x;
    }
    let inv = F::one() / z;
    for x in row.iter_mut() {
        *x = *x * inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::from_f64(3.0) * a * x * x)
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn rope_tables<F: Real>(t_len: usize, dh: usize) -> (Vec<F>, Vec<F>) {
    let half = dh / 2;
    let mut cos = Vec::with_capacity(t_len * half);
    let mut sin = Vec::with_capacity(t_len * half);
    for t in 0..t_len {
        for i in 0..half {
            let theta = t as f64 * ROPE_BASE.powf(-2.0 * i as f64 / dh as f64);
            cos.push(F::from_f64(theta.cos()));
            sin.push(F::from_f64(theta.sin()));
        }
    }
    (cos, sin)
}

fn rope_apply<F: Real>(dst: &mut [F], src: &[F], cos: &[F], sin: &[F], t: usize) {
    let half = src.len() / 2;
    let (c, s) = (&cos[t * half..(t + 1) * half], &sin[t * half..(t + 1) * half]);
    for i in 0..half {
        let (a, b) = (src[i], src[i + half]);
        dst[i] = a * c[i] - b * s[i];
        dst[i + half] = a * s[i] + b * c[i];
    }
}

/// Adds the transpose rotation of `g` into `dst`.
fn rope_unapply_acc<F: Real>(dst: &mut [F], g: &[F], cos: &[F], sin: &[F], t: usize) {
    let half = g.len() / 2;
    let (c, s) = (&cos[t * half..(t + 1) * half], &sin[t * half..(t + 1) * half]);
    for i in 0..half {
        let (a, b) = (g[i], g[i + half]);
        dst[i] = dst[i] + a * c[i] + b * s[i];
        dst[i + half] = dst[i + half] - a * s[i] + b * c[i];
    }
}
