use super::tensor::{matmul_nt_raw, matmul_raw, matmul_tn_raw, Tensor};
use crate::{Error, Result};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;

const STOCHASTIC_TOL: f64 = 1e-6;
const SYMMETRY_TOL: f64 = 1e-9;
/// Added to squared row norms so the zero row normalises to zero.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Kl(Var, Var),
    GramSample(Var),
    GramChannel(Var),
    QuadForm { x: Var, mu: Var, a: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    NormalizeRows { x: Var, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Built fresh for each forward pass and dropped after
/// [`Tape::backward`]; nothing persists between steps.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation (stop-gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies `v` into a new stop-gradient leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {m}x{k} · {k2}x{n}"
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::matrix(m, n, out)?.ensure_finite("matmul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of a `b×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let bt = self.value(bias);
        if bt.shape() != [c] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {c} columns",
                bt.shape()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bt.data()) {
                *o += b;
            }
        }
        let t = Tensor::matrix(r, c, out)?.ensure_finite("add_bias")?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y).ensure_finite("add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y).ensure_finite("sub")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let src = self.value(a);
        let data = src.data().iter().map(|v| v * s).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?.ensure_finite("scale")?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Scale(a, s), rg))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let data = src.data().iter().map(|v| v * v).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?.ensure_finite("square")?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Square(a), rg))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let t = Tensor::scalar(s).ensure_finite("sum")?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Sum(a), rg))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, z: Var) -> Result<Var> {
        let (r, c) = self.value(z).dims2()?;
        if c == 0 {
            return Err(Error::Shape("softmax over zero columns".into()));
        }
        let out = softmax_raw(self.value(z).data(), c);
        let t = Tensor::matrix(r, c, out)?.ensure_finite("softmax_rows")?;
        let rg = self.rg(z);
        Ok(self.push(t, Op::Softmax(z), rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "cross_entropy: {b} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let data = self.value(logits).data();
        let mut loss = 0.0;
        for (row, &y) in data.chunks(k).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        let probs = softmax_raw(data, k);
        let t = Tensor::scalar(loss / b as f64).ensure_finite("cross_entropy")?;
        let rg = self.rg(logits);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `(1/B) Σ_b Σ_k p_bk log(p_bk / q_bk)` with `q` clamped below by
    /// [`PROB_EPS`]. Both arguments must be row-stochastic.
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape(p, q, "kl_rows")?;
        let (b, k) = self.value(p).dims2()?;
        check_stochastic(self.value(p), "p")?;
        check_stochastic(self.value(q), "q")?;
        let (pd, qd) = (self.value(p).data(), self.value(q).data());
        let mut acc = 0.0;
        for i in 0..b * k {
            if pd[i] > 0.0 {
                acc += pd[i] * (pd[i].max(PROB_EPS).ln() - qd[i].max(PROB_EPS).ln());
            }
        }
        let t = Tensor::scalar(acc / b as f64).ensure_finite("kl_rows")?;
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(t, Op::Kl(p, q), rg))
    }

    /// Each row divided by `sqrt(‖row‖² + NORM_EPS)`.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let norms: Vec<f64> = xd
            .chunks(c)
            .map(|row| (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt())
            .collect();
        let data = xd
            .chunks(c)
            .zip(&norms)
            .flat_map(|(row, n)| row.iter().map(move |v| v / n))
            .collect();
        let t = Tensor::matrix(r, c, data)?.ensure_finite("normalize_rows")?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::NormalizeRows { x, norms }, rg))
    }

    /// Sample relations `z·zᵀ`.
    pub fn gram_sample(&mut self, z: Var) -> Result<Var> {
        let (b, c) = self.value(z).dims2()?;
        let zd = self.value(z).data();
        let out = matmul_nt_raw(zd, zd, b, c, b);
        let t = Tensor::matrix(b, b, out)?.ensure_finite("gram_sample")?;
        let rg = self.rg(z);
        Ok(self.push(t, Op::GramSample(z), rg))
    }

    /// Channel relations `zᵀ·z`.
    pub fn gram_channel(&mut self, z: Var) -> Result<Var> {
        let (b, c) = self.value(z).dims2()?;
        let zd = self.value(z).data();
        let out = matmul_tn_raw(zd, zd, b, c, c);
        let t = Tensor::matrix(c, c, out)?.ensure_finite("gram_channel")?;
        let rg = self.rg(z);
        Ok(self.push(t, Op::GramChannel(z), rg))
    }

    /// Per row `(x_i − μ) A (x_i − μ)ᵀ`; `A` must be symmetric.
    pub fn quadratic_form(&mut self, x: Var, mu: Var, a: Var) -> Result<Var> {
        let (b, c) = self.value(x).dims2()?;
        if self.value(mu).shape() != [c] {
            return Err(Error::Shape(format!(
                "quadratic_form: mean shape {:?} vs {c} columns",
                self.value(mu).shape()
            )));
        }
        if self.value(a).shape() != [c, c] {
            return Err(Error::Shape(format!(
                "quadratic_form: matrix shape {:?} vs {c} columns",
                self.value(a).shape()
            )));
        }
        let asym = self.value(a).asymmetry()?;
        if asym > SYMMETRY_TOL {
            return Err(Error::Validation(format!(
                "quadratic_form: matrix asymmetric by {asym:e}"
            )));
        }
        let (xd, md, ad) = (
            self.value(x).data(),
            self.value(mu).data(),
            self.value(a).data(),
        );
        let mut out = Vec::with_capacity(b);
        let mut d = vec![0.0; c];
        for row in xd.chunks(c) {
            for j in 0..c {
                d[j] = row[j] - md[j];
            }
            out.push(quad_raw(&d, ad));
        }
        let t = Tensor::vector(out).ensure_finite("quadratic_form")?;
        let rg = self.rg(x) || self.rg(mu) || self.rg(a);
        Ok(self.push(t, Op::QuadForm { x, mu, a }, rg))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("gather_rows: row {bad} of {r}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::matrix(idx.len(), c, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only trainable leaves and intermediate nodes keep their gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            } else if let Some(g) = &grads[i] {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.rg(*a) {
                    let da = matmul_nt_raw(g, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = matmul_tn_raw(self.value(*a).data(), g, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddBias(x, b) => {
                let c = self.value(*b).len();
                if self.rg(*b) {
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|v| v * s).collect());
            }
            Op::Square(a) => {
                let ad = self.value(*a).data();
                let da = g.iter().zip(ad).map(|(gv, av)| 2.0 * gv * av).collect();
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Softmax(z) => {
                let c = node.value.shape()[1];
                let s = node.value.data();
                let mut dz = vec![0.0; s.len()];
                for ((srow, grow), drow) in s.chunks(c).zip(g.chunks(c)).zip(dz.chunks_mut(c)) {
                    let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        drow[j] = srow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *z, dz);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (b, k) = self.value(*logits).dims2()?;
                let scale = g[0] / b as f64;
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, d);
            }
            Op::Kl(p, q) => {
                let (b, _) = self.value(*p).dims2()?;
                let scale = g[0] / b as f64;
                let (pd, qd) = (self.value(*p).data(), self.value(*q).data());
                if self.rg(*p) {
                    let dp = pd
                        .iter()
                        .zip(qd)
                        .map(|(pv, qv)| {
                            scale * (pv.max(PROB_EPS).ln() - qv.max(PROB_EPS).ln() + 1.0)
                        })
                        .collect();
                    self.accumulate(grads, *p, dp);
                }
                if self.rg(*q) {
                    let dq = pd
                        .iter()
                        .zip(qd)
                        .map(|(pv, qv)| if *qv > PROB_EPS { -scale * pv / qv } else { 0.0 })
                        .collect();
                    self.accumulate(grads, *q, dq);
                }
            }
            Op::GramSample(z) => {
                let (b, c) = self.value(*z).dims2()?;
                let sym = symmetrized(g, b);
                let dz = matmul_raw(&sym, self.value(*z).data(), b, b, c);
                self.accumulate(grads, *z, dz);
            }
            Op::GramChannel(z) => {
                let (b, c) = self.value(*z).dims2()?;
                let sym = symmetrized(g, c);
                let dz = matmul_raw(self.value(*z).data(), &sym, b, c, c);
                self.accumulate(grads, *z, dz);
            }
            Op::QuadForm { x, mu, a } => {
                let (b, c) = self.value(*x).dims2()?;
                let (xd, md, ad) = (
                    self.value(*x).data(),
                    self.value(*mu).data(),
                    self.value(*a).data(),
                );
                let mut dx = vec![0.0; b * c];
                let mut da = vec![0.0; c * c];
                let mut d = vec![0.0; c];
                for i in 0..b {
                    for j in 0..c {
                        d[j] = xd[i * c + j] - md[j];
                    }
                    // (A + Aᵀ) d
                    for r in 0..c {
                        let mut acc = 0.0;
                        for s in 0..c {
                            acc += (ad[r * c + s] + ad[s * c + r]) * d[s];
                        }
                        dx[i * c + r] = g[i] * acc;
                    }
                    if self.rg(*a) {
                        for r in 0..c {
                            for s in 0..c {
                                da[r * c + s] += g[i] * d[r] * d[s];
                            }
                        }
                    }
                }
                if self.rg(*mu) {
                    let mut dmu = vec![0.0; c];
                    for row in dx.chunks(c) {
                        for (m, v) in dmu.iter_mut().zip(row) {
                            *m -= v;
                        }
                    }
                    self.accumulate(grads, *mu, dmu);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *x, dx);
            }
            Op::NormalizeRows { x, norms } => {
                // d(x/n) = (g − y (g·y)) / n
                let c = node.value.shape()[1];
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for (i, n) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GatherRows { x, idx } => {
                let (r, c) = self.value(*x).dims2()?;
                let mut dx = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += g[k * c + j];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_raw(data: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut s = 0.0;
        for v in row {
            let e = (v - m).exp();
            s += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|v| *v /= s);
    }
    out
}

pub(crate) fn quad_raw(d: &[f64], a: &[f64]) -> f64 {
    let c = d.len();
    let mut acc = 0.0;
    for r in 0..c {
        if d[r] == 0.0 {
            continue;
        }
        let row = &a[r * c..(r + 1) * c];
        let inner: f64 = row.iter().zip(d).map(|(x, y)| x * y).sum();
        acc += d[r] * inner;
    }
    acc
}

fn symmetrized(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = g[i * n + j] + g[j * n + i];
        }
    }
    out
}

fn check_stochastic(t: &Tensor, name: &str) -> Result<()> {
    let (_, k) = t.dims2()?;
    for (i, row) in t.data().chunks(k).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|v| *v < -STOCHASTIC_TOL) {
            return Err(Error::Validation(format!(
                "kl_rows: row {i} of {name} is not a distribution (sum {s})"
            )));
        }
    }
    Ok(())
}
