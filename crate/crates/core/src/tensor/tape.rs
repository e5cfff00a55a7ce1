use std::collections::BTreeMap;
use std::sync::Arc;

use super::{matmul_nt, matmul_tn, svd, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Key for the counter-based dropout stream. Two masks drawn with equal keys are
/// identical, whatever else happened in the process.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
    pub op_id: u64,
}

impl DropoutKey {
    fn stream(&self) -> u64 {
        let mut h = splitmix64(self.seed ^ 0x5eed_0000_0000_0001);
        h = splitmix64(h ^ self.epoch);
        h = splitmix64(h ^ self.batch);
        splitmix64(h ^ self.op_id)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    PowF(Var, f64),
    GinCombine {
        h: Var,
        eps: Var,
        edges: Arc<[(usize, usize)]>,
    },
    SegmentMean {
        x: Var,
        segment: Arc<[usize]>,
        counts: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    RowCosine(Var, Var),
    GatherRows {
        x: Var,
        idx: Arc<[usize]>,
    },
    ReplaceRows {
        x: Var,
        token: Var,
        idx: Arc<[usize]>,
    },
    Take {
        x: Var,
        idx: Arc<[usize]>,
    },
    BceLogits {
        logits: Var,
        targets: Arc<Tensor>,
        mask: Arc<[bool]>,
    },
    Mse {
        pred: Var,
        targets: Arc<Tensor>,
        mask: Arc<[bool]>,
    },
    SingularValues {
        x: Var,
        u: Tensor,
        v: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Append-only computation record. Parents always precede children, so node
/// order is a topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
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
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Named leaf; names show up as keys of [`Tape::grad`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor, requires_grad: bool) -> Var {
        let v = self.leaf(value, requires_grad);
        self.nodes[v.0].name = Some(name.into());
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::contract(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `x + 1 * bias` with `bias` broadcast along rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(Error::contract(format!(
                "bias of length {} does not match {} columns",
                bv.len(),
                c
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(value, Op::AddConst(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / xv.len() as f64);
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let value = self.value(x).map(|v| v.powf(p));
        let rg = self.rg(x);
        self.push(value, Op::PowF(x, p), rg)
    }

    /// GIN neighbourhood combine: `(1 + eps) * h_v + sum_{(u, v) in edges} h_u`.
    /// `edges` are directed `(source, target)` pairs.
    pub fn gin_combine(&mut self, h: Var, eps: Var, edges: Arc<[(usize, usize)]>) -> Result<Var> {
        let hv = self.value(h);
        let ev = self.value(eps);
        if ev.len() != 1 {
            return Err(Error::contract("gin eps must be a scalar"));
        }
        let (n, d) = (hv.rows(), hv.cols());
        let scale = 1.0 + ev.item();
        let mut out = hv.map(|x| x * scale);
        let hd = hv.data();
        {
            let od = out.data_mut();
            for &(src, dst) in edges.iter() {
                if src >= n || dst >= n {
                    return Err(Error::contract(format!(
                        "edge ({src}, {dst}) out of range for {n} nodes"
                    )));
                }
                for j in 0..d {
                    od[dst * d + j] += hd[src * d + j];
                }
            }
        }
        let rg = self.rg(h) || self.rg(eps);
        Ok(self.push(out, Op::GinCombine { h, eps, edges }, rg))
    }

    /// Row means per segment: output row `g` averages the rows of `x` whose
    /// `segment` entry equals `g`. Empty segments produce zero rows.
    pub fn segment_mean(&mut self, x: Var, segment: Arc<[usize]>, graph_count: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if segment.len() != n {
            return Err(Error::contract(format!(
                "segment has {} entries for {n} rows",
                segment.len()
            )));
        }
        let mut counts = vec![0.0; graph_count];
        let mut out = vec![0.0; graph_count * d];
        for (i, &g) in segment.iter().enumerate() {
            if g >= graph_count {
                return Err(Error::contract(format!(
                    "segment index {g} >= graph count {graph_count}"
                )));
            }
            counts[g] += 1.0;
            for j in 0..d {
                out[g * d + j] += xv.data()[i * d + j];
            }
        }
        for g in 0..graph_count {
            if counts[g] > 0.0 {
                for j in 0..d {
                    out[g * d + j] /= counts[g];
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::matrix(graph_count, d, out);
        Ok(self.push(value, Op::SegmentMean { x, segment, counts }, rg))
    }

    /// Inverted dropout. `rate == 0` records nothing and returns `x`.
    pub fn dropout(&mut self, x: Var, rate: f64, key: DropoutKey) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let stream = key.stream();
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n as u64)
            .map(|i| {
                let u = (splitmix64(stream ^ i.wrapping_mul(0xa076_1d64_78bd_642f)) >> 11) as f64
                    / (1u64 << 53) as f64;
                if u >= rate {
                    keep
                } else {
                    0.0
                }
            })
            .collect();
        let value = self.value(x).zip_map(&Tensor::vector(mask.clone()), |a, m| a * m);
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// Cosine similarity of corresponding rows, as an `n x 1` column.
    /// Rows with zero norm produce 0.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "row_cosine")?;
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.rows();
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let (ra, rb) = (av.row(i), bv.row(i));
                let na = norm(ra);
                let nb = norm(rb);
                if na == 0.0 || nb == 0.0 {
                    0.0
                } else {
                    dot(ra, rb) / (na * nb)
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(n, 1, out), Op::RowCosine(a, b), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if idx.is_empty() {
            return Err(Error::contract("gather_rows needs at least one index"));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            if i >= n {
                return Err(Error::contract(format!("row {i} out of range for {n} rows")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(x);
        let value = Tensor::matrix(idx.len(), d, out);
        Ok(self.push(value, Op::GatherRows { x, idx }, rg))
    }

    /// Copy of `x` whose rows listed in `idx` are replaced by the row `token`.
    pub fn replace_rows(&mut self, x: Var, token: Var, idx: Arc<[usize]>) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(token));
        let (n, d) = (xv.rows(), xv.cols());
        if tv.len() != d {
            return Err(Error::contract(format!(
                "token of length {} does not match {d} columns",
                tv.len()
            )));
        }
        let mut out = xv.clone();
        for &i in idx.iter() {
            if i >= n {
                return Err(Error::contract(format!("row {i} out of range for {n} rows")));
            }
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(tv.data());
        }
        let rg = self.rg(x) || self.rg(token);
        Ok(self.push(out, Op::ReplaceRows { x, token, idx }, rg))
    }

    /// Flat gather into a vector.
    pub fn take(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let xv = self.value(x);
        if idx.is_empty() {
            return Err(Error::contract("take needs at least one index"));
        }
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            if i >= xv.len() {
                return Err(Error::contract(format!("index {i} out of range for {}", xv.len())));
            }
            out.push(xv.data()[i]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::Take { x, idx }, rg))
    }

    /// Mean binary cross-entropy with logits over cells where `mask` is true.
    /// Zero when no cell is observed.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<Tensor>, mask: Arc<[bool]>) -> Result<Var> {
        let zv = self.value(logits);
        check_masked_target(zv, &targets, &mask)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for ((&z, &y), &m) in zv.data().iter().zip(targets.data()).zip(mask.iter()) {
            if m {
                total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
                count += 1;
            }
        }
        let value = Tensor::scalar(if count == 0 { 0.0 } else { total / count as f64 });
        let rg = self.rg(logits);
        Ok(self.push(value, Op::BceLogits { logits, targets, mask }, rg))
    }

    /// Mean squared error over cells where `mask` is true. Zero when no cell is observed.
    pub fn mse(&mut self, pred: Var, targets: Arc<Tensor>, mask: Arc<[bool]>) -> Result<Var> {
        let pv = self.value(pred);
        check_masked_target(pv, &targets, &mask)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for ((&p, &y), &m) in pv.data().iter().zip(targets.data()).zip(mask.iter()) {
            if m {
                total += (p - y) * (p - y);
                count += 1;
            }
        }
        let value = Tensor::scalar(if count == 0 { 0.0 } else { total / count as f64 });
        let rg = self.rg(pred);
        Ok(self.push(value, Op::Mse { pred, targets, mask }, rg))
    }

    /// Singular values of a matrix, descending, as a vector of length `min(rows, cols)`.
    /// Backward differentiates the values only: `d sigma_i / dX = u_i v_i^T`.
    pub fn singular_values(&mut self, x: Var) -> Result<Var> {
        let dec = svd(self.value(x))?;
        let value = Tensor::vector(dec.s.clone());
        let rg = self.rg(x);
        Ok(self.push(value, Op::SingularValues { x, u: dec.u, v: dec.v }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient of `loss` with respect to every named leaf that requires grad.
    /// Leaves with no path to `loss` receive zeros.
    pub fn grad(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.backward(loss)?;
        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), true) = (&node.name, node.requires_grad) {
                let g = grads.grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    let ga = matmul_nt(g.data(), bv.data(), m, n, k);
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = matmul_tn(av.data(), g.data(), m, k, n);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc_t(grads, *a, g);
                self.acc_t(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc_t(grads, *a, g);
                if self.rg(*b) {
                    self.acc(grads, *b, g.data().iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y).into_data();
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y).into_data();
                    self.acc(grads, *b, gb);
                }
            }
            Op::AddRow(x, bias) => {
                self.acc_t(grads, *x, g);
                if self.rg(*bias) {
                    let c = g.cols();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *bias, gb);
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    self.acc(grads, *x, g.data().iter().map(|v| v * c).collect());
                }
            }
            Op::AddConst(x) => self.acc_t(grads, *x, g),
            Op::Relu(x) => {
                if self.rg(*x) {
                    let gx = g
                        .zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })
                        .into_data();
                    self.acc(grads, *x, gx);
                }
            }
            Op::Sigmoid(x) => {
                if self.rg(*x) {
                    let gx = g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s)).into_data();
                    self.acc(grads, *x, gx);
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let n = self.value(*x).len();
                    self.acc(grads, *x, vec![g.item(); n]);
                }
            }
            Op::Mean(x) => {
                if self.rg(*x) {
                    let n = self.value(*x).len();
                    self.acc(grads, *x, vec![g.item() / n as f64; n]);
                }
            }
            Op::PowF(x, p) => {
                if self.rg(*x) {
                    let gx = g
                        .zip_map(self.value(*x), |gv, xv| {
                            if *p == 1.0 {
                                gv
                            } else {
                                gv * p * xv.powf(p - 1.0)
                            }
                        })
                        .into_data();
                    self.acc(grads, *x, gx);
                }
            }
            Op::GinCombine { h, eps, edges } => {
                let hv = self.value(*h);
                let d = hv.cols();
                if self.rg(*h) {
                    let scale = 1.0 + self.value(*eps).item();
                    let mut gh: Vec<f64> = g.data().iter().map(|v| v * scale).collect();
                    for &(src, dst) in edges.iter() {
                        for j in 0..d {
                            gh[src * d + j] += g.data()[dst * d + j];
                        }
                    }
                    self.acc(grads, *h, gh);
                }
                if self.rg(*eps) {
                    self.acc(grads, *eps, vec![g.dot(hv)]);
                }
            }
            Op::SegmentMean { x, segment, counts } => {
                if self.rg(*x) {
                    let d = g.cols();
                    let mut gx = vec![0.0; segment.len() * d];
                    for (i, &s) in segment.iter().enumerate() {
                        for j in 0..d {
                            gx[i * d + j] = g.data()[s * d + j] / counts[s];
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Dropout { x, mask } => {
                if self.rg(*x) {
                    let gx = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                    self.acc(grads, *x, gx);
                }
            }
            Op::RowCosine(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.cols();
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for r in 0..av.rows() {
                    let (ra, rb) = (av.row(r), bv.row(r));
                    let (na, nb) = (norm(ra), norm(rb));
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let cos = node.value.data()[r];
                    let gr = g.data()[r];
                    for j in 0..d {
                        ga[r * d + j] = gr * (rb[j] / (na * nb) - cos * ra[j] / (na * na));
                        gb[r * d + j] = gr * (ra[j] / (na * nb) - cos * rb[j] / (nb * nb));
                    }
                }
                if self.rg(*a) {
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    self.acc(grads, *b, gb);
                }
            }
            Op::GatherRows { x, idx } => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let d = xv.cols();
                    let mut gx = vec![0.0; xv.len()];
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            gx[i * d + j] += g.data()[k * d + j];
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::ReplaceRows { x, token, idx } => {
                let d = g.cols();
                if self.rg(*x) {
                    let mut gx = g.data().to_vec();
                    for &i in idx.iter() {
                        gx[i * d..(i + 1) * d].fill(0.0);
                    }
                    self.acc(grads, *x, gx);
                }
                if self.rg(*token) {
                    let mut gt = vec![0.0; d];
                    for &i in idx.iter() {
                        for j in 0..d {
                            gt[j] += g.data()[i * d + j];
                        }
                    }
                    self.acc(grads, *token, gt);
                }
            }
            Op::Take { x, idx } => {
                if self.rg(*x) {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (k, &i) in idx.iter().enumerate() {
                        gx[i] += g.data()[k];
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::BceLogits { logits, targets, mask } => {
                if self.rg(*logits) {
                    let count = mask.iter().filter(|&&m| m).count();
                    let zv = self.value(*logits);
                    let scale = if count == 0 { 0.0 } else { g.item() / count as f64 };
                    let gx = zv
                        .data()
                        .iter()
                        .zip(targets.data())
                        .zip(mask.iter())
                        .map(|((&z, &y), &m)| if m { scale * (sigmoid(z) - y) } else { 0.0 })
                        .collect();
                    self.acc(grads, *logits, gx);
                }
            }
            Op::Mse { pred, targets, mask } => {
                if self.rg(*pred) {
                    let count = mask.iter().filter(|&&m| m).count();
                    let pv = self.value(*pred);
                    let scale = if count == 0 { 0.0 } else { 2.0 * g.item() / count as f64 };
                    let gx = pv
                        .data()
                        .iter()
                        .zip(targets.data())
                        .zip(mask.iter())
                        .map(|((&p, &y), &m)| if m { scale * (p - y) } else { 0.0 })
                        .collect();
                    self.acc(grads, *pred, gx);
                }
            }
            Op::SingularValues { x, u, v } => {
                if self.rg(*x) {
                    let (m, n) = (u.rows(), v.rows());
                    let r = u.cols();
                    let mut gx = vec![0.0; m * n];
                    for k in 0..r {
                        let gk = g.data()[k];
                        if gk == 0.0 {
                            continue;
                        }
                        for i in 0..m {
                            let ui = u.at(i, k) * gk;
                            for j in 0..n {
                                gx[i * n + j] += ui * v.at(j, k);
                            }
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
        }
    }

    fn acc_t(&self, grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
        if self.rg(v) {
            self.acc(grads, v, g.data().to_vec());
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, g).expect("gradient shape mirrors value"));
            }
        }
    }
}

fn check_masked_target(x: &Tensor, targets: &Tensor, mask: &[bool]) -> Result<()> {
    if x.len() != targets.len() || x.len() != mask.len() {
        return Err(Error::contract(format!(
            "loss operands disagree: {} predictions, {} targets, {} mask cells",
            x.len(),
            targets.len(),
            mask.len()
        )));
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
