//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a per-forward-pass arena: every operation appends a node
//! holding its output value and a backward closure. Nodes are created in
//! topological order, so the backward sweep is a single reverse iteration.
//! Leaves registered with [`Graph::leaf`] accumulate gradients that can be
//! read back after [`Graph::backward`]; values registered with
//! [`Graph::constant`] are excluded from gradient propagation entirely,
//! which is how parameter freezing is implemented.

use crate::tensor::{self, Tensor};

pub type NodeId = usize;

type BackFn = Box<dyn Fn(&Tensor, &[Tensor], &mut GradStore)>;

/// Gradient accumulator indexed by node id. Slots allocate lazily so nodes
/// off the loss path cost nothing.
pub struct GradStore {
    grads: Vec<Option<Tensor>>,
}

impl GradStore {
    fn new(n: usize) -> Self {
        GradStore {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    /// Adds `t` into the slot for `id`.
    pub fn accumulate(&mut self, id: NodeId, t: &Tensor) {
        match &mut self.grads[id] {
            Some(g) => g.add_assign(t),
            slot => *slot = Some(t.clone()),
        }
    }

    fn accumulate_owned(&mut self, id: NodeId, t: Tensor) {
        match &mut self.grads[id] {
            Some(g) => g.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    /// Mutable access with zero-initialization, for scatter-style backward.
    fn slot(&mut self, id: NodeId, rows: usize, cols: usize) -> &mut Tensor {
        self.grads[id].get_or_insert_with(|| Tensor::zeros(rows, cols))
    }

    fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id].take()
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id].as_ref()
    }
}

pub struct Graph {
    values: Vec<Tensor>,
    backs: Vec<Option<BackFn>>,
    requires: Vec<bool>,
    track: bool,
}

impl Graph {
    /// A graph that records backward closures.
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            backs: Vec::new(),
            requires: Vec::new(),
            track: true,
        }
    }

    /// A forward-only graph; every node behaves like a constant.
    pub fn inference() -> Self {
        Graph {
            values: Vec::new(),
            backs: Vec::new(),
            requires: Vec::new(),
            track: false,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Current node count, for use with [`Graph::truncate`].
    pub fn mark(&self) -> usize {
        self.values.len()
    }

    /// Drops every node created after `mark`. Lets long-lived forward-only
    /// graphs (bound parameters at the front) be reused across many inputs
    /// without rebinding.
    pub fn truncate(&mut self, mark: usize) {
        self.values.truncate(mark);
        self.backs.truncate(mark);
        self.requires.truncate(mark);
    }

    fn push(&mut self, value: Tensor, requires: bool, back: Option<BackFn>) -> NodeId {
        let id = self.values.len();
        self.values.push(value);
        if self.track {
            self.requires.push(requires);
            self.backs.push(if requires { back } else { None });
        } else {
            self.requires.push(false);
            self.backs.push(None);
        }
        id
    }

    fn req(&self, id: NodeId) -> bool {
        self.requires[id]
    }

    /// Differentiable input; its gradient is available after `backward`.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let track = self.track;
        self.push(t, track, None)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, false, None)
    }

    /// Runs the backward sweep from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> GradStore {
        assert_eq!(
            self.values[root].shape(),
            (1, 1),
            "backward root must be scalar"
        );
        self.backward_seeded(&[(root, Tensor::scalar(1.0))])
    }

    /// Backward sweep with caller-provided upstream gradients.
    pub fn backward_seeded(&self, seeds: &[(NodeId, Tensor)]) -> GradStore {
        assert!(self.track, "backward on an inference graph");
        let mut grads = GradStore::new(self.values.len());
        let mut top = 0;
        for (id, g) in seeds {
            assert_eq!(self.values[*id].shape(), g.shape(), "seed shape mismatch");
            grads.accumulate(*id, g);
            top = top.max(*id);
        }
        for id in (0..=top).rev() {
            if grads.get(id).is_none() {
                continue;
            }
            if let Some(back) = &self.backs[id] {
                let g = grads.take(id).expect("grad present");
                back(&g, &self.values, &mut grads);
            }
            // Leaves keep their slot so callers can read it.
        }
        grads
    }

    // ---- arithmetic ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.values[a].shape(), self.values[b].shape());
        let mut v = self.values[a].clone();
        v.add_assign(&self.values[b]);
        let (ra, rb) = (self.req(a), self.req(b));
        self.push(
            v,
            ra || rb,
            Some(Box::new(move |g, _, grads| {
                if ra {
                    grads.accumulate(a, g);
                }
                if rb {
                    grads.accumulate(b, g);
                }
            })),
        )
    }

    /// Sum of any number of same-shape nodes.
    pub fn add_n(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut v = self.values[parts[0]].clone();
        for &p in &parts[1..] {
            v.add_assign(&self.values[p]);
        }
        let reqs: Vec<(NodeId, bool)> = parts.iter().map(|&p| (p, self.req(p))).collect();
        let any = reqs.iter().any(|(_, r)| *r);
        self.push(
            v,
            any,
            Some(Box::new(move |g, _, grads| {
                for &(p, r) in &reqs {
                    if r {
                        grads.accumulate(p, g);
                    }
                }
            })),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.values[a].shape(), self.values[b].shape());
        let mut v = self.values[a].clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.values[b].data()) {
            *x -= *y;
        }
        let (ra, rb) = (self.req(a), self.req(b));
        self.push(
            v,
            ra || rb,
            Some(Box::new(move |g, _, grads| {
                if ra {
                    grads.accumulate(a, g);
                }
                if rb {
                    let mut n = g.clone();
                    for x in n.data_mut() {
                        *x = -*x;
                    }
                    grads.accumulate_owned(b, n);
                }
            })),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut v = self.values[a].clone();
        for x in v.data_mut() {
            *x *= c;
        }
        let ra = self.req(a);
        self.push(
            v,
            ra,
            Some(Box::new(move |g, _, grads| {
                let mut n = g.clone();
                for x in n.data_mut() {
                    *x *= c;
                }
                grads.accumulate_owned(a, n);
            })),
        )
    }

    /// Adds a fixed tensor (attention masks and the like); identity gradient.
    pub fn add_const(&mut self, a: NodeId, t: &Tensor) -> NodeId {
        assert_eq!(self.values[a].shape(), t.shape());
        let mut v = self.values[a].clone();
        v.add_assign(t);
        let ra = self.req(a);
        self.push(
            v,
            ra,
            Some(Box::new(move |g, _, grads| {
                grads.accumulate(a, g);
            })),
        )
    }

    /// Elementwise product with a fixed tensor (dropout masks).
    pub fn mul_const(&mut self, a: NodeId, t: Tensor) -> NodeId {
        assert_eq!(self.values[a].shape(), t.shape());
        let mut v = self.values[a].clone();
        for (x, y) in v.data_mut().iter_mut().zip(t.data()) {
            *x *= *y;
        }
        let ra = self.req(a);
        self.push(
            v,
            ra,
            Some(Box::new(move |g, _, grads| {
                let mut n = g.clone();
                for (x, y) in n.data_mut().iter_mut().zip(t.data()) {
                    *x *= *y;
                }
                grads.accumulate_owned(a, n);
            })),
        )
    }

    /// `[m,n] + [1,n]` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (m, n) = self.values[a].shape();
        assert_eq!(self.values[row].shape(), (1, n));
        let mut v = self.values[a].clone();
        {
            let r = self.values[row].row(0).to_vec();
            for i in 0..m {
                for (x, y) in v.row_mut(i).iter_mut().zip(r.iter()) {
                    *x += *y;
                }
            }
        }
        let (ra, rr) = (self.req(a), self.req(row));
        self.push(
            v,
            ra || rr,
            Some(Box::new(move |g, _, grads| {
                if ra {
                    grads.accumulate(a, g);
                }
                if rr {
                    let mut acc = Tensor::zeros(1, n);
                    for i in 0..m {
                        for (x, y) in acc.row_mut(0).iter_mut().zip(g.row(i)) {
                            *x += *y;
                        }
                    }
                    grads.accumulate_owned(row, acc);
                }
            })),
        )
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::matmul(&self.values[a], &self.values[b]);
        let (ra, rb) = (self.req(a), self.req(b));
        self.push(
            v,
            ra || rb,
            Some(Box::new(move |g, values, grads| {
                if ra {
                    grads.accumulate_owned(a, tensor::matmul_nt(g, &values[b]));
                }
                if rb {
                    grads.accumulate_owned(b, tensor::matmul_tn(&values[a], g));
                }
            })),
        )
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::matmul_nt(&self.values[a], &self.values[b]);
        let (ra, rb) = (self.req(a), self.req(b));
        self.push(
            v,
            ra || rb,
            Some(Box::new(move |g, values, grads| {
                if ra {
                    grads.accumulate_owned(a, tensor::matmul(g, &values[b]));
                }
                if rb {
                    grads.accumulate_owned(b, tensor::matmul_tn(g, &values[a]));
                }
            })),
        )
    }

    /// `a^T @ b`.
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = tensor::matmul_tn(&self.values[a], &self.values[b]);
        let (ra, rb) = (self.req(a), self.req(b));
        self.push(
            v,
            ra || rb,
            Some(Box::new(move |g, values, grads| {
                if ra {
                    grads.accumulate_owned(a, tensor::matmul_nt(&values[b], g));
                }
                if rb {
                    grads.accumulate_owned(b, tensor::matmul(&values[a], g));
                }
            })),
        )
    }

    // ---- nonlinearities ----

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.values[a].clone();
        for x in v.data_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        let ra = self.req(a);
        self.push(
            v,
            ra,
            Some(Box::new(move |g, values, grads| {
                let mut n = g.clone();
                for (x, y) in n.data_mut().iter_mut().zip(values[a].data()) {
                    if *y <= 0.0 {
                        *x = 0.0;
                    }
                }
                grads.accumulate_owned(a, n);
            })),
        )
    }

    /// Root-mean-square normalization of each row, scaled by `gamma` ([1,n]).
    pub fn rmsnorm(&mut self, x: NodeId, gamma: NodeId) -> NodeId {
        const EPS: f64 = 1e-6;
        let (m, n) = self.values[x].shape();
        assert_eq!(self.values[gamma].shape(), (1, n));
        let mut v = Tensor::zeros(m, n);
        let mut inv = Vec::with_capacity(m);
        {
            let xv = &self.values[x];
            let gv = self.values[gamma].row(0);
            for i in 0..m {
                let row = xv.row(i);
                let ms: f64 = row.iter().map(|a| a * a).sum::<f64>() / n as f64;
                let ri = 1.0 / (ms + EPS).sqrt();
                inv.push(ri);
                for ((o, &a), &gm) in v.row_mut(i).iter_mut().zip(row).zip(gv) {
                    *o = a * ri * gm;
                }
            }
        }
        let (rx, rg) = (self.req(x), self.req(gamma));
        self.push(
            v,
            rx || rg,
            Some(Box::new(move |g, values, grads| {
                let xv = &values[x];
                let gv = values[gamma].row(0).to_vec();
                if rx {
                    let mut gx = Tensor::zeros(m, n);
                    for i in 0..m {
                        let ri = inv[i];
                        let xr = xv.row(i);
                        let gr = g.row(i);
                        // d/dx of gamma * x * inv(x): project out the
                        // component along x.
                        let dot: f64 = gr
                            .iter()
                            .zip(xr)
                            .zip(gv.iter())
                            .map(|((gi, xi), gm)| gi * gm * xi)
                            .sum();
                        let coef = ri * ri * ri / n as f64 * dot;
                        for (((o, &gi), &xi), &gm) in
                            gx.row_mut(i).iter_mut().zip(gr).zip(xr).zip(gv.iter())
                        {
                            *o = gm * gi * ri - coef * xi;
                        }
                    }
                    grads.accumulate_owned(x, gx);
                }
                if rg {
                    let mut gg = Tensor::zeros(1, n);
                    for i in 0..m {
                        let ri = inv[i];
                        for ((o, &gi), &xi) in
                            gg.row_mut(0).iter_mut().zip(g.row(i)).zip(xv.row(i))
                        {
                            *o += gi * xi * ri;
                        }
                    }
                    grads.accumulate_owned(gamma, gg);
                }
            })),
        )
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.values[a].shape();
        let mut v = Tensor::zeros(m, n);
        for i in 0..m {
            let p = tensor::softmax(self.values[a].row(i));
            v.row_mut(i).copy_from_slice(&p);
        }
        let ra = self.req(a);
        let id = self.push(
            Tensor::zeros(0, 0), // placeholder, replaced below
            ra,
            None,
        );
        self.values[id] = v;
        if self.track && ra {
            let me = id;
            self.backs[id] = Some(Box::new(move |g, values, grads| {
                let p = &values[me];
                let mut gx = Tensor::zeros(m, n);
                for i in 0..m {
                    let pr = p.row(i);
                    let gr = g.row(i);
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &pi), &gi) in gx.row_mut(i).iter_mut().zip(pr).zip(gr) {
                        *o = pi * (gi - dot);
                    }
                }
                grads.accumulate_owned(a, gx);
            }));
        }
        id
    }

    pub fn row_log_softmax(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.values[a].shape();
        let mut v = Tensor::zeros(m, n);
        for i in 0..m {
            let row = self.values[a].row(i);
            let lse = tensor::log_sum_exp(row);
            for (o, &x) in v.row_mut(i).iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let ra = self.req(a);
        let id = self.push(Tensor::zeros(0, 0), ra, None);
        self.values[id] = v;
        if self.track && ra {
            let me = id;
            self.backs[id] = Some(Box::new(move |g, values, grads| {
                let lp = &values[me];
                let mut gx = Tensor::zeros(m, n);
                for i in 0..m {
                    let gr = g.row(i);
                    let gsum: f64 = gr.iter().sum();
                    for ((o, &gi), &l) in gx.row_mut(i).iter_mut().zip(gr).zip(lp.row(i)) {
                        *o = gi - l.exp() * gsum;
                    }
                }
                grads.accumulate_owned(a, gx);
            }));
        }
        id
    }

    /// log-sum-exp of each row, shape `[m,1]`.
    pub fn lse_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.values[a].shape();
        let mut v = Tensor::zeros(m, 1);
        for i in 0..m {
            v.set(i, 0, tensor::log_sum_exp(self.values[a].row(i)));
        }
        let ra = self.req(a);
        let id = self.push(Tensor::zeros(0, 0), ra, None);
        self.values[id] = v;
        if self.track && ra {
            let me = id;
            self.backs[id] = Some(Box::new(move |g, values, grads| {
                let y = &values[me];
                let xv = &values[a];
                let mut gx = Tensor::zeros(m, n);
                for i in 0..m {
                    let gi = g.get(i, 0);
                    let yi = y.get(i, 0);
                    for (o, &x) in gx.row_mut(i).iter_mut().zip(xv.row(i)) {
                        *o = gi * (x - yi).exp();
                    }
                }
                grads.accumulate_owned(a, gx);
            }));
        }
        id
    }

    // ---- structure ----

    /// Selects rows of an embedding-like node; duplicates allowed.
    pub fn gather_rows(&mut self, emb: NodeId, idx: &[usize]) -> NodeId {
        let (rows, n) = self.values[emb].shape();
        let mut v = Tensor::zeros(idx.len(), n);
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < rows, "gather_rows index out of range");
            v.row_mut(i).copy_from_slice(self.values[emb].row(r));
        }
        let re = self.req(emb);
        let idx = idx.to_vec();
        self.push(
            v,
            re,
            Some(Box::new(move |g, _, grads| {
                let slot = grads.slot(emb, rows, n);
                for (i, &r) in idx.iter().enumerate() {
                    for (o, &x) in slot.row_mut(r).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.values[parts[0]].cols();
        let m: usize = parts.iter().map(|&p| self.values[p].rows()).sum();
        let mut v = Tensor::zeros(m, n);
        let mut off = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let pr = self.values[p].rows();
            assert_eq!(self.values[p].cols(), n);
            for i in 0..pr {
                v.row_mut(off + i).copy_from_slice(self.values[p].row(i));
            }
            spans.push((p, off, pr, self.req(p)));
            off += pr;
        }
        let any = spans.iter().any(|s| s.3);
        self.push(
            v,
            any,
            Some(Box::new(move |g, _, grads| {
                for &(p, off, pr, r) in &spans {
                    if !r {
                        continue;
                    }
                    let mut part = Tensor::zeros(pr, g.cols());
                    for i in 0..pr {
                        part.row_mut(i).copy_from_slice(g.row(off + i));
                    }
                    grads.accumulate_owned(p, part);
                }
            })),
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> NodeId {
        let (m, n) = self.values[a].shape();
        assert!(r0 < r1 && r1 <= m);
        let mut v = Tensor::zeros(r1 - r0, n);
        for i in r0..r1 {
            v.row_mut(i - r0).copy_from_slice(self.values[a].row(i));
        }
        let ra = self.req(a);
        self.push(
            v,
            ra,
            Some(Box::new(move |g, _, grads| {
                let slot = grads.slot(a, m, n);
                for i in r0..r1 {
                    for (o, &x) in slot.row_mut(i).iter_mut().zip(g.row(i - r0)) {
                        *o += x;
                    }
                }
            })),
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> NodeId {
        let (m, n) = self.values[a].shape();
        assert!(c0 < c1 && c1 <= n);
        let w = c1 - c0;
        let mut v = Tensor::zeros(m, w);
        for i in 0..m {
            v.row_mut(i).copy_from_slice(&self.values[a].row(i)[c0..c1]);
        }
        let ra = self.req(a);
        self.push(
            v,
            ra,
            Some(Box::new(move |g, _, grads| {
                let slot = grads.slot(a, m, n);
                for i in 0..m {
                    for (o, &x) in slot.row_mut(i)[c0..c1].iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.values[parts[0]].rows();
        let n: usize = parts.iter().map(|&p| self.values[p].cols()).sum();
        let mut v = Tensor::zeros(m, n);
        let mut off = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let pc = self.values[p].cols();
            assert_eq!(self.values[p].rows(), m);
            for i in 0..m {
                v.row_mut(i)[off..off + pc].copy_from_slice(self.values[p].row(i));
            }
            spans.push((p, off, pc, self.req(p)));
            off += pc;
        }
        let any = spans.iter().any(|s| s.3);
        self.push(
            v,
            any,
            Some(Box::new(move |g, _, grads| {
                for &(p, off, pc, r) in &spans {
                    if !r {
                        continue;
                    }
                    let mut part = Tensor::zeros(m, pc);
                    for i in 0..m {
                        part.row_mut(i).copy_from_slice(&g.row(i)[off..off + pc]);
                    }
                    grads.accumulate_owned(p, part);
                }
            })),
        )
    }

    /// Column vector `[m,1]` with one picked element per row.
    pub fn pick_per_row(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let (m, n) = self.values[a].shape();
        assert_eq!(idx.len(), m);
        let mut v = Tensor::zeros(m, 1);
        for (i, &c) in idx.iter().enumerate() {
            assert!(c < n, "pick_per_row column out of range");
            v.set(i, 0, self.values[a].get(i, c));
        }
        let ra = self.req(a);
        let idx = idx.to_vec();
        self.push(
            v,
            ra,
            Some(Box::new(move |g, _, grads| {
                let slot = grads.slot(a, m, n);
                for (i, &c) in idx.iter().enumerate() {
                    let cur = slot.get(i, c);
                    slot.set(i, c, cur + g.get(i, 0));
                }
            })),
        )
    }

    /// Sum of all rows, shape `[1,n]`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.values[a].shape();
        let mut v = Tensor::zeros(1, n);
        for i in 0..m {
            for (o, &x) in v.row_mut(0).iter_mut().zip(self.values[a].row(i)) {
                *o += x;
            }
        }
        let ra = self.req(a);
        self.push(
            v,
            ra,
            Some(Box::new(move |g, _, grads| {
                let mut gx = Tensor::zeros(m, n);
                for i in 0..m {
                    gx.row_mut(i).copy_from_slice(g.row(0));
                }
                grads.accumulate_owned(a, gx);
            })),
        )
    }

    /// Sum of all elements, shape `[1,1]`.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.values[a].shape();
        let s: f64 = self.values[a].data().iter().sum();
        let ra = self.req(a);
        self.push(
            Tensor::scalar(s),
            ra,
            Some(Box::new(move |g, _, grads| {
                let gi = g.item();
                grads.accumulate_owned(a, Tensor::from_vec(m, n, vec![gi; m * n]));
            })),
        )
    }

    /// Straight-through substitution: the forward value is `hard` (copied
    /// bit for bit), the gradient flows unchanged into `soft`.
    pub fn hard_substitute(&mut self, soft: NodeId, hard: Tensor) -> NodeId {
        assert_eq!(self.values[soft].shape(), hard.shape());
        let rs = self.req(soft);
        self.push(
            hard,
            rs,
            Some(Box::new(move |g, _, grads| {
                grads.accumulate(soft, g);
            })),
        )
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of a scalar function of a flat slice.
    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        let mut buf = x.to_vec();
        for i in 0..x.len() {
            let orig = buf[i];
            buf[i] = orig + h;
            let fp = f(&buf);
            buf[i] = orig - h;
            let fm = f(&buf);
            buf[i] = orig;
            out.push((fp - fm) / (2.0 * h));
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let denom = x.abs().max(y.abs()).max(1e-8);
            assert!(
                (x - y).abs() / denom < tol,
                "component {i}: {x} vs {y}"
            );
        }
    }

    fn deterministic_values(n: usize, phase: f64) -> Vec<f64> {
        (0..n)
            .map(|i| (i as f64 * 0.7313 + phase).sin() * 1.3)
            .collect()
    }

    /// A little multi-op network exercised against finite differences:
    /// rmsnorm -> matmul -> relu -> log-softmax -> picked NLL.
    #[test]
    fn composite_network_gradient_matches_finite_differences() {
        let xv = deterministic_values(6, 0.1);
        let wv = deterministic_values(12, 0.5);
        let gv = vec![1.0, 1.1, 0.9];

        let eval = |x: &[f64], w: &[f64], gamma: &[f64]| -> f64 {
            let mut g = Graph::new();
            let xn = g.leaf(Tensor::from_vec(2, 3, x.to_vec()));
            let wn = g.leaf(Tensor::from_vec(4, 3, w.to_vec()));
            let gn = g.leaf(Tensor::from_vec(1, 3, gamma.to_vec()));
            let norm = g.rmsnorm(xn, gn);
            let h = g.matmul_nt(norm, wn);
            let a = g.relu(h);
            let lp = g.row_log_softmax(a);
            let picked = g.pick_per_row(lp, &[1, 3]);
            let s = g.sum_all(picked);
            let neg = g.scale(s, -1.0);
            g.value(neg).item()
        };

        // analytic
        let mut g = Graph::new();
        let xn = g.leaf(Tensor::from_vec(2, 3, xv.clone()));
        let wn = g.leaf(Tensor::from_vec(4, 3, wv.clone()));
        let gn = g.leaf(Tensor::from_vec(1, 3, gv.clone()));
        let norm = g.rmsnorm(xn, gn);
        let h = g.matmul_nt(norm, wn);
        let a = g.relu(h);
        let lp = g.row_log_softmax(a);
        let picked = g.pick_per_row(lp, &[1, 3]);
        let s = g.sum_all(picked);
        let neg = g.scale(s, -1.0);
        let grads = g.backward(neg);

        let fd_x = numeric_grad(|x| eval(x, &wv, &gv), &xv, 1e-5);
        let fd_w = numeric_grad(|w| eval(&xv, w, &gv), &wv, 1e-5);
        let fd_g = numeric_grad(|gm| eval(&xv, &wv, gm), &gv, 1e-5);

        assert_close(grads.get(xn).unwrap().data(), &fd_x, 1e-6);
        assert_close(grads.get(wn).unwrap().data(), &fd_w, 1e-6);
        assert_close(grads.get(gn).unwrap().data(), &fd_g, 1e-6);
    }

    #[test]
    fn structural_ops_gradient_matches_finite_differences() {
        let xv = deterministic_values(8, 0.3);

        let eval = |x: &[f64]| -> f64 {
            let mut g = Graph::new();
            let xn = g.leaf(Tensor::from_vec(2, 4, x.to_vec()));
            let left = g.slice_cols(xn, 0, 2);
            let right = g.slice_cols(xn, 2, 4);
            let prod = g.matmul_nt(left, right);
            let sm = g.row_softmax(prod);
            let mix = g.matmul(sm, right);
            let cat = g.concat_cols(&[mix, left]);
            let gathered = g.gather_rows(cat, &[0, 1, 0]);
            let pooled = g.sum_rows(gathered);
            let lse = g.lse_rows(pooled);
            let s = g.sum_all(lse);
            g.value(s).item()
        };

        let mut g = Graph::new();
        let xn = g.leaf(Tensor::from_vec(2, 4, xv.clone()));
        let left = g.slice_cols(xn, 0, 2);
        let right = g.slice_cols(xn, 2, 4);
        let prod = g.matmul_nt(left, right);
        let sm = g.row_softmax(prod);
        let mix = g.matmul(sm, right);
        let cat = g.concat_cols(&[mix, left]);
        let gathered = g.gather_rows(cat, &[0, 1, 0]);
        let pooled = g.sum_rows(gathered);
        let lse = g.lse_rows(pooled);
        let s = g.sum_all(lse);
        let grads = g.backward(s);

        let fd = numeric_grad(eval, &xv, 1e-5);
        assert_close(grads.get(xn).unwrap().data(), &fd, 1e-6);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::row_vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::row_vector(vec![3.0, 4.0]));
        let s0 = g.add(a, c);
        let s = g.sum_all(s0);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn hard_substitute_forwards_hard_and_backprops_soft() {
        let mut g = Graph::new();
        let soft = g.leaf(Tensor::row_vector(vec![0.25, 0.75]));
        let hard = Tensor::row_vector(vec![1.0, 0.0]);
        let st = g.hard_substitute(soft, hard.clone());
        assert_eq!(g.value(st).data(), hard.data());
        let sum = g.sum_all(st);
        let grads = g.backward(sum);
        assert_eq!(grads.get(soft).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let mut g = Graph::inference();
        let a = g.leaf(Tensor::scalar(2.0));
        let b = g.scale(a, 3.0);
        assert_eq!(g.value(b).item(), 6.0);
        assert!(g.backs.iter().all(|b| b.is_none()));
    }
}
