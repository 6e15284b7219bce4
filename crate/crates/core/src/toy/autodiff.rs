//! A small reverse-mode tape over dense row-major matrices, with just the
//! operations a pre-norm transformer encoder needs.

use ndarray::{s, Array2, Axis};

pub type Var = usize;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Broadcast a `1 × n` row over every row.
    AddRow(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_lens: Vec<usize>,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v].value
    }

    pub fn into_value(mut self, v: Var) -> Array2<f64> {
        std::mem::take(&mut self.nodes[v].value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) + &self.value(row).row(0);
        self.push(value, Op::AddRow(a, row))
    }

    /// `x · w + b` with `b` a `1 × n` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * &self.value(gamma).row(0) + &self.value(beta).row(0);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let value = t.select(Axis(0), ids);
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let value = self.value(x).select(Axis(0), rows);
        self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Multi-head scaled dot-product self-attention over a batch of
    /// sequences stacked row-wise; sequences never attend to each other.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_lens: &[usize], heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(d % heads, 0);
        assert_eq!(seq_lens.iter().sum::<usize>(), qv.nrows());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros(qv.raw_dim());
        let mut probs = Vec::with_capacity(seq_lens.len() * heads);
        let mut offset = 0;
        for &n in seq_lens {
            for h in 0..heads {
                let rows = s![offset..offset + n, h * dh..(h + 1) * dh];
                let scores = qv.slice(rows).dot(&kv.slice(rows).t()) * scale;
                let p = softmax_rows(&scores);
                out.slice_mut(rows).assign(&p.dot(&vv.slice(rows)));
                probs.push(p);
            }
            offset += n;
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_lens: seq_lens.to_vec(),
                heads,
                probs,
            },
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax;
    /// a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let probs = softmax_rows(self.value(logits));
        assert_eq!(probs.nrows(), targets.len());
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -probs[[r, t]].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / targets.len() as f64;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Array2::ones(self.nodes[loss].value.raw_dim()));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    acc(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(&mut grads, *a, g.dot(self.value(*b)));
                    acc(&mut grads, *b, g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::Gelu(a) => {
                    let mut da = g;
                    ndarray::Zip::from(&mut da)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= gelu_grad(x));
                    acc(&mut grads, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma).row(0).to_owned();
                    acc(&mut grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * &gam;
                    let d = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_d = dh.sum();
                        let sum_dx = dh.dot(&xh);
                        let is = inv_std[r];
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = is / d * (d * dh[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Gather { table, ids } => {
                    let mut dt = Array2::zeros(self.value(*table).raw_dim());
                    for (r, &i) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(i);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::SelectRows { x, rows } => {
                    let mut dx = Array2::zeros(self.value(*x).raw_dim());
                    for (r, &i) in rows.iter().enumerate() {
                        let mut row = dx.row_mut(i);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    seq_lens,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let dh = qv.ncols() / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros(qv.raw_dim());
                    let mut dk = Array2::zeros(kv.raw_dim());
                    let mut dv = Array2::zeros(vv.raw_dim());
                    let mut offset = 0;
                    let mut p_iter = probs.iter();
                    for &n in seq_lens {
                        for h in 0..*heads {
                            let rows = s![offset..offset + n, h * dh..(h + 1) * dh];
                            let p = p_iter.next().expect("one matrix per head");
                            let d_out = g.slice(rows);
                            let dp = d_out.dot(&vv.slice(rows).t());
                            dv.slice_mut(rows).assign(&p.t().dot(&d_out));
                            let mut ds = dp;
                            for r in 0..n {
                                let dot: f64 = ds.row(r).dot(&p.row(r));
                                for c in 0..n {
                                    ds[[r, c]] = p[[r, c]] * (ds[[r, c]] - dot);
                                }
                            }
                            ds *= scale;
                            dq.slice_mut(rows).assign(&ds.dot(&kv.slice(rows)));
                            dk.slice_mut(rows).assign(&ds.t().dot(&qv.slice(rows)));
                        }
                        offset += n;
                    }
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let upstream = g[[0, 0]] / targets.len() as f64;
                    let mut dl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[[r, t]] -= 1.0;
                    }
                    dl *= upstream;
                    acc(&mut grads, *logits, dl);
                }
            }
        }
        grads
    }
}
