//! Reverse-mode automatic differentiation over small dense vectors.
//!
//! Forward values are computed with the functions in [`prim`], which the
//! inference path calls directly; this keeps teacher-forced scores and beam
//! search scores bit-identical.

use super::params::{Gradients, Params, Tensor};

pub type NodeId = usize;

pub mod prim {
    use super::Tensor;

    pub fn affine(w: &Tensor, b: Option<&Tensor>, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(w.cols, x.len());
        (0..w.rows)
            .map(|r| {
                let dot: f64 = w.row(r).iter().zip(x).map(|(a, b)| a * b).sum();
                dot + b.map_or(0.0, |b| b.data[r])
            })
            .collect()
    }

    pub fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    pub fn softmax(x: &[f64]) -> Vec<f64> {
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    pub fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x * y).collect()
    }

    /// `g * a + (1 - g) * b`, with a length-1 `g` broadcast.
    pub fn gate(g: &[f64], a: &[f64], b: &[f64]) -> Vec<f64> {
        (0..a.len())
            .map(|i| {
                let gi = if g.len() == 1 { g[0] } else { g[i] };
                gi * a[i] + (1.0 - gi) * b[i]
            })
            .collect()
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn weighted_sum(weights: &[f64], rows: &[&[f64]]) -> Vec<f64> {
        let mut out = vec![0.0; rows[0].len()];
        for (w, row) in weights.iter().zip(rows) {
            for (o, v) in out.iter_mut().zip(row.iter()) {
                *o += w * v;
            }
        }
        out
    }

    pub fn scatter_add(x: &[f64], index: &[usize], len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        for (v, &i) in x.iter().zip(index) {
            out[i] += v;
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Row { param: usize, row: usize },
    Affine { w: usize, b: Option<usize>, x: NodeId },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Slice { x: NodeId, start: usize },
    Concat(Vec<NodeId>),
    DotRows { rows: Vec<NodeId>, x: NodeId },
    WeightedSum { weights: NodeId, rows: Vec<NodeId> },
    Softmax(NodeId),
    ScatterAdd { x: NodeId, index: Vec<usize> },
    Gate { g: NodeId, a: NodeId, b: NodeId },
    Pick { x: NodeId, index: usize },
    Log(NodeId),
    Sum(Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p Params,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p Params) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Vec<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn row(&mut self, param: usize, row: usize) -> NodeId {
        let value = self.params.tensors[param].row(row).to_vec();
        self.push(value, Op::Row { param, row })
    }

    pub fn affine(&mut self, w: usize, b: Option<usize>, x: NodeId) -> NodeId {
        let value = prim::affine(
            &self.params.tensors[w],
            b.map(|b| &self.params.tensors[b]),
            &self.nodes[x].value,
        );
        self.push(value, Op::Affine { w, b, x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = prim::add(&self.nodes[a].value, &self.nodes[b].value);
        self.push(value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = prim::mul(&self.nodes[a].value, &self.nodes[b].value);
        self.push(value, Op::Mul(a, b))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.iter().map(|&v| prim::sigmoid(v)).collect();
        self.push(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.iter().map(|v| v.tanh()).collect();
        self.push(value, Op::Tanh(x))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let value = self.nodes[x].value[start..start + len].to_vec();
        self.push(value, Op::Slice { x, start })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let value = parts.iter().flat_map(|&p| self.nodes[p].value.iter().copied()).collect();
        self.push(value, Op::Concat(parts.to_vec()))
    }

    pub fn dot_rows(&mut self, rows: &[NodeId], x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let value = rows.iter().map(|&r| prim::dot(&self.nodes[r].value, xv)).collect();
        self.push(value, Op::DotRows { rows: rows.to_vec(), x })
    }

    pub fn weighted_sum(&mut self, weights: NodeId, rows: &[NodeId]) -> NodeId {
        let refs: Vec<&[f64]> = rows.iter().map(|&r| self.nodes[r].value.as_slice()).collect();
        let value = prim::weighted_sum(&self.nodes[weights].value, &refs);
        self.push(value, Op::WeightedSum { weights, rows: rows.to_vec() })
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let value = prim::softmax(&self.nodes[x].value);
        self.push(value, Op::Softmax(x))
    }

    pub fn scatter_add(&mut self, x: NodeId, index: &[usize], len: usize) -> NodeId {
        let value = prim::scatter_add(&self.nodes[x].value, index, len);
        self.push(value, Op::ScatterAdd { x, index: index.to_vec() })
    }

    pub fn gate(&mut self, g: NodeId, a: NodeId, b: NodeId) -> NodeId {
        let value = prim::gate(&self.nodes[g].value, &self.nodes[a].value, &self.nodes[b].value);
        self.push(value, Op::Gate { g, a, b })
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> NodeId {
        let value = vec![self.nodes[x].value[index]];
        self.push(value, Op::Pick { x, index })
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.iter().map(|v| v.ln()).collect();
        self.push(value, Op::Log(x))
    }

    pub fn sum(&mut self, xs: &[NodeId]) -> NodeId {
        let value = vec![xs.iter().map(|&x| self.nodes[x].value[0]).sum()];
        self.push(value, Op::Sum(xs.to_vec()))
    }

    /// Propagate `d loss / d node` for each seeded scalar node and
    /// accumulate parameter gradients into `grads`.
    pub fn backward(&self, seeds: &[(NodeId, f64)], grads: &mut Gradients) {
        let Some(&last) = seeds.iter().map(|(n, _)| n).max() else {
            return;
        };
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); last + 1];
        for &(node, g) in seeds {
            accumulate(&mut adj[node], &[g]);
        }
        for id in (0..=last).rev() {
            if adj[id].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut adj[id]);
            self.backward_node(id, &g, &mut adj, grads);
        }
    }

    fn backward_node(&self, id: NodeId, g: &[f64], adj: &mut [Vec<f64>], grads: &mut Gradients) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Input => {}
            Op::Row { param, row } => {
                for (a, b) in grads.tensor_mut(*param).row_mut(*row).iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::Affine { w, b, x } => {
                let wt = &self.params.tensors[*w];
                let xv = &self.nodes[*x].value;
                let gw = grads.tensor_mut(*w);
                for (r, &gr) in g.iter().enumerate() {
                    if gr == 0.0 {
                        continue;
                    }
                    for (a, &xj) in gw.row_mut(r).iter_mut().zip(xv) {
                        *a += gr * xj;
                    }
                }
                if let Some(b) = b {
                    for (a, &gr) in grads.tensor_mut(*b).data.iter_mut().zip(g) {
                        *a += gr;
                    }
                }
                let mut gx = vec![0.0; wt.cols];
                for (r, &gr) in g.iter().enumerate() {
                    if gr == 0.0 {
                        continue;
                    }
                    for (a, &wij) in gx.iter_mut().zip(wt.row(r)) {
                        *a += gr * wij;
                    }
                }
                accumulate(&mut adj[*x], &gx);
            }
            Op::Add(a, b) => {
                accumulate(&mut adj[*a], g);
                accumulate(&mut adj[*b], g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                accumulate(&mut adj[*a], &ga);
                accumulate(&mut adj[*b], &gb);
            }
            Op::Sigmoid(x) => {
                let gx: Vec<f64> = g.iter().zip(&node.value).map(|(g, s)| g * s * (1.0 - s)).collect();
                accumulate(&mut adj[*x], &gx);
            }
            Op::Tanh(x) => {
                let gx: Vec<f64> = g.iter().zip(&node.value).map(|(g, t)| g * (1.0 - t * t)).collect();
                accumulate(&mut adj[*x], &gx);
            }
            Op::Slice { x, start } => {
                let mut gx = vec![0.0; self.nodes[*x].value.len()];
                gx[*start..*start + g.len()].copy_from_slice(g);
                accumulate(&mut adj[*x], &gx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    accumulate(&mut adj[p], &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::DotRows { rows, x } => {
                let xv = &self.nodes[*x].value;
                let mut gx = vec![0.0; xv.len()];
                for (&r, &gi) in rows.iter().zip(g) {
                    let rv = &self.nodes[r].value;
                    let gr: Vec<f64> = xv.iter().map(|v| gi * v).collect();
                    accumulate(&mut adj[r], &gr);
                    for (a, v) in gx.iter_mut().zip(rv) {
                        *a += gi * v;
                    }
                }
                accumulate(&mut adj[*x], &gx);
            }
            Op::WeightedSum { weights, rows } => {
                let wv = &self.nodes[*weights].value;
                let gw: Vec<f64> = rows.iter().map(|&r| prim::dot(&self.nodes[r].value, g)).collect();
                for (&r, &w) in rows.iter().zip(wv) {
                    let gr: Vec<f64> = g.iter().map(|v| w * v).collect();
                    accumulate(&mut adj[r], &gr);
                }
                accumulate(&mut adj[*weights], &gw);
            }
            Op::Softmax(x) => {
                let s = &node.value;
                let inner = prim::dot(g, s);
                let gx: Vec<f64> = s.iter().zip(g).map(|(s, g)| s * (g - inner)).collect();
                accumulate(&mut adj[*x], &gx);
            }
            Op::ScatterAdd { x, index } => {
                let gx: Vec<f64> = index.iter().map(|&i| g[i]).collect();
                accumulate(&mut adj[*x], &gx);
            }
            Op::Gate { g: gn, a, b } => {
                let gv = &self.nodes[*gn].value;
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let at = |i: usize| if gv.len() == 1 { gv[0] } else { gv[i] };
                let ga: Vec<f64> = (0..g.len()).map(|i| g[i] * at(i)).collect();
                let gb: Vec<f64> = (0..g.len()).map(|i| g[i] * (1.0 - at(i))).collect();
                let diff: Vec<f64> = (0..g.len()).map(|i| g[i] * (av[i] - bv[i])).collect();
                let gg = if gv.len() == 1 { vec![diff.iter().sum()] } else { diff };
                accumulate(&mut adj[*a], &ga);
                accumulate(&mut adj[*b], &gb);
                accumulate(&mut adj[*gn], &gg);
            }
            Op::Pick { x, index } => {
                let mut gx = vec![0.0; self.nodes[*x].value.len()];
                gx[*index] = g[0];
                accumulate(&mut adj[*x], &gx);
            }
            Op::Log(x) => {
                let gx: Vec<f64> = g.iter().zip(&self.nodes[*x].value).map(|(g, v)| g / v).collect();
                accumulate(&mut adj[*x], &gx);
            }
            Op::Sum(xs) => {
                for &x in xs {
                    accumulate(&mut adj[x], g);
                }
            }
        }
    }
}

fn accumulate(slot: &mut Vec<f64>, g: &[f64]) {
    if slot.is_empty() {
        slot.extend_from_slice(g);
    } else {
        for (a, b) in slot.iter_mut().zip(g) {
            *a += b;
        }
    }
}
