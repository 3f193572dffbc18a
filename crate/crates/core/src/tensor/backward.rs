//! Reverse pass. Node ids grow monotonically as the graph is recorded, so
//! descending-id order is exactly reverse recording order; replaying the
//! reachable subgraph in that order visits every node after all of its
//! consumers, which makes single-pass gradient accumulation valid.

use super::ops::Op;
use super::shape::{broadcast_shapes, broadcast_strides, row_major_strides, zip_broadcast};
use super::{Node, Tensor};
use crate::error::{TensorError, TensorResult};
use std::collections::HashMap;
use std::rc::Rc;

fn parents(op: &Op) -> Vec<&Tensor> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![a, b],
        Op::Conv2d { x, w, .. } | Op::ConvTranspose2d { x, w, .. } => vec![x, w],
        Op::Neg(a)
        | Op::Abs(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a, _)
        | Op::Transpose(a)
        | Op::SumAll(a)
        | Op::MeanAll(a)
        | Op::SoftmaxLast(a)
        | Op::LogSoftmaxLast(a)
        | Op::NormalizeLast(a, _)
        | Op::Reshape(a)
        | Op::Permute(a, _)
        | Op::Gather(a, _)
        | Op::StopGrad(a) => vec![a],
        Op::Concat(parts, _) => parts.iter().collect(),
        Op::StraightThrough { soft } => vec![soft],
    }
}

pub(super) fn run(loss: &Tensor) -> TensorResult<()> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }

    // Reachable subgraph, iteratively (graphs can be thousands of nodes deep).
    let mut nodes: HashMap<u64, Rc<Node>> = HashMap::new();
    let mut stack = vec![loss.0.clone()];
    while let Some(n) = stack.pop() {
        if nodes.contains_key(&n.id) {
            continue;
        }
        for p in parents(&n.op) {
            if !nodes.contains_key(&p.0.id) {
                stack.push(p.0.clone());
            }
        }
        nodes.insert(n.id, n);
    }

    let mut order: Vec<Rc<Node>> = nodes.values().cloned().collect();
    order.sort_by_key(|n| n.id);

    // Ascending pass: does gradient ever need to flow into this node?
    let mut needs: HashMap<u64, bool> = HashMap::new();
    for n in &order {
        let need = match &n.op {
            Op::Leaf => n.requires_grad.get(),
            Op::StopGrad(_) => false,
            op => parents(op).iter().any(|p| needs[&p.0.id]),
        };
        needs.insert(n.id, need);
    }

    if !needs[&loss.0.id] {
        // Loss depends on no trainable leaf; nothing to do.
        return Ok(());
    }

    // Descending pass: propagate.
    let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
    grads.insert(loss.0.id, vec![1.0]);
    for n in order.iter().rev() {
        let g = match grads.remove(&n.id) {
            Some(g) => g,
            None => continue,
        };
        if !needs[&n.id] {
            continue;
        }
        if let Op::Leaf = n.op {
            let mut slot = n.grad.borrow_mut();
            match slot.as_mut() {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                None => *slot = Some(g),
            }
            continue;
        }
        accumulate(n, &g, &needs, &mut grads);
    }
    Ok(())
}

fn stage<'a>(grads: &'a mut HashMap<u64, Vec<f32>>, t: &Tensor) -> &'a mut Vec<f32> {
    grads
        .entry(t.0.id)
        .or_insert_with(|| vec![0.0f32; t.numel()])
}

/// Distributes `g` (gradient at `n`'s output) into `n`'s parents.
fn accumulate(n: &Rc<Node>, g: &[f32], needs: &HashMap<u64, bool>, grads: &mut HashMap<u64, Vec<f32>>) {
    let need = |t: &Tensor| needs[&t.0.id];
    match &n.op {
        Op::Leaf => unreachable!("leaf handled by caller"),
        Op::Add(a, b) => {
            binary_backward(&n.shape, a, b, g, need, grads, |_, _| (1.0, 1.0));
        }
        Op::Sub(a, b) => {
            binary_backward(&n.shape, a, b, g, need, grads, |_, _| (1.0, -1.0));
        }
        Op::Mul(a, b) => {
            let ad = a.data();
            let bd = b.data();
            binary_backward(&n.shape, a, b, g, need, grads, |ai, bi| (bd[bi], ad[ai]));
        }
        Op::Neg(a) => unary_backward(a, g, need, grads, |_| -1.0),
        Op::Abs(a) => {
            let x = a.data();
            unary_backward(a, g, need, grads, |i| {
                if x[i] > 0.0 {
                    1.0
                } else if x[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
        }
        Op::Relu(a) => {
            let x = a.data();
            unary_backward(a, g, need, grads, |i| if x[i] > 0.0 { 1.0 } else { 0.0 });
        }
        Op::Sigmoid(a) => {
            let y = n.data.borrow();
            unary_backward(a, g, need, grads, |i| y[i] * (1.0 - y[i]));
        }
        Op::Exp(a) => {
            let y = n.data.borrow();
            unary_backward(a, g, need, grads, |i| y[i]);
        }
        Op::Log(a) => {
            let x = a.data();
            unary_backward(a, g, need, grads, |i| 1.0 / x[i]);
        }
        Op::Scale(a, c) => {
            let c = *c;
            unary_backward(a, g, need, grads, move |_| c);
        }
        Op::AddScalar(a, _) => unary_backward(a, g, need, grads, |_| 1.0),
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let nn = b.shape()[1];
            if need(a) {
                let bd = b.data();
                let da = stage(grads, a);
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0f32;
                        for j in 0..nn {
                            acc += g[i * nn + j] * bd[p * nn + j];
                        }
                        da[i * k + p] += acc;
                    }
                }
            }
            if need(b) {
                let ad = a.data();
                let db = stage(grads, b);
                for p in 0..k {
                    for i in 0..m {
                        let aip = ad[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..nn {
                            db[p * nn + j] += aip * g[i * nn + j];
                        }
                    }
                }
            }
        }
        Op::Transpose(a) => {
            if need(a) {
                let (m, nn) = (a.shape()[0], a.shape()[1]);
                let da = stage(grads, a);
                for i in 0..m {
                    for j in 0..nn {
                        da[i * nn + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::Conv2d { x, w, stride, pad } => conv2d_backward(n, x, w, *stride, *pad, g, need, grads),
        Op::ConvTranspose2d { x, w, stride, pad } => {
            convt2d_backward(n, x, w, *stride, *pad, g, need, grads)
        }
        Op::SumAll(a) => {
            if need(a) {
                let da = stage(grads, a);
                da.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::MeanAll(a) => {
            if need(a) {
                let inv = 1.0 / a.numel().max(1) as f32;
                let da = stage(grads, a);
                da.iter_mut().for_each(|v| *v += g[0] * inv);
            }
        }
        Op::SoftmaxLast(a) => {
            if need(a) {
                let y = n.data.borrow();
                let last = *n.shape.last().unwrap();
                let da = stage(grads, a);
                for ((yr, gr), dr) in y.chunks(last).zip(g.chunks(last)).zip(da.chunks_mut(last)) {
                    let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += yv * (gv - dot);
                    }
                }
            }
        }
        Op::LogSoftmaxLast(a) => {
            if need(a) {
                let y = n.data.borrow();
                let last = *n.shape.last().unwrap();
                let da = stage(grads, a);
                for ((yr, gr), dr) in y.chunks(last).zip(g.chunks(last)).zip(da.chunks_mut(last)) {
                    let gsum: f32 = gr.iter().sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += gv - yv.exp() * gsum;
                    }
                }
            }
        }
        Op::NormalizeLast(a, eps) => {
            if need(a) {
                let x = a.data();
                let y = n.data.borrow();
                let last = *n.shape.last().unwrap();
                let da = stage(grads, a);
                for (((xr, yr), gr), dr) in x
                    .chunks(last)
                    .zip(y.chunks(last))
                    .zip(g.chunks(last))
                    .zip(da.chunks_mut(last))
                {
                    let nf = last as f32;
                    let mu: f32 = xr.iter().sum::<f32>() / nf;
                    let var: f32 = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<f32>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean: f32 = gr.iter().sum::<f32>() / nf;
                    let gydot: f32 = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f32>() / nf;
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += inv * (gv - gmean - yv * gydot);
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if need(a) {
                let da = stage(grads, a);
                da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
        }
        Op::Permute(a, perm) => {
            if need(a) {
                let in_strides = row_major_strides(a.shape());
                let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let da = stage(grads, a);
                super::shape::map_indices(&n.shape, &walk, |o, i| da[i] += g[o]);
            }
        }
        Op::Concat(parts, axis) => {
            let axis = *axis;
            let out_shape = &n.shape;
            let outer: usize = out_shape[..axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let axis_total = out_shape[axis];
            let mut offset = 0;
            for p in parts {
                let pa = p.shape()[axis];
                if need(p) {
                    let dp = stage(grads, p);
                    for ou in 0..outer {
                        let src = (ou * axis_total + offset) * inner;
                        let dst = ou * pa * inner;
                        dp[dst..dst + pa * inner]
                            .iter_mut()
                            .zip(&g[src..src + pa * inner])
                            .for_each(|(d, v)| *d += v);
                    }
                }
                offset += pa;
            }
        }
        Op::Gather(table, rows) => {
            if need(table) {
                let c = table.shape()[1];
                let dt = stage(grads, table);
                for (i, &row) in rows.iter().enumerate() {
                    dt[row * c..(row + 1) * c]
                        .iter_mut()
                        .zip(&g[i * c..(i + 1) * c])
                        .for_each(|(d, v)| *d += v);
                }
            }
        }
        Op::StopGrad(_) => {}
        Op::StraightThrough { soft } => {
            if need(soft) {
                let ds = stage(grads, soft);
                ds.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
        }
    }
}

fn unary_backward(
    a: &Tensor,
    g: &[f32],
    need: impl Fn(&Tensor) -> bool,
    grads: &mut HashMap<u64, Vec<f32>>,
    dfdx: impl Fn(usize) -> f32,
) {
    if need(a) {
        let da = stage(grads, a);
        for (i, (d, &gv)) in da.iter_mut().zip(g).enumerate() {
            *d += gv * dfdx(i);
        }
    }
}

/// Shared broadcast-aware backward for Add/Sub/Mul: `coeffs(ai, bi)` returns
/// the local derivatives (d/da, d/db) at the element pair.
fn binary_backward(
    out_shape: &[usize],
    a: &Tensor,
    b: &Tensor,
    g: &[f32],
    need: impl Fn(&Tensor) -> bool,
    grads: &mut HashMap<u64, Vec<f32>>,
    coeffs: impl Fn(usize, usize) -> (f32, f32),
) {
    let na = need(a);
    let nb = need(b);
    if !na && !nb {
        return;
    }
    let astr = broadcast_strides(a.shape(), out_shape);
    let bstr = broadcast_strides(b.shape(), out_shape);
    debug_assert!(broadcast_shapes("bwd", a.shape(), b.shape()).is_ok());
    let mut da = if na { vec![0.0f32; a.numel()] } else { Vec::new() };
    let mut db = if nb { vec![0.0f32; b.numel()] } else { Vec::new() };
    zip_broadcast(out_shape, &astr, &bstr, |o, ai, bi| {
        let (ca, cb) = coeffs(ai, bi);
        if na {
            da[ai] += g[o] * ca;
        }
        if nb {
            db[bi] += g[o] * cb;
        }
    });
    if na {
        let slot = stage(grads, a);
        slot.iter_mut().zip(&da).for_each(|(s, v)| *s += v);
    }
    if nb {
        let slot = stage(grads, b);
        slot.iter_mut().zip(&db).for_each(|(s, v)| *s += v);
    }
}

fn conv2d_backward(
    n: &Rc<Node>,
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    g: &[f32],
    need: impl Fn(&Tensor) -> bool,
    grads: &mut HashMap<u64, Vec<f32>>,
) {
    let (bsz, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let (oh, ow) = (n.shape[2], n.shape[3]);
    let nx = need(x);
    let nw = need(w);
    if !nx && !nw {
        return;
    }
    let xd = x.data();
    let wdta = w.data();
    let mut dx = if nx { vec![0.0f32; xd.len()] } else { Vec::new() };
    let mut dw = if nw { vec![0.0f32; wdta.len()] } else { Vec::new() };
    for b in 0..bsz {
        for o in 0..cout {
            for oi in 0..oh {
                for oj in 0..ow {
                    let gv = g[((b * cout + o) * oh + oi) * ow + oj];
                    if gv == 0.0 {
                        continue;
                    }
                    for c in 0..cin {
                        for ki in 0..k {
                            let ii = (oi * stride + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let xrow = ((b * cin + c) * h + ii as usize) * wd;
                            let wrow = ((o * cin + c) * k + ki) * k;
                            for kj in 0..k {
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if jj < 0 || jj >= wd as isize {
                                    continue;
                                }
                                if nx {
                                    dx[xrow + jj as usize] += gv * wdta[wrow + kj];
                                }
                                if nw {
                                    dw[wrow + kj] += gv * xd[xrow + jj as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    drop(xd);
    drop(wdta);
    if nx {
        let slot = stage(grads, x);
        slot.iter_mut().zip(&dx).for_each(|(s, v)| *s += v);
    }
    if nw {
        let slot = stage(grads, w);
        slot.iter_mut().zip(&dw).for_each(|(s, v)| *s += v);
    }
}

fn convt2d_backward(
    n: &Rc<Node>,
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    g: &[f32],
    need: impl Fn(&Tensor) -> bool,
    grads: &mut HashMap<u64, Vec<f32>>,
) {
    let (bsz, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[1], w.shape()[2]);
    let (oh, ow) = (n.shape[2], n.shape[3]);
    let nx = need(x);
    let nw = need(w);
    if !nx && !nw {
        return;
    }
    let xd = x.data();
    let wdta = w.data();
    let mut dx = if nx { vec![0.0f32; xd.len()] } else { Vec::new() };
    let mut dw = if nw { vec![0.0f32; wdta.len()] } else { Vec::new() };
    for b in 0..bsz {
        for c in 0..cin {
            for i in 0..h {
                for j in 0..wd {
                    let xi = ((b * cin + c) * h + i) * wd + j;
                    for o in 0..cout {
                        for ki in 0..k {
                            let oi = (i * stride + ki) as isize - pad as isize;
                            if oi < 0 || oi >= oh as isize {
                                continue;
                            }
                            let orow = ((b * cout + o) * oh + oi as usize) * ow;
                            let wrow = ((c * cout + o) * k + ki) * k;
                            for kj in 0..k {
                                let oj = (j * stride + kj) as isize - pad as isize;
                                if oj < 0 || oj >= ow as isize {
                                    continue;
                                }
                                let gv = g[orow + oj as usize];
                                if nx {
                                    dx[xi] += gv * wdta[wrow + kj];
                                }
                                if nw {
                                    dw[wrow + kj] += gv * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    drop(xd);
    drop(wdta);
    if nx {
        let slot = stage(grads, x);
        slot.iter_mut().zip(&dx).for_each(|(s, v)| *s += v);
    }
    if nw {
        let slot = stage(grads, w);
        slot.iter_mut().zip(&dw).for_each(|(s, v)| *s += v);
    }
}
