//! Forward ops. Each method validates shapes, computes the result eagerly,
//! and records an `Op` node so the backward pass can replay it.

use super::shape::{broadcast_shapes, broadcast_strides, numel, row_major_strides, zip_broadcast};
use super::Tensor;
use crate::error::{TensorError, TensorResult};

#[derive(Clone)]
pub enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Neg(Tensor),
    Abs(Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Scale(Tensor, f32),
    AddScalar(Tensor, f32),
    Matmul(Tensor, Tensor),
    Transpose(Tensor),
    Conv2d {
        x: Tensor,
        w: Tensor,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Tensor,
        w: Tensor,
        stride: usize,
        pad: usize,
    },
    SumAll(Tensor),
    MeanAll(Tensor),
    SoftmaxLast(Tensor),
    LogSoftmaxLast(Tensor),
    NormalizeLast(Tensor, f32),
    Reshape(Tensor),
    Permute(Tensor, Vec<usize>),
    Concat(Vec<Tensor>, usize),
    Gather(Tensor, Vec<usize>),
    StopGrad(Tensor),
    /// Forward takes this node's own (hard) data; backward hands the incoming
    /// gradient to `soft` untouched.
    StraightThrough {
        soft: Tensor,
    },
}

fn binary_shapes(op: &'static str, a: &Tensor, b: &Tensor) -> TensorResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let out = broadcast_shapes(op, a.shape(), b.shape())?;
    let astr = broadcast_strides(a.shape(), &out);
    let bstr = broadcast_strides(b.shape(), &out);
    Ok((out, astr, bstr))
}

fn binary(op_name: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32, op: Op) -> TensorResult<Tensor> {
    let (out_shape, astr, bstr) = binary_shapes(op_name, a, b)?;
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0f32; numel(&out_shape)];
    zip_broadcast(&out_shape, &astr, &bstr, |o, ai, bi| {
        out[o] = f(ad[ai], bd[bi]);
    });
    drop(ad);
    drop(bd);
    Ok(Tensor::new_node(out_shape, out, false, op))
}

fn unary(x: &Tensor, f: impl Fn(f32) -> f32, op: Op) -> Tensor {
    let out = x.data().iter().map(|&v| f(v)).collect();
    Tensor::new_node(x.shape().to_vec(), out, false, op)
}

pub(crate) fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> TensorResult<Tensor> {
        binary("add", self, rhs, |a, b| a + b, Op::Add(self.clone(), rhs.clone()))
    }

    pub fn sub(&self, rhs: &Tensor) -> TensorResult<Tensor> {
        binary("sub", self, rhs, |a, b| a - b, Op::Sub(self.clone(), rhs.clone()))
    }

    pub fn mul(&self, rhs: &Tensor) -> TensorResult<Tensor> {
        binary("mul", self, rhs, |a, b| a * b, Op::Mul(self.clone(), rhs.clone()))
    }

    pub fn neg(&self) -> Tensor {
        unary(self, |v| -v, Op::Neg(self.clone()))
    }

    pub fn abs(&self) -> Tensor {
        unary(self, f32::abs, Op::Abs(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |v| v.max(0.0), Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(self, sigmoid_scalar, Op::Sigmoid(self.clone()))
    }

    /// x * sigmoid(x); smooth and never fully saturated, which keeps gradient
    /// flowing to every channel of the nets that use it.
    pub fn silu(&self) -> TensorResult<Tensor> {
        self.mul(&self.sigmoid())
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f32::exp, Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Tensor {
        unary(self, f32::ln, Op::Log(self.clone()))
    }

    pub fn scale(&self, c: f32) -> Tensor {
        unary(self, |v| v * c, Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        unary(self, |v| v + c, Op::AddScalar(self.clone(), c))
    }

    /// 2-d matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> TensorResult<Tensor> {
        if self.shape().len() != 2 || rhs.shape().len() != 2 || self.shape()[1] != rhs.shape()[0] {
            return Err(TensorError::InnerDim {
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = rhs.shape()[1];
        let a = self.data();
        let b = rhs.data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        drop(a);
        drop(b);
        Ok(Tensor::new_node(vec![m, n], out, false, Op::Matmul(self.clone(), rhs.clone())))
    }

    /// 2-d transpose.
    pub fn transpose(&self) -> TensorResult<Tensor> {
        if self.shape().len() != 2 {
            return Err(TensorError::BadRank {
                op: "transpose",
                expected: 2,
                got: self.shape().to_vec(),
            });
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let a = self.data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        drop(a);
        Ok(Tensor::new_node(vec![n, m], out, false, Op::Transpose(self.clone())))
    }

    /// `[b,c,h,w] * [o,c,k,k] -> [b,o,h',w']` with zero padding, odd kernels.
    pub fn conv2d(&self, w: &Tensor, stride: usize, pad: usize) -> TensorResult<Tensor> {
        let (xs, ws) = conv_check(self, w, stride, pad, true)?;
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let x = self.data();
        let ker = w.data();
        let mut out = vec![0.0f32; bsz * cout * oh * ow];
        for b in 0..bsz {
            for o in 0..cout {
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = 0.0f32;
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
                                    acc += x[xrow + jj as usize] * ker[wrow + kj];
                                }
                            }
                        }
                        out[((b * cout + o) * oh + oi) * ow + oj] = acc;
                    }
                }
            }
        }
        drop(x);
        drop(ker);
        Ok(Tensor::new_node(
            vec![bsz, cout, oh, ow],
            out,
            false,
            Op::Conv2d {
                x: self.clone(),
                w: w.clone(),
                stride,
                pad,
            },
        ))
    }

    /// Adjoint of conv2d: `[b,c,h,w] * [c,o,k,k] -> [b,o,(h-1)s-2p+k,...]`.
    pub fn conv_transpose2d(&self, w: &Tensor, stride: usize, pad: usize) -> TensorResult<Tensor> {
        let (xs, ws) = conv_check(self, w, stride, pad, false)?;
        let (bsz, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[1], ws[2]);
        let oh_full = (h - 1) * stride + k;
        let ow_full = (wd - 1) * stride + k;
        if oh_full < 2 * pad + 1 || ow_full < 2 * pad + 1 {
            return Err(TensorError::KernelTooLarge {
                op: "conv_transpose2d",
                extent: h.min(wd),
                k,
                pad,
            });
        }
        let oh = oh_full - 2 * pad;
        let ow = ow_full - 2 * pad;
        let x = self.data();
        let ker = w.data();
        let mut out = vec![0.0f32; bsz * cout * oh * ow];
        for b in 0..bsz {
            for c in 0..cin {
                for i in 0..h {
                    for j in 0..wd {
                        let v = x[((b * cin + c) * h + i) * wd + j];
                        if v == 0.0 {
                            continue;
                        }
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
                                    out[orow + oj as usize] += v * ker[wrow + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(x);
        drop(ker);
        Ok(Tensor::new_node(
            vec![bsz, cout, oh, ow],
            out,
            false,
            Op::ConvTranspose2d {
                x: self.clone(),
                w: w.clone(),
                stride,
                pad,
            },
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f32 = self.data().iter().sum();
        Tensor::new_node(vec![1], vec![s], false, Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f32;
        let s: f32 = self.data().iter().sum();
        Tensor::new_node(vec![1], vec![s / n], false, Op::MeanAll(self.clone()))
    }

    /// Softmax over the last axis, max-subtracted for stability.
    pub fn softmax_last(&self) -> Tensor {
        let out = rowwise(self, |row, out| {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        });
        Tensor::new_node(self.shape().to_vec(), out, false, Op::SoftmaxLast(self.clone()))
    }

    pub fn log_softmax_last(&self) -> Tensor {
        let out = rowwise(self, |row, out| {
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = row.iter().map(|&v| (v - m).exp()).sum();
            let lz = z.ln() + m;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = v - lz;
            }
        });
        Tensor::new_node(self.shape().to_vec(), out, false, Op::LogSoftmaxLast(self.clone()))
    }

    /// Zero-mean unit-variance per row over the last axis.
    pub fn normalize_last(&self, eps: f32) -> Tensor {
        let out = rowwise(self, |row, out| {
            let n = row.len() as f32;
            let mu: f32 = row.iter().sum::<f32>() / n;
            let var: f32 = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f32>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mu) * inv;
            }
        });
        Tensor::new_node(self.shape().to_vec(), out, false, Op::NormalizeLast(self.clone(), eps))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> TensorResult<Tensor> {
        if numel(new_shape) != self.numel() {
            return Err(TensorError::BadReshape {
                from: self.shape().to_vec(),
                from_len: self.numel(),
                to: new_shape.to_vec(),
                to_len: numel(new_shape),
            });
        }
        Ok(Tensor::new_node(
            new_shape.to_vec(),
            self.to_vec(),
            false,
            Op::Reshape(self.clone()),
        ))
    }

    /// Axis permutation: output dim `d` takes input dim `perm[d]`.
    pub fn permute(&self, perm: &[usize]) -> TensorResult<Tensor> {
        let nd = self.shape().len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                what: format!("{perm:?} is not a permutation of rank {nd}"),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let in_strides = row_major_strides(self.shape());
        let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let x = self.data();
        let mut out = vec![0.0f32; self.numel()];
        super::shape::map_indices(&out_shape, &walk, |o, i| out[o] = x[i]);
        drop(x);
        Ok(Tensor::new_node(out_shape, out, false, Op::Permute(self.clone(), perm.to_vec())))
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> TensorResult<Tensor> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = parts[0].shape().to_vec();
        let nd = first.len();
        if axis >= nd {
            return Err(TensorError::Invalid {
                op: "concat",
                what: format!("axis {axis} out of range for rank {nd}"),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            if p.shape().len() != nd
                || (0..nd).any(|d| d != axis && p.shape()[d] != first[d])
            {
                return Err(TensorError::ConcatMismatch {
                    axis,
                    lhs: first.clone(),
                    rhs: p.shape().to_vec(),
                });
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0f32; numel(&out_shape)];
        let mut offset = 0;
        for p in parts {
            let pa = p.shape()[axis];
            let pd = p.data();
            for ou in 0..outer {
                let src = ou * pa * inner;
                let dst = (ou * axis_total + offset) * inner;
                out[dst..dst + pa * inner].copy_from_slice(&pd[src..src + pa * inner]);
            }
            offset += pa;
        }
        Ok(Tensor::new_node(out_shape, out, false, Op::Concat(parts.to_vec(), axis)))
    }

    /// Row lookup into a `[rows, cols]` table; differentiable back into the
    /// table (scatter-add), with the row indices treated as constants.
    pub fn gather_rows(&self, rows: &[usize]) -> TensorResult<Tensor> {
        if self.shape().len() != 2 {
            return Err(TensorError::BadRank {
                op: "gather",
                expected: 2,
                got: self.shape().to_vec(),
            });
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let table = self.data();
        let mut out = vec![0.0f32; rows.len() * c];
        for (i, &row) in rows.iter().enumerate() {
            if row >= r {
                return Err(TensorError::GatherOutOfRange { row, rows: r });
            }
            out[i * c..(i + 1) * c].copy_from_slice(&table[row * c..(row + 1) * c]);
        }
        drop(table);
        Ok(Tensor::new_node(
            vec![rows.len(), c],
            out,
            false,
            Op::Gather(self.clone(), rows.to_vec()),
        ))
    }

    /// Identity forward, zero backward.
    pub fn stop_gradient(&self) -> Tensor {
        Tensor::new_node(self.shape().to_vec(), self.to_vec(), false, Op::StopGrad(self.clone()))
    }

    /// Forward emits `hard` exactly; backward passes the incoming gradient to
    /// `self` unchanged. The quantizer and the mask hardening both ride on
    /// this.
    pub fn straight_through(&self, hard: Vec<f32>) -> TensorResult<Tensor> {
        if hard.len() != self.numel() {
            return Err(TensorError::Invalid {
                op: "straight_through",
                what: format!(
                    "hard buffer has {} values, soft tensor has {}",
                    hard.len(),
                    self.numel()
                ),
            });
        }
        Ok(Tensor::new_node(
            self.shape().to_vec(),
            hard,
            false,
            Op::StraightThrough { soft: self.clone() },
        ))
    }
}

fn rowwise(x: &Tensor, f: impl Fn(&[f32], &mut [f32])) -> Vec<f32> {
    let last = *x.shape().last().expect("rowwise on rank-0 tensor");
    let data = x.data();
    let mut out = vec![0.0f32; data.len()];
    for (row, orow) in data.chunks(last).zip(out.chunks_mut(last)) {
        f(row, orow);
    }
    out
}

fn conv_check(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    forward_conv: bool,
) -> TensorResult<([usize; 4], [usize; 4])> {
    let op: &'static str = if forward_conv { "conv2d" } else { "conv_transpose2d" };
    if x.shape().len() != 4 {
        return Err(TensorError::BadRank { op, expected: 4, got: x.shape().to_vec() });
    }
    if w.shape().len() != 4 || w.shape()[2] != w.shape()[3] {
        return Err(TensorError::Invalid {
            op,
            what: format!("kernel must be [*,*,k,k], got {:?}", w.shape()),
        });
    }
    if stride == 0 {
        return Err(TensorError::Invalid { op, what: "stride must be >= 1".into() });
    }
    let xs = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let ws = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let k = ws[2];
    if forward_conv {
        if k % 2 == 0 {
            return Err(TensorError::EvenKernel { k });
        }
        if ws[1] != xs[1] {
            return Err(TensorError::ChannelMismatch { input: xs[1], kernel: ws[1] });
        }
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(TensorError::KernelTooLarge {
                op,
                extent: xs[2].min(xs[3]),
                k,
                pad,
            });
        }
    } else if ws[0] != xs[1] {
        return Err(TensorError::ChannelMismatch { input: xs[1], kernel: ws[0] });
    }
    Ok((xs, ws))
}
