use crate::error::{Error, Result};
use crate::ops::{self, conv, linear, loss, norm, resize, weight_norm};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::census::{self, TapeKind};
use super::graph::Graph;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: norm::GroupNormSaved<T>,
    },
    Relu(Var),
    Softplus(Var, f64),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ChannelMask(Var, Tensor<T>),
    Upsample(Var, usize),
    AvgPool(Var),
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    WeightNorm {
        direction: Var,
        gain: Var,
        norms: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            }
            | Op::Dense {
                input,
                weight: kernel,
                bias,
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::GroupNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Relu(a)
            | Op::Softplus(a, _)
            | Op::Scale(a, _)
            | Op::ChannelMask(a, _)
            | Op::Upsample(a, _)
            | Op::AvgPool(a) => vec![*a],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::WeightNorm { direction, gain, .. } => vec![*direction, *gain],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Record of primitive applications with the forward values needed to pull
/// cotangents back through them.
///
/// A tape is reusable: [`Tape::vjp`] borrows it immutably, so one recording
/// serves any number of vector–Jacobian products.
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    kind: TapeKind,
}

impl<T> Drop for Tape<T> {
    fn drop(&mut self) {
        census::release(self.kind);
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new(kind: TapeKind) -> Self {
        census::acquire(kind);
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            kind,
        }
    }

    pub fn kind(&self) -> TapeKind {
        self.kind
    }

    /// Number of recorded entries, leaves included.
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Number of recorded primitive applications (leaves excluded).
    pub fn op_count(&self) -> usize {
        self.ops.iter().filter(|o| !matches!(o, Op::Leaf)).count()
    }

    /// Registers an input or parameter slot.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn get(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    fn push(&mut self, t: Tensor<T>, op: Op<T>) -> Var {
        self.values.push(t);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.values.len() {
            Ok(())
        } else {
            Err(Error::Tape(format!("variable {} is not on this tape", v.0)))
        }
    }

    /// Pulls `cotangent` on `output` back to every variable in `wanted`.
    ///
    /// Only the part of the graph between `wanted` and `output` is visited;
    /// variables that do not influence `output` receive zero cotangents.
    pub fn vjp(&self, output: Var, cotangent: Tensor<T>, wanted: &[Var]) -> Result<Gradients<T>> {
        self.vjp_many(vec![(output, cotangent)], wanted)
    }

    /// Like [`Tape::vjp`] for several outputs at once: the result is the sum of
    /// the pullbacks of every `(output, cotangent)` seed.
    pub fn vjp_many(&self, seeds: Vec<(Var, Tensor<T>)>, wanted: &[Var]) -> Result<Gradients<T>> {
        for (output, cotangent) in &seeds {
            self.check(*output)?;
            let out_shape = self.values[output.0].shape();
            if cotangent.shape() != out_shape {
                return Err(Error::shape("vjp", out_shape, cotangent.shape()));
            }
        }
        for &w in wanted {
            self.check(w)?;
        }

        let n = seeds.iter().map(|(v, _)| v.0 + 1).max().unwrap_or(0);
        let mut needed = vec![false; n];
        for &w in wanted {
            if w.0 < n {
                needed[w.0] = true;
            }
        }
        for i in 0..n {
            if !needed[i] && self.ops[i].inputs().iter().any(|v| needed[v.0]) {
                needed[i] = true;
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        for (output, cotangent) in seeds {
            match &mut grads[output.0] {
                Some(acc) => acc.add_assign(&cotangent)?,
                slot @ None => *slot = Some(cotangent),
            }
        }
        for i in (0..n).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if matches!(self.ops[i], Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (var, contribution) in self.pullback(i, &g, &needed)? {
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let entries = wanted
            .iter()
            .map(|&w| {
                let g = grads
                    .get_mut(w.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.values[w.0].shape()));
                // Leave a copy behind in case the same variable is listed twice.
                if w.0 < n {
                    grads[w.0] = Some(g.clone());
                }
                (w, g)
            })
            .collect();
        Ok(Gradients { entries })
    }

    fn pullback(&self, i: usize, g: &Tensor<T>, needed: &[bool]) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.values[v.0];
        let need = |v: Var| needed[v.0];
        let mut out = Vec::new();
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let cg = conv::conv2d_backward(
                    val(*input),
                    val(*kernel),
                    g,
                    *stride,
                    *padding,
                    need(*input),
                    need(*kernel),
                    bias.is_some_and(need),
                )?;
                out.extend(cg.input.map(|t| (*input, t)));
                out.extend(cg.kernel.map(|t| (*kernel, t)));
                if let (Some(b), Some(t)) = (bias, cg.bias) {
                    out.push((*b, t));
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                saved,
            } => {
                let ng = norm::group_norm_backward(saved, val(*gamma), g)?;
                out.push((*input, ng.input));
                out.push((*gamma, ng.gamma));
                out.push((*beta, ng.beta));
            }
            Op::Relu(a) => out.push((*a, ops::activation::relu_backward(val(*a), g)?)),
            Op::Softplus(a, beta) => {
                out.push((*a, ops::activation::softplus_backward(val(*a), *beta, g)?))
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                out.push((*a, g.mul(val(*b))?));
                out.push((*b, g.mul(val(*a))?));
            }
            Op::Scale(a, c) => out.push((*a, g.scale(*c))),
            Op::ChannelMask(a, mask) => {
                out.push((*a, ops::elementwise::channel_mask(g, mask)?))
            }
            Op::Upsample(a, factor) => out.push((
                *a,
                resize::bilinear_upsample_backward(val(*a).shape(), *factor, g)?,
            )),
            Op::AvgPool(a) => out.push((*a, linear::global_avg_pool_backward(val(*a).shape(), g)?)),
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let dg = linear::dense_backward(
                    val(*input),
                    val(*weight),
                    g,
                    need(*input),
                    need(*weight),
                    bias.is_some_and(need),
                )?;
                out.extend(dg.input.map(|t| (*input, t)));
                out.extend(dg.weight.map(|t| (*weight, t)));
                if let (Some(b), Some(t)) = (bias, dg.bias) {
                    out.push((*b, t));
                }
            }
            Op::WeightNorm {
                direction,
                gain,
                norms,
            } => {
                let (dv, dgain) =
                    weight_norm::weight_norm_backward(val(*direction), val(*gain), norms, g)?;
                out.push((*direction, dv));
                out.push((*gain, dgain));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => out.push((
                *logits,
                loss::softmax_cross_entropy_backward(probs, labels, g.data()[0])?,
            )),
        }
        out.retain(|(v, _)| need(*v));
        Ok(out)
    }
}

/// Cotangents produced by [`Tape::vjp`], in the order they were requested.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    entries: Vec<(Var, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(w, _)| *w == v).map(|(_, t)| t)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        let pos = self.entries.iter().position(|(w, _)| *w == v)?;
        Some(self.entries.swap_remove(pos).1)
    }

    pub fn into_vec(self) -> Vec<(Var, Tensor<T>)> {
        self.entries
    }
}

impl<T: Scalar> Graph<T> for Tape<T> {
    type Value = Var;

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.get(*v)
    }

    fn conv2d(
        &mut self,
        input: &Var,
        kernel: &Var,
        bias: Option<&Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let y = ops::conv2d(
            self.get(*input),
            self.get(*kernel),
            bias.map(|b| self.get(*b)),
            stride,
            padding,
        )?;
        Ok(self.push(
            y,
            Op::Conv2d {
                input: *input,
                kernel: *kernel,
                bias: bias.copied(),
                stride,
                padding,
            },
        ))
    }

    fn group_norm(&mut self, input: &Var, groups: usize, gamma: &Var, beta: &Var) -> Result<Var> {
        let (y, saved) = ops::group_norm(
            self.get(*input),
            groups,
            self.get(*gamma),
            self.get(*beta),
            ops::GROUP_NORM_EPS,
        )?;
        Ok(self.push(
            y,
            Op::GroupNorm {
                input: *input,
                gamma: *gamma,
                beta: *beta,
                saved,
            },
        ))
    }

    fn relu(&mut self, input: &Var) -> Result<Var> {
        let y = ops::relu(self.get(*input));
        Ok(self.push(y, Op::Relu(*input)))
    }

    fn softplus(&mut self, input: &Var, beta: f64) -> Result<Var> {
        let y = ops::softplus(self.get(*input), beta)?;
        Ok(self.push(y, Op::Softplus(*input, beta)))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = self.get(*a).add(self.get(*b))?;
        Ok(self.push(y, Op::Add(*a, *b)))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = self.get(*a).mul(self.get(*b))?;
        Ok(self.push(y, Op::Mul(*a, *b)))
    }

    fn scale(&mut self, input: &Var, factor: f64) -> Result<Var> {
        let c = T::from_f64_lossy(factor);
        let y = self.get(*input).scale(c);
        Ok(self.push(y, Op::Scale(*input, c)))
    }

    fn channel_mask(&mut self, input: &Var, mask: &Tensor<T>) -> Result<Var> {
        let y = ops::elementwise::channel_mask(self.get(*input), mask)?;
        Ok(self.push(y, Op::ChannelMask(*input, mask.clone())))
    }

    fn upsample(&mut self, input: &Var, factor: usize) -> Result<Var> {
        let y = ops::bilinear_upsample(self.get(*input), factor)?;
        Ok(self.push(y, Op::Upsample(*input, factor)))
    }

    fn avg_pool(&mut self, input: &Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.get(*input))?;
        Ok(self.push(y, Op::AvgPool(*input)))
    }

    fn dense(&mut self, input: &Var, weight: &Var, bias: Option<&Var>) -> Result<Var> {
        let y = ops::dense(self.get(*input), self.get(*weight), bias.map(|b| self.get(*b)))?;
        Ok(self.push(
            y,
            Op::Dense {
                input: *input,
                weight: *weight,
                bias: bias.copied(),
            },
        ))
    }

    fn weight_norm(&mut self, direction: &Var, gain: &Var) -> Result<Var> {
        let (w, norms) = ops::weight_norm(self.get(*direction), self.get(*gain))?;
        Ok(self.push(
            w,
            Op::WeightNorm {
                direction: *direction,
                gain: *gain,
                norms,
            },
        ))
    }

    fn cross_entropy(&mut self, logits: &Var, labels: &[usize]) -> Result<Var> {
        let (l, probs) = ops::softmax_cross_entropy(self.get(*logits), labels)?;
        Ok(self.push(
            Tensor::scalar(l),
            Op::CrossEntropy {
                logits: *logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pullback_returns_cotangent() {
        let mut tape = Tape::<f64>::new(TapeKind::Aux);
        let x = tape.leaf(Tensor::from_fn(&[3], |i| i as f64));
        let y = tape.scale(&x, 1.0).unwrap();
        let c = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let g = tape.vjp(y, c.clone(), &[x]).unwrap();
        assert_eq!(g.get(x).unwrap(), &c);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new(TapeKind::Aux);
        let x = tape.leaf(Tensor::full(&[2], 3.0));
        let y = tape.mul(&x, &x).unwrap();
        let g = tape.vjp(y, Tensor::full(&[2], 1.0), &[x]).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0, 6.0]);
    }

    #[test]
    fn cotangent_shape_checked() {
        let mut tape = Tape::<f32>::new(TapeKind::Aux);
        let x = tape.leaf(Tensor::zeros(&[2]));
        let y = tape.relu(&x).unwrap();
        assert!(tape.vjp(y, Tensor::zeros(&[3]), &[x]).is_err());
        assert!(tape.vjp(Var(99), Tensor::zeros(&[2]), &[x]).is_err());
    }

    #[test]
    fn unreached_leaf_gets_zero() {
        let mut tape = Tape::<f64>::new(TapeKind::Aux);
        let x = tape.leaf(Tensor::full(&[2], 1.0));
        let unused = tape.leaf(Tensor::full(&[4], 1.0));
        let y = tape.scale(&x, 2.0).unwrap();
        let g = tape.vjp(y, Tensor::full(&[2], 1.0), &[x, unused]).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn census_tracks_cell_tapes() {
        let before = crate::autodiff::live_tapes();
        let a = Tape::<f32>::new(TapeKind::Cell);
        let _aux = Tape::<f32>::new(TapeKind::Aux);
        assert_eq!(crate::autodiff::live_tapes(), before + 1);
        drop(a);
        assert_eq!(crate::autodiff::live_tapes(), before);
    }
}
