//! Reverse-mode differentiation over a linear tape of [`ops`] kernels.
//!
//! Every recorded node keeps its forward value, the op that produced it and
//! the FLOPs that op executed. `backward` sweeps the tape once in reverse.
//! `replay` re-evaluates every node from the leaf values through the same
//! kernels, so it reproduces the forward pass bit for bit.

use std::sync::Arc;

use crate::cost;
use crate::error::{Error, Result};
use crate::ops::{self, Candidates, ConvGeometry};
use crate::tensor::{LabelMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
    },
    Relu(Var),
    Resize {
        input: Var,
        h: usize,
        w: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Concat(Vec<Var>),
    Gather {
        input: Var,
        index: Arc<Vec<usize>>,
    },
    AvgPool {
        input: Var,
        factor: usize,
    },
    Attention {
        value: Var,
        key: Var,
        query: Var,
        cands: Arc<Candidates>,
    },
    Softmax {
        input: Var,
        axis: usize,
        temperature: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Arc<LabelMap>,
        ignore_index: u32,
    },
    Mse(Var, Var),
    KlDiv {
        student: Var,
        teacher: Var,
    },
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    Weights(Vec<f64>),
    CrossEntropy(ops::CrossEntropy),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    aux: Aux,
    flops: u64,
}

/// Single-owner recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn eval<'a>(op: &Op, val: impl Fn(Var) -> &'a Tensor) -> Result<(Tensor, Aux, u64)> {
    Ok(match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::Conv2d {
            input,
            weight,
            bias,
            geo,
        } => {
            let w = val(*weight);
            let out = ops::conv2d(val(*input), w, bias.map(&val), *geo)?;
            let (cout, ho, wo) = out.dims3()?;
            let (cin, _, _) = val(*input).dims3()?;
            let flops = cost::conv(w.shape()[2], cin, cout, geo.groups, ho, wo);
            (out, Aux::None, flops)
        }
        Op::Relu(x) => {
            let x = val(*x);
            (ops::relu(x), Aux::None, cost::pointwise(x.len()))
        }
        Op::Resize { input, h, w } => {
            let x = val(*input);
            let (c, ih, iw) = x.dims3()?;
            let out = ops::bilinear_resize(x, *h, *w)?;
            (out, Aux::None, cost::resize(c, ih, iw, *h, *w))
        }
        Op::Add(a, b) => {
            let out = val(*a).zip_map(val(*b), |x, y| x + y)?;
            let n = out.len();
            (out, Aux::None, cost::pointwise(n))
        }
        Op::Mul(a, b) => {
            let out = val(*a).zip_map(val(*b), |x, y| x * y)?;
            let n = out.len();
            (out, Aux::None, cost::pointwise(n))
        }
        Op::Sum(x) => {
            let x = val(*x);
            (Tensor::scalar(x.sum()), Aux::None, cost::pointwise(x.len()))
        }
        Op::Concat(parts) => {
            let refs: Vec<&Tensor> = parts.iter().map(|&p| val(p)).collect();
            (ops::concat_channels(&refs)?, Aux::None, 0)
        }
        Op::Gather { input, index } => (ops::gather_spatial(val(*input), index)?, Aux::None, 0),
        Op::AvgPool { input, factor } => {
            let x = val(*input);
            (ops::avg_pool(x, *factor)?, Aux::None, cost::avg_pool(x.len()))
        }
        Op::Attention {
            value,
            key,
            query,
            cands,
        } => {
            let q = val(*query);
            let att = ops::attention(val(*value), val(*key), q, cands)?;
            let (c, h, w) = q.dims3()?;
            let flops = cost::attention(c, h * w, cands.per_query());
            (att.output, Aux::Weights(att.weights), flops)
        }
        Op::Softmax {
            input,
            axis,
            temperature,
        } => {
            let x = val(*input);
            (ops::softmax(x, *axis, *temperature)?, Aux::None, cost::softmax(x.len()))
        }
        Op::CrossEntropy {
            logits,
            labels,
            ignore_index,
        } => {
            let x = val(*logits);
            let ce = ops::cross_entropy(x, labels, *ignore_index)?;
            (Tensor::scalar(ce.loss), Aux::CrossEntropy(ce), cost::softmax(x.len()))
        }
        Op::Mse(a, b) => {
            let a = val(*a);
            (Tensor::scalar(ops::mse(a, val(*b))?), Aux::None, 3 * a.len() as u64)
        }
        Op::KlDiv { student, teacher } => {
            let s = val(*student);
            let loss = ops::kl_divergence(s, val(*teacher))?;
            (Tensor::scalar(loss), Aux::None, 3 * cost::softmax(s.len()))
        }
    })
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Sum of FLOPs executed by every non-leaf node so far.
    pub fn flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.flops).sum()
    }

    /// FLOPs executed by nodes recorded at or after `since`.
    pub fn flops_since(&self, since: usize) -> u64 {
        self.nodes[since..].iter().map(|n| n.flops).sum()
    }

    /// Smallest |pre-activation| over all recorded ramp nodes, if any.
    /// Finite-difference checks are only meaningful when this exceeds the
    /// perturbation's effect.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.nodes[x.0].value.data().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min)),
                _ => None,
            })
            .reduce(f64::min)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            aux: Aux::None,
            flops: 0,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let (value, aux, flops) = {
            let nodes = &self.nodes;
            eval(&op, |v: Var| &nodes[v.0].value)?
        };
        self.nodes.push(Node {
            value,
            op,
            aux,
            flops,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        self.record(Op::Conv2d {
            input,
            weight,
            bias,
            geo,
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Relu(x))
    }

    pub fn resize(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        self.record(Op::Resize { input, h, w })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Sum(x))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::Concat(parts.to_vec()))
    }

    pub fn gather(&mut self, input: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        self.record(Op::Gather { input, index })
    }

    pub fn avg_pool(&mut self, input: Var, factor: usize) -> Result<Var> {
        self.record(Op::AvgPool { input, factor })
    }

    pub fn attention(&mut self, value: Var, key: Var, query: Var, cands: Arc<Candidates>) -> Result<Var> {
        self.record(Op::Attention {
            value,
            key,
            query,
            cands,
        })
    }

    pub fn softmax(&mut self, input: Var, axis: usize, temperature: f64) -> Result<Var> {
        self.record(Op::Softmax {
            input,
            axis,
            temperature,
        })
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<LabelMap>, ignore_index: u32) -> Result<Var> {
        self.record(Op::CrossEntropy {
            logits,
            labels,
            ignore_index,
        })
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mse(a, b))
    }

    pub fn kl_div(&mut self, student: Var, teacher: Var) -> Result<Var> {
        self.record(Op::KlDiv { student, teacher })
    }

    /// Re-evaluates every node from the recorded leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                _ => eval(&node.op, |v: Var| &values[v.0])?.0,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Gradient of the scalar `output` with respect to every recorded node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be a scalar, got {:?}", self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geo,
                } => {
                    let cg = ops::conv2d_backward(val(*input), val(*weight), &g, *geo)?;
                    accumulate(&mut grads[input.0], cg.input);
                    accumulate(&mut grads[weight.0], cg.weight);
                    if let Some(b) = bias {
                        accumulate(&mut grads[b.0], cg.bias);
                    }
                }
                Op::Relu(x) => {
                    let gx = ops::relu_backward(val(*x), &g)?;
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Resize { input, .. } => {
                    let gx = ops::bilinear_resize_backward(val(*input).shape(), &g)?;
                    accumulate(&mut grads[input.0], gx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(val(*b), |x, y| x * y)?;
                    let gb = g.zip_map(val(*a), |x, y| x * y)?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(val(*x).shape(), g.item());
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = val(*p).len();
                        let gp = Tensor::new(val(*p).shape(), g.data()[offset..offset + n].to_vec())?;
                        offset += n;
                        accumulate(&mut grads[p.0], gp);
                    }
                }
                Op::Gather { input, index } => {
                    let gx = ops::gather_spatial_backward(val(*input).shape(), index, &g);
                    accumulate(&mut grads[input.0], gx);
                }
                Op::AvgPool { input, factor } => {
                    let gx = ops::avg_pool_backward(val(*input).shape(), *factor, &g)?;
                    accumulate(&mut grads[input.0], gx);
                }
                Op::Attention {
                    value,
                    key,
                    query,
                    cands,
                } => {
                    let Aux::Weights(weights) = &node.aux else {
                        unreachable!("attention nodes carry weights")
                    };
                    let ag = ops::attention_backward(val(*value), val(*key), val(*query), cands, weights, &g)?;
                    accumulate(&mut grads[value.0], ag.value);
                    accumulate(&mut grads[key.0], ag.key);
                    accumulate(&mut grads[query.0], ag.query);
                }
                Op::Softmax {
                    input,
                    axis,
                    temperature,
                } => {
                    let gx = ops::softmax_backward(&node.value, &g, *axis, *temperature)?;
                    accumulate(&mut grads[input.0], gx);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    ignore_index,
                } => {
                    let Aux::CrossEntropy(ce) = &node.aux else {
                        unreachable!("cross-entropy nodes carry probabilities")
                    };
                    let gx = ops::cross_entropy_backward(ce, labels, *ignore_index, g.item());
                    accumulate(&mut grads[logits.0], gx);
                }
                Op::Mse(a, b) => {
                    let ga = ops::mse_backward(val(*a), val(*b), g.item())?;
                    let gb = ga.map(|v| -v);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::KlDiv { student, teacher } => {
                    let (gs, gt) = ops::kl_divergence_backward(val(*student), val(*teacher), g.item())?;
                    accumulate(&mut grads[student.0], gs);
                    accumulate(&mut grads[teacher.0], gt);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input, element)` where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

fn evaluate_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::shape("grad_check", "function must return a scalar"));
    }
    if !v.item().is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            term: "grad_check forward value",
        });
    }
    Ok((tape, vars, out))
}

/// Compares tape gradients of the scalar function `f` against central
/// differences `(f(x+eps) − f(x−eps)) / 2eps`, element by element. The
/// relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::invalid(format!("grad_check eps {eps} outside [1e-6, 1e-2]")));
    }
    let (tape, vars, out) = evaluate_scalar(&f, inputs)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut num = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + eps;
            let (t, _, o) = evaluate_scalar(&f, &probe)?;
            let fp = t.value(o).item();
            probe[i].data_mut()[j] = x0 - eps;
            let (t, _, o) = evaluate_scalar(&f, &probe)?;
            let fm = t.value(o).item();
            probe[i].data_mut()[j] = x0;
            num[j] = (fp - fm) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let rel = (a - num[j]).abs() / a.abs().max(num[j].abs()).max(1e-8);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = (i, j);
            }
        }
        numeric.push(Tensor::new(inputs[i].shape(), num)?);
    }
    Ok(GradCheck {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Projects a tensor-valued var to a scalar with a fixed random weighting
    /// so every output element influences the checked value.
    fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(tape.value(x).shape(), &mut rng);
        let w = tape.leaf(w);
        let p = tape.mul(x, w)?;
        tape.sum(p)
    }

    const EPS: f64 = 1e-3;
    const TOL: f64 = 1e-4;

    #[test]
    fn sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 4], &mut rng);
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[x],
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{}", r.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::full(&[3], 0.5);
        let r = grad_check(
            |t, _v| {
                let c = t.leaf(Tensor::scalar(2.0));
                t.sum(c)
            },
            &[x],
            EPS,
        )
        .unwrap();
        assert!(r.analytic[0].data().iter().all(|&g| g == 0.0));
        assert!(r.numeric[0].data().iter().all(|&g| g == 0.0));
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn rejects_bad_eps_and_nonfinite() {
        let x = Tensor::full(&[1], 1.0);
        assert!(grad_check(|t, v| t.sum(v[0]), &[x.clone()], 0.5).is_err());
        let inf = Tensor::full(&[1], f64::INFINITY);
        let err = grad_check(|t, v| t.sum(v[0]), &[inf], 1e-3).unwrap_err();
        assert!(err.is_numerical());
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(cin, cout, g, s, p, h, w) in &[(2, 4, 1, 1, 1, 5, 5), (4, 4, 2, 2, 1, 7, 6), (3, 3, 3, 1, 1, 4, 4)] {
            let inputs = vec![
                random(&[cin, h, w], &mut rng),
                random(&[cout, cin / g, 3, 3], &mut rng),
                random(&[cout], &mut rng),
            ];
            let geo = ConvGeometry {
                groups: g,
                stride: s,
                padding: p,
            };
            let r = grad_check(
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), geo)?;
                    project(t, y, 9)
                },
                &inputs,
                EPS,
            )
            .unwrap();
            assert!(r.max_rel_error < TOL, "conv {:?}: {}", (cin, cout, g, s), r.max_rel_error);
        }
    }

    #[test]
    fn resize_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(h, w, oh, ow) in &[(3, 4, 6, 8), (8, 6, 4, 3), (5, 5, 7, 2)] {
            let r = grad_check(
                |t, v| {
                    let y = t.resize(v[0], oh, ow)?;
                    project(t, y, 4)
                },
                &[random(&[2, h, w], &mut rng)],
                EPS,
            )
            .unwrap();
            assert!(r.max_rel_error < TOL, "{}", r.max_rel_error);
        }
    }

    #[test]
    fn softmax_and_losses_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 4, 2], &mut rng);
        let r = grad_check(
            |t, v| {
                let y = t.softmax(v[0], 1, 0.8)?;
                project(t, y, 5)
            },
            &[x.clone()],
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "softmax {}", r.max_rel_error);

        let labels = Arc::new(LabelMap::new(4, 2, vec![0, 1, 2, 255, 1, 1, 0, 2]).unwrap());
        let r = grad_check(|t, v| t.cross_entropy(v[0], labels.clone(), 255), &[x.clone()], EPS).unwrap();
        assert!(r.max_rel_error < TOL, "ce {}", r.max_rel_error);

        let y = random(&[3, 4, 2], &mut rng);
        let r = grad_check(|t, v| t.mse(v[0], v[1]), &[x.clone(), y.clone()], EPS).unwrap();
        assert!(r.max_rel_error < TOL, "mse {}", r.max_rel_error);

        // a sharper teacher keeps every gradient entry well away from zero
        let r = grad_check(|t, v| t.kl_div(v[0], v[1]), &[x, y.map(|v| 3.0 * v)], EPS).unwrap();
        assert!(r.max_rel_error < TOL, "kl {}", r.max_rel_error);
    }

    #[test]
    fn gather_pool_concat_relu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 5, 6], &mut rng);
        let index: Arc<Vec<usize>> = Arc::new((0..30).map(|_| rng.gen_range(0..30)).collect());
        let r = grad_check(
            |t, v| {
                let g = t.gather(v[0], index.clone())?;
                let p = t.avg_pool(g, 4)?;
                let c = t.concat(&[p, p])?;
                project(t, c, 6)
            },
            &[x],
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "{}", r.max_rel_error);

        // ramp away from its kink
        let x = Tensor::from_fn(&[8], |i| if i % 2 == 0 { 0.5 + i as f64 } else { -0.5 - i as f64 });
        let r = grad_check(
            |t, v| {
                let y = t.relu(v[0])?;
                project(t, y, 7)
            },
            &[x],
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "{}", r.max_rel_error);
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (c, h, w) = (3, 5, 6);
        let inputs: Vec<Tensor> = (0..3).map(|_| random(&[c, h, w], &mut rng)).collect();
        for n in [1, 3, 5] {
            let cands = Arc::new(Candidates::neighborhood(h, w, n));
            let r = grad_check(
                |t, v| {
                    let a = t.attention(v[0], v[1], v[2], cands.clone())?;
                    project(t, a, 8)
                },
                &inputs,
                EPS,
            )
            .unwrap();
            assert!(r.max_rel_error < TOL, "n={n}: {}", r.max_rel_error);
        }
        let kv: Vec<Tensor> = (0..2).map(|_| random(&[c, 2, 3], &mut rng)).collect();
        let q = random(&[c, 4, 4], &mut rng);
        let cands = Arc::new(Candidates::Global { count: 6 });
        let r = grad_check(
            |t, v| {
                let a = t.attention(v[0], v[1], v[2], cands.clone())?;
                project(t, a, 9)
            },
            &[kv[0].clone(), kv[1].clone(), q],
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "global: {}", r.max_rel_error);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut t = Tape::new();
        let x = t.leaf(random(&[2, 6, 6], &mut rng));
        let w = t.leaf(random(&[4, 2, 3, 3], &mut rng));
        let y = t.conv2d(x, w, None, ConvGeometry::same(1)).unwrap();
        let y = t.relu(y).unwrap();
        let y = t.resize(y, 9, 4).unwrap();
        let cands = Arc::new(Candidates::neighborhood(9, 4, 3));
        let a = t.attention(y, y, y, cands).unwrap();
        let s = t.softmax(a, 0, 2.0).unwrap();
        let values = t.replay().unwrap();
        assert_eq!(values.len(), t.len());
        for (i, v) in values.iter().enumerate() {
            assert_eq!(v.data(), t.value(Var(i)).data());
        }
        assert_eq!(values[s.index()], *t.value(s));
    }

    #[test]
    fn counts_executed_flops() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[1, 8, 8], 1.0));
        let w = t.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        t.conv2d(x, w, None, ConvGeometry::same(1)).unwrap();
        assert_eq!(t.flops(), 1152);
    }
}
