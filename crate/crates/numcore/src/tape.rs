use crate::{NumError, Real, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation together with whatever its backward rule needs.
pub(crate) enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `out = a + tile(b)`: `b`'s flat data repeated over `a`'s flat data.
    AddTiled(Var, Var),
    Scale(Var, F),
    AddConst(Var),
    MulConst(Var, Vec<F>),
    Exp(Var),
    Square(Var),
    Gelu(Var),
    Clamp(Var, F, F),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    RepeatRows {
        x: Var,
        times: usize,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MaskedMeanPool {
        h: Var,
        seq: usize,
        weights: Vec<F>,
    },
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Sum(Var),
    WeightedSum(Var, Vec<F>),
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    /// Doubles forward but triples backward; negative control for tests.
    #[cfg(test)]
    Faulty(Var),
}

pub(crate) struct Node<F> {
    pub(crate) value: Tensor<F>,
    pub(crate) op: Op<F>,
    pub(crate) needs_grad: bool,
}

/// Ordered record of a forward computation (a Wengert list).
///
/// Inputs of every node precede it, so replaying in reverse index order is a
/// valid topological order for backpropagation.
pub struct Tape<F> {
    pub(crate) nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant (no gradient is tracked for it).
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> F {
        self.nodes[v.0].value.item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(NumError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visits = vec![0u32; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                if grads[idx].is_some() {
                    visits[idx] += 1;
                }
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visits[idx] += 1;
            self.backprop(idx, &g, &mut grads);
        }
        Ok(Gradients { grads, visits })
    }
}

/// Result of [`Tape::backward`]: gradients of the loss w.r.t. every leaf that
/// was reachable, plus per-node visit counts for instrumentation.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    visits: Vec<u32>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of a leaf; `None` when the leaf is not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the leaf, zero when unreachable.
    pub fn tensor(&self, tape: &Tape<F>, v: Var) -> Tensor<F> {
        let shape = tape.shape(v);
        match self.get(v) {
            Some(g) => Tensor::from_vec(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// How many times backward processed each tape node (0 or 1).
    pub fn visit_counts(&self) -> &[u32] {
        &self.visits
    }
}
