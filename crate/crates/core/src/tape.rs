//! Reverse-mode tape.
//!
//! Values live in an arena of slots addressed by [`Var`]. Each differentiable
//! op appends a [`TapeNode`] naming the slots its backward rule reads; those
//! slots are marked *saved* and re-tagged in the ledger as activations. A
//! backward rule may read only saved slots, so the ledger's activation count
//! is exactly what backward needs. Unsaved forward values can be released as
//! soon as the caller no longer needs them.

use crate::element::Element;
use crate::error::{ensure, Error, Result};
use crate::ledger::{AllocId, Category, Ledger, ScopeTag};
use crate::ops::Rule;
use crate::tensor::Tensor;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) struct Slot<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) saved: bool,
    pub(crate) param: bool,
    pub(crate) mem: AllocId,
}

/// One recorded op: what it read, what it produced and what it kept for backward.
#[derive(Debug)]
pub struct TapeNode<T> {
    pub op: &'static str,
    pub inputs: Vec<Var>,
    pub output: Var,
    pub saved: Vec<Var>,
    /// Bytes this node newly retained (slots first saved by it).
    pub saved_bytes: usize,
    pub(crate) rule: Rule<T>,
}

#[derive(Debug)]
pub struct Tape<T> {
    pub(crate) slots: Vec<Slot<T>>,
    pub(crate) nodes: Vec<TapeNode<T>>,
    pub(crate) ledger: Ledger,
    grads: Vec<Option<Vec<T>>>,
    grad_mem: Vec<AllocId>,
    retain: Vec<bool>,
    kept: Vec<bool>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self::with_ledger(Ledger::disabled())
    }

    pub fn with_ledger(ledger: Ledger) -> Self {
        Tape { slots: Vec::new(), nodes: Vec::new(), ledger, grads: Vec::new(), grad_mem: Vec::new(), retain: Vec::new(), kept: Vec::new() }
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut Ledger {
        &mut self.ledger
    }

    pub fn push_scope(&mut self, tag: ScopeTag) {
        self.ledger.push_scope(tag);
    }

    pub fn pop_scope(&mut self) {
        self.ledger.pop_scope();
    }

    pub fn nodes(&self) -> &[TapeNode<T>] {
        &self.nodes
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, op: &'static str) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let mem = self.ledger.alloc(T::bytes(data.len()), Category::Transient, op);
        self.slots.push(Slot { shape, data: Some(data), requires_grad, saved: false, param: false, mem });
        Var(self.slots.len() - 1)
    }

    /// An input leaf (token embeddings, test inputs). Counted as transient until saved.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), "leaf")
    }

    pub fn leaf_from(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        ensure!(
            shape.iter().product::<usize>() == data.len(),
            Dimension,
            "leaf shape {shape:?} does not match {} elements",
            data.len()
        );
        Ok(self.push(shape.to_vec(), data, requires_grad, "leaf"))
    }

    /// A model parameter. Trainable iff `t.requires_grad()`.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.param_as(t, t.requires_grad())
    }

    /// A model parameter with an explicit trainable flag.
    pub fn param_as(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        let mem = self.ledger.alloc(t.bytes(), Category::Parameters, "param");
        self.slots.push(Slot {
            shape: t.shape().to_vec(),
            data: Some(t.data().to_vec()),
            requires_grad,
            saved: false,
            param: true,
            mem,
        });
        Var(self.slots.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.slots[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.slots[v.0].shape.iter().product()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.slots[v.0].requires_grad
    }

    pub fn is_saved(&self, v: Var) -> bool {
        self.slots[v.0].saved
    }

    /// The forward value. Panics if it was released.
    pub fn value(&self, v: Var) -> &[T] {
        self.slots[v.0]
            .data
            .as_deref()
            .unwrap_or_else(|| panic!("value of var {} was released", v.0))
    }

    pub fn try_value(&self, v: Var) -> Result<&[T]> {
        self.slots[v.0]
            .data
            .as_deref()
            .ok_or_else(|| Error::Contract(format!("value of var {} was released", v.0)))
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::from_vec(&self.slots[v.0].shape, self.value(v).to_vec()).expect("slot shape is consistent")
    }

    /// `(rows, cols)` of a matrix-shaped var; vectors count as one row.
    pub(crate) fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        let s = &self.slots[v.0].shape;
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(Error::Dimension(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Marks `v` as needed by backward; returns the bytes newly retained.
    pub(crate) fn mark_saved(&mut self, v: Var, op: &'static str) -> usize {
        let slot = &mut self.slots[v.0];
        if slot.saved {
            return 0;
        }
        slot.saved = true;
        if slot.param {
            return 0;
        }
        let bytes = T::bytes(slot.data.as_ref().map_or(0, |d| d.len()));
        slot.mem = self
            .ledger
            .reclassify(slot.mem, Category::Activation, op)
            .expect("live slot has a ledger entry");
        bytes
    }

    pub(crate) fn record(&mut self, op: &'static str, rule: Rule<T>, inputs: Vec<Var>, output: Var, saved: Vec<Var>) {
        let mut saved_bytes = 0;
        for &s in &saved {
            saved_bytes += self.mark_saved(s, op);
        }
        self.nodes.push(TapeNode { op, inputs, output, saved, saved_bytes, rule });
    }

    /// Releases every value that backward does not need, except `keep`.
    /// Parameters stay resident.
    pub fn release_unsaved(&mut self, keep: &[Var]) {
        for i in 0..self.slots.len() {
            let s = &self.slots[i];
            if s.data.is_none() || s.saved || s.param || keep.contains(&Var(i)) {
                continue;
            }
            self.release_slot(i);
        }
    }

    fn release_slot(&mut self, i: usize) {
        let s = &mut self.slots[i];
        s.data = None;
        let mem = std::mem::replace(&mut s.mem, AllocId(0));
        self.ledger.free(mem).expect("slot allocation is live");
    }

    /// Takes the buffer of an unsaved, non-parameter value for in-place reuse.
    pub(crate) fn take_for_inplace(&mut self, v: Var) -> Result<(Vec<T>, AllocId)> {
        let s = &mut self.slots[v.0];
        ensure!(!s.param, Contract, "in-place update of parameter var {}", v.0);
        ensure!(
            !s.saved,
            Contract,
            "in-place update of var {} that a backward rule still reads",
            v.0
        );
        let data = s.data.take().ok_or_else(|| Error::Contract(format!("var {} already released", v.0)))?;
        Ok((data, std::mem::replace(&mut s.mem, AllocId(0))))
    }

    pub(crate) fn push_with_mem(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool, mem: AllocId) -> Var {
        self.slots.push(Slot { shape, data: Some(data), requires_grad, saved: false, param: false, mem });
        Var(self.slots.len() - 1)
    }

    /// Keep the gradient of an intermediate value after backward.
    pub fn retain_grad(&mut self, v: Var) {
        if self.retain.len() <= v.0 {
            self.retain.resize(v.0 + 1, false);
        }
        self.retain[v.0] = true;
    }

    /// Reverse sweep from a scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(
            self.numel(loss) == 1,
            Contract,
            "backward needs a scalar, got shape {:?}",
            self.shape(loss)
        );
        let n = self.slots.len();
        let mut produced = vec![false; n];
        for node in &self.nodes {
            produced[node.output.0] = true;
        }
        let keep: Vec<bool> = (0..n)
            .map(|i| self.slots[i].param || !produced[i] || self.retain.get(i).copied().unwrap_or(false))
            .collect();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        let mut grad_mem = vec![AllocId(0); n];
        grads[loss.0] = Some(vec![T::one()]);
        for ni in (0..self.nodes.len()).rev() {
            let out = self.nodes[ni].output.0;
            let g = if keep[out] { grads[out].clone() } else { grads[out].take() };
            let Some(g) = g else { continue };
            if !keep[out] {
                let _ = self.ledger.free(std::mem::replace(&mut grad_mem[out], AllocId(0)));
            }
            let input_grads = crate::ops::backward_rule(self, ni, &g)?;
            let inputs = self.nodes[ni].inputs.clone();
            for (inp, gi) in inputs.into_iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                if !self.slots[inp.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(gi.len(), self.numel(inp), "gradient shape for {}", self.nodes[ni].op);
                match &mut grads[inp.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&gi) {
                            *a += *b;
                        }
                    }
                    slot @ None => {
                        let cat = if self.slots[inp.0].param { Category::Gradients } else { Category::Transient };
                        grad_mem[inp.0] = self.ledger.alloc(T::bytes(gi.len()), cat, "grad");
                        *slot = Some(gi);
                    }
                }
            }
        }
        for i in 0..n {
            if !keep[i] && grads[i].is_some() {
                grads[i] = None;
                let _ = self.ledger.free(std::mem::replace(&mut grad_mem[i], AllocId(0)));
            }
        }
        self.grads = grads;
        self.grad_mem = grad_mem;
        self.kept = keep;
        Ok(())
    }

    /// Gradient of a leaf, parameter or retained value after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        if !self.kept.get(v.0).copied().unwrap_or(false) {
            return None;
        }
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.grad(v).map(|g| Tensor::from_vec(self.shape(v), g.to_vec()).expect("grad has slot shape"))
    }

    /// Total bytes retained for backward, summed over nodes.
    pub fn saved_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.saved_bytes).sum()
    }

    /// Frees every remaining buffer and hands the ledger back.
    pub fn finish(mut self) -> Ledger {
        for i in 0..self.slots.len() {
            if self.slots[i].data.is_some() {
                self.release_slot(i);
            }
        }
        for id in std::mem::take(&mut self.grad_mem) {
            let _ = self.ledger.free(id);
        }
        self.ledger
    }
}
