//! Wengert-tape reverse-mode differentiation.
//!
//! Operations append nodes to a [`Tape`]; each node stores its value and a
//! closure that scatters the node's output gradient onto the gradients of its
//! inputs. Node ids are topologically ordered by construction, so one reverse
//! sweep visits every node exactly once.
//!
//! A tape is single-owner: build the graph, call [`Tape::backward`], read
//! gradients. Repeated backward calls accumulate; the caller resets via
//! [`Tape::reset_grads`] (or builds a fresh tape per step, as the training
//! loop does).

use crate::error::{CosamError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

/// Scatters `out_grad` onto the gradient buffers of nodes with smaller ids.
/// The first argument gives read access to every node value on the tape.
pub(crate) type BackwardFn = Box<dyn Fn(&[Tensor], &[f64], &mut [Vec<f64>])>;

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    backward_fns: Vec<Option<BackwardFn>>,
    /// Accumulated gradients per node, populated by `backward`.
    grads: Vec<Vec<f64>>,
    /// Named leaves (trainable parameters), deduplicated by name.
    bindings: Vec<(String, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub(crate) fn push(&mut self, value: Tensor, backward: Option<BackwardFn>) -> Var {
        let id = self.values.len();
        self.values.push(value);
        self.backward_fns.push(backward);
        Var { id }
    }

    /// Insert a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    /// Insert a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None)
    }

    /// Insert a named trainable leaf. Binding the same name twice returns the
    /// original node so gradients from every use accumulate in one place.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some((_, var)) = self.bindings.iter().find(|(n, _)| n == name) {
            return *var;
        }
        let var = self.leaf(value.clone());
        self.bindings.push((name.to_string(), var));
        var
    }

    /// Attach a backward closure after pushing, for ops whose backward reads
    /// their own output value.
    pub(crate) fn set_backward(&mut self, var: Var, f: BackwardFn) {
        self.backward_fns[var.id] = Some(f);
    }

    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.values[var.id]
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.values[var.id].shape()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.values[loss.id].is_scalar() {
            return Err(CosamError::arg(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.values[loss.id].shape()
            )));
        }
        let mut grads: Vec<Vec<f64>> = self.values.iter().map(|v| vec![0.0; v.numel()]).collect();
        grads[loss.id][0] = 1.0;

        for i in (0..self.values.len()).rev() {
            let Some(f) = self.backward_fns[i].as_ref() else {
                continue;
            };
            let (lower, upper) = grads.split_at_mut(i);
            f(&self.values, &upper[0], lower);
        }

        if self.grads.len() != self.values.len() {
            self.grads = self.values.iter().map(|v| vec![0.0; v.numel()]).collect();
        }
        for (acc, g) in self.grads.iter_mut().zip(grads.iter()) {
            for (a, b) in acc.iter_mut().zip(g.iter()) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Gradient of a node after `backward`, shaped like its value.
    pub fn grad(&self, var: Var) -> Tensor {
        let shape = self.values[var.id].shape().to_vec();
        let data = self
            .grads
            .get(var.id)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.values[var.id].numel()]);
        Tensor::from_vec(shape, data).expect("gradient buffer matches value shape")
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Compare the analytic gradient of a scalar-valued tensor function against
/// central finite differences. Returns the worst relative error over all
/// coordinates of all inputs.
///
/// `f` receives a fresh tape and one leaf per input tensor and must return a
/// scalar node. The analytic path under test is whatever `f` builds; the
/// numeric side re-evaluates `f` at perturbed inputs and never touches
/// gradients.
pub fn grad_check_multi(
    f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Tensor],
    eps: f64,
) -> Result<f64> {
    let eval = |points: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut worst: f64 = 0.0;
    let mut points: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            points[ti].data_mut()[j] = orig + eps;
            let plus = eval(&points)?;
            points[ti].data_mut()[j] = orig - eps;
            let minus = eval(&points)?;
            points[ti].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti].data()[j];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check(
    f: &dyn Fn(&mut Tape, Var) -> Result<Var>,
    x: &Tensor,
    eps: f64,
) -> Result<f64> {
    grad_check_multi(&|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}
