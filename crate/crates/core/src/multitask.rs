//! Multi-gate mixture of experts over `x = [Ẽ; e_h]` with one sigmoid
//! tower per feedback task.

use crate::encoder::expect_param;
use crate::error::{Error, Result};
use crate::feedback::NUM_TASKS;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TowerParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskParams {
    pub experts: Vec<ExpertParams>,
    /// One `N x W` matrix per task.
    pub gates: Vec<ParamId>,
    pub towers: Vec<TowerParams>,
    pub input_width: usize,
    pub expert_hidden: usize,
    pub expert_out: usize,
}

/// Batched predictions: `y` is `n x K`; `o[k]` is `n x h`; `g[k]` is `n x N`.
#[derive(Clone, Debug)]
pub struct TaskPredictions {
    pub y: Var,
    pub o: Vec<Var>,
    pub g: Vec<Var>,
}

impl MultiTaskParams {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn register(
        store: &mut ParamStore,
        input_width: usize,
        experts: usize,
        expert_hidden: usize,
        expert_out: usize,
        init: &mut impl FnMut(&[usize], f64) -> Tensor,
    ) -> Result<Self> {
        if experts == 0 || expert_hidden == 0 || expert_out == 0 {
            return Err(Error::Config("experts, expert_hidden and expert_out must be >= 1".into()));
        }
        let std_in = 1.0 / (input_width as f64).sqrt();
        let std_hidden = 1.0 / (expert_hidden as f64).sqrt();
        let std_out = 1.0 / (expert_out as f64).sqrt();
        let zeros = |shape: &[usize]| Tensor::zeros(shape).requires_grad();
        let mut ex = Vec::with_capacity(experts);
        for i in 0..experts {
            let n = |s: &str| format!("experts.{i}.{s}");
            ex.push(ExpertParams {
                w1: store.add(n("w1"), init(&[expert_hidden, input_width], std_in))?,
                b1: store.add(n("b1"), zeros(&[1, expert_hidden]))?,
                w2: store.add(n("w2"), init(&[expert_out, expert_hidden], std_hidden))?,
                b2: store.add(n("b2"), zeros(&[1, expert_out]))?,
            });
        }
        let mut gates = Vec::with_capacity(NUM_TASKS);
        let mut towers = Vec::with_capacity(NUM_TASKS);
        for k in 0..NUM_TASKS {
            gates.push(store.add(format!("gates.{k}.w"), init(&[experts, input_width], std_in))?);
            towers.push(TowerParams {
                w: store.add(format!("towers.{k}.w"), init(&[1, expert_out], std_out))?,
                b: store.add(format!("towers.{k}.b"), zeros(&[1, 1]))?,
            });
        }
        Ok(Self {
            experts: ex,
            gates,
            towers,
            input_width,
            expert_hidden,
            expert_out,
        })
    }

    pub fn bind(store: &ParamStore, input_width: usize, experts: usize, expert_hidden: usize, expert_out: usize) -> Result<Self> {
        let mut ex = Vec::with_capacity(experts);
        for i in 0..experts {
            let g = |s: &str, shape: &[usize]| expect_param(store, &format!("experts.{i}.{s}"), shape);
            ex.push(ExpertParams {
                w1: g("w1", &[expert_hidden, input_width])?,
                b1: g("b1", &[1, expert_hidden])?,
                w2: g("w2", &[expert_out, expert_hidden])?,
                b2: g("b2", &[1, expert_out])?,
            });
        }
        let mut gates = Vec::with_capacity(NUM_TASKS);
        let mut towers = Vec::with_capacity(NUM_TASKS);
        for k in 0..NUM_TASKS {
            gates.push(expect_param(store, &format!("gates.{k}.w"), &[experts, input_width])?);
            towers.push(TowerParams {
                w: expect_param(store, &format!("towers.{k}.w"), &[1, expert_out])?,
                b: expect_param(store, &format!("towers.{k}.b"), &[1, 1])?,
            });
        }
        Ok(Self {
            experts: ex,
            gates,
            towers,
            input_width,
            expert_hidden,
            expert_out,
        })
    }
}

/// `x = [context_out; e_h]`, row by row.
pub fn assemble_input(tape: &mut Tape, context_out: Var, e_h: Var) -> Result<Var> {
    tape.concat_cols(&[context_out, e_h])
}

/// `softmax(W_gate x)` per row.
pub fn gate_weights(tape: &mut Tape, x: Var, w_gate: Var) -> Result<Var> {
    let logits = tape.matmul_bt(x, w_gate)?;
    tape.softmax_rows(logits)
}

/// Output of one expert: `W2 relu(W1 x + b1) + b2`.
pub fn expert_forward(tape: &mut Tape, store: &ParamStore, e: &ExpertParams, x: Var) -> Result<Var> {
    let (w1, b1, w2, b2) = (
        tape.param(store, e.w1),
        tape.param(store, e.b1),
        tape.param(store, e.w2),
        tape.param(store, e.b2),
    );
    let h = tape.matmul_bt(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let o = tape.matmul_bt(h, w2)?;
    tape.add_row(o, b2)
}

/// `o = Σ_i g[:, i] f_i`.
pub fn combine_experts(tape: &mut Tape, expert_outputs: &[Var], g: Var) -> Result<Var> {
    let (_, n) = tape.shape(g);
    if n != expert_outputs.len() || n == 0 {
        return Err(Error::dim("combine_experts", &[expert_outputs.len()], &[n]));
    }
    let mut acc = None;
    for (i, &f) in expert_outputs.iter().enumerate() {
        let gi = tape.slice_cols(g, i, 1)?;
        let term = tape.scale_rows(f, gi)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one expert"))
}

pub fn predict_tasks(tape: &mut Tape, store: &ParamStore, p: &MultiTaskParams, x: Var) -> Result<TaskPredictions> {
    let fs = p
        .experts
        .iter()
        .map(|e| expert_forward(tape, store, e, x))
        .collect::<Result<Vec<_>>>()?;
    let mut ys = Vec::with_capacity(NUM_TASKS);
    let mut os = Vec::with_capacity(NUM_TASKS);
    let mut gs = Vec::with_capacity(NUM_TASKS);
    for (gate, tower) in p.gates.iter().zip(&p.towers) {
        let wg = tape.param(store, *gate);
        let g = gate_weights(tape, x, wg)?;
        let o = combine_experts(tape, &fs, g)?;
        let (w, b) = (tape.param(store, tower.w), tape.param(store, tower.b));
        let logit = tape.matmul_bt(o, w)?;
        let logit = tape.add_row(logit, b)?;
        ys.push(tape.sigmoid(logit));
        os.push(o);
        gs.push(g);
    }
    Ok(TaskPredictions {
        y: tape.concat_cols(&ys)?,
        o: os,
        g: gs,
    })
}
