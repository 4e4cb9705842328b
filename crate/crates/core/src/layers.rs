//! FC, vanilla RNN and LSTM layers, stacked per [`UnitSpec`] with optional
//! skip connections.
//!
//! A [`StackedUnit`] only holds parameter ids; values live in a
//! [`ParamStore`]. Stepping a unit records onto a [`Tape`], so the same
//! code path serves training, evaluation and closed-loop forecasting.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::arch::{Activation, HeadKind, LayerKind, PlannedLayer, UnitPlan, UnitSpec};
use crate::autodiff::{LstmVars, Tape, Var};
use crate::error::{Result, SrnnError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Half-width of the uniform weight initialization.
pub const INIT_RANGE: f64 = 0.08;
pub const FORGET_BIAS: f64 = 1.0;

const GATES: [&str; 4] = ["i", "f", "o", "g"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerParams {
    Fc {
        w: ParamId,
        b: ParamId,
        activation: Activation,
    },
    Rnn {
        w: ParamId,
        u: ParamId,
        b: ParamId,
    },
    Lstm {
        w: [ParamId; 4],
        u: [ParamId; 4],
        b: [ParamId; 4],
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub plan: PlannedLayer,
    pub params: LayerParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Head {
    pub kind: HeadKind,
    pub width: usize,
    pub w: ParamId,
    pub b: ParamId,
}

/// A unit whose parameters have been registered in a store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackedUnit {
    pub spec: UnitSpec,
    pub plan: UnitPlan,
    pub layers: Vec<Layer>,
    pub heads: Vec<Head>,
}

/// Tape-side state of one layer: `h` for RNN layers, `h` and `c` for LSTM
/// layers, nothing for FC layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerState {
    Stateless,
    Rnn { h: Var },
    Lstm { h: Var, c: Var },
}

/// Per-layer recurrent state as tape variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepState {
    pub layers: Vec<LayerState>,
}

/// Per-layer recurrent state as plain values, `[batch × width]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState<S = f64> {
    pub layers: Vec<Option<(Tensor<S>, Option<Tensor<S>>)>>,
}

/// Result of one step: head outputs (or the body output when the unit has
/// no heads) and the next state.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub outputs: Vec<Var>,
    pub state: StepState,
}

impl StackedUnit {
    /// Registers the unit's parameters, zero-valued, under
    /// `<factor>/L<i>/<name>` and `<factor>/head<k>/<name>`.
    pub fn materialize<S: Scalar>(spec: &UnitSpec, store: &mut ParamStore<S>) -> Result<Self> {
        let plan = spec.plan()?;
        let prefix = spec.factor.to_string();
        let mut layers = Vec::with_capacity(plan.layers.len());
        for (i, pl) in plan.layers.iter().enumerate() {
            let name = |p: &str| format!("{prefix}/L{i}/{p}");
            let (n, d) = (pl.width, pl.input_dim);
            let params = match pl.kind {
                LayerKind::Fc => LayerParams::Fc {
                    w: store.add(name("W"), Tensor::zeros(&[n, d]))?,
                    b: store.add(name("b"), Tensor::zeros(&[n]))?,
                    activation: pl.activation,
                },
                LayerKind::Rnn => LayerParams::Rnn {
                    w: store.add(name("W"), Tensor::zeros(&[n, d]))?,
                    u: store.add(name("U"), Tensor::zeros(&[n, n]))?,
                    b: store.add(name("b"), Tensor::zeros(&[n]))?,
                },
                LayerKind::Lstm => {
                    let mut ids = |p: &str, shape: &[usize]| -> Result<[ParamId; 4]> {
                        let mut out = [ParamId(0); 4];
                        for (k, g) in GATES.iter().enumerate() {
                            out[k] = store.add(name(&format!("{p}_{g}")), Tensor::zeros(shape))?;
                        }
                        Ok(out)
                    };
                    LayerParams::Lstm {
                        w: ids("W", &[n, d])?,
                        u: ids("U", &[n, n])?,
                        b: ids("b", &[n])?,
                    }
                }
                LayerKind::Softmax => {
                    return Err(SrnnError::Compile(format!("{prefix}: softmax layer inside the body")))
                }
            };
            layers.push(Layer {
                plan: pl.clone(),
                params,
            });
        }
        let mut heads = Vec::with_capacity(plan.heads.len());
        for (k, ph) in plan.heads.iter().enumerate() {
            heads.push(Head {
                kind: ph.kind,
                width: ph.width,
                w: store.add(format!("{prefix}/head{k}/W"), Tensor::zeros(&[ph.width, ph.input_dim]))?,
                b: store.add(format!("{prefix}/head{k}/b"), Tensor::zeros(&[ph.width]))?,
            });
        }
        Ok(StackedUnit {
            spec: spec.clone(),
            plan,
            layers,
            heads,
        })
    }

    /// Every parameter id owned by this unit.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            match &l.params {
                LayerParams::Fc { w, b, .. } => ids.extend([*w, *b]),
                LayerParams::Rnn { w, u, b } => ids.extend([*w, *u, *b]),
                LayerParams::Lstm { w, u, b } => ids.extend(w.iter().chain(u).chain(b).copied()),
            }
        }
        for h in &self.heads {
            ids.extend([h.w, h.b]);
        }
        ids
    }

    pub fn parameter_count<S: Scalar>(&self, store: &ParamStore<S>) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).value.numel()).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    /// Draws every weight from Uniform(−0.08, 0.08) (open interval) and
    /// sets biases to zero, except LSTM forget biases which become 1.
    pub fn init_params<S: Scalar, R: Rng>(&self, store: &mut ParamStore<S>, rng: &mut R) {
        let dist = Uniform::new(-INIT_RANGE, INIT_RANGE).expect("valid range");
        let mut weight = |store: &mut ParamStore<S>, id: ParamId| {
            for v in store.get_mut(id).value.data_mut() {
                let mut x = dist.sample(rng);
                while x <= -INIT_RANGE {
                    x = dist.sample(rng);
                }
                *v = S::lit(x);
            }
        };
        let fill = |store: &mut ParamStore<S>, id: ParamId, value: f64| {
            for v in store.get_mut(id).value.data_mut() {
                *v = S::lit(value);
            }
        };
        for l in &self.layers {
            match &l.params {
                LayerParams::Fc { w, b, .. } => {
                    weight(store, *w);
                    fill(store, *b, 0.0);
                }
                LayerParams::Rnn { w, u, b } => {
                    weight(store, *w);
                    weight(store, *u);
                    fill(store, *b, 0.0);
                }
                LayerParams::Lstm { w, u, b } => {
                    for k in 0..4 {
                        weight(store, w[k]);
                        weight(store, u[k]);
                        fill(store, b[k], if k == 1 { FORGET_BIAS } else { 0.0 });
                    }
                }
            }
        }
        for h in &self.heads {
            weight(store, h.w);
            fill(store, h.b, 0.0);
        }
    }

    /// Seeded convenience wrapper over [`StackedUnit::init_params`].
    pub fn init_params_seeded<S: Scalar>(&self, store: &mut ParamStore<S>, seed: u64) {
        self.init_params(store, &mut ChaCha8Rng::seed_from_u64(seed));
    }

    /// Zero state for a batch of `batch` rows, recorded as constants.
    pub fn zero_state<S: Scalar>(&self, tape: &mut Tape<S>, batch: usize) -> StepState {
        self.state_to_tape(tape, &self.zero_values(batch))
    }

    pub fn zero_values<S: Scalar>(&self, batch: usize) -> RecurrentState<S> {
        RecurrentState {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let z = || Tensor::zeros(&[batch, l.plan.width]);
                    match l.plan.kind {
                        LayerKind::Rnn => Some((z(), None)),
                        LayerKind::Lstm => Some((z(), Some(z()))),
                        _ => None,
                    }
                })
                .collect(),
        }
    }

    pub fn state_to_tape<S: Scalar>(&self, tape: &mut Tape<S>, values: &RecurrentState<S>) -> StepState {
        StepState {
            layers: values
                .layers
                .iter()
                .map(|slot| match slot {
                    None => LayerState::Stateless,
                    Some((h, None)) => LayerState::Rnn {
                        h: tape.constant(h.clone()),
                    },
                    Some((h, Some(c))) => LayerState::Lstm {
                        h: tape.constant(h.clone()),
                        c: tape.constant(c.clone()),
                    },
                })
                .collect(),
        }
    }

    pub fn state_from_tape<S: Scalar>(tape: &Tape<S>, state: &StepState) -> RecurrentState<S> {
        RecurrentState {
            layers: state
                .layers
                .iter()
                .map(|l| match *l {
                    LayerState::Stateless => None,
                    LayerState::Rnn { h } => Some((tape.value(h).clone(), None)),
                    LayerState::Lstm { h, c } => Some((tape.value(h).clone(), Some(tape.value(c).clone()))),
                })
                .collect(),
        }
    }

    fn layer_forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        layer: &Layer,
        input: Var,
        state: LayerState,
    ) -> Result<(Var, LayerState)> {
        match (&layer.params, state) {
            (LayerParams::Fc { w, b, activation }, _) => {
                let w = tape.param(store, *w);
                let b = tape.param(store, *b);
                let z = tape.matmul_t(input, w)?;
                let z = tape.add_bias(z, b)?;
                let y = match activation {
                    Activation::Identity => z,
                    Activation::Tanh => tape.tanh(z),
                };
                Ok((y, LayerState::Stateless))
            }
            (LayerParams::Rnn { w, u, b }, LayerState::Rnn { h }) => {
                let w = tape.param(store, *w);
                let u = tape.param(store, *u);
                let b = tape.param(store, *b);
                let zx = tape.matmul_t(input, w)?;
                let zh = tape.matmul_t(h, u)?;
                let z = tape.add(zx, zh)?;
                let z = tape.add_bias(z, b)?;
                let h = tape.tanh(z);
                Ok((h, LayerState::Rnn { h }))
            }
            (LayerParams::Lstm { w, u, b }, LayerState::Lstm { h, c }) => {
                let vars = LstmVars {
                    w: w.map(|id| tape.param(store, id)),
                    u: u.map(|id| tape.param(store, id)),
                    b: b.map(|id| tape.param(store, id)),
                };
                let hc = tape.lstm(input, h, c, vars)?;
                let n = layer.plan.width;
                let h = tape.slice(hc, 1, 0, n)?;
                let c = tape.slice(hc, 1, n, n)?;
                Ok((h, LayerState::Lstm { h, c }))
            }
            _ => Err(SrnnError::Input(format!(
                "{}: recurrent state does not match layer kinds",
                self.spec.factor
            ))),
        }
    }

    /// One timestep on a `[batch × input_dim]` input.
    pub fn step<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        state: &StepState,
    ) -> Result<StepOutput> {
        let xs = tape.value(x).shape();
        if xs.len() != 2 || xs[1] != self.spec.input_dim {
            return Err(SrnnError::shape(
                "unit input",
                xs,
                &[xs.first().copied().unwrap_or(0), self.spec.input_dim],
            ));
        }
        if state.layers.len() != self.layers.len() {
            return Err(SrnnError::Input(format!(
                "{}: state has {} layers, unit has {}",
                self.spec.factor,
                state.layers.len(),
                self.layers.len()
            )));
        }
        use crate::arch::LayerRole;
        let skip = self.plan.skip_active;
        let last_stack = self
            .layers
            .iter()
            .rposition(|l| matches!(l.plan.role, LayerRole::Stack(_)));
        let mut next = Vec::with_capacity(self.layers.len());
        let mut z = x;
        let mut stack_input = None;
        let mut stack_outputs = Vec::new();
        for (i, (layer, &st)) in self.layers.iter().zip(&state.layers).enumerate() {
            let input = match layer.plan.role {
                LayerRole::Pre | LayerRole::Post => z,
                LayerRole::Stack(j) => {
                    let base = *stack_input.get_or_insert(z);
                    if skip && j > 0 {
                        tape.concat(&[base, z], 1)?
                    } else {
                        z
                    }
                }
            };
            let (y, s) = self.layer_forward(tape, store, layer, input, st)?;
            next.push(s);
            z = y;
            if let LayerRole::Stack(_) = layer.plan.role {
                stack_outputs.push(y);
                if skip && Some(i) == last_stack {
                    let mut parts = vec![stack_input.expect("set on first stack layer")];
                    parts.extend(&stack_outputs);
                    z = tape.concat(&parts, 1)?;
                }
            }
        }
        let outputs = if self.heads.is_empty() {
            vec![z]
        } else {
            let mut outs = Vec::with_capacity(self.heads.len());
            for h in &self.heads {
                let w = tape.param(store, h.w);
                let b = tape.param(store, h.b);
                let y = tape.matmul_t(z, w)?;
                let y = tape.add_bias(y, b)?;
                outs.push(match h.kind {
                    HeadKind::Regression => y,
                    HeadKind::Classification => tape.softmax(y)?,
                });
            }
            outs
        };
        Ok(StepOutput {
            outputs,
            state: StepState { layers: next },
        })
    }

    /// Folds [`StackedUnit::step`] from zero state over a time-major
    /// `[T × input_dim]` sequence. Returns one `[T × width]` tensor per
    /// output.
    pub fn forward_sequence<S: Scalar>(&self, store: &ParamStore<S>, xs: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
        if xs.rank() != 2 || xs.shape()[0] == 0 {
            return Err(SrnnError::Input(format!(
                "forward_sequence needs a non-empty [T × d] input, got {:?}",
                xs.shape()
            )));
        }
        let mut tape = Tape::new();
        let mut state = self.zero_state(&mut tape, 1);
        let mut per_step: Vec<Vec<Tensor<S>>> = Vec::new();
        for t in 0..xs.shape()[0] {
            let x = tape.constant(xs.slice(0, t, 1)?);
            let out = self.step(&mut tape, store, x, &state)?;
            per_step.push(out.outputs.iter().map(|&v| tape.value(v).clone()).collect());
            state = out.state;
        }
        let n_out = per_step[0].len();
        (0..n_out)
            .map(|k| {
                let rows: Vec<&Tensor<S>> = per_step.iter().map(|s| &s[k]).collect();
                Tensor::concat(&rows, 0)
            })
            .collect()
    }
}
