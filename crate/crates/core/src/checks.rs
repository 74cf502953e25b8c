//! Finite-difference gradient suite over every op kind and every trainable
//! module, on tiny shapes. Shared by the `gradcheck` command and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::GridVar;
use crate::error::Result;
use crate::graph::SignGraph;
use crate::head::{
    cross_entropy, HeadConfig, TemporalHead, TranslationDecoder, BOS, EOS, NUM_SPECIALS,
};
use crate::message::{
    hsg_update, lsg_update, tsg_update, Aggregation, EdgeConvSpec, GraphBlockWeights, HsgWeights,
    UpdateCtx,
};
use crate::tensor::{
    check_against_numeric, grad_check, GradBuffer, OpKind, ParamBinder, ParamStore, Tape, Tensor,
    Var,
};

pub const SUITE_EPS: f64 = 1e-5;
pub const SUITE_TOL: f64 = 1e-4;

/// Result of checking one component: the worst relative error over its
/// inputs and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub passed: bool,
}

#[derive(Default)]
struct Acc {
    worst: f64,
    coords: usize,
    passed: bool,
}

impl Acc {
    fn new() -> Self {
        Self {
            passed: true,
            ..Self::default()
        }
    }

    fn push(&mut self, r: crate::tensor::GradCheckReport) {
        self.worst = self.worst.max(r.max_rel_error);
        self.coords += r.coordinates;
        self.passed &= r.passed;
    }

    fn merge(&mut self, other: Acc) {
        self.worst = self.worst.max(other.worst);
        self.coords += other.coords;
        self.passed &= other.passed;
    }

    fn row(self, name: impl Into<String>) -> CheckRow {
        CheckRow {
            name: name.into(),
            max_rel_error: self.worst,
            coordinates: self.coords,
            passed: self.passed,
        }
    }
}

/// Values in `±[0.1, 1.5)`, away from ReLU kinks.
fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Contracts `out` with fixed weights so every output coordinate matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    if tape.value(out).is_scalar() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor(&mut rng, tape.shape(out));
    let r = tape.constant(r);
    let m = tape.mul(out, r)?;
    tape.sum(m)
}

fn check_op(kind: &OpKind, inputs: &[Tensor]) -> Result<Acc> {
    let mut acc = Acc::new();
    for which in 0..inputs.len() {
        let r = grad_check(
            |tape, x| {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        if i == which {
                            x
                        } else {
                            tape.constant(t.clone())
                        }
                    })
                    .collect();
                let out = tape.apply(kind.clone(), &vars)?;
                project(tape, out, 99)
            },
            &inputs[which],
            SUITE_EPS,
            SUITE_TOL,
        )?;
        acc.push(r);
    }
    Ok(acc)
}

/// Random shapes drawn per op kind for each trial.
pub const OP_TRIALS: usize = 10;

/// One instance of every op kind with small random extents.
fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(OpKind, Vec<Tensor>)> {
    let mut d = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (m, k, n) = (d(1, 4), d(1, 4), d(1, 4));
    let (h, w, cin, cout) = (d(1, 5), d(1, 5), d(1, 3), d(1, 3));
    let (h2, w2) = (2 * d(1, 3), 2 * d(1, 3));
    let (t, c) = (d(2, 6), d(3, 5));
    let (r, q, e) = (d(1, 4), d(1, 4), d(1, 3));
    let picks: Vec<usize> = (0..d(1, 5)).map(|_| d(0, r - 1)).collect();
    let mut t_ = |s: &[usize]| rand_tensor(rng, s);
    vec![
        (
            OpKind::MatMul {
                trans_a: false,
                trans_b: false,
            },
            vec![t_(&[m, k]), t_(&[k, n])],
        ),
        (
            OpKind::MatMul {
                trans_a: true,
                trans_b: true,
            },
            vec![t_(&[k, m]), t_(&[n, k])],
        ),
        (
            OpKind::Conv2d {
                kernel: 3,
                stride: 2,
                pad: 1,
            },
            vec![t_(&[1, h, w, cin]), t_(&[9 * cin, cout])],
        ),
        (
            OpKind::StridedConv2d { stride: 2 },
            vec![t_(&[1, h2, w2, cin]), t_(&[4 * cin, cout])],
        ),
        (
            OpKind::Conv1d { kernel: 3, pad: 1 },
            vec![t_(&[t, cin]), t_(&[3 * cin, cout])],
        ),
        (OpKind::Add, vec![t_(&[m, n]), t_(&[n])]),
        (OpKind::Sub, vec![t_(&[m, n]), t_(&[m, n])]),
        (OpKind::Mul, vec![t_(&[m, n]), t_(&[n])]),
        (OpKind::Scale(-1.7), vec![t_(&[m, n])]),
        (OpKind::Relu, vec![t_(&[m, n])]),
        (OpKind::Sigmoid, vec![t_(&[m, n])]),
        (OpKind::Tanh, vec![t_(&[m, n])]),
        (OpKind::Exp, vec![t_(&[m, n])]),
        (OpKind::MaxOverAxis { axis: 1 }, vec![t_(&[r, q, e])]),
        (OpKind::MeanOverAxis { axis: 0 }, vec![t_(&[r, q, e])]),
        (OpKind::SumAll, vec![t_(&[m, n])]),
        (OpKind::LogSoftmax, vec![t_(&[m, c])]),
        (OpKind::Concat { axis: 1 }, vec![t_(&[m, k]), t_(&[m, n])]),
        (
            OpKind::GatherRows {
                indices: picks.clone(),
            },
            vec![t_(&[r, e])],
        ),
        (
            OpKind::ScatterAddRows {
                indices: picks.clone(),
                rows: r,
            },
            vec![t_(&[picks.len(), e])],
        ),
        (
            OpKind::ScatterMaxRows {
                indices: picks.clone(),
                rows: r,
            },
            vec![t_(&[picks.len(), e])],
        ),
        (OpKind::Reshape { shape: vec![n, m] }, vec![t_(&[m, n])]),
        (OpKind::CtcLoss { target: vec![1, 2] }, vec![t_(&[t, c])]),
    ]
}

type UpdateFn<'a> = dyn Fn(&mut Tape, &mut ParamBinder, Var, Var, Option<&[SignGraph]>) -> Result<(Var, Vec<SignGraph>)>
    + 'a;

/// Checks an update with respect to its primary input, its second input and
/// every parameter, holding the graphs built at the base point fixed.
fn check_update(store: &ParamStore, x: &Tensor, y: &Tensor, f: &UpdateFn<'_>) -> Result<Acc> {
    let mut acc = Acc::new();
    let graphs = {
        let mut tape = Tape::new();
        let mut p = ParamBinder::new(store, false);
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        f(&mut tape, &mut p, xv, yv, None)?.1
    };
    let loss = |tape: &mut Tape, p: &mut ParamBinder, xv: Var, yv: Var| -> Result<Var> {
        let (out, _) = f(tape, p, xv, yv, Some(&graphs))?;
        project(tape, out, 98)
    };
    acc.push(grad_check(
        |tape, xv| {
            let yv = tape.constant(y.clone());
            loss(tape, &mut ParamBinder::new(store, false), xv, yv)
        },
        x,
        SUITE_EPS,
        SUITE_TOL,
    )?);
    acc.push(grad_check(
        |tape, yv| {
            let xv = tape.constant(x.clone());
            loss(tape, &mut ParamBinder::new(store, false), xv, yv)
        },
        y,
        SUITE_EPS,
        SUITE_TOL,
    )?);
    for r in param_reports(store, |tape, p| {
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        loss(tape, p, xv, yv)
    })? {
        acc.push(r);
    }
    Ok(acc)
}

fn param_reports<F>(store: &ParamStore, f: F) -> Result<Vec<crate::tensor::GradCheckReport>>
where
    F: Fn(&mut Tape, &mut ParamBinder) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut p = ParamBinder::new(store, true);
    let out = f(&mut tape, &mut p)?;
    tape.backward(out)?;
    let mut grads = GradBuffer::zeros_like(store);
    p.accumulate_grads(&tape, &mut grads, 1.0);
    store
        .iter()
        .map(|(id, _, value)| {
            let eval = |v: &Tensor| {
                let mut s = store.clone();
                *s.get_mut(id) = v.clone();
                let mut tape = Tape::new();
                let mut p = ParamBinder::new(&s, false);
                let out = f(&mut tape, &mut p)?;
                Ok(tape.value(out).item())
            };
            check_against_numeric(eval, value, grads.get(id), SUITE_EPS, SUITE_TOL)
        })
        .collect()
}

fn nudge_biases(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".b") {
            for v in store.get_mut(id).data_mut() {
                *v = rng.gen_range(0.05..0.3);
            }
        }
    }
}

fn grid(tape: &Tape, v: Var) -> Result<GridVar> {
    GridVar::from_var(tape, v)
}

/// Runs the whole suite; rows are in a fixed order.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let trials: Vec<_> = (0..OP_TRIALS).map(|_| op_cases(&mut rng)).collect();
    for i in 0..trials[0].len() {
        let kind = &trials[0][i].0;
        let name = match kind {
            OpKind::MatMul { trans_a, trans_b } => format!("op matmul ta={trans_a} tb={trans_b}"),
            k => format!("op {}", k.name()),
        };
        let mut acc = Acc::new();
        for cases in &trials {
            let (kind, inputs) = &cases[i];
            acc.merge(check_op(kind, inputs)?);
        }
        rows.push(acc.row(name));
    }

    let x = rand_tensor(&mut rng, &[2, 2, 2, 3]);
    let tap = rand_tensor(&mut rng, &[2, 4, 4, 2]);
    for aggregation in [Aggregation::EdgeconvMax, Aggregation::Mean] {
        let ctx = UpdateCtx {
            conv: EdgeConvSpec {
                aggregation,
                relu: true,
            },
            ..UpdateCtx::default()
        };
        let mut store = ParamStore::new();
        let lw = GraphBlockWeights::new(&mut store, &mut rng, "l", 3, 3, 3);
        let tw = GraphBlockWeights::new(&mut store, &mut rng, "t", 3, 3, 3);
        let hw = HsgWeights::new(&mut store, &mut rng, "h", 2, 3, 2);
        nudge_biases(&mut store, &mut rng);
        let tag = match aggregation {
            Aggregation::EdgeconvMax => "max",
            Aggregation::Mean => "mean",
        };
        // the unused second input only checks that its gradient is zero
        let lsg = check_update(&store, &x, &tap, &|tape, p, xv, _, fixed| {
            let (o, g) = lsg_update(tape, p, &lw, grid(tape, xv)?, 2, &ctx, fixed)?;
            Ok((o.var, g))
        })?;
        rows.push(lsg.row(format!("lsg_update ({tag})")));
        let tsg = check_update(&store, &x, &tap, &|tape, p, xv, _, fixed| {
            let (o, g) = tsg_update(tape, p, &tw, grid(tape, xv)?, 3, &ctx, fixed)?;
            Ok((o.var, g))
        })?;
        rows.push(tsg.row(format!("tsg_update ({tag})")));
        let hsg = check_update(&store, &tap, &x, &|tape, p, hv, lv, fixed| {
            let (o, g) = hsg_update(tape, p, &hw, grid(tape, hv)?, grid(tape, lv)?, &ctx, fixed)?;
            Ok((o.var, g))
        })?;
        rows.push(hsg.row(format!("hsg_update ({tag})")));
    }

    let mut store = ParamStore::new();
    let head = TemporalHead::new(
        &mut store,
        &mut rng,
        "h",
        3,
        &HeadConfig {
            hidden: 3,
            lstm_layers: 2,
        },
        4,
    );
    let seq = rand_tensor(&mut rng, &[8, 3]);
    let head_loss = |tape: &mut Tape, p: &mut ParamBinder, x: Var| -> Result<Var> {
        let out = head.forward(tape, p, x)?;
        let a = project(tape, out.logits, 5)?;
        let b = project(tape, out.conv_logits, 6)?;
        tape.add(a, b)
    };
    let mut acc = Acc::new();
    acc.push(grad_check(
        |tape, x| head_loss(tape, &mut ParamBinder::new(&store, false), x),
        &seq,
        SUITE_EPS,
        SUITE_TOL,
    )?);
    for r in param_reports(&store, |tape, p| {
        let x = tape.constant(seq.clone());
        head_loss(tape, p, x)
    })? {
        acc.push(r);
    }
    rows.push(acc.row("temporal head"));

    let mut store = ParamStore::new();
    let dec = TranslationDecoder::new(&mut store, &mut rng, "dec", 4, 5, NUM_SPECIALS + 3);
    let enc = rand_tensor(&mut rng, &[3, 4]);
    let target = [BOS, 3, 5, 4, EOS];
    let dec_loss = |tape: &mut Tape, p: &mut ParamBinder, e: Var| -> Result<Var> {
        let lp = dec.teacher_forced(tape, p, e, &target)?;
        cross_entropy(tape, lp, &target[1..])
    };
    let mut acc = Acc::new();
    acc.push(grad_check(
        |tape, e| dec_loss(tape, &mut ParamBinder::new(&store, false), e),
        &enc,
        SUITE_EPS,
        SUITE_TOL,
    )?);
    for r in param_reports(&store, |tape, p| {
        let e = tape.constant(enc.clone());
        dec_loss(tape, p, e)
    })? {
        acc.push(r);
    }
    rows.push(acc.row("translation decoder"));

    let mut acc = Acc::new();
    for (steps, target) in [(4, vec![1, 1]), (5, vec![2, 1, 2]), (3, vec![])] {
        let lp = rand_tensor(&mut rng, &[steps, 3]);
        acc.push(grad_check(
            |tape, x| {
                let n = tape.log_softmax(x)?;
                tape.ctc_loss(n, &target)
            },
            &lp,
            SUITE_EPS,
            SUITE_TOL,
        )?);
    }
    rows.push(acc.row("ctc_loss"));
    Ok(rows)
}

/// Fixed-width pass/fail table.
pub fn format_table(rows: &[CheckRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(9);
    let mut out = format!(
        "{:<width$}  {:>11}  {:>6}  result\n",
        "component", "max_rel_err", "coords"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>11.3e}  {:>6}  {}\n",
            r.name,
            r.max_rel_error,
            r.coordinates,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_covers_every_op() {
        let rows = gradient_suite(2024).unwrap();
        for r in &rows {
            assert!(r.passed, "{r:?}");
        }
        for op in ["conv2d", "ctc_loss", "scatter_max_rows", "exp", "reshape"] {
            assert!(rows.iter().any(|r| r.name == format!("op {op}")), "{op}");
        }
        let table = format_table(&rows);
        assert!(table.lines().count() == rows.len() + 1);
    }
}
