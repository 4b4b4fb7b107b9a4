//! Central finite-difference gradient oracle.
//!
//! The analytic side comes from one recorded backward pass; the numeric
//! side re-evaluates the loss on inference tapes with one element perturbed
//! at a time. Errors are reported as
//! `|analytic − numeric| / max(|analytic|, |numeric|, floor)`, which is a
//! relative error for gradients above `floor` and an absolute one below.

use super::{ParamStore, Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct Options {
    /// Perturbation size.
    pub eps: f64,
    /// Lower bound on the error denominator.
    pub floor: f64,
}

impl Default for Options {
    fn default() -> Self {
        Self { eps: 1e-5, floor: 1e-3 }
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    pub max_rel_err: f64,
    /// Which element produced the largest error.
    pub worst: String,
    pub checked: usize,
}

/// Checks gradients of `f` with respect to every element of `inputs` and of
/// every parameter in `store`.
pub fn check<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F, opts: Options) -> Result<Report>
where
    F: for<'p> Fn(&mut Tape<'p, f64>, &[Var]) -> Result<Var>,
{
    let (analytic_in, analytic_params) = {
        let mut tape = Tape::new(store);
        let vars = inputs
            .iter()
            .map(|t| tape.input(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        let ins: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.var(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        let ps: Vec<Vec<f64>> = store
            .iter()
            .map(|(id, p)| grads.param(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        (ins, ps)
    };

    let eval = |s: &ParamStore<f64>, ins: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference(s);
        let vars = ins
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &vars)?;
        tape.scalar(loss)
    };

    let mut report = Report {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let note = |report: &mut Report, a: f64, n: f64, what: String| {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(opts.floor);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = err;
            report.worst = format!("{what}: analytic {a:.6e}, numeric {n:.6e}");
        }
    };

    let mut ins = inputs.to_vec();
    for k in 0..ins.len() {
        for i in 0..ins[k].numel() {
            let orig = ins[k].data()[i];
            ins[k].data_mut()[i] = orig + opts.eps;
            let up = eval(store, &ins)?;
            ins[k].data_mut()[i] = orig - opts.eps;
            let down = eval(store, &ins)?;
            ins[k].data_mut()[i] = orig;
            note(&mut report, analytic_in[k][i], (up - down) / (2.0 * opts.eps), format!("input {k}[{i}]"));
        }
    }

    let mut s = store.clone();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for i in 0..s.get(id).numel() {
            let orig = s.get(id).value[i];
            s.get_mut(id).value[i] = orig + opts.eps;
            let up = eval(&s, inputs)?;
            s.get_mut(id).value[i] = orig - opts.eps;
            let down = eval(&s, inputs)?;
            s.get_mut(id).value[i] = orig;
            let name = s.get(id).name.clone();
            note(&mut report, analytic_params[pi][i], (up - down) / (2.0 * opts.eps), format!("{name}[{i}]"));
        }
    }
    Ok(report)
}
