//! Central finite-difference gradient checking against the tape.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::nn::{Ctx, ParamId, ParamStore};
use super::{Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Denominator floor for the relative error; keeps near-zero gradients
    /// from amplifying rounding noise.
    pub floor: f64,
    /// At most this many coordinates are probed per parameter tensor.
    pub max_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { h: 1e-5, floor: 1e-6, max_per_tensor: 8, seed: 0 }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GroupReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Probes whose ±h evaluations crossed a non-differentiable point; each
    /// is replaced by another coordinate of the same tensor when available.
    pub skipped: usize,
    /// Parameter path and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize)]
pub struct GradReport {
    pub groups: BTreeMap<String, GroupReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.values().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    /// True when every group is under `tol`; vacuously true when empty.
    pub fn passes(&self, tol: f64) -> bool {
        self.groups.values().all(|g| g.max_rel_err < tol)
    }
}

/// The first dotted segment of a parameter path.
pub fn top_level_group(name: &str) -> String {
    name.split('.').next().unwrap_or(name).to_string()
}

/// Loss value and branch signature.
fn probe<F>(store: &ParamStore, loss: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    eval_loss(store, loss).map(|(v, ctx, _)| (v, ctx.tape.branch_signature()))
}

fn eval_loss<'a, F>(store: &'a ParamStore, loss: &F) -> Result<(f64, Ctx<'a>, Var)>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let mut ctx = Ctx::new(store, true);
    let l = loss(&mut ctx)?;
    if ctx.tape.shape(l).iter().product::<usize>() != 1 {
        return Err(TensorError::Contract("gradcheck loss must be scalar".into()));
    }
    let v = ctx.tape.value(l).data()[0];
    Ok((v, ctx, l))
}

/// Tape gradients of `loss` for every trainable parameter, in store order.
pub fn analytic_grads<F>(store: &ParamStore, loss: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let (_, mut ctx, l) = eval_loss(store, loss)?;
    ctx.tape.backward(l)?;
    let tape = ctx.finish().0;
    let mut grads: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
    for (key, var) in tape.bindings() {
        if let Some(g) = tape.grad(var) {
            grads[key] = g.clone();
        }
    }
    Ok(grads)
}

/// Compares `analytic` against central differences of `loss` on a seeded
/// sample of coordinates of every trainable parameter. A probe whose
/// perturbed passes take a different branch than the unperturbed pass is
/// skipped, since the difference quotient then straddles a kink. `store`
/// is restored before returning.
pub fn numeric_check<F, G>(
    store: &mut ParamStore,
    loss: &F,
    analytic: &[Tensor],
    opts: &GradcheckOptions,
    group_of: G,
) -> Result<GradReport>
where
    F: Fn(&mut Ctx) -> Result<Var>,
    G: Fn(&str) -> String,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradReport::default();
    let base = probe(store, loss)?.1;
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let n = store.value(id).len();
        let order = sample(&mut rng, n, n).into_vec();
        let name = store.name(id).to_string();
        let entry =
            report.groups.entry(group_of(&name)).or_insert(GroupReport { max_rel_err: 0.0, checked: 0, skipped: 0, worst: None });
        let mut done = 0;
        for k in order {
            if done == opts.max_per_tensor {
                break;
            }
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + opts.h;
            let plus = probe(store, loss);
            store.value_mut(id).data_mut()[k] = orig - opts.h;
            let minus = probe(store, loss);
            store.value_mut(id).data_mut()[k] = orig;
            let ((plus, sp), (minus, sm)) = (plus?, minus?);
            if sp != base || sm != base {
                entry.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            let err = relative_error(analytic[id.index()].data()[k], numeric, opts.floor);
            entry.checked += 1;
            done += 1;
            if err > entry.max_rel_err || entry.worst.is_none() {
                entry.max_rel_err = entry.max_rel_err.max(err);
                entry.worst = Some((name.clone(), k));
            }
        }
    }
    Ok(report)
}

/// Analytic-versus-numeric check of every trainable parameter of `store`.
pub fn gradcheck<F>(store: &mut ParamStore, loss: F, opts: &GradcheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let analytic = analytic_grads(store, &loss)?;
    numeric_check(store, &loss, &analytic, opts, top_level_group)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::nn::Mlp;

    fn tiny_mlp() -> (ParamStore, Mlp) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut store, "mlp", &[3, 5, 2], &mut rng);
        (store, mlp)
    }

    fn mlp_loss(mlp: &Mlp) -> impl Fn(&mut Ctx) -> Result<Var> + '_ {
        move |ctx: &mut Ctx| {
            let x = ctx.tape.constant(Tensor::from_rows(&[vec![0.3, -1.2, 0.8], vec![1.1, 0.4, -0.5]])?);
            let y = mlp.forward(ctx, x)?;
            let y = ctx.tape.sigmoid(y)?;
            let l = ctx.tape.bce_elems(y, vec![1.0, 0.0, 0.3, 0.9])?;
            ctx.tape.sum(l)
        }
    }

    #[test]
    fn mlp_passes() {
        let (mut store, mlp) = tiny_mlp();
        let opts = GradcheckOptions { max_per_tensor: 100, ..Default::default() };
        let report = gradcheck(&mut store, mlp_loss(&mlp), &opts).unwrap();
        assert!(report.passes(1e-4), "{report:?}");
        assert_eq!(report.groups["mlp"].checked, 3 * 5 + 5 + 5 * 2 + 2);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let (mut store, mlp) = tiny_mlp();
        let loss = mlp_loss(&mlp);
        let mut analytic = analytic_grads(&store, &loss).unwrap();
        analytic[0].data_mut()[0] += 0.1;
        let opts = GradcheckOptions { max_per_tensor: 100, ..Default::default() };
        let report = numeric_check(&mut store, &loss, &analytic, &opts, top_level_group).unwrap();
        assert!(!report.passes(1e-4));
        assert_eq!(report.groups["mlp"].worst, Some(("mlp.0.weight".into(), 0)));
    }

    #[test]
    fn no_parameters_is_vacuous_pass() {
        let mut store = ParamStore::new();
        let report =
            gradcheck(&mut store, |ctx: &mut Ctx| Ok(ctx.tape.constant(Tensor::scalar(1.0))), &Default::default()).unwrap();
        assert!(report.groups.is_empty());
        assert!(report.passes(1e-4));
    }

    #[test]
    fn store_is_restored() {
        let (mut store, mlp) = tiny_mlp();
        let before: Vec<Tensor> = store.ids().map(|id| store.value(id).clone()).collect();
        gradcheck(&mut store, mlp_loss(&mlp), &Default::default()).unwrap();
        let after: Vec<Tensor> = store.ids().map(|id| store.value(id).clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn relu_kink_is_skipped_not_misreported() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![-3e-6, 0.5], vec![2]).unwrap(), true);
        let loss = move |ctx: &mut Ctx| {
            let v = ctx.p(w);
            let r = ctx.tape.relu(v)?;
            ctx.tape.sum(r)
        };
        let report = gradcheck(&mut store, loss, &Default::default()).unwrap();
        let g = &report.groups["w"];
        assert_eq!((g.checked, g.skipped), (1, 1));
        assert!(report.passes(1e-4), "{report:?}");
    }
}
