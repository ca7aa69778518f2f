use super::{Graph, ParamId, ParameterStore, Var};
use crate::error::{Error, Result};

/// Floor for the denominator of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub scalars: usize,
    /// Scalars whose numeric derivative was replaced by a refinement.
    pub refined: usize,
    /// Worst relative error of the plain `f64` differences.
    pub f64_max_rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Pins a closure to the signature [`gradient_check`] expects, so its
/// lifetimes are inferred correctly.
pub fn loss_fn<F>(f: F) -> F
where
    F: for<'s> Fn(&mut Graph<'s>, &'s ParameterStore) -> Result<Var>,
{
    f
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval_loss<F>(build: &F, store: &ParameterStore) -> Result<f64>
where
    F: for<'s> Fn(&mut Graph<'s>, &'s ParameterStore) -> Result<Var>,
{
    let mut graph = Graph::new();
    let out = build(&mut graph, store)?;
    let value = graph.value(out);
    if value.len() != 1 {
        return Err(Error::Dimension(format!(
            "loss must be scalar, got shape {:?}",
            value.shape()
        )));
    }
    let v = value.get(0);
    if !v.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(v)
}

/// Compares the tape's gradient of `build`'s scalar output against central
/// differences `(L(θ+ε) − L(θ−ε)) / 2ε`, for every scalar of every
/// parameter. The store is perturbed in place and restored.
pub fn gradient_check<F>(build: F, store: &mut ParameterStore, epsilon: f64) -> Result<GradCheckReport>
where
    F: for<'s> Fn(&mut Graph<'s>, &'s ParameterStore) -> Result<Var>,
{
    gradient_check_with(build, |_, _, _, _, _| Ok(None), store, epsilon)
}

/// [`gradient_check`] with a hook that may replace the numeric derivative
/// of scalar `k` of `id`. It receives the analytic and `f64` numeric
/// values and the (unperturbed) store, and must leave the store as found.
pub fn gradient_check_with<F, R>(build: F, mut refine: R, store: &mut ParameterStore, epsilon: f64) -> Result<GradCheckReport>
where
    F: for<'s> Fn(&mut Graph<'s>, &'s ParameterStore) -> Result<Var>,
    R: FnMut(f64, f64, &mut ParameterStore, ParamId, usize) -> Result<Option<f64>>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be positive, got {epsilon}")));
    }
    let analytic = {
        let mut graph = Graph::new();
        let out = build(&mut graph, store)?;
        if !graph.value(out).get(0).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        graph.backward(out)?.param_grads(&graph, store)
    };

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            scalars: n,
            refined: 0,
            f64_max_rel_err: 0.0,
        };
        for k in 0..n {
            let original = store.value(id).get(k);
            store.value_mut(id).data_mut()[k] = original + epsilon;
            let plus = eval_loss(&build, store);
            store.value_mut(id).data_mut()[k] = original - epsilon;
            let minus = eval_loss(&build, store);
            store.value_mut(id).data_mut()[k] = original;
            let mut numeric = (plus? - minus?) / (2.0 * epsilon);
            let a = analytic[id.index()][k];
            check.f64_max_rel_err = check.f64_max_rel_err.max(relative_error(a, numeric));
            if let Some(better) = refine(a, numeric, store, id, k)? {
                numeric = better;
                check.refined += 1;
            }
            check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric));
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
        }
        report.params.push(check);
    }
    Ok(report)
}
