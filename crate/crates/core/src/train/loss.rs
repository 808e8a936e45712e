use crate::autodiff::{compare_gradients, numeric_gradients, GradCheckReport, Graph, Var};
use crate::data::{Domain, VideoBatch};
use crate::error::{Error, Result};
use crate::model::{MetaTransModel, Outputs, StaticMode};
use crate::params::{Bound, ParamId};
use crate::scalar::{lit, to_f64, Scalar};

/// How one batch is turned into a loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    /// Gradient reversal scale between features and domain heads.
    pub lambda1: f64,
    pub mode: StaticMode,
    /// Whether the domain losses are part of the objective.
    pub adversarial: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cls: Var,
    pub adv: Option<Var>,
    pub outputs: Outputs,
}

/// Mean cross-entropy of the task logits over every sample carrying a label:
/// true source labels, plus target pseudo-labels when they are active.
pub fn loss_cls<S: Scalar>(g: &mut Graph<S>, out: &Outputs, batch: &VideoBatch<S>) -> Result<Var> {
    let targets = batch.supervision();
    if targets.iter().all(Option::is_none) {
        return Err(Error::contract("batch has no labeled or pseudo-labeled sample"));
    }
    g.cross_entropy(out.task_logits, &targets)
}

/// Frame-level domain cross-entropy averaged over all frames plus video-level
/// domain cross-entropy averaged over samples. With equal sequence lengths
/// the first term is the per-sample mean of per-frame means.
pub fn loss_adv<S: Scalar>(g: &mut Graph<S>, out: &Outputs, batch: &VideoBatch<S>) -> Result<Var> {
    let has = |d: Domain| batch.domain_label.contains(&d);
    if !(has(Domain::Source) && has(Domain::Target)) {
        log::warn!("domain loss on a batch drawn from a single domain");
    }
    let frame: Vec<Option<usize>> = batch
        .domain_label
        .iter()
        .flat_map(|d| std::iter::repeat(Some(d.label())).take(batch.seq_len))
        .collect();
    let video: Vec<Option<usize>> = batch.domain_label.iter().map(|d| Some(d.label())).collect();
    let lf = g.cross_entropy(out.frame_domain_logits, &frame)?;
    let lv = g.cross_entropy(out.video_domain_logits, &video)?;
    g.add(lf, lv)
}

/// `loss_cls + loss_adv`, where `λ1` enters only as the reversal scale: the
/// domain heads minimize their loss at weight one and the encoder receives the
/// reversed gradient scaled by `λ1`.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    model: &MetaTransModel<S>,
    p: &Bound,
    batch: &VideoBatch<S>,
    spec: &LossSpec,
) -> Result<LossParts> {
    if spec.lambda1 < 0.0 || !spec.lambda1.is_finite() {
        return Err(Error::contract("lambda1 must be finite and non-negative"));
    }
    let x = g.constant(batch.x.clone())?;
    let outputs = model.forward(g, p, x, batch.seq_len, lit(spec.lambda1), spec.mode)?;
    let cls = loss_cls(g, &outputs, batch)?;
    let (total, adv) = if spec.adversarial {
        let adv = loss_adv(g, &outputs, batch)?;
        (g.add(cls, adv)?, Some(adv))
    } else {
        (cls, None)
    };
    Ok(LossParts {
        total,
        cls,
        adv,
        outputs,
    })
}

/// Finite-difference check of the update direction produced by [`total_loss`].
///
/// Behind the gradient reversal the backward pass is not the derivative of
/// the loss: parameters of the domain heads receive `∂L_cls + ∂L_adv` while
/// everything upstream of the reversal receives `∂L_cls − λ1·∂L_adv`. The
/// oracle differentiates both losses numerically and combines them with
/// those weights.
pub fn check_total_loss_gradient<S: Scalar>(
    model: &MetaTransModel<S>,
    batch: &VideoBatch<S>,
    spec: &LossSpec,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true)?;
    let parts = total_loss(&mut g, model, &p, batch, spec)?;
    g.backward(parts.total)?;
    let analytic: Vec<Vec<f64>> = model
        .params
        .grads_from(&g, &p)
        .iter()
        .map(|t| t.data().iter().map(|&v| to_f64(v)).collect())
        .collect();

    let values: Vec<_> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let numeric = numeric_gradients(
        |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let parts = total_loss(g, model, &p, batch, spec)?;
            Ok(std::iter::once(parts.cls).chain(parts.adv).collect())
        },
        &values,
        h,
    )?;
    let heads: Vec<ParamId> = model
        .domain_head_frame
        .layers
        .iter()
        .chain(&model.domain_head_video.layers)
        .flat_map(|l| [l.w, l.b])
        .collect();
    let expected: Vec<Vec<f64>> = model
        .params
        .ids()
        .map(|id| {
            let i = id.index();
            let weight = if heads.contains(&id) { 1.0 } else { -spec.lambda1 };
            match numeric.get(1) {
                Some(adv) => numeric[0][i].iter().zip(&adv[i]).map(|(c, a)| c + weight * a).collect(),
                None => numeric[0][i].clone(),
            }
        })
        .collect();
    Ok(compare_gradients(&analytic, &expected, tol))
}
