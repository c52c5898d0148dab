//! Task losses and the adversarial multi-task objective.
//!
//! For a batch of task `j` the logged objective is
//! `L = L_O − α1·L_D − α2·L_Adv`. It is never backpropagated as written: the
//! graph instead descends `L_O + L_D + L_Adv` with gradient reversal nodes
//! (coefficient `α1` in front of the discriminator, `α2` in front of every
//! adversarial pass). Heads and the discriminator therefore minimize their
//! own losses, while everything upstream of a reversal node receives
//! `−α·∂L_D` and `−α·∂L_Adv`, i.e. it descends `L` itself.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, NodeId, Tensor};
use crate::model::{Bound, Burst2Vec, ModelError, RepresentationBundle, TaskId};

/// Denominators below this make a concordance coefficient 0.
pub const CCC_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("concordance needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 0.5,
            alpha2: 0.25,
        }
    }
}

impl LossWeights {
    pub const DISABLED: LossWeights = LossWeights {
        alpha1: 0.0,
        alpha2: 0.0,
    };
}

/// Per-dimension and mean concordance correlation coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct Concordance {
    pub per_dim: Vec<f64>,
    pub mean: f64,
}

/// Concordance of each column of `x` with the same column of `y`
/// (`B×K` each), using population moments.
pub fn ccc(x: &Tensor, y: &Tensor) -> Result<Concordance, LossError> {
    if x.shape() != y.shape() || x.rank() != 2 {
        return Err(LossError::LengthMismatch(x.len(), y.len()));
    }
    let (b, k) = (x.shape()[0], x.shape()[1]);
    if b < 2 {
        return Err(LossError::TooFewSamples(b));
    }
    let n = b as f64;
    let per_dim: Vec<f64> = (0..k)
        .map(|c| {
            let xs: Vec<f64> = (0..b).map(|r| x.data()[r * k + c]).collect();
            let ys: Vec<f64> = (0..b).map(|r| y.data()[r * k + c]).collect();
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for (a, t) in xs.iter().zip(&ys) {
                vx += (a - mx) * (a - mx);
                vy += (t - my) * (t - my);
                cov += (a - mx) * (t - my);
            }
            let den = vx / n + vy / n + (mx - my) * (mx - my);
            if den.abs() < CCC_EPS {
                0.0
            } else {
                2.0 * cov / n / den
            }
        })
        .collect();
    let mean = per_dim.iter().sum::<f64>() / k as f64;
    Ok(Concordance { per_dim, mean })
}

/// `1 − mean CCC`, in [0, 2].
pub fn ccc_loss_value(x: &Tensor, y: &Tensor) -> Result<f64, LossError> {
    Ok(1.0 - ccc(x, y)?.mean)
}

/// Graph form of `1 − mean CCC` for `B×K` predictions against constant targets.
pub fn ccc_loss(g: &mut Graph, x: NodeId, y: NodeId) -> Result<NodeId, LossError> {
    let b = g.shape(x)[0];
    if b < 2 {
        return Err(LossError::TooFewSamples(b));
    }
    let mx = g.mean_axis(x, 0)?;
    let my = g.mean_axis(y, 0)?;
    let neg_mx = g.scale(mx, -1.0);
    let neg_my = g.scale(my, -1.0);
    let xc = g.add_bias(x, neg_mx)?;
    let yc = g.add_bias(y, neg_my)?;
    let xx = g.mul(xc, xc)?;
    let yy = g.mul(yc, yc)?;
    let xy = g.mul(xc, yc)?;
    let var_x = g.mean_axis(xx, 0)?;
    let var_y = g.mean_axis(yy, 0)?;
    let cov = g.mean_axis(xy, 0)?;
    let dm = g.sub(mx, my)?;
    let dm2 = g.mul(dm, dm)?;
    let den = g.add(var_x, var_y)?;
    let den = g.add(den, dm2)?;
    let num = g.scale(cov, 2.0);
    let per_dim = g.safe_div(num, den, CCC_EPS)?;
    let mean = g.mean(per_dim);
    let neg = g.scale(mean, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Mean absolute error of two equally long vectors.
pub fn mae_loss(g: &mut Graph, x: NodeId, y: NodeId) -> Result<NodeId, LossError> {
    if g.shape(x) != g.shape(y) {
        return Err(LossError::LengthMismatch(g.value(x).len(), g.value(y).len()));
    }
    let diff = g.sub(x, y)?;
    let abs = g.abs(diff);
    Ok(g.mean(abs))
}

/// Mean negative log-softmax probability of the labelled class.
pub fn ce_loss(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId, LossError> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(LossError::LengthMismatch(shape[0], labels.len()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(LossError::LabelOutOfRange {
            label,
            classes: shape[1],
        });
    }
    let logp = g.log_softmax(logits);
    let picked = g.pick(logp, labels)?;
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

/// Labels for one batch, normalized as the heads predict them.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTargets {
    /// `B×10` in [0, 1].
    pub emotions: Tensor,
    /// Normalized ages, length `B`.
    pub age: Tensor,
    pub country: Vec<usize>,
}

impl BatchTargets {
    pub fn len(&self) -> usize {
        self.country.len()
    }

    pub fn is_empty(&self) -> bool {
        self.country.is_empty()
    }
}

/// Target constants inserted into one graph.
#[derive(Clone, Debug)]
pub struct TargetNodes {
    pub emotions: NodeId,
    pub age: NodeId,
    pub country: Vec<usize>,
}

impl TargetNodes {
    pub fn insert(g: &mut Graph, targets: &BatchTargets) -> Self {
        Self {
            emotions: g.constant(targets.emotions.clone()),
            age: g.constant(targets.age.clone()),
            country: targets.country.clone(),
        }
    }
}

/// The task's own loss on head output `pred`.
pub fn task_loss(
    g: &mut Graph,
    task: TaskId,
    pred: NodeId,
    targets: &TargetNodes,
) -> Result<NodeId, LossError> {
    match task {
        TaskId::Emotion => ccc_loss(g, pred, targets.emotions),
        TaskId::Age => mae_loss(g, pred, targets.age),
        TaskId::Country => ce_loss(g, pred, &targets.country),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutputLoss {
    pub shared: NodeId,
    pub spec: NodeId,
    pub concat: NodeId,
    pub total: NodeId,
}

/// Head `task` applied to the shared, task-specific and concatenated
/// representations; the three losses and their sum.
pub fn combined_output_loss(
    g: &mut Graph,
    model: &Burst2Vec,
    bound: &Bound,
    task: TaskId,
    bundle: &RepresentationBundle,
    targets: &TargetNodes,
) -> Result<OutputLoss, LossError> {
    let pass = |g: &mut Graph, rep: NodeId| -> Result<NodeId, LossError> {
        let pred = model.head_forward(g, bound, task, rep)?;
        task_loss(g, task, pred, targets)
    };
    let shared = pass(g, bundle.shared)?;
    let spec = pass(g, bundle.spec(task))?;
    let concat = pass(g, bundle.concat(task))?;
    let sum = g.add(shared, spec)?;
    let total = g.add(sum, concat)?;
    Ok(OutputLoss {
        shared,
        spec,
        concat,
        total,
    })
}

/// Cross-entropy of discriminator logits against the constant label `task`.
pub fn discriminator_loss(
    g: &mut Graph,
    task: TaskId,
    logits: NodeId,
) -> Result<NodeId, LossError> {
    let rows = g.shape(logits)[0];
    ce_loss(g, logits, &vec![task.index(); rows])
}

/// Sum over `t ≠ task` of head `task`'s own loss on `r_spec_t`. With
/// `Some(lambda)` each `r_spec_t` first passes a gradient reversal node.
pub fn adversarial_loss(
    g: &mut Graph,
    model: &Burst2Vec,
    bound: &Bound,
    task: TaskId,
    bundle: &RepresentationBundle,
    targets: &TargetNodes,
    reversal: Option<f64>,
) -> Result<NodeId, LossError> {
    let mut terms = Vec::with_capacity(2);
    for other in task.others() {
        let rep = match reversal {
            Some(lambda) => g.gradient_reversal(bundle.spec(other), lambda),
            None => bundle.spec(other),
        };
        let pred = model.head_forward(g, bound, task, rep)?;
        terms.push(task_loss(g, task, pred, targets)?);
    }
    Ok(g.add(terms[0], terms[1])?)
}

/// `L_O − α1·L_D − α2·L_Adv`.
pub fn total_loss(output: f64, discriminator: f64, adversarial: f64, weights: LossWeights) -> f64 {
    output - weights.alpha1 * discriminator - weights.alpha2 * adversarial
}

/// Logged loss values for one task batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBatchLoss {
    pub task: TaskId,
    pub shared: f64,
    pub spec: f64,
    pub concat: f64,
    pub output: f64,
    pub discriminator: f64,
    pub adversarial: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveOptions {
    pub weights: LossWeights,
    /// Insert reversal nodes; `false` yields the plain-descent control graph.
    pub reversal: bool,
    /// Build the discriminator and adversarial branches at all.
    pub adversarial: bool,
}

impl ObjectiveOptions {
    pub fn new(weights: LossWeights) -> Self {
        Self {
            weights,
            reversal: true,
            adversarial: true,
        }
    }
}

/// Nodes of a task batch's full objective.
#[derive(Clone, Copy, Debug)]
pub struct TaskObjective {
    pub task: TaskId,
    pub bundle: RepresentationBundle,
    pub output: OutputLoss,
    pub discriminator: Option<NodeId>,
    pub adversarial: Option<NodeId>,
    /// Scalar that is backpropagated.
    pub realized: NodeId,
}

impl TaskObjective {
    pub fn values(&self, g: &Graph, weights: LossWeights) -> TaskBatchLoss {
        let v = |id: NodeId| g.value(id).item();
        let output = v(self.output.total);
        let discriminator = self.discriminator.map(v).unwrap_or(0.0);
        let adversarial = self.adversarial.map(v).unwrap_or(0.0);
        TaskBatchLoss {
            task: self.task,
            shared: v(self.output.shared),
            spec: v(self.output.spec),
            concat: v(self.output.concat),
            output,
            discriminator,
            adversarial,
            total: total_loss(output, discriminator, adversarial, weights),
        }
    }
}

/// Builds the full objective for a batch of `task` on a bound model.
pub fn task_objective(
    g: &mut Graph,
    model: &Burst2Vec,
    bound: &Bound,
    task: TaskId,
    bundle: RepresentationBundle,
    targets: &TargetNodes,
    options: ObjectiveOptions,
) -> Result<TaskObjective, LossError> {
    let output = combined_output_loss(g, model, bound, task, &bundle, targets)?;
    let mut realized = output.total;
    let (mut discriminator, mut adversarial) = (None, None);
    // A branch whose weight is zero is not built at all, so disabling the
    // adversarial terms leaves exactly the plain multi-task graph.
    let w = options.weights;
    if options.adversarial && w.alpha1 > 0.0 {
        let reversal = options.reversal.then_some(w.alpha1);
        let logits = model.discriminate(g, bound, bundle.shared, reversal)?;
        let l_d = discriminator_loss(g, task, logits)?;
        realized = g.add(realized, l_d)?;
        discriminator = Some(l_d);
    }
    if options.adversarial && w.alpha2 > 0.0 {
        let reversal = options.reversal.then_some(w.alpha2);
        let l_adv = adversarial_loss(g, model, bound, task, &bundle, targets, reversal)?;
        realized = g.add(realized, l_adv)?;
        adversarial = Some(l_adv);
    }
    Ok(TaskObjective {
        task,
        bundle,
        output,
        discriminator,
        adversarial,
        realized,
    })
}
