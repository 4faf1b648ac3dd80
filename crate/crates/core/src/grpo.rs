//! Persona reward, group-relative advantages and the GRPO objective, with an
//! analytic gradient on a toy categorical policy.
//!
//! Everything numeric is generic over `F: num_traits::Float`; the crate root
//! exports `f64` and `f32` aliases.
//!
//! Objective for one group of candidate indices `o_1..o_N` with advantages
//! `A_i`:
//!
//! ```text
//! J(z) = sum_i p(o_i) / q(o_i) * A_i  -  beta * KL(p || r)
//! p = softmax(z / tau),  q = old policy,  r = reference policy
//! ```
//!
//! A batch objective is the mean of the per-group objectives.

use num_traits::Float;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{unit_score, Embedder};
use crate::llm::ClientError;
use crate::par::par_map;
use crate::text::levenshtein;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("a group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("invalid reward weights: w_sim={w_sim}, w_form={w_form}")]
    BadWeights { w_sim: f64, w_form: f64 },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("candidate index {index} out of range for {k} candidates")]
    BadIndex { index: usize, k: usize },
    #[error("non-finite gradient")]
    NonFinite,
    #[error("embedding failed: {0}")]
    Embedding(#[from] ClientError),
}

fn c<F: Float>(x: f64) -> F {
    F::from(x).expect("constant is representable")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights<F> {
    pub w_sim: F,
    pub w_form: F,
}

impl<F: Float> Default for RewardWeights<F> {
    fn default() -> Self {
        Self { w_sim: c(0.7), w_form: c(0.3) }
    }
}

impl<F: Float> RewardWeights<F> {
    pub fn new(w_sim: F, w_form: F) -> Result<Self, GrpoError> {
        let w = Self { w_sim, w_form };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        let ok = self.w_sim >= F::zero()
            && self.w_form >= F::zero()
            && ((self.w_sim + self.w_form) - F::one()).abs() <= c::<F>(1e3) * F::epsilon();
        if ok {
            Ok(())
        } else {
            Err(GrpoError::BadWeights {
                w_sim: self.w_sim.to_f64().unwrap_or(f64::NAN),
                w_form: self.w_form.to_f64().unwrap_or(f64::NAN),
            })
        }
    }
}

/// `1 - lev(a, b) / max(|a|, |b|)` over Unicode scalars; two empty strings
/// are identical.
pub fn form_similarity<F: Float>(a: &str, b: &str) -> F {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return F::one();
    }
    F::one() - c::<F>(levenshtein(a, b) as f64) / c::<F>(longest as f64)
}

/// Cosine of embeddings clamped to `[0, 1]`. Identical strings score exactly 1.
pub fn semantic_similarity<F: Float>(a: &str, b: &str, embedder: &dyn Embedder) -> Result<F, ClientError> {
    if a == b {
        return Ok(F::one());
    }
    Ok(c(unit_score(&embedder.embed(a)?, &embedder.embed(b)?)))
}

/// The reward from its four similarity terms.
pub fn reward_from_parts<F: Float>(
    sim_pos: F,
    sim_neg: F,
    form_pos: F,
    form_neg: F,
    weights: &RewardWeights<F>,
) -> F {
    weights.w_sim * (sim_pos - sim_neg) + weights.w_form * (form_pos - form_neg)
}

pub fn reward<F: Float>(
    o: &str,
    o_pos: &str,
    o_neg: &str,
    weights: &RewardWeights<F>,
    embedder: &dyn Embedder,
) -> Result<F, ClientError> {
    Ok(reward_from_parts(
        semantic_similarity(o, o_pos, embedder)?,
        semantic_similarity(o, o_neg, embedder)?,
        form_similarity(o, o_pos),
        form_similarity(o, o_neg),
        weights,
    ))
}

/// Group-relative advantages with the population standard deviation.
///
/// A group whose spread is below `max(1e-12, 4 * eps * max|r|)` is degenerate
/// and gets all-zero advantages; the relative term only matters for rewards
/// far outside `[-1, 1]` or for `f32`, where rounding alone exceeds `1e-12`.
pub fn advantages<F: Float>(rewards: &[F]) -> Result<Vec<F>, GrpoError> {
    let n = rewards.len();
    if n < 2 {
        return Err(GrpoError::GroupTooSmall(n));
    }
    let nf = c::<F>(n as f64);
    let mean = rewards.iter().fold(F::zero(), |acc, &r| acc + r) / nf;
    let var = rewards.iter().fold(F::zero(), |acc, &r| acc + (r - mean) * (r - mean)) / nf;
    let std = var.sqrt();
    let scale = rewards.iter().fold(F::zero(), |acc, &r| acc.max(r.abs()));
    let threshold = c::<F>(1e-12).max(c::<F>(4.0) * F::epsilon() * scale);
    if !(std >= threshold) {
        return Ok(vec![F::zero(); n]);
    }
    Ok(rewards.iter().map(|&r| (r - mean) / std).collect())
}

/// Categorical policy over a fixed candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy<F> {
    pub logits: Vec<F>,
    pub temperature: F,
}

impl<F: Float> ToyPolicy<F> {
    pub fn new(logits: Vec<F>) -> Self {
        Self { logits, temperature: F::one() }
    }

    pub fn uniform(k: usize) -> Self {
        Self::new(vec![F::zero(); k])
    }

    pub fn with_temperature(mut self, temperature: F) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// `log softmax(z / tau)`, computed with the max shift. The leading term
    /// goes through `ln_1p` so a near-certain candidate keeps a log-probability
    /// distinct from zero.
    pub fn log_probs(&self) -> Vec<F> {
        let scaled: Vec<F> = self.logits.iter().map(|&z| z / self.temperature).collect();
        let Some(top) = (0..scaled.len()).reduce(|a, b| if scaled[b] > scaled[a] { b } else { a }) else {
            return Vec::new();
        };
        let m = scaled[top];
        let rest = scaled
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != top)
            .fold(F::zero(), |acc, (_, &s)| acc + (s - m).exp());
        let lse = m + rest.ln_1p();
        scaled.iter().map(|&s| s - lse).collect()
    }

    pub fn probs(&self) -> Vec<F> {
        self.log_probs().into_iter().map(Float::exp).collect()
    }

    /// Draw a candidate index.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        draw(&self.probs(), rng)
    }
}

fn draw<F: Float>(probs: &[F], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.to_f64().unwrap_or(0.0);
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Exact `KL(p || r)` for two policies over the same candidates.
pub fn kl_divergence<F: Float>(p: &ToyPolicy<F>, r: &ToyPolicy<F>) -> F {
    let lp = p.log_probs();
    let lr = r.log_probs();
    lp.iter().zip(&lr).fold(F::zero(), |acc, (&a, &b)| acc + a.exp() * (a - b))
}

/// One group of sampled candidate indices with their advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample<F> {
    pub indices: Vec<usize>,
    pub advantages: Vec<F>,
}

fn check_shapes<F: Float>(
    policy: &ToyPolicy<F>,
    old: &ToyPolicy<F>,
    reference: &ToyPolicy<F>,
    indices: &[usize],
    adv: &[F],
) -> Result<(), GrpoError> {
    let k = policy.len();
    if old.len() != k || reference.len() != k {
        return Err(GrpoError::LengthMismatch(format!(
            "policy has {k} candidates, old {}, reference {}",
            old.len(),
            reference.len()
        )));
    }
    if indices.len() != adv.len() {
        return Err(GrpoError::LengthMismatch(format!("{} indices but {} advantages", indices.len(), adv.len())));
    }
    if let Some(&index) = indices.iter().find(|&&i| i >= k) {
        return Err(GrpoError::BadIndex { index, k });
    }
    Ok(())
}

/// The per-group objective.
pub fn grpo_objective<F: Float>(
    policy: &ToyPolicy<F>,
    old: &ToyPolicy<F>,
    reference: &ToyPolicy<F>,
    indices: &[usize],
    adv: &[F],
    beta: F,
) -> Result<F, GrpoError> {
    check_shapes(policy, old, reference, indices, adv)?;
    let lp = policy.log_probs();
    let lq = old.log_probs();
    let surrogate = indices
        .iter()
        .zip(adv)
        .fold(F::zero(), |acc, (&i, &a)| acc + (lp[i] - lq[i]).exp() * a);
    Ok(surrogate - beta * kl_divergence(policy, reference))
}

/// Analytic gradient of [`grpo_objective`] with respect to the logits.
///
/// ```text
/// dJ/dz_k = (1/tau) sum_i A_i p(o_i)/q(o_i) (delta_{o_i k} - p_k)
///         - beta (1/tau) p_k (ln p_k - ln r_k - KL)
/// ```
pub fn grpo_gradient<F: Float>(
    policy: &ToyPolicy<F>,
    old: &ToyPolicy<F>,
    reference: &ToyPolicy<F>,
    indices: &[usize],
    adv: &[F],
    beta: F,
) -> Result<Vec<F>, GrpoError> {
    check_shapes(policy, old, reference, indices, adv)?;
    let lp = policy.log_probs();
    let lq = old.log_probs();
    let lr = reference.log_probs();
    let p: Vec<F> = lp.iter().map(|&x| x.exp()).collect();
    let kl = lp.iter().zip(&lr).fold(F::zero(), |acc, (&a, &b)| acc + a.exp() * (a - b));
    let inv_tau = F::one() / policy.temperature;

    // sum_i w_i (delta_{o_i k} - p_k) = w_k_total - p_k * sum_i w_i
    let mut grad = vec![F::zero(); p.len()];
    let mut total = F::zero();
    for (&i, &a) in indices.iter().zip(adv) {
        let w = a * (lp[i] - lq[i]).exp();
        grad[i] = grad[i] + w;
        total = total + w;
    }
    for (k, g) in grad.iter_mut().enumerate() {
        let surrogate = *g - p[k] * total;
        let kl_term = p[k] * ((lp[k] - lr[k]) - kl);
        *g = inv_tau * (surrogate - beta * kl_term);
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(GrpoError::NonFinite);
    }
    Ok(grad)
}

/// Mean objective over a batch of groups.
pub fn batch_objective<F: Float>(
    policy: &ToyPolicy<F>,
    old: &ToyPolicy<F>,
    reference: &ToyPolicy<F>,
    batch: &[GroupSample<F>],
    beta: F,
) -> Result<F, GrpoError> {
    if batch.is_empty() {
        return Ok(-beta * kl_divergence(policy, reference));
    }
    let mut sum = F::zero();
    for g in batch {
        sum = sum + grpo_objective(policy, old, reference, &g.indices, &g.advantages, beta)?;
    }
    Ok(sum / c(batch.len() as f64))
}

pub fn batch_gradient<F: Float>(
    policy: &ToyPolicy<F>,
    old: &ToyPolicy<F>,
    reference: &ToyPolicy<F>,
    batch: &[GroupSample<F>],
    beta: F,
) -> Result<Vec<F>, GrpoError> {
    if batch.is_empty() {
        return grpo_gradient(policy, old, reference, &[], &[], beta);
    }
    let mut sum = vec![F::zero(); policy.len()];
    for g in batch {
        let grad = grpo_gradient(policy, old, reference, &g.indices, &g.advantages, beta)?;
        for (s, x) in sum.iter_mut().zip(grad) {
            *s = *s + x;
        }
    }
    let n = c::<F>(batch.len() as f64);
    Ok(sum.into_iter().map(|s| s / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig<F> {
    pub beta: F,
    pub group_size: usize,
    pub learning_rate: F,
    pub steps: usize,
    pub seed: u64,
    /// Backtrack the step size until the objective does not decrease.
    pub line_search: bool,
}

impl<F: Float> Default for GrpoConfig<F> {
    fn default() -> Self {
        Self { beta: c(0.01), group_size: 8, learning_rate: c(0.5), steps: 100, seed: 0, line_search: true }
    }
}

impl<F: Float> GrpoConfig<F> {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.beta >= F::zero()) || !self.beta.is_finite() {
            return Err(GrpoError::BadConfig("beta must be a finite non-negative number".into()));
        }
        if self.group_size < 2 {
            return Err(GrpoError::BadConfig("group_size must be at least 2".into()));
        }
        if !(self.learning_rate > F::zero()) || !self.learning_rate.is_finite() {
            return Err(GrpoError::BadConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

const MAX_BACKTRACKS: usize = 60;
const ARMIJO_C: f64 = 1e-4;

/// One gradient-ascent step on the batch objective.
///
/// With `line_search` the step starts at `learning_rate` and halves until the
/// Armijo condition `J(z + s g) >= J(z) + c s |g|^2` holds, which keeps very
/// large `beta` stable. Without it the step is exactly `learning_rate * g`.
pub fn grpo_step<F: Float>(
    policy: &ToyPolicy<F>,
    old: &ToyPolicy<F>,
    reference: &ToyPolicy<F>,
    batch: &[GroupSample<F>],
    config: &GrpoConfig<F>,
) -> Result<ToyPolicy<F>, GrpoError> {
    config.validate()?;
    let grad = batch_gradient(policy, old, reference, batch, config.beta)?;
    let moved = |step: F| ToyPolicy {
        logits: policy.logits.iter().zip(&grad).map(|(&z, &g)| z + step * g).collect(),
        temperature: policy.temperature,
    };
    if !config.line_search {
        return Ok(moved(config.learning_rate));
    }
    let norm2 = grad.iter().fold(F::zero(), |acc, &g| acc + g * g);
    if norm2 == F::zero() {
        return Ok(policy.clone());
    }
    let base = batch_objective(policy, old, reference, batch, config.beta)?;
    let mut step = config.learning_rate;
    for _ in 0..MAX_BACKTRACKS {
        let candidate = moved(step);
        let value = batch_objective(&candidate, old, reference, batch, config.beta)?;
        if value.is_finite() && value >= base + c::<F>(ARMIJO_C) * step * norm2 {
            return Ok(candidate);
        }
        step = step / c(2.0);
    }
    Ok(policy.clone())
}

/// Central finite-difference gradient of the batch objective.
pub fn finite_difference_gradient<F: Float>(
    policy: &ToyPolicy<F>,
    old: &ToyPolicy<F>,
    reference: &ToyPolicy<F>,
    batch: &[GroupSample<F>],
    beta: F,
    h: F,
) -> Result<Vec<F>, GrpoError> {
    let mut out = Vec::with_capacity(policy.len());
    for k in 0..policy.len() {
        let mut plus = policy.clone();
        let mut minus = policy.clone();
        plus.logits[k] = plus.logits[k] + h;
        minus.logits[k] = minus.logits[k] - h;
        let jp = batch_objective(&plus, old, reference, batch, beta)?;
        let jm = batch_objective(&minus, old, reference, batch, beta)?;
        out.push((jp - jm) / (c::<F>(2.0) * h));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error<F: Float>(a: &[F], b: &[F]) -> F {
    let norm = |v: &mut dyn Iterator<Item = F>| v.fold(F::zero(), |acc, x| acc + x * x).sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(&x, &y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == F::zero() {
        F::zero()
    } else {
        diff / scale
    }
}

/// A scored group ready for an external fine-tuner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredGroup<F> {
    pub prompt_id: String,
    pub candidates: Vec<String>,
    pub rewards: Vec<F>,
    pub advantages: Vec<F>,
    pub o_pos: String,
    pub o_neg: String,
}

/// Candidates for one prompt together with its reference pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupInput {
    pub prompt_id: String,
    pub candidates: Vec<String>,
    pub o_pos: String,
    pub o_neg: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRun<F> {
    pub groups: Vec<ScoredGroup<F>>,
    pub warnings: Vec<String>,
}

pub fn score_group<F: Float>(
    input: &GroupInput,
    weights: &RewardWeights<F>,
    embedder: &dyn Embedder,
) -> Result<ScoredGroup<F>, GrpoError> {
    let rewards = input
        .candidates
        .iter()
        .map(|o| reward(o, &input.o_pos, &input.o_neg, weights, embedder))
        .collect::<Result<Vec<F>, _>>()?;
    let advantages = advantages(&rewards)?;
    Ok(ScoredGroup {
        prompt_id: input.prompt_id.clone(),
        candidates: input.candidates.clone(),
        rewards,
        advantages,
        o_pos: input.o_pos.clone(),
        o_neg: input.o_neg.clone(),
    })
}

/// Score every group in parallel; groups with fewer than 2 candidates are
/// skipped with a warning, other failures abort.
pub fn score_groups<F: Float + Send + Sync>(
    inputs: &[GroupInput],
    weights: &RewardWeights<F>,
    embedder: &dyn Embedder,
) -> Result<ScoreRun<F>, GrpoError> {
    weights.validate()?;
    let results = par_map(inputs.len(), |i| score_group(&inputs[i], weights, embedder));
    let mut run = ScoreRun { groups: Vec::new(), warnings: Vec::new() };
    for (input, r) in inputs.iter().zip(results) {
        match r {
            Ok(g) => run.groups.push(g),
            Err(GrpoError::GroupTooSmall(n)) => {
                let w = format!("group {} skipped: {n} candidate(s), need at least 2", input.prompt_id);
                tracing::warn!("{w}");
                run.warnings.push(w);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(run)
}

/// A fixed candidate set with its reference pair, for toy training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTask {
    pub candidates: Vec<String>,
    pub o_pos: String,
    pub o_neg: String,
    /// Candidate placed in every sampled group.
    pub anchor_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport<F> {
    pub rewards: Vec<F>,
    /// Policy probabilities after each step; entry 0 is the initial policy.
    pub probs: Vec<Vec<F>>,
    pub objectives: Vec<F>,
    pub kl_to_reference: Vec<F>,
    pub policy: ToyPolicy<F>,
}

/// Seeded training of a toy policy; the old policy at each step is the
/// current one and the reference is the initial policy.
///
/// Without an `anchor_index` each step samples `group_size` candidates from
/// the current policy. With one, each step uses a synthetic group: the anchor
/// once plus up to `group_size - 1` distinct other candidates chosen uniformly
/// by the seeded stream. When the anchor is the unique best candidate this
/// makes the ascent direction raise its probability at every step, whereas
/// sampled groups can hold only copies of the anchor (all-zero advantages)
/// or over-reward a runner-up.
pub fn train_toy<F: Float>(
    task: &ToyTask,
    initial: &ToyPolicy<F>,
    config: &GrpoConfig<F>,
    weights: &RewardWeights<F>,
    embedder: &dyn Embedder,
) -> Result<TrainReport<F>, GrpoError> {
    config.validate()?;
    weights.validate()?;
    if task.candidates.len() != initial.len() {
        return Err(GrpoError::LengthMismatch(format!(
            "{} candidates but policy has {} logits",
            task.candidates.len(),
            initial.len()
        )));
    }
    if let Some(index) = task.anchor_index.filter(|&i| i >= initial.len()) {
        return Err(GrpoError::BadIndex { index, k: initial.len() });
    }
    let rewards = task
        .candidates
        .iter()
        .map(|o| reward(o, &task.o_pos, &task.o_neg, weights, embedder))
        .collect::<Result<Vec<F>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let reference = initial.clone();
    let mut policy = initial.clone();
    let mut report = TrainReport {
        rewards: rewards.clone(),
        probs: vec![policy.probs()],
        objectives: Vec::new(),
        kl_to_reference: vec![F::zero()],
        policy: policy.clone(),
    };
    for _ in 0..config.steps {
        let indices: Vec<usize> = match task.anchor_index {
            Some(a) => {
                let others: Vec<usize> = (0..policy.len()).filter(|&i| i != a).collect();
                let mut g = vec![a];
                g.extend(others.choose_multiple(&mut rng, config.group_size - 1));
                g
            }
            None => (0..config.group_size).map(|_| policy.sample(&mut rng)).collect(),
        };
        let group_rewards: Vec<F> = indices.iter().map(|&i| rewards[i]).collect();
        let batch = [GroupSample { indices, advantages: advantages(&group_rewards)? }];
        let old = policy.clone();
        policy = grpo_step(&policy, &old, &reference, &batch, config)?;
        report.objectives.push(batch_objective(&policy, &old, &reference, &batch, config.beta)?);
        report.probs.push(policy.probs());
        report.kl_to_reference.push(kl_divergence(&policy, &reference));
    }
    report.policy = policy;
    Ok(report)
}
