use thiserror::Error;

use super::model::AgentModel;
use crate::tensor::{AdamState, Real, Tape, Tensor, TensorError};

/// One environment step as collected by a rollout worker.
#[derive(Clone, Debug)]
pub struct Transition<T> {
    pub observation: Tensor<T>,
    pub action: usize,
    pub reward: f64,
    /// `None` when the step ended the episode.
    pub next_observation: Option<Tensor<T>>,
    /// Encoding carried into this step by a recurrent agent.
    pub hidden: Option<Tensor<T>>,
}

/// The bootstrapped quantities computed for a transition.
///
/// There is no discount: the next state's utility enters undiminished so
/// the end-of-episode reward reaches the level's first frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TdTerms {
    /// `π(·|H')·Q(·|H')`, zero at a terminal.
    pub v_next: f64,
    /// `R + V' − Q(A|H)`.
    pub delta: f64,
    /// `π(·|H)·Q(·|H) + π(A|H)·δ`.
    pub v: f64,
    /// `V' − V`, or `R − V` at a terminal.
    pub advantage: f64,
}

/// Evaluates the update terms from head outputs at `H` (and `H'` unless
/// the transition was terminal).
pub fn td_terms(
    probs: &[f64],
    utilities: &[f64],
    action: usize,
    reward: f64,
    next: Option<(&[f64], &[f64])>,
) -> TdTerms {
    let dot = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
    let v_next = next.map_or(0.0, |(p, q)| dot(p, q));
    let delta = reward + v_next - utilities[action];
    let v = dot(probs, utilities) + probs[action] * delta;
    let advantage = if next.is_some() { v_next - v } else { reward - v };
    TdTerms {
        v_next,
        delta,
        v,
        advantage,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Losses {
    pub value_loss: f64,
    pub policy_loss: f64,
    pub entropy: f64,
}

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("actor-critic update needs at least one transition")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Agent plus its two optimizers: the utility loss moves encoder and Q
/// head, the policy loss moves encoder and policy head.
#[derive(Clone, Debug)]
pub struct ActorCritic<T> {
    pub model: AgentModel<T>,
    pub value_opt: AdamState<T>,
    pub policy_opt: AdamState<T>,
    pub entropy_coef: f64,
}

impl<T: Real> ActorCritic<T> {
    pub fn new(model: AgentModel<T>, lr_policy: f64, lr_value: f64, entropy_coef: f64) -> Self {
        let enc = model.encoder_ids();
        let value_ids = [enc.clone(), model.utility_ids()].concat();
        let policy_ids = [enc, model.policy_ids()].concat();
        Self {
            value_opt: AdamState::new(&model.store, value_ids, lr_value),
            policy_opt: AdamState::new(&model.store, policy_ids, lr_policy),
            model,
            entropy_coef,
        }
    }

    /// One batched update over a segment of transitions.
    ///
    /// Minimises the mean of δ² through `Q(A|H)` (the bootstrap target is
    /// held fixed) and ascends the mean of `Adv·log π(A|H) + β·entropy`
    /// with the advantage held fixed. A recurrent encoder restarts from the
    /// stored state of each transition; gradients stop at that state.
    pub fn update(&mut self, batch: &[Transition<T>]) -> Result<(Losses, Vec<TdTerms>), LearnError> {
        if batch.is_empty() {
            return Err(LearnError::EmptyBatch);
        }
        let mut tape = Tape::new();
        let obs: Vec<&Tensor<T>> = batch.iter().map(|t| &t.observation).collect();
        let obs = tape.constant(Tensor::stack(&obs)?);
        let hidden = if self.model.is_recurrent() {
            let zero = Tensor::zeros(&[self.model.encoding_dim()]);
            let rows: Vec<&Tensor<T>> = batch.iter().map(|t| t.hidden.as_ref().unwrap_or(&zero)).collect();
            Some(tape.constant(Tensor::stack(&rows)?))
        } else {
            None
        };
        let enc = self.model.encode_from(&mut tape, obs, hidden)?;
        let probs = self.model.policy(&mut tape, enc)?;
        let q = self.model.action_utilities(&mut tape, enc)?;

        let (next_obs, next_hidden): (Vec<&Tensor<T>>, Vec<Option<Tensor<T>>>) = batch
            .iter()
            .enumerate()
            .filter_map(|(i, t)| {
                let h = self.model.is_recurrent().then(|| tape.value(enc).index_outer(i));
                t.next_observation.as_ref().map(|o| (o, h))
            })
            .unzip();
        let next_eval = if next_obs.is_empty() {
            Vec::new()
        } else {
            let refs: Vec<Option<&Tensor<T>>> = next_hidden.iter().map(Option::as_ref).collect();
            self.model.evaluate_from(&next_obs, &refs)?.0
        };

        let a = self.model.actions();
        let pv: Vec<f64> = tape.value(probs).data().iter().map(|v| v.as_f64()).collect();
        let qv: Vec<f64> = tape.value(q).data().iter().map(|v| v.as_f64()).collect();
        let mut next_iter = next_eval.iter();
        let terms: Vec<TdTerms> = batch
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let next = t.next_observation.as_ref().map(|_| {
                    let e = next_iter.next().expect("one evaluation per next observation");
                    (e.policy.probs.as_slice(), e.utilities.as_slice())
                });
                td_terms(&pv[i * a..(i + 1) * a], &qv[i * a..(i + 1) * a], t.action, t.reward, next)
            })
            .collect();

        let n = batch.len();
        let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();

        // Value loss: mean (R + V' − Q(A|H))².
        let targets = Tensor::new(
            vec![n],
            batch
                .iter()
                .zip(&terms)
                .map(|(t, k)| T::lit(t.reward + k.v_next))
                .collect(),
        )?;
        let target = tape.constant(targets);
        let q_taken = tape.gather(q, &actions)?;
        let delta = tape.sub(target, q_taken)?;
        let sq = tape.square(delta)?;
        let value_loss = tape.mean(sq)?;

        // Policy loss: −mean(Adv·log π(A|H) + β·entropy).
        let log_p = tape.log(probs)?;
        let log_taken = tape.gather(log_p, &actions)?;
        let adv = tape.constant(Tensor::new(
            vec![n],
            terms.iter().map(|k| T::lit(k.advantage)).collect(),
        )?);
        let weighted = tape.mul(adv, log_taken)?;
        let pg = tape.mean(weighted)?;
        let plogp = tape.mul(probs, log_p)?;
        let neg_entropy_rows = tape.sum_last(plogp)?;
        let neg_entropy = tape.mean(neg_entropy_rows)?;
        let bonus = tape.scale(neg_entropy, -self.entropy_coef)?;
        let objective = tape.add(pg, bonus)?;
        let policy_loss = tape.scale(objective, -1.0)?;

        tape.backward(value_loss)?;
        tape.flush_grads(&mut self.model.store);
        self.value_opt.step(&mut self.model.store);

        tape.backward(policy_loss)?;
        tape.flush_grads(&mut self.model.store);
        self.policy_opt.step(&mut self.model.store);

        let losses = Losses {
            value_loss: tape.value(value_loss).item().as_f64(),
            policy_loss: tape.value(policy_loss).item().as_f64(),
            entropy: -tape.value(neg_entropy).item().as_f64(),
        };
        Ok((losses, terms))
    }
}
