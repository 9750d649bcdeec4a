use rand::seq::SliceRandom;
use rand::Rng;

use super::model::{sample_latents, GeneratorModel};
use crate::agent::{state_utility, AgentModel};
use crate::tensor::{AdamState, Real, Result, StoreKey, Tape, Tensor, TensorError, Var};

/// Anything that scores relaxed levels `[m, C, H, W]` differentiably.
pub trait LevelCritic<T: Real> {
    /// Estimated utility of each level: `[m]`.
    fn level_utility(&self, tape: &mut Tape<T>, levels: Var) -> Result<Var>;
    /// Encoding of each level: `[m, D]`.
    fn level_encoding(&self, tape: &mut Tape<T>, levels: Var) -> Result<Var>;
}

/// Appends the has-key plane (all zero at a level's start).
fn with_key_plane<T: Real>(tape: &mut Tape<T>, levels: Var) -> Result<Var> {
    let s = tape.shape(levels).to_vec();
    let zeros = tape.constant(Tensor::zeros(&[s[0], 1, s[2], s[3]]));
    tape.concat_channels(levels, zeros)
}

impl<T: Real> LevelCritic<T> for AgentModel<T> {
    fn level_utility(&self, tape: &mut Tape<T>, levels: Var) -> Result<Var> {
        let obs = with_key_plane(tape, levels)?;
        let (p, q) = self.heads(tape, obs)?;
        state_utility(tape, p, q)
    }

    fn level_encoding(&self, tape: &mut Tape<T>, levels: Var) -> Result<Var> {
        let obs = with_key_plane(tape, levels)?;
        self.encode(tape, obs)
    }
}

/// Closed-form critic `U = 1 − 2·mean(wall probability)`, zero when half
/// the level is wall. Encodes a level as its flattened probabilities.
#[derive(Clone, Copy, Debug, Default)]
pub struct WallCritic;

impl<T: Real> LevelCritic<T> for WallCritic {
    fn level_utility(&self, tape: &mut Tape<T>, levels: Var) -> Result<Var> {
        let s = tape.shape(levels).to_vec();
        let (m, c, plane) = (s[0], s[1], s[2] * s[3]);
        let wall = crate::dungeon::TileType::Wall.channel();
        let weight = T::lit(-2.0 / plane as f64);
        let mask = Tensor::from_fn(&s, |i| {
            if (i / plane) % c == wall {
                weight
            } else {
                T::zero()
            }
        });
        let mask = tape.constant(mask);
        let weighted = tape.mul(levels, mask)?;
        let flat = tape.reshape(weighted, &[m, c * plane])?;
        let sums = tape.sum_last(flat)?;
        tape.add_scalar(sums, 1.0)
    }

    fn level_encoding(&self, tape: &mut Tape<T>, levels: Var) -> Result<Var> {
        let s = tape.shape(levels).to_vec();
        tape.reshape(levels, &[s[0], s[1..].iter().product()])
    }
}

/// Squared utility objective: mean over the batch of `U(G(z))²`.
pub fn generator_loss<T: Real>(
    tape: &mut Tape<T>,
    generator: &GeneratorModel<T>,
    critic: &impl LevelCritic<T>,
    z: Var,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let levels = generator.forward(tape, z, training, rng)?;
    let u = critic.level_utility(tape, levels)?;
    let sq = tape.square(u)?;
    tape.mean(sq)
}

/// One descent step on the squared-utility objective over `m` fresh
/// latents. The critic's parameters are frozen. Returns the loss.
pub fn generator_update<T: Real>(
    generator: &mut GeneratorModel<T>,
    opt: &mut AdamState<T>,
    critic: &impl LevelCritic<T>,
    m: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    tape.freeze(StoreKey::AGENT);
    let z = tape.constant(sample_latents(m, generator.config().latent_dim, rng));
    let loss = generator_loss(&mut tape, generator, critic, z, true, rng)?;
    tape.backward(loss)?;
    tape.flush_grads(&mut generator.store);
    opt.step(&mut generator.store);
    Ok(tape.value(loss).item().as_f64())
}

/// Random perfect matching of `0..m` into disjoint pairs.
pub fn random_pairs(m: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    if m < 2 || !m.is_multiple_of(2) {
        return Err(TensorError::Invalid(format!(
            "diversity pairing needs an even batch of at least 2, got {m}"
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    Ok(order.chunks(2).map(|p| (p[0], p[1])).collect())
}

/// Mean squared L2 distance between paired rows of `h [m, D]`: `[1]`.
pub fn pair_distance<T: Real>(tape: &mut Tape<T>, h: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let ha = tape.select_rows(h, &a)?;
    let hb = tape.select_rows(h, &b)?;
    let d = tape.sub(ha, hb)?;
    let sq = tape.square(d)?;
    let per_pair = tape.sum_last(sq)?;
    tape.mean(per_pair)
}

/// One ascent step on the encoding spread of `m` generated levels.
/// Returns the distance measured before the step.
pub fn diversity_update<T: Real>(
    generator: &mut GeneratorModel<T>,
    opt: &mut AdamState<T>,
    critic: &impl LevelCritic<T>,
    m: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let pairs = random_pairs(m, rng)?;
    let mut tape = Tape::new();
    tape.freeze(StoreKey::AGENT);
    let z = tape.constant(sample_latents(m, generator.config().latent_dim, rng));
    let levels = generator.forward(&mut tape, z, true, rng)?;
    let h = critic.level_encoding(&mut tape, levels)?;
    let d = pair_distance(&mut tape, h, &pairs)?;
    let loss = tape.scale(d, -1.0)?;
    tape.backward(loss)?;
    tape.flush_grads(&mut generator.store);
    opt.step(&mut generator.store);
    Ok(tape.value(d).item().as_f64())
}

/// Mean per-cell cross-entropy between the tile planes of `obs` and the
/// generator's decoding of their encodings.
pub fn reconstruction_loss<T: Real>(
    tape: &mut Tape<T>,
    generator: &GeneratorModel<T>,
    agent: &AgentModel<T>,
    obs: &[&Tensor<T>],
    training: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let [c, h, w] = generator.output_shape();
    let stacked = Tensor::stack(obs)?;
    let planes = stacked.shape()[1];
    if planes < c {
        return Err(TensorError::ShapeMismatch {
            op: "reconstruct",
            left: stacked.shape().to_vec(),
            right: vec![obs.len(), c, h, w],
        });
    }
    let plane = h * w;
    let target = Tensor::from_fn(&[obs.len(), c, h, w], |i| {
        let n = i / (c * plane);
        stacked.data()[n * planes * plane + i % (c * plane)]
    });
    let x = tape.constant(stacked);
    let enc = agent.encode(tape, x)?;
    let probs = generator.decode(tape, enc, training, rng)?;
    let logp = tape.log(probs)?;
    let target = tape.constant(target);
    let ce = tape.mul(target, logp)?;
    let total = tape.sum(ce)?;
    tape.scale(total, -1.0 / (obs.len() * plane) as f64)
}

/// One reconstruction step moving both the generator and the agent's
/// encoder, each with its own optimizer. Returns the loss.
pub fn reconstruction_update<T: Real>(
    generator: &mut GeneratorModel<T>,
    agent: &mut AgentModel<T>,
    gen_opt: &mut AdamState<T>,
    enc_opt: &mut AdamState<T>,
    obs: &[&Tensor<T>],
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = reconstruction_loss(&mut tape, generator, agent, obs, true, rng)?;
    tape.backward(loss)?;
    tape.flush_grads(&mut generator.store);
    tape.flush_grads(&mut agent.store);
    gen_opt.step(&mut generator.store);
    enc_opt.step(&mut agent.store);
    Ok(tape.value(loss).item().as_f64())
}

/// Fraction of cells whose argmax decoding matches the observation.
pub fn reconstruction_accuracy<T: Real>(
    generator: &GeneratorModel<T>,
    agent: &AgentModel<T>,
    obs: &[&Tensor<T>],
    rng: &mut impl Rng,
) -> Result<f64> {
    let [c, h, w] = generator.output_shape();
    let mut tape = Tape::inference();
    let x = tape.constant(Tensor::stack(obs)?);
    let enc = agent.encode(&mut tape, x)?;
    let probs = generator.decode(&mut tape, enc, false, rng)?;
    let p = tape.value(probs);
    let plane = h * w;
    let mut hits = 0;
    for (n, o) in obs.iter().enumerate() {
        let got = super::discretize_level(&p.index_outer(n));
        for i in 0..plane {
            let want = (0..c).find(|&ch| o.data()[ch * plane + i] > T::zero());
            if want == Some(got.cells()[i].channel()) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / (obs.len() * plane) as f64)
}

/// Mean |U(relaxed) − U(one-hot)| over a batch of generated levels: how
/// far the agent's view of the softmax output is from what it plays.
pub fn relaxation_gap<T: Real>(agent: &AgentModel<T>, probs: &Tensor<T>) -> Result<f64> {
    let m = probs.shape()[0];
    let c = probs.shape()[1];
    let hard: Vec<Tensor<T>> = super::discretize_batch(probs)
        .iter()
        .map(|l| l.one_hot(c))
        .collect();
    let hard_refs: Vec<&Tensor<T>> = hard.iter().collect();
    let mut tape = Tape::inference();
    let soft = tape.constant(probs.clone());
    let u_soft = agent.level_utility(&mut tape, soft)?;
    let hard = tape.constant(Tensor::stack(&hard_refs)?);
    let u_hard = agent.level_utility(&mut tape, hard)?;
    let gap = tape
        .value(u_soft)
        .data()
        .iter()
        .zip(tape.value(u_hard).data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum::<f64>();
    Ok(gap / m as f64)
}
