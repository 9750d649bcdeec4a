use rand::Rng;

use crate::tensor::{ParamStore, Real, Result, StoreKey, Tape, Tensor, TensorError, Var};

/// Convolutional encoder shape. The desk default is two 3×3 conv layers
/// and a dense projection; `res_blocks` adds residual conv pairs for the
/// deeper preset, and `recurrent` feeds the projection through a GRU cell
/// whose state is the encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub conv_channels: usize,
    pub conv_layers: usize,
    pub res_blocks: usize,
    pub kernel: usize,
    pub encoding_dim: usize,
    pub recurrent: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            conv_channels: 8,
            conv_layers: 2,
            res_blocks: 0,
            kernel: 3,
            encoding_dim: 64,
            recurrent: false,
        }
    }
}

impl EncoderConfig {
    /// One stem conv followed by four residual pairs (nine conv layers),
    /// projected to a 512-wide recurrent encoding.
    pub fn paper_scale() -> Self {
        Self {
            conv_channels: 32,
            conv_layers: 1,
            res_blocks: 4,
            kernel: 3,
            encoding_dim: 512,
            recurrent: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub encoder: EncoderConfig,
    pub actions: usize,
    pub leaky_slope: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            actions: crate::dungeon::NUM_ACTIONS,
            leaky_slope: 0.01,
        }
    }
}

/// Policy probabilities and their entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub probs: Vec<f64>,
    pub entropy: f64,
}

impl ActionDistribution {
    pub fn new(probs: Vec<f64>) -> Self {
        let entropy = -probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>();
        Self { probs, entropy }
    }
}

/// Forward-only evaluation of one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub policy: ActionDistribution,
    pub utilities: Vec<f64>,
    /// Policy-weighted utility of the state.
    pub utility: f64,
}

type Layer = (usize, usize);

/// Evaluations and the encodings a recurrent agent carries forward.
pub type Stepped<T> = (Vec<Evaluation>, Vec<Option<Tensor<T>>>);

/// Input weights, recurrent weights and bias of one GRU gate.
#[derive(Clone, Copy, Debug)]
struct Gate {
    wx: usize,
    wh: usize,
    b: usize,
}

/// Encoder E, policy head π and utility head Q sharing one parameter store.
#[derive(Clone, Debug)]
pub struct AgentModel<T> {
    config: AgentConfig,
    in_channels: usize,
    height: usize,
    width: usize,
    pub store: ParamStore<T>,
    convs: Vec<Layer>,
    res: Vec<[Layer; 2]>,
    fc: Layer,
    /// Update, reset and candidate gates.
    gru: Option<[Gate; 3]>,
    pi: Layer,
    q: Layer,
}

fn add_conv<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Layer {
    let fan_in = cin * k * k;
    let w = store.add_uniform(format!("{name}.w"), &[cout, cin, k, k], fan_in, 1.0, rng);
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
    (w, b)
}

fn add_dense<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    nin: usize,
    nout: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Layer {
    let w = store.add_uniform(format!("{name}.w"), &[nin, nout], nin, gain, rng);
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[nout]));
    (w, b)
}

fn add_gate<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut impl Rng) -> Gate {
    Gate {
        wx: store.add_uniform(format!("{name}.wx"), &[d, d], d, 1.0, rng),
        wh: store.add_uniform(format!("{name}.wh"), &[d, d], d, 1.0, rng),
        b: store.add(format!("{name}.b"), Tensor::zeros(&[d])),
    }
}

impl<T: Real> AgentModel<T> {
    /// Observations are `[in_channels, height, width]`.
    pub fn new(
        config: AgentConfig,
        in_channels: usize,
        height: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let enc = &config.encoder;
        let mut store = ParamStore::new(StoreKey::AGENT);
        let mut convs = Vec::new();
        let mut cin = in_channels;
        for i in 0..enc.conv_layers {
            convs.push(add_conv(&mut store, &format!("enc.conv{i}"), cin, enc.conv_channels, enc.kernel, rng));
            cin = enc.conv_channels;
        }
        let mut res = Vec::new();
        for i in 0..enc.res_blocks {
            let a = add_conv(&mut store, &format!("enc.res{i}.a"), cin, cin, enc.kernel, rng);
            let b = add_conv(&mut store, &format!("enc.res{i}.b"), cin, cin, enc.kernel, rng);
            res.push([a, b]);
        }
        let flat = cin * height * width;
        let fc = add_dense(&mut store, "enc.fc", flat, enc.encoding_dim, 1.0, rng);
        let gru = enc.recurrent.then(|| {
            ["z", "r", "n"].map(|g| add_gate(&mut store, &format!("enc.gru.{g}"), enc.encoding_dim, rng))
        });
        let pi = add_dense(&mut store, "pi", enc.encoding_dim, config.actions, 1.0, rng);
        let q = add_dense(&mut store, "q", enc.encoding_dim, config.actions, 1.0, rng);
        Self {
            config,
            in_channels,
            height,
            width,
            store,
            convs,
            res,
            fc,
            gru,
            pi,
            q,
        }
    }

    pub fn is_recurrent(&self) -> bool {
        self.gru.is_some()
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn observation_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }

    pub fn encoding_dim(&self) -> usize {
        self.config.encoder.encoding_dim
    }

    pub fn actions(&self) -> usize {
        self.config.actions
    }

    pub fn encoder_ids(&self) -> Vec<usize> {
        self.store.ids_with_prefix("enc.")
    }

    pub fn policy_ids(&self) -> Vec<usize> {
        self.store.ids_with_prefix("pi.")
    }

    pub fn utility_ids(&self) -> Vec<usize> {
        self.store.ids_with_prefix("q.")
    }

    fn layer(&self, tape: &mut Tape<T>, (w, b): Layer) -> (Var, Var) {
        (tape.param(&self.store, w), tape.param(&self.store, b))
    }

    /// `obs [batch, C+1, H, W] -> H [batch, D]`. A recurrent encoder starts
    /// from a zero state.
    pub fn encode(&self, tape: &mut Tape<T>, obs: Var) -> Result<Var> {
        self.encode_from(tape, obs, None)
    }

    /// Like [`AgentModel::encode`], continuing from the previous encodings
    /// `hidden [batch, D]`. Feed-forward encoders ignore `hidden`.
    pub fn encode_from(&self, tape: &mut Tape<T>, obs: Var, hidden: Option<Var>) -> Result<Var> {
        let x = self.encode_frame(tape, obs)?;
        let Some(gates) = self.gru else { return Ok(x) };
        let h = match hidden {
            Some(h) => {
                if tape.shape(h) != tape.shape(x) {
                    return Err(TensorError::ShapeMismatch {
                        op: "gru hidden",
                        left: tape.shape(h).to_vec(),
                        right: tape.shape(x).to_vec(),
                    });
                }
                h
            }
            None => {
                let s = tape.shape(x).to_vec();
                tape.constant(Tensor::zeros(&s))
            }
        };
        self.gru_step(tape, gates, x, h)
    }

    /// `h' = n + z⊙(h − n)` with `n = tanh(xWn + (r⊙h)Un + bn)`.
    fn gru_step(&self, tape: &mut Tape<T>, [z, r, n]: [Gate; 3], x: Var, h: Var) -> Result<Var> {
        let d = self.encoding_dim();
        let no_bias = tape.constant(Tensor::zeros(&[d]));
        let gate = |tape: &mut Tape<T>, g: Gate, state: Var| -> Result<Var> {
            let (wx, wh, b) = (
                tape.param(&self.store, g.wx),
                tape.param(&self.store, g.wh),
                tape.param(&self.store, g.b),
            );
            let a = tape.dense(x, wx, b)?;
            let c = tape.dense(state, wh, no_bias)?;
            tape.add(a, c)
        };
        let zs = gate(tape, z, h)?;
        let zs = tape.sigmoid(zs)?;
        let rs = gate(tape, r, h)?;
        let rs = tape.sigmoid(rs)?;
        let rh = tape.mul(rs, h)?;
        let ns = gate(tape, n, rh)?;
        let ns = tape.tanh(ns)?;
        let diff = tape.sub(h, ns)?;
        let keep = tape.mul(zs, diff)?;
        tape.add(ns, keep)
    }

    fn encode_frame(&self, tape: &mut Tape<T>, obs: Var) -> Result<Var> {
        let s = tape.shape(obs).to_vec();
        if s.len() != 4 || s[1..] != self.observation_shape() {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                left: s,
                right: self.observation_shape().to_vec(),
            });
        }
        let slope = self.config.leaky_slope;
        let mut x = obs;
        for &layer in &self.convs {
            let (w, b) = self.layer(tape, layer);
            let y = tape.conv2d(x, w, b)?;
            x = tape.leaky_relu(y, slope)?;
        }
        for &[a, b] in &self.res {
            let (wa, ba) = self.layer(tape, a);
            let (wb, bb) = self.layer(tape, b);
            let y = tape.conv2d(x, wa, ba)?;
            let y = tape.leaky_relu(y, slope)?;
            let y = tape.conv2d(y, wb, bb)?;
            let y = tape.add(x, y)?;
            x = tape.leaky_relu(y, slope)?;
        }
        let flat: usize = tape.shape(x)[1..].iter().product();
        let x = tape.reshape(x, &[s[0], flat])?;
        let (w, b) = self.layer(tape, self.fc);
        let h = tape.dense(x, w, b)?;
        tape.leaky_relu(h, slope)
    }

    /// Policy probabilities `[batch, A]` (softmax).
    pub fn policy(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        let (w, b) = self.layer(tape, self.pi);
        let logits = tape.dense(h, w, b)?;
        tape.softmax_rows(logits)
    }

    /// Raw action utilities `[batch, A]`.
    pub fn action_utilities(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        let (w, b) = self.layer(tape, self.q);
        tape.dense(h, w, b)
    }

    /// Encoder followed by both heads.
    pub fn heads(&self, tape: &mut Tape<T>, obs: Var) -> Result<(Var, Var)> {
        let h = self.encode(tape, obs)?;
        Ok((self.policy(tape, h)?, self.action_utilities(tape, h)?))
    }

    /// Utility of each observation in a batch: `[batch]`.
    pub fn utility(&self, tape: &mut Tape<T>, obs: Var) -> Result<Var> {
        let (p, q) = self.heads(tape, obs)?;
        state_utility(tape, p, q)
    }

    /// Forward-only pass over a batch of observations.
    pub fn evaluate(&self, observations: &[&Tensor<T>]) -> Result<Vec<Evaluation>> {
        Ok(self.evaluate_from(observations, &vec![None; observations.len()])?.0)
    }

    /// Forward-only pass continuing each row from its previous encoding
    /// (`None` starts fresh). Also returns the new encodings, which are
    /// only `Some` for a recurrent encoder.
    pub fn evaluate_from(
        &self,
        observations: &[&Tensor<T>],
        hidden: &[Option<&Tensor<T>>],
    ) -> Result<Stepped<T>> {
        let n = observations.len();
        if hidden.len() != n {
            return Err(TensorError::Invalid(format!(
                "{} hidden states for {n} observations",
                hidden.len()
            )));
        }
        let mut tape = Tape::inference();
        let obs = tape.constant(Tensor::stack(observations)?);
        let h = if self.is_recurrent() && hidden.iter().any(Option::is_some) {
            let d = self.encoding_dim();
            let zero = Tensor::zeros(&[d]);
            let rows: Vec<&Tensor<T>> = hidden.iter().map(|h| h.unwrap_or(&zero)).collect();
            Some(tape.constant(Tensor::stack(&rows)?))
        } else {
            None
        };
        let enc = self.encode_from(&mut tape, obs, h)?;
        let p = self.policy(&mut tape, enc)?;
        let q = self.action_utilities(&mut tape, enc)?;
        let next = (0..n)
            .map(|i| self.is_recurrent().then(|| tape.value(enc).index_outer(i)))
            .collect();
        Ok((self.read_evaluations(&tape, p, q, n), next))
    }

    /// One step of an episode: the evaluation and the state to carry.
    pub fn step(&self, observation: &Tensor<T>, hidden: Option<&Tensor<T>>) -> Result<(Evaluation, Option<Tensor<T>>)> {
        let (mut e, mut h) = self.evaluate_from(&[observation], &[hidden])?;
        Ok((e.remove(0), h.remove(0)))
    }

    fn read_evaluations(&self, tape: &Tape<T>, p: Var, q: Var, n: usize) -> Vec<Evaluation> {
        let a = self.actions();
        let pv = tape.value(p).data();
        let qv = tape.value(q).data();
        (0..n)
            .map(|i| {
                let probs: Vec<f64> = pv[i * a..(i + 1) * a].iter().map(|v| v.as_f64()).collect();
                let utilities: Vec<f64> = qv[i * a..(i + 1) * a].iter().map(|v| v.as_f64()).collect();
                let utility = probs.iter().zip(&utilities).map(|(p, q)| p * q).sum();
                Evaluation {
                    policy: ActionDistribution::new(probs),
                    utilities,
                    utility,
                }
            })
            .collect()
    }

    pub fn evaluate_one(&self, observation: &Tensor<T>) -> Result<Evaluation> {
        Ok(self.evaluate(&[observation])?.remove(0))
    }

    /// Encodings of a batch without gradient tracking.
    pub fn encodings(&self, observations: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let obs = tape.constant(Tensor::stack(observations)?);
        let h = self.encode(&mut tape, obs)?;
        Ok(tape.value(h).clone())
    }

    pub fn cast<U: Real>(&self) -> AgentModel<U> {
        AgentModel {
            config: self.config.clone(),
            in_channels: self.in_channels,
            height: self.height,
            width: self.width,
            store: self.store.cast(),
            convs: self.convs.clone(),
            res: self.res.clone(),
            fc: self.fc,
            gru: self.gru,
            pi: self.pi,
            q: self.q,
        }
    }
}

/// `U(s) = Σ_a π(s, a) · Q(s, a)` row by row: `[batch, A] × 2 -> [batch]`.
pub fn state_utility<T: Real>(tape: &mut Tape<T>, probs: Var, utilities: Var) -> Result<Var> {
    let prod = tape.mul(probs, utilities)?;
    tape.sum_last(prod)
}

/// Sampling draws from the distribution; greedy takes the most likely
/// action, lowest index on ties.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ActMode {
    #[default]
    Sample,
    Greedy,
}

pub fn act(probs: &[f64], rng: &mut impl Rng, mode: ActMode) -> usize {
    match mode {
        ActMode::Greedy => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            best
        }
        ActMode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            // Rounding left a sliver above the cumulative sum.
            probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(rng: &mut ChaCha8Rng) -> AgentModel<f64> {
        let cfg = AgentConfig {
            encoder: EncoderConfig {
                conv_channels: 3,
                conv_layers: 1,
                res_blocks: 1,
                kernel: 3,
                encoding_dim: 6,
                recurrent: false,
            },
            ..Default::default()
        };
        AgentModel::new(cfg, 7, 3, 4, rng)
    }

    #[test]
    fn parameter_names_follow_sections() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = tiny(&mut rng);
        for name in m.store.names() {
            assert!(
                name.starts_with("enc.") || name.starts_with("pi.") || name.starts_with("q."),
                "{name}"
            );
        }
        assert_eq!(m.policy_ids().len(), 2);
        assert_eq!(m.utility_ids().len(), 2);
    }

    #[test]
    fn zero_heads_give_uniform_policy_and_zero_utilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = tiny(&mut rng);
        for id in m.policy_ids().into_iter().chain(m.utility_ids()) {
            let shape = m.store.value(id).shape().to_vec();
            m.store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let obs = Tensor::from_fn(&[7, 3, 4], |i| (i % 5) as f64 * 0.3);
        let e = m.evaluate_one(&obs).unwrap();
        assert!(e.policy.probs.iter().all(|&p| (p - 0.2).abs() < 1e-12));
        assert!(e.utilities.iter().all(|&q| q == 0.0));
        assert!((e.policy.entropy - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn encode_rejects_wrong_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = tiny(&mut rng);
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros(&[1, 6, 3, 4]));
        assert!(matches!(m.encode(&mut tape, x), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn greedy_breaks_ties_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(act(&[0.3, 0.3, 0.2, 0.1, 0.1], &mut rng, ActMode::Greedy), 0);
        assert_eq!(act(&[0.0, 1.0, 0.0, 0.0, 0.0], &mut rng, ActMode::Greedy), 1);
    }

    #[test]
    fn degenerate_distribution_always_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            assert_eq!(act(&[0.0, 1.0, 0.0, 0.0, 0.0], &mut rng, ActMode::Sample), 1);
        }
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 5];
        let n = 100_000;
        for _ in 0..n {
            counts[act(&[0.2; 5], &mut rng, ActMode::Sample)] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.2).abs() < 0.01, "{f}");
        }
    }
}
