use rand::Rng;
use rand_distr::StandardNormal;

use crate::dungeon::{LevelMap, TileType, NUM_TILES};
use crate::tensor::{
    ParamStore, Real, Result, StoreKey, Tape, Tensor, TensorError, UpsampleMode, Var,
};

/// Which tile channels the generator may place. Masked channels get
/// probability exactly 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMask {
    allowed: Vec<bool>,
}

impl ChannelMask {
    pub fn new(allowed: Vec<bool>) -> std::result::Result<Self, TensorError> {
        if !allowed.iter().any(|&a| a) {
            return Err(TensorError::Invalid("channel mask allows no channel".into()));
        }
        Ok(Self { allowed })
    }

    /// Every designable tile allowed; reserved channels past the tile
    /// alphabet masked.
    pub fn designable(channels: usize) -> Self {
        Self {
            allowed: (0..channels).map(|c| c < NUM_TILES).collect(),
        }
    }

    pub fn only(channels: usize, tiles: &[TileType]) -> std::result::Result<Self, TensorError> {
        Self::new(
            (0..channels)
                .map(|c| tiles.iter().any(|t| t.channel() == c))
                .collect(),
        )
    }

    pub fn channels(&self) -> usize {
        self.allowed.len()
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn is_allowed(&self, channel: usize) -> bool {
        self.allowed.get(channel).copied().unwrap_or(false)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    /// Filters per conv layer.
    pub filters: usize,
    pub seed_height: usize,
    pub seed_width: usize,
    /// Number of {conv, conv, dropout, upsample} blocks.
    pub stages: usize,
    pub kernel: usize,
    pub dropout: f64,
    pub upsample: UpsampleMode,
    pub leaky_slope: f64,
    /// Encoding width fed to the reconstruction path; a dense bridge maps
    /// it to `latent_dim` when the two differ.
    pub encoding_dim: usize,
    pub mask: ChannelMask,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            filters: 64,
            seed_height: 3,
            seed_width: 4,
            stages: 2,
            kernel: 3,
            dropout: 0.2,
            upsample: UpsampleMode::Nearest,
            leaky_slope: 0.01,
            encoding_dim: 64,
            mask: ChannelMask::designable(NUM_TILES),
        }
    }
}

impl GeneratorConfig {
    pub fn paper_scale() -> Self {
        Self {
            latent_dim: 512,
            filters: 512,
            upsample: UpsampleMode::SubPixel,
            encoding_dim: 512,
            mask: ChannelMask::designable(14),
            ..Self::default()
        }
    }

    pub fn channels(&self) -> usize {
        self.mask.channels()
    }

    pub fn output_height(&self) -> usize {
        self.seed_height << self.stages
    }

    pub fn output_width(&self) -> usize {
        self.seed_width << self.stages
    }
}

type Layer = (usize, usize);

/// Latent vector to per-cell tile distribution.
#[derive(Clone, Debug)]
pub struct GeneratorModel<T> {
    config: GeneratorConfig,
    pub store: ParamStore<T>,
    bridge: Option<Layer>,
    seed: Layer,
    blocks: Vec<[Layer; 2]>,
    refine: Layer,
    head: Layer,
}

impl<T: Real> GeneratorModel<T> {
    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new(StoreKey::GENERATOR);
        let f = config.filters;
        let k = config.kernel;
        let z = config.latent_dim;
        let dense = |store: &mut ParamStore<T>, name: &str, nin: usize, nout: usize, rng: &mut _| {
            let w = store.add_uniform(format!("{name}.w"), &[nin, nout], nin, 1.0, rng);
            let b = store.add(format!("{name}.b"), Tensor::zeros(&[nout]));
            (w, b)
        };
        let conv = |store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, rng: &mut _| {
            let w = store.add_uniform(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, 1.0, rng);
            let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
            (w, b)
        };
        let bridge = (config.encoding_dim != z)
            .then(|| dense(&mut store, "gen.bridge", config.encoding_dim, z, rng));
        let seed = dense(&mut store, "gen.seed", z, f * config.seed_height * config.seed_width, rng);
        let widen = if config.upsample == UpsampleMode::SubPixel { 4 } else { 1 };
        let blocks = (0..config.stages)
            .map(|i| {
                let a = conv(&mut store, &format!("gen.block{i}.a"), f, f, k, rng);
                let b = conv(&mut store, &format!("gen.block{i}.b"), f, f * widen, k, rng);
                [a, b]
            })
            .collect();
        let refine = conv(&mut store, "gen.refine", f, f, k, rng);
        let head = conv(&mut store, "gen.head", f, config.channels(), 1, rng);
        Self {
            config,
            store,
            bridge,
            seed,
            blocks,
            refine,
            head,
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// `[C, H, W]` of one generated level.
    pub fn output_shape(&self) -> [usize; 3] {
        [
            self.config.channels(),
            self.config.output_height(),
            self.config.output_width(),
        ]
    }

    pub fn ids(&self) -> Vec<usize> {
        (0..self.store.len()).collect()
    }

    fn layer(&self, tape: &mut Tape<T>, (w, b): Layer) -> (Var, Var) {
        (tape.param(&self.store, w), tape.param(&self.store, b))
    }

    /// `z [m, Z] -> probs [m, C, H, W]`.
    pub fn forward(&self, tape: &mut Tape<T>, z: Var, training: bool, rng: &mut impl Rng) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        if s.len() != 2 || s[1] != self.config.latent_dim {
            return Err(TensorError::ShapeMismatch {
                op: "generate",
                left: s,
                right: vec![0, self.config.latent_dim],
            });
        }
        let c = &self.config;
        let slope = c.leaky_slope;
        let (w, b) = self.layer(tape, self.seed);
        let x = tape.dense(z, w, b)?;
        let x = tape.leaky_relu(x, slope)?;
        let mut x = tape.reshape(x, &[s[0], c.filters, c.seed_height, c.seed_width])?;
        for &[la, lb] in &self.blocks {
            let (wa, ba) = self.layer(tape, la);
            let (wb, bb) = self.layer(tape, lb);
            let y = tape.conv2d(x, wa, ba)?;
            let y = tape.leaky_relu(y, slope)?;
            let y = tape.conv2d(y, wb, bb)?;
            let y = tape.leaky_relu(y, slope)?;
            let y = tape.dropout(y, c.dropout, training, rng)?;
            x = tape.upsample_double(y, c.upsample)?;
        }
        let (w, b) = self.layer(tape, self.refine);
        let x = tape.conv2d(x, w, b)?;
        let x = tape.leaky_relu(x, slope)?;
        let (w, b) = self.layer(tape, self.head);
        let logits = tape.conv2d(x, w, b)?;
        tape.softmax_axis(logits, 1, Some(c.mask.allowed()))
    }

    /// Maps agent encodings `[m, D]` to levels, through the bridge if any.
    pub fn decode(&self, tape: &mut Tape<T>, h: Var, training: bool, rng: &mut impl Rng) -> Result<Var> {
        let z = match self.bridge {
            Some(layer) => {
                let (w, b) = self.layer(tape, layer);
                tape.dense(h, w, b)?
            }
            None => h,
        };
        self.forward(tape, z, training, rng)
    }

    /// Forward-only generation.
    pub fn generate(&self, z: &Tensor<T>, training: bool, rng: &mut impl Rng) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let zv = tape.constant(z.clone());
        let p = self.forward(&mut tape, zv, training, rng)?;
        Ok(tape.value(p).clone())
    }

    pub fn cast<U: Real>(&self) -> GeneratorModel<U> {
        GeneratorModel {
            config: self.config.clone(),
            store: self.store.cast(),
            bridge: self.bridge,
            seed: self.seed,
            blocks: self.blocks.clone(),
            refine: self.refine,
            head: self.head,
        }
    }
}

/// `[m, Z]` i.i.d. standard normal latents.
pub fn sample_latents<T: Real>(m: usize, latent_dim: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(&[m, latent_dim], |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Per-cell argmax of a `[C, H, W]` distribution, lowest channel on ties.
/// Reserved channels past the tile alphabet discretize to floor.
pub fn discretize_level<T: Real>(probs: &Tensor<T>) -> LevelMap {
    let s = probs.shape();
    assert_eq!(s.len(), 3, "discretize_level expects [C, H, W]");
    let (c, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let d = probs.data();
    let cells = (0..plane)
        .map(|i| {
            let mut best = 0;
            for ch in 1..c {
                if d[ch * plane + i] > d[best * plane + i] {
                    best = ch;
                }
            }
            TileType::from_channel(best).unwrap_or(TileType::Floor)
        })
        .collect();
    LevelMap::new(h, w, cells)
}

/// Discretizes every level of a `[m, C, H, W]` batch.
pub fn discretize_batch<T: Real>(probs: &Tensor<T>) -> Vec<LevelMap> {
    (0..probs.shape()[0])
        .map(|i| discretize_level(&probs.index_outer(i)))
        .collect()
}
