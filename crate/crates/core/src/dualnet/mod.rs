//! Shared-weight dual-stream temporal U-Net denoiser.
//!
//! Each stream sees its noisy motion concatenated with its own condition
//! (self-first participant order) and a sinusoidal time embedding. The
//! condition also drives FiLM heads in every residual block. Decoder
//! sub-blocks exchange information between the streams through
//! cross-attention whose projections are shared by both directions.

mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::ConditionLayout;
use crate::facemodel::MOTION_DIM;
use crate::numerics::{Axis, Graph, NodeId, NumericsError, Tensor, TensorMap};
use crate::scalar::Scalar;

pub use layers::{film_apply, Builder, CrossAttention, Init, ParamSpecs};

pub const INPUT_X_A: &str = "x_a";
pub const INPUT_X_B: &str = "x_b";
pub const INPUT_AUDIO: &str = "audio";
pub const INPUT_MASK_A: &str = "mask_a";
pub const INPUT_MASK_B: &str = "mask_b";
pub const INPUT_T0_A: &str = "t0_a";
pub const INPUT_T0_B: &str = "t0_b";
pub const INPUT_TIME: &str = "time";
pub const PARAM_SPEAK: &str = "role.speak";
pub const PARAM_LISTEN: &str = "role.listen";

#[derive(Debug, thiserror::Error)]
pub enum DualNetError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("input mismatch: {0}")]
    Input(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UNetConfig {
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub subblocks_per_block: usize,
    pub attention_heads: usize,
    pub temporal_stride: usize,
    pub audio_dim: usize,
    pub role_dim: usize,
    pub time_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            num_blocks: 2,
            subblocks_per_block: 2,
            attention_heads: 4,
            temporal_stride: 2,
            audio_dim: 64,
            role_dim: 16,
            time_dim: 16,
        }
    }
}

impl UNetConfig {
    /// Small network for gradient checks and overfitting runs.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 16,
            num_blocks: 2,
            subblocks_per_block: 2,
            attention_heads: 2,
            temporal_stride: 2,
            audio_dim: 8,
            role_dim: 4,
            time_dim: 8,
        }
    }

    pub fn input_dim(&self) -> usize {
        MOTION_DIM
    }

    pub fn condition_layout(&self) -> ConditionLayout {
        ConditionLayout {
            audio_dim: self.audio_dim,
            role_dim: self.role_dim,
        }
    }

    pub fn condition_dim(&self) -> usize {
        self.condition_layout().dim()
    }

    pub fn validate(&self) -> Result<(), DualNetError> {
        let bad = |m: String| Err(DualNetError::Config(m));
        if self.embed_dim == 0 || self.attention_heads == 0 {
            return bad("embed_dim and attention_heads must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.attention_heads) {
            return bad(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.attention_heads
            ));
        }
        if self.num_blocks == 0 || self.subblocks_per_block == 0 {
            return bad("need at least one block and one sub-block".into());
        }
        if self.temporal_stride == 0 {
            return bad("temporal_stride must be positive".into());
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return bad(format!("time_dim {} must be even and >= 2", self.time_dim));
        }
        if self.audio_dim == 0 || self.role_dim == 0 {
            return bad("audio_dim and role_dim must be positive".into());
        }
        Ok(())
    }
}

/// Sinusoidal embedding of diffusion time `t in [0, 1]`.
pub fn timestep_embedding<T: Scalar>(t: T, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let tt = t.to_f64_lossy() * 1000.0;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp())
        .collect();
    freqs
        .iter()
        .map(|f| T::lit((tt * f).sin()))
        .chain(freqs.iter().map(|f| T::lit((tt * f).cos())))
        .collect()
}

/// Nodes of a dual-stream forward graph for one sequence length.
#[derive(Clone, Debug)]
pub struct DualNodes {
    pub out_a: NodeId,
    pub out_b: NodeId,
    /// Assembled condition rows of each stream, before the time embedding.
    pub cond_a: NodeId,
    pub cond_b: NodeId,
}

/// Lengths of the temporal pyramid, finest first.
pub fn level_lengths(config: &UNetConfig, l: usize) -> Vec<usize> {
    let mut out = vec![l];
    for _ in 1..config.num_blocks {
        let prev = *out.last().expect("non-empty");
        out.push((prev + 2 - 3) / config.temporal_stride + 1);
    }
    out
}

fn stream_condition<T: Scalar>(
    b: &mut Builder<'_, T>,
    l: usize,
    audio: NodeId,
    masks: [NodeId; 2],
    t0s: [NodeId; 2],
    role_dim: usize,
) -> Result<NodeId, NumericsError> {
    let speak = b.param(PARAM_SPEAK, &[1, role_dim], Init::Normal(0.5))?;
    let listen = b.param(PARAM_LISTEN, &[1, role_dim], Init::Normal(0.5))?;
    let mut parts = vec![audio];
    for &m in &masks {
        // m * e_speak + (1 - m) * e_listen
        let ms = b.g.mul(m, speak)?;
        let neg = b.g.scale(m, -T::one());
        let om = b.g.shift(neg, T::one());
        let ol = b.g.mul(om, listen)?;
        parts.push(b.g.add(ms, ol)?);
    }
    parts.extend_from_slice(&masks);
    for &t in &t0s {
        let z = b.g.constant(Tensor::zeros(&[l, 3]));
        parts.push(b.g.add(z, t)?);
    }
    b.g.concat(&parts, Axis::Cols)
}

/// Adds the dual-stream network for sequences of length `l` to `g`,
/// returning its output nodes and recording parameter initializers into
/// `specs`.
pub fn build_dualnet<T: Scalar>(
    g: &mut Graph<T>,
    specs: &mut ParamSpecs,
    config: &UNetConfig,
    l: usize,
) -> Result<DualNodes, DualNetError> {
    config.validate()?;
    if l == 0 {
        return Err(DualNetError::Input("sequence length must be positive".into()));
    }
    let mut b = Builder { g, specs };
    let e = config.embed_dim;
    let heads = config.attention_heads;
    let lens = level_lengths(config, l);

    let x = [
        b.g.input(INPUT_X_A, &[l, MOTION_DIM])?,
        b.g.input(INPUT_X_B, &[l, MOTION_DIM])?,
    ];
    let audio = b.g.input(INPUT_AUDIO, &[l, config.audio_dim])?;
    let masks = [b.g.input(INPUT_MASK_A, &[l, 1])?, b.g.input(INPUT_MASK_B, &[l, 1])?];
    let t0s = [b.g.input(INPUT_T0_A, &[1, 3])?, b.g.input(INPUT_T0_B, &[1, 3])?];
    let time = b.g.input(INPUT_TIME, &[1, config.time_dim])?;
    let time_rows = {
        let z = b.g.constant(Tensor::zeros(&[l, config.time_dim]));
        b.g.add(z, time)?
    };

    let cond_a = stream_condition(&mut b, l, audio, masks, t0s, config.role_dim)?;
    let cond_b = stream_condition(
        &mut b,
        l,
        audio,
        [masks[1], masks[0]],
        [t0s[1], t0s[0]],
        config.role_dim,
    )?;
    let conds = [cond_a, cond_b];

    // per-stream encoder
    let mut skips: [Vec<NodeId>; 2] = [Vec::new(), Vec::new()];
    let mut cond_levels: [Vec<NodeId>; 2] = [Vec::new(), Vec::new()];
    let mut h = [x[0], x[1]];
    for s in 0..2 {
        let full = b.g.concat(&[conds[s], time_rows], Axis::Cols)?;
        let hidden = b.linear(full, "cond.fc1", e, false)?;
        let hidden = b.g.silu(hidden);
        let cm = b.linear(hidden, "cond.fc2", e, false)?;
        for (lvl, &len) in lens.iter().enumerate() {
            let step = config.temporal_stride.pow(lvl as u32);
            let idx: Vec<usize> = (0..len).map(|i| (i * step).min(l - 1)).collect();
            let node = if lvl == 0 { cm } else { b.g.gather_rows(cm, idx)? };
            cond_levels[s].push(node);
        }

        let input = b.g.concat(&[x[s], full], Axis::Cols)?;
        let mut hs = b.conv(input, "enc.in", e, 1, false)?;
        for lvl in 0..config.num_blocks {
            if lvl > 0 {
                hs = b.conv(hs, &format!("enc.down{lvl}"), e, config.temporal_stride, false)?;
            }
            for sb in 0..config.subblocks_per_block {
                let name = format!("enc.l{lvl}.s{sb}");
                hs = b.res_block(hs, cond_levels[s][lvl], &format!("{name}.res"))?;
                if lvl > 0 {
                    hs = b.self_attention_site(hs, &format!("{name}.attn"), heads)?;
                }
            }
            skips[s].push(hs);
        }
        h[s] = hs;
    }

    // joint decoder, coarsest level first
    for lvl in (0..config.num_blocks).rev() {
        if lvl + 1 < config.num_blocks {
            let len = lens[lvl];
            let idx: Vec<usize> = (0..len).map(|i| i / config.temporal_stride).collect();
            for s in 0..2 {
                let up = b.g.gather_rows(h[s], idx.clone())?;
                let up = b.conv(up, &format!("dec.up{lvl}"), e, 1, false)?;
                h[s] = b.g.add(up, skips[s][lvl])?;
            }
        }
        for sb in 0..config.subblocks_per_block {
            let name = format!("dec.l{lvl}.s{sb}");
            for s in 0..2 {
                h[s] = b.res_block(h[s], cond_levels[s][lvl], &format!("{name}.res"))?;
                h[s] = b.self_attention_site(h[s], &format!("{name}.attn"), heads)?;
            }
            let (ha, hb) = b.cross_attention_site(h[0], h[1], &format!("{name}.cross"), heads)?;
            h = [ha, hb];
        }
    }

    let mut outs = [h[0], h[1]];
    for s in 0..2 {
        let n = b.g.layer_norm(h[s], T::lit(1e-5));
        let a = b.g.silu(n);
        outs[s] = b.conv(a, "out", MOTION_DIM, 1, true)?;
    }
    Ok(DualNodes {
        out_a: outs[0],
        out_b: outs[1],
        cond_a,
        cond_b,
    })
}

/// Fresh parameters for every declared spec, deterministic in `seed`.
pub fn init_params<T: Scalar>(specs: &ParamSpecs, seed: u64) -> TensorMap<T> {
    let mut out = TensorMap::new();
    for (i, (name, (shape, init))) in specs.iter().enumerate() {
        let t = match *init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                Tensor::randn(shape, T::lit(std), &mut rng)
            }
        };
        out.insert(name.clone(), t);
    }
    out
}

/// Per-call inputs of the dual-stream network.
#[derive(Clone, Debug)]
pub struct DualInputs<T> {
    pub x_a: Tensor<T>,
    pub x_b: Tensor<T>,
    /// Audio features `[L, D_a]` of the mixed track.
    pub audio: Tensor<T>,
    pub mask_a: Vec<T>,
    pub mask_b: Vec<T>,
    pub t0_a: [T; 3],
    pub t0_b: [T; 3],
    /// Diffusion time in `[0, 1]`.
    pub time: T,
    /// Replaces the audio block with zeros (unconditional branch).
    pub drop_audio: bool,
}

impl<T: Scalar> DualInputs<T> {
    /// The same call with participants exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            x_a: self.x_b.clone(),
            x_b: self.x_a.clone(),
            audio: self.audio.clone(),
            mask_a: self.mask_b.clone(),
            mask_b: self.mask_a.clone(),
            t0_a: self.t0_b,
            t0_b: self.t0_a,
            time: self.time,
            drop_audio: self.drop_audio,
        }
    }

    /// Binds every network input into a table for graph evaluation.
    pub fn bind(&self, config: &UNetConfig) -> Result<TensorMap<T>, DualNetError> {
        let l = self.x_a.rows();
        let check = |what: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(DualNetError::Input(format!("{what} does not match L = {l}")))
            }
        };
        check("x_b", self.x_b.shape() == [l, MOTION_DIM])?;
        check("x_a", self.x_a.shape() == [l, MOTION_DIM])?;
        check("audio", self.audio.shape() == [l, config.audio_dim])?;
        check("masks", self.mask_a.len() == l && self.mask_b.len() == l)?;
        let mut m = TensorMap::new();
        m.insert(INPUT_X_A.into(), self.x_a.clone());
        m.insert(INPUT_X_B.into(), self.x_b.clone());
        let audio = if self.drop_audio {
            Tensor::zeros(self.audio.shape())
        } else {
            self.audio.clone()
        };
        m.insert(INPUT_AUDIO.into(), audio);
        m.insert(INPUT_MASK_A.into(), Tensor::matrix(l, 1, self.mask_a.clone())?);
        m.insert(INPUT_MASK_B.into(), Tensor::matrix(l, 1, self.mask_b.clone())?);
        m.insert(INPUT_T0_A.into(), Tensor::matrix(1, 3, self.t0_a.to_vec())?);
        m.insert(INPUT_T0_B.into(), Tensor::matrix(1, 3, self.t0_b.to_vec())?);
        m.insert(
            INPUT_TIME.into(),
            Tensor::matrix(1, config.time_dim, timestep_embedding(self.time, config.time_dim))?,
        );
        Ok(m)
    }
}

/// A built forward graph for one sequence length.
#[derive(Clone, Debug)]
pub struct DualNet<T> {
    pub config: UNetConfig,
    pub graph: Graph<T>,
    pub nodes: DualNodes,
    pub specs: ParamSpecs,
    pub len: usize,
}

impl<T: Scalar> DualNet<T> {
    pub fn new(config: UNetConfig, len: usize) -> Result<Self, DualNetError> {
        let mut graph = Graph::new();
        let mut specs = ParamSpecs::new();
        let nodes = build_dualnet(&mut graph, &mut specs, &config, len)?;
        Ok(Self {
            config,
            graph,
            nodes,
            specs,
            len,
        })
    }

    pub fn init_params(&self, seed: u64) -> TensorMap<T> {
        init_params(&self.specs, seed)
    }

    /// `(x0_hat_A, x0_hat_B)`.
    pub fn forward(
        &self,
        params: &TensorMap<T>,
        inputs: &DualInputs<T>,
    ) -> Result<(Tensor<T>, Tensor<T>), DualNetError> {
        if inputs.x_a.rows() != self.len {
            return Err(DualNetError::Input(format!(
                "graph built for L = {}, got {}",
                self.len,
                inputs.x_a.rows()
            )));
        }
        let bound = inputs.bind(&self.config)?;
        let e = self.graph.forward_eval(params, &bound)?;
        Ok((e.value(self.nodes.out_a).clone(), e.value(self.nodes.out_b).clone()))
    }
}

/// Total number of scalar parameters.
pub fn parameter_count<T: Scalar>(params: &TensorMap<T>) -> usize {
    params.values().map(Tensor::len).sum()
}
