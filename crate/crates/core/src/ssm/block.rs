//! The bidirectional Mamba block over a serialized point cloud.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loan::loan;
use crate::curves::{segment_ranges, SerializationOrder};
use crate::error::{Error, Result};
use crate::nn::{Activation, Direction, LayerNorm, Linear, Mlp, NodeId, ParamId, ParamStore, Tape};
use crate::tensor::Tensor;

/// How the two gated scan directions are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// `(y_f + y_b) / 2`
    #[default]
    Mean,
    /// `y_f + y_b`
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Channel width `K` (equal to the inner width `E`).
    pub width: usize,
    pub static_dim: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub combine: Combine,
    /// Curve segment length in points; `None` scans the whole curve at once.
    pub segment_len: Option<usize>,
}

impl BlockConfig {
    pub fn new(width: usize, static_dim: usize, d_state: usize) -> Self {
        Self {
            width,
            static_dim,
            d_state,
            d_conv: 4,
            mlp_hidden: 2 * width,
            dropout: 0.0,
            combine: Combine::Mean,
            segment_len: None,
        }
    }
}

/// Parameters of one scan direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    /// `[E, w]`
    pub conv_w: ParamId,
    /// `[E]`
    pub conv_b: ParamId,
    pub proj_b: Linear,
    pub proj_c: Linear,
    pub proj_dt: Linear,
    /// `[E]`
    pub dt_bias: ParamId,
    /// `[E, N]`, with `A = −exp(A_log)`
    pub a_log: ParamId,
    /// `[E]`
    pub d: ParamId,
}

/// Smallest and largest initial step size `softplus(dt_bias)`.
pub const DT_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

impl SsmParams {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut R) -> Result<Self> {
        let (e, n, w) = (cfg.width, cfg.d_state, cfg.d_conv);
        let bound = 1.0 / (w as f64).sqrt();
        let conv_w = store.add(format!("{name}.conv.w"), Tensor::uniform(&[e, w], -bound, bound, rng))?;
        let conv_b = store.add_no_decay(format!("{name}.conv.b"), Tensor::zeros(&[e]))?;
        let proj_b = Linear::new(store, &format!("{name}.proj_b"), e, n, false, rng)?;
        let proj_c = Linear::new(store, &format!("{name}.proj_c"), e, n, false, rng)?;
        let proj_dt = Linear::new(store, &format!("{name}.proj_dt"), e, e, false, rng)?;
        let (lo, hi) = DT_INIT_RANGE;
        let dt_bias: Vec<f64> = (0..e)
            .map(|_| {
                let dt = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
                // inverse softplus
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let dt_bias = store.add_no_decay(format!("{name}.dt_bias"), Tensor::new(vec![e], dt_bias)?)?;
        let a_log: Vec<f64> = (0..e).flat_map(|_| (0..n).map(|k| ((k + 1) as f64).ln())).collect();
        let a_log = store.add_no_decay(format!("{name}.a_log"), Tensor::new(vec![e, n], a_log)?)?;
        let d = store.add_no_decay(format!("{name}.d"), Tensor::full(&[e], 1.0))?;
        Ok(Self {
            conv_w,
            conv_b,
            proj_b,
            proj_c,
            proj_dt,
            dt_bias,
            a_log,
            d,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub config: BlockConfig,
    pub loan1: Linear,
    pub loan2: Linear,
    pub in_x: Linear,
    pub in_z: Linear,
    /// Forward, then backward direction.
    pub dirs: [SsmParams; 2],
    pub norm: LayerNorm,
    pub out_proj: Linear,
    pub mlp: Mlp,
}

impl BlockParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: BlockConfig, rng: &mut R) -> Result<Self> {
        if config.width == 0 || config.d_state == 0 || config.d_conv == 0 {
            return Err(Error::Config("block width, d_state and d_conv must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        let k = config.width;
        let loan1 = Linear::new(store, &format!("{name}.loan1"), config.static_dim, k, true, rng)?;
        let loan2 = Linear::new(store, &format!("{name}.loan2"), config.static_dim, k, true, rng)?;
        let in_x = Linear::new(store, &format!("{name}.in_x"), k, k, false, rng)?;
        let in_z = Linear::new(store, &format!("{name}.in_z"), k, k, false, rng)?;
        let fwd = SsmParams::new(store, &format!("{name}.fwd"), &config, rng)?;
        let bwd = SsmParams::new(store, &format!("{name}.bwd"), &config, rng)?;
        let norm = LayerNorm::new(store, &format!("{name}.norm"), k)?;
        let out_proj = Linear::new(store, &format!("{name}.out"), k, k, true, rng)?;
        let mlp = Mlp::new(
            store,
            &format!("{name}.mlp"),
            &[k, config.mlp_hidden, k],
            Activation::Gelu,
            config.dropout,
            rng,
        )?;
        Ok(Self {
            config,
            loan1,
            loan2,
            in_x,
            in_z,
            dirs: [fwd, bwd],
            norm,
            out_proj,
            mlp,
        })
    }

    /// Zeroes the output projection and the MLP's last layer, which turns the
    /// block into the identity.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        self.out_proj.zero(store);
        self.mlp.last().zero(store);
    }
}

/// Row gathers that take a serialized `[T, P, E]` tensor to the concatenated
/// scan sequences of one direction and back.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanLayout {
    /// Sequence position → row `t·P + p` of the serialized tensor.
    pub to_seq: Vec<usize>,
    /// Row of the serialized tensor → sequence position.
    pub from_seq: Vec<usize>,
    /// Independent sequences (state and padding restart at each).
    pub segments: Vec<Range<usize>>,
}

impl ScanLayout {
    /// Spatial-first flattening per curve segment; the backward direction
    /// flips the point axis within each segment.
    pub fn new(steps: usize, points: usize, segment_len: Option<usize>, dir: Direction) -> Result<Self> {
        let curve_segs = segment_ranges(points, segment_len.unwrap_or(points).max(1))?;
        let mut to_seq = Vec::with_capacity(steps * points);
        let mut segments = Vec::with_capacity(curve_segs.len());
        for seg in &curve_segs {
            let start = to_seq.len();
            for t in 0..steps {
                match dir {
                    Direction::Forward => to_seq.extend(seg.clone().map(|p| t * points + p)),
                    Direction::Backward => to_seq.extend(seg.clone().rev().map(|p| t * points + p)),
                }
            }
            segments.push(start..to_seq.len());
        }
        let mut from_seq = vec![0; to_seq.len()];
        for (i, &r) in to_seq.iter().enumerate() {
            from_seq[r] = i;
        }
        Ok(Self {
            to_seq,
            from_seq,
            segments,
        })
    }

    fn is_identity(&self) -> bool {
        self.to_seq.iter().enumerate().all(|(i, &r)| i == r)
    }
}

/// Runs one direction: SiLU(conv) → B, C, Δ → discretize + scan.
/// `x` is the serialized `[T, P, E]` projection; returns `[T, P, E]`.
fn scan_direction(
    tape: &mut Tape,
    store: &ParamStore,
    p: &SsmParams,
    x: NodeId,
    layout: &ScanLayout,
) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let e = shape[2];
    let s = layout.to_seq.len();
    let seq = if layout.is_identity() {
        tape.reshape(x, &[s, e])?
    } else {
        tape.gather_rows(x, e, layout.to_seq.clone(), &[s, e])?
    };
    let kernel = tape.param(store, p.conv_w);
    let bias = tape.param(store, p.conv_b);
    let conv = tape.causal_conv(seq, kernel, Some(bias), layout.segments.clone())?;
    let u = tape.silu(conv);
    let b = p.proj_b.forward(tape, store, u)?;
    let c = p.proj_c.forward(tape, store, u)?;
    let dt = p.proj_dt.forward(tape, store, u)?;
    let dt_bias = tape.param(store, p.dt_bias);
    let dt = tape.add_broadcast(dt, dt_bias)?;
    let delta = tape.softplus(dt);
    let a_log = tape.param(store, p.a_log);
    let a = tape.exp(a_log);
    let a = tape.scale(a, -1.0);
    let d = tape.param(store, p.d);
    let y = tape.selective_scan(u, delta, a, b, c, d, layout.segments.clone())?;
    if layout.is_identity() {
        tape.reshape(y, &shape)
    } else {
        tape.gather_rows(y, e, layout.from_seq.clone(), &shape)
    }
}

/// Gathers the point axis of `[T, P, C]` (or `[P, C]` when `steps` is `None`).
fn gather_points(tape: &mut Tape, x: NodeId, index: &[usize]) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let c = *shape.last().unwrap();
    let (steps, points) = match shape.len() {
        3 => (shape[0], shape[1]),
        2 => (1, shape[0]),
        _ => return Err(Error::Shape(format!("gather_points on {shape:?}"))),
    };
    if index.len() != points {
        return Err(Error::Shape(format!(
            "order of length {} for {points} points",
            index.len()
        )));
    }
    let rows: Vec<usize> = (0..steps).flat_map(|t| index.iter().map(move |&p| t * points + p)).collect();
    tape.gather_rows(x, c, rows, &shape)
}

/// One bidirectional Mamba block: `X: [T, P, K]`, `static_attrs: [P, V_s]`
/// in caller order; the output is in caller order as well.
pub fn mamba_block(
    tape: &mut Tape,
    store: &ParamStore,
    params: &BlockParams,
    x: NodeId,
    static_attrs: NodeId,
    order: &SerializationOrder,
) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let cfg = &params.config;
    if shape.len() != 3 || shape[2] != cfg.width {
        return Err(Error::Shape(format!("block of width {} given {shape:?}", cfg.width)));
    }
    let (steps, points) = (shape[0], shape[1]);

    let xs = gather_points(tape, x, order.perm())?;
    let ss = gather_points(tape, static_attrs, order.perm())?;
    let h = loan(tape, store, xs, ss, &params.loan1)?;
    let xp = params.in_x.forward(tape, store, h)?;
    let zp = params.in_z.forward(tape, store, h)?;
    let gate = tape.silu(zp);

    let mut gated = Vec::with_capacity(2);
    for (dir, p) in [Direction::Forward, Direction::Backward].into_iter().zip(&params.dirs) {
        let layout = ScanLayout::new(steps, points, cfg.segment_len, dir)?;
        let y = scan_direction(tape, store, p, xp, &layout)?;
        gated.push(tape.mul(y, gate)?);
    }
    let mut y = tape.add(gated[0], gated[1])?;
    if cfg.combine == Combine::Mean {
        y = tape.scale(y, 0.5);
    }
    let y = params.norm.forward(tape, store, y)?;
    let y = params.out_proj.forward(tape, store, y)?;
    let mid = tape.add(y, xs)?;
    let h2 = loan(tape, store, mid, ss, &params.loan2)?;
    let m = params.mlp.forward(tape, store, h2)?;
    let out = tape.add(m, mid)?;
    gather_points(tape, out, order.inv())
}
