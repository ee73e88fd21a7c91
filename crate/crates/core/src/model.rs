//! The full forecasting network: embedding, hindcast stack, forecast stack
//! and per-lead regression heads.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curves::{CurveCache, CurveKind, SerializationOrder};
use crate::error::{Error, Result};
use crate::geometry::PointSet;
use crate::nn::{LayerNorm, Linear, NodeId, ParamStore, Tape};
use crate::ssm::{mamba_block, BlockConfig, BlockParams, Combine};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hindcast steps `T`.
    pub hindcast_steps: usize,
    /// Lead times `L`.
    pub lead_times: usize,
    /// Hidden width `K`.
    pub hidden: usize,
    /// HRES embedding width appended in the forecast blocks.
    pub hres_hidden: usize,
    /// Blocks per hindcast layer; `T` halves at the start of every layer after the first.
    pub hindcast_depths: Vec<usize>,
    pub d_state: usize,
    pub d_conv: usize,
    /// MLP hidden width as a multiple of the block width.
    pub mlp_ratio: usize,
    pub block_dropout: f64,
    pub head_dropout: f64,
    /// Hidden width of each regression head branch.
    pub head_hidden: usize,
    pub era5_vars: usize,
    pub glofas_vars: usize,
    pub cpc_vars: usize,
    pub hres_vars: usize,
    pub static_vars: usize,
    pub era5_embed: usize,
    pub glofas_embed: usize,
    pub cpc_embed: usize,
    /// Appends WGS-84 positional features to the static attributes.
    pub positional_encoding: bool,
    pub combine: Combine,
    pub segment_len: Option<usize>,
    /// Curves assigned to consecutive blocks, cycling; restarts for the forecast stack.
    pub curves: Vec<CurveKind>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hindcast_steps: 4,
            lead_times: 7,
            hidden: 32,
            hres_hidden: 16,
            hindcast_depths: vec![1, 1, 1],
            d_state: 8,
            d_conv: 4,
            mlp_ratio: 2,
            block_dropout: 0.0,
            head_dropout: 0.0,
            head_hidden: 32,
            era5_vars: 6,
            glofas_vars: 3,
            cpc_vars: 1,
            hres_vars: 3,
            static_vars: 8,
            era5_embed: 20,
            glofas_embed: 8,
            cpc_embed: 4,
            positional_encoding: true,
            combine: Combine::Mean,
            segment_len: None,
            curves: CurveKind::BLOCK_CYCLE.to_vec(),
        }
    }
}

impl ModelConfig {
    /// The full-size configuration.
    pub fn full_scale() -> Self {
        Self {
            hidden: 192,
            hres_hidden: 64,
            hindcast_depths: vec![2, 2, 2],
            d_state: 16,
            era5_embed: 128,
            glofas_embed: 48,
            cpc_embed: 16,
            head_hidden: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.lead_times == 0 || self.hidden == 0 || self.hres_hidden == 0 || self.head_hidden == 0 {
            return cfg("lead_times, hidden, hres_hidden and head_hidden must be positive".into());
        }
        if self.era5_embed + self.glofas_embed + self.cpc_embed != self.hidden {
            return cfg(format!(
                "embedding widths {}+{}+{} do not sum to hidden {}",
                self.era5_embed, self.glofas_embed, self.cpc_embed, self.hidden
            ));
        }
        if self.hindcast_depths.is_empty() || self.hindcast_depths.contains(&0) {
            return cfg("hindcast_depths must list at least one positive depth".into());
        }
        let halvings = self.hindcast_depths.len() - 1;
        if halvings >= usize::BITS as usize || self.hindcast_steps != 1 << halvings {
            return cfg(format!(
                "hindcast_steps {} cannot be halved to 1 over {} layers",
                self.hindcast_steps,
                self.hindcast_depths.len()
            ));
        }
        if self.curves.is_empty() {
            return cfg("curves must not be empty".into());
        }
        if self.segment_len == Some(0) {
            return cfg("segment_len must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.block_dropout) || !(0.0..1.0).contains(&self.head_dropout) {
            return cfg("dropout rates must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Width of the static features seen by LOAN.
    pub fn static_dim(&self) -> usize {
        self.static_vars + if self.positional_encoding { 3 } else { 0 }
    }

    pub fn forecast_width(&self) -> usize {
        self.hidden + self.hres_hidden
    }

    /// Time steps seen by each hindcast layer.
    pub fn hindcast_schedule(&self) -> Vec<usize> {
        (0..self.hindcast_depths.len())
            .map(|i| self.hindcast_steps >> i)
            .collect()
    }

    fn curve(&self, block: usize) -> CurveKind {
        self.curves[block % self.curves.len()]
    }

    /// Curves of all hindcast blocks, then all forecast blocks.
    pub fn block_curves(&self) -> (Vec<CurveKind>, Vec<CurveKind>) {
        let n: usize = self.hindcast_depths.iter().sum();
        (
            (0..n).map(|b| self.curve(b)).collect(),
            (0..self.lead_times).map(|b| self.curve(b)).collect(),
        )
    }

    fn block_config(&self, width: usize) -> BlockConfig {
        BlockConfig {
            width,
            static_dim: self.static_dim(),
            d_state: self.d_state,
            d_conv: self.d_conv,
            mlp_hidden: self.mlp_ratio.max(1) * width,
            dropout: self.block_dropout,
            combine: self.combine,
            segment_len: self.segment_len,
        }
    }
}

/// One regression head: own-lead and cross-lead projections merged by a
/// ReLU layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub own: Linear,
    /// Absent when there is a single lead time.
    pub cross: Option<Linear>,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed_era5: Linear,
    pub embed_glofas: Linear,
    pub embed_cpc: Linear,
    pub embed_norm: LayerNorm,
    /// One entry per hindcast layer after the first.
    pub downsample: Vec<Linear>,
    /// Blocks grouped by hindcast layer.
    pub hindcast: Vec<Vec<BlockParams>>,
    pub hres_proj: Vec<Linear>,
    /// Maps the previous forecast block's output back to width `K`; one per lead after the first.
    pub carry: Vec<Linear>,
    pub forecast: Vec<BlockParams>,
    pub heads: Vec<Head>,
}

/// Inputs for one issuance date, points in caller order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInputs {
    /// `[T, P, V_e]`
    pub era5: Tensor,
    /// `[T, P, V_g]`
    pub glofas: Tensor,
    /// `[T, P, V_c]`
    pub cpc: Tensor,
    /// `[L, P, V_h]`
    pub hres: Tensor,
    /// `[P, static_dim]`
    pub static_attrs: Tensor,
}

impl ModelInputs {
    pub fn points(&self) -> usize {
        self.static_attrs.shape().first().copied().unwrap_or(0)
    }
}

/// Serialization orders for every curve the model uses.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOrders {
    orders: HashMap<CurveKind, SerializationOrder>,
}

impl ModelOrders {
    pub fn build(points: &PointSet, config: &ModelConfig) -> Result<Self> {
        Self::build_cached(points, config, &CurveCache::new())
    }

    pub fn build_cached(points: &PointSet, config: &ModelConfig, cache: &CurveCache) -> Result<Self> {
        let mut orders = HashMap::new();
        for &kind in &config.curves {
            if let std::collections::hash_map::Entry::Vacant(e) = orders.entry(kind) {
                e.insert(cache.serialize(points, kind)?);
            }
        }
        Ok(Self { orders })
    }

    pub fn from_orders(orders: impl IntoIterator<Item = SerializationOrder>) -> Self {
        Self {
            orders: orders.into_iter().map(|o| (o.kind(), o)).collect(),
        }
    }

    pub fn get(&self, kind: CurveKind) -> Result<&SerializationOrder> {
        self.orders
            .get(&kind)
            .ok_or_else(|| Error::Invalid(format!("no serialization order for {kind}")))
    }
}

/// Nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[T, P, K]`
    pub embedded: NodeId,
    /// `[1, P, K]`
    pub hindcast: NodeId,
    /// `[L, P, K + K_hres]`
    pub features: NodeId,
    /// `[L, P, 1]`, in transformed target space
    pub delta: NodeId,
}

/// Configuration plus learnable state.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let k = c.hidden;
        let rng = &mut rng;
        let embed_era5 = Linear::new(&mut store, "embed.era5", c.era5_vars, c.era5_embed, true, rng)?;
        let embed_glofas = Linear::new(&mut store, "embed.glofas", c.glofas_vars, c.glofas_embed, true, rng)?;
        let embed_cpc = Linear::new(&mut store, "embed.cpc", c.cpc_vars, c.cpc_embed, true, rng)?;
        let embed_norm = LayerNorm::new(&mut store, "embed.norm", k)?;

        let mut downsample = Vec::new();
        let mut hindcast = Vec::new();
        let mut b = 0;
        for (layer, &depth) in c.hindcast_depths.iter().enumerate() {
            if layer > 0 {
                downsample.push(Linear::new(&mut store, &format!("down{layer}"), 2 * k, k, true, rng)?);
            }
            let mut blocks = Vec::with_capacity(depth);
            for _ in 0..depth {
                blocks.push(BlockParams::new(&mut store, &format!("hind{b}"), c.block_config(k), rng)?);
                b += 1;
            }
            hindcast.push(blocks);
        }

        let fw = c.forecast_width();
        let mut hres_proj = Vec::new();
        let mut carry = Vec::new();
        let mut forecast = Vec::new();
        for l in 0..c.lead_times {
            hres_proj.push(Linear::new(&mut store, &format!("hres{l}"), c.hres_vars, c.hres_hidden, true, rng)?);
            if l > 0 {
                carry.push(Linear::new(&mut store, &format!("carry{l}"), fw, k, true, rng)?);
            }
            forecast.push(BlockParams::new(&mut store, &format!("fore{l}"), c.block_config(fw), rng)?);
        }

        let mut heads = Vec::new();
        for l in 0..c.lead_times {
            let own = Linear::new(&mut store, &format!("head{l}.own"), fw, c.head_hidden, true, rng)?;
            let cross = if c.lead_times > 1 {
                Some(Linear::new(
                    &mut store,
                    &format!("head{l}.cross"),
                    (c.lead_times - 1) * fw,
                    c.head_hidden,
                    true,
                    rng,
                )?)
            } else {
                None
            };
            let width = if cross.is_some() { 2 * c.head_hidden } else { c.head_hidden };
            let out = Linear::new(&mut store, &format!("head{l}.out"), width, 1, true, rng)?;
            heads.push(Head { own, cross, out });
        }

        let params = ModelParams {
            embed_era5,
            embed_glofas,
            embed_cpc,
            embed_norm,
            downsample,
            hindcast,
            hres_proj,
            carry,
            forecast,
            heads,
        };
        Ok(Self { config, store, params })
    }

    fn check_inputs(&self, inp: &ModelInputs) -> Result<usize> {
        let c = &self.config;
        let p = inp.points();
        let want = [
            ("era5", &inp.era5, [c.hindcast_steps, p, c.era5_vars]),
            ("glofas", &inp.glofas, [c.hindcast_steps, p, c.glofas_vars]),
            ("cpc", &inp.cpc, [c.hindcast_steps, p, c.cpc_vars]),
            ("hres", &inp.hres, [c.lead_times, p, c.hres_vars]),
        ];
        for (name, t, shape) in want {
            if t.shape() != shape {
                return Err(Error::Shape(format!("{name} is {:?}, expected {shape:?}", t.shape())));
            }
        }
        if inp.static_attrs.shape() != [p, c.static_dim()] {
            return Err(Error::Shape(format!(
                "static attributes are {:?}, expected [{p}, {}]",
                inp.static_attrs.shape(),
                c.static_dim()
            )));
        }
        if p == 0 {
            return Err(Error::Shape("no points".into()));
        }
        Ok(p)
    }

    /// Per-source projections, concatenation, Tanh and LayerNorm.
    pub fn embed_inputs(&self, tape: &mut Tape, era5: NodeId, glofas: NodeId, cpc: NodeId) -> Result<NodeId> {
        let p = &self.params;
        let e = p.embed_era5.forward(tape, &self.store, era5)?;
        let g = p.embed_glofas.forward(tape, &self.store, glofas)?;
        let c = p.embed_cpc.forward(tape, &self.store, cpc)?;
        let x = tape.concat(&[e, g, c])?;
        let x = tape.tanh(x);
        p.embed_norm.forward(tape, &self.store, x)
    }

    /// Halves the time axis of `[T, P, K]` by a linear map over consecutive step pairs.
    fn downsample(&self, tape: &mut Tape, layer: &Linear, x: NodeId) -> Result<NodeId> {
        let s = tape.value(x).shape().to_vec();
        let (t, p, k) = (s[0], s[1], s[2]);
        if t % 2 != 0 {
            return Err(Error::Config(format!("cannot halve {t} time steps")));
        }
        let index: Vec<usize> = (0..t / 2)
            .flat_map(|i| (0..p).flat_map(move |pt| [2 * i * p + pt, (2 * i + 1) * p + pt]))
            .collect();
        let pairs = tape.gather_rows(x, k, index, &[t / 2, p, 2 * k])?;
        layer.forward(tape, &self.store, pairs)
    }

    /// Runs the hindcast layers; returns `[1, P, K]`.
    pub fn hindcast_forward(
        &self,
        tape: &mut Tape,
        embedded: NodeId,
        static_attrs: NodeId,
        orders: &ModelOrders,
    ) -> Result<NodeId> {
        if tape.value(embedded).shape()[0] != self.config.hindcast_steps {
            return Err(Error::Config("embedded sequence length differs from hindcast_steps".into()));
        }
        let (curves, _) = self.config.block_curves();
        let mut x = embedded;
        let mut b = 0;
        for (layer, blocks) in self.params.hindcast.iter().enumerate() {
            if layer > 0 {
                x = self.downsample(tape, &self.params.downsample[layer - 1], x)?;
            }
            for block in blocks {
                x = mamba_block(tape, &self.store, block, x, static_attrs, orders.get(curves[b])?)?;
                b += 1;
            }
        }
        Ok(x)
    }

    /// Chains the forecast blocks; returns `[L, P, K + K_hres]`.
    pub fn forecast_forward(
        &self,
        tape: &mut Tape,
        hindcast: NodeId,
        hres: NodeId,
        static_attrs: NodeId,
        orders: &ModelOrders,
    ) -> Result<NodeId> {
        let c = &self.config;
        let hs = tape.value(hres).shape().to_vec();
        if hs.len() != 3 || hs[0] != c.lead_times {
            return Err(Error::Shape(format!("hres {hs:?} for {} lead times", c.lead_times)));
        }
        let (p, vh) = (hs[1], hs[2]);
        let (_, curves) = c.block_curves();
        let mut prev = hindcast;
        let mut outs = Vec::with_capacity(c.lead_times);
        for l in 0..c.lead_times {
            let base = if l == 0 {
                prev
            } else {
                self.params.carry[l - 1].forward(tape, &self.store, prev)?
            };
            let rows: Vec<usize> = (l * p..(l + 1) * p).collect();
            let h = tape.gather_rows(hres, vh, rows, &[1, p, vh])?;
            let h = self.params.hres_proj[l].forward(tape, &self.store, h)?;
            let x = tape.concat(&[base, h])?;
            let y = mamba_block(
                tape,
                &self.store,
                &self.params.forecast[l],
                x,
                static_attrs,
                orders.get(curves[l])?,
            )?;
            outs.push(y);
            prev = y;
        }
        let fw = c.forecast_width();
        let flat: Vec<NodeId> = outs
            .iter()
            .map(|&o| tape.reshape(o, &[p * fw]))
            .collect::<Result<_>>()?;
        let all = tape.concat(&flat)?;
        tape.reshape(all, &[c.lead_times, p, fw])
    }

    /// Per-lead heads over `[L, P, F]` features; returns `[L, P, 1]`.
    pub fn regression_heads(&self, tape: &mut Tape, features: NodeId) -> Result<NodeId> {
        let s = tape.value(features).shape().to_vec();
        let (l_n, p, f) = (s[0], s[1], s[2]);
        if l_n != self.config.lead_times {
            return Err(Error::Shape(format!("{l_n} lead features for {} heads", self.config.lead_times)));
        }
        let leads: Vec<NodeId> = (0..l_n)
            .map(|l| tape.gather_rows(features, f, (l * p..(l + 1) * p).collect(), &[p, f]))
            .collect::<Result<_>>()?;
        let mut outs = Vec::with_capacity(l_n);
        for (l, head) in self.params.heads.iter().enumerate() {
            let own = head.own.forward(tape, &self.store, leads[l])?;
            let hidden = match &head.cross {
                Some(cross) => {
                    let others: Vec<NodeId> = (0..l_n).filter(|&j| j != l).map(|j| leads[j]).collect();
                    let o = tape.concat(&others)?;
                    let o = cross.forward(tape, &self.store, o)?;
                    tape.concat(&[own, o])?
                }
                None => own,
            };
            let hidden = tape.relu(hidden);
            let hidden = tape.dropout(hidden, self.config.head_dropout);
            outs.push(head.out.forward(tape, &self.store, hidden)?);
        }
        let all = tape.concat(&outs)?;
        // [P, L] → [L, P, 1]
        let index: Vec<usize> = (0..l_n).flat_map(|l| (0..p).map(move |pt| pt * l_n + l)).collect();
        tape.gather_rows(all, 1, index, &[l_n, p, 1])
    }

    /// Full forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, inp: &ModelInputs, orders: &ModelOrders) -> Result<ForwardOutput> {
        self.check_inputs(inp)?;
        let era5 = tape.leaf(inp.era5.clone());
        let glofas = tape.leaf(inp.glofas.clone());
        let cpc = tape.leaf(inp.cpc.clone());
        let hres = tape.leaf(inp.hres.clone());
        let st = tape.leaf(inp.static_attrs.clone());
        self.forward_nodes(tape, [era5, glofas, cpc, hres, st], orders)
    }

    /// Forward pass from existing nodes `[era5, glofas, cpc, hres, static]`.
    pub fn forward_nodes(&self, tape: &mut Tape, nodes: [NodeId; 5], orders: &ModelOrders) -> Result<ForwardOutput> {
        let [era5, glofas, cpc, hres, st] = nodes;
        let embedded = self.embed_inputs(tape, era5, glofas, cpc)?;
        let hindcast = self.hindcast_forward(tape, embedded, st, orders)?;
        let features = self.forecast_forward(tape, hindcast, hres, st, orders)?;
        let delta = self.regression_heads(tape, features)?;
        Ok(ForwardOutput {
            embedded,
            hindcast,
            features,
            delta,
        })
    }

    /// Evaluation-mode prediction in transformed space, `[L, P]`.
    pub fn predict(&self, inp: &ModelInputs, orders: &ModelOrders) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, inp, orders)?;
        let v = tape.value(out.delta).clone();
        let shape = [v.shape()[0], v.shape()[1]];
        v.reshape(&shape)
    }

    /// Writes `path` (parameters) and `path` with a `.toml` extension (config).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.store.write(&mut buf)?;
        fs::write(path, buf)?;
        let text = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(sidecar_path(path), text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(sidecar_path(path))?;
        let config: ModelConfig = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let mut model = Model::new(config, 0)?;
        let bytes = fs::read(path)?;
        model.store.load_values(bytes.as_slice())?;
        Ok(model)
    }
}

/// Config sidecar of a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

/// `max(0, x_prev + sign(ŷ)(e^|ŷ| − 1))` for `ŷ: [L, P]`.
pub fn reconstruct_discharge(y: &Tensor, x_prev: &[f64]) -> Result<Tensor> {
    let s = y.shape();
    if s.len() != 2 || s[1] != x_prev.len() {
        return Err(Error::Shape(format!("delta {s:?} with {} previous values", x_prev.len())));
    }
    let p = s[1];
    let out = y
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (x_prev[i % p] + v.signum() * v.abs().exp_m1()).max(0.0))
        .collect();
    Tensor::new(s.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check_params, FD_STEP};
    use rand::seq::SliceRandom;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            hindcast_steps: 2,
            lead_times: 2,
            hidden: 8,
            hres_hidden: 4,
            hindcast_depths: vec![1, 1],
            d_state: 2,
            head_hidden: 4,
            era5_vars: 2,
            glofas_vars: 2,
            hres_vars: 2,
            static_vars: 2,
            era5_embed: 4,
            glofas_embed: 2,
            cpc_embed: 2,
            positional_encoding: false,
            ..ModelConfig::default()
        }
    }

    fn toy_inputs(c: &ModelConfig, p: usize, seed: u64) -> ModelInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = c.hindcast_steps;
        ModelInputs {
            era5: Tensor::randn(&[t, p, c.era5_vars], 1.0, &mut rng),
            glofas: Tensor::randn(&[t, p, c.glofas_vars], 1.0, &mut rng),
            cpc: Tensor::randn(&[t, p, c.cpc_vars], 1.0, &mut rng),
            hres: Tensor::randn(&[c.lead_times, p, c.hres_vars], 1.0, &mut rng),
            static_attrs: Tensor::randn(&[p, c.static_dim()], 1.0, &mut rng),
        }
    }

    fn random_orders(c: &ModelConfig, p: usize, seed: u64) -> ModelOrders {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelOrders::from_orders(c.curves.iter().map(|&k| {
            let mut perm: Vec<usize> = (0..p).collect();
            perm.shuffle(&mut rng);
            SerializationOrder::from_permutation(k, perm).unwrap()
        }))
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::full_scale().validate().is_ok());
        assert_eq!(ModelConfig::full_scale().hindcast_schedule(), vec![4, 2, 1]);
        assert_eq!(ModelConfig::full_scale().forecast_width(), 256);
        let bad = ModelConfig {
            hindcast_steps: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            era5_embed: 21,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_inputs_embed_to_zero() {
        let c = toy_config();
        let mut m = Model::new(c.clone(), 1).unwrap();
        for l in [m.params.embed_era5, m.params.embed_glofas, m.params.embed_cpc] {
            m.store.value_mut(l.b.unwrap()).fill(0.0);
        }
        let mut tape = Tape::new();
        let z = |t: &mut Tape, v| t.leaf(Tensor::zeros(&[2, 3, v]));
        let (a, b, cc) = (z(&mut tape, 2), z(&mut tape, 2), z(&mut tape, 1));
        let e = m.embed_inputs(&mut tape, a, b, cc).unwrap();
        assert_eq!(tape.value(e).shape(), &[2, 3, 8]);
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_and_determinism() {
        let c = toy_config();
        let m = Model::new(c.clone(), 2).unwrap();
        let inp = toy_inputs(&c, 5, 3);
        let orders = random_orders(&c, 5, 4);
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &inp, &orders).unwrap();
        assert_eq!(tape.value(out.hindcast).shape(), &[1, 5, 8]);
        assert_eq!(tape.value(out.features).shape(), &[2, 5, 12]);
        assert_eq!(tape.value(out.delta).shape(), &[2, 5, 1]);
        let a = m.predict(&inp, &orders).unwrap();
        let b = m.predict(&inp, &orders).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_gradients_match_differences() {
        let c = toy_config();
        let m = Model::new(c.clone(), 5).unwrap();
        let inp = toy_inputs(&c, 6, 6);
        let orders = random_orders(&c, 6, 7);
        let inputs = vec![inp.era5, inp.glofas, inp.cpc, inp.hres, inp.static_attrs];
        let report = grad_check_params(&m.store, &inputs, FD_STEP, |t, st, ids| {
            let view = Model {
                config: m.config.clone(),
                store: st.clone(),
                params: m.params.clone(),
            };
            let out = view.forward_nodes(t, [ids[0], ids[1], ids[2], ids[3], ids[4]], &orders)?;
            t.dot(out.delta, &[0.3, -1.0, 0.7, 0.2, 1.1, -0.4, 0.9, 0.5, -0.8, 0.1, 0.6, -0.2])
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn reconstruct_cases() {
        let y = Tensor::new(vec![3, 1], vec![0.0, 2f64.ln(), -10.0]).unwrap();
        let f = reconstruct_discharge(&y, &[5.0]).unwrap();
        assert_eq!(f.data()[0], 5.0);
        assert!((f.data()[1] - 6.0).abs() < 1e-12);
        assert_eq!(f.data()[2], 0.0);
    }

    #[test]
    fn single_lead_drops_cross_branch() {
        let c = ModelConfig {
            lead_times: 1,
            ..toy_config()
        };
        let m = Model::new(c.clone(), 8).unwrap();
        assert!(m.params.heads[0].cross.is_none());
        let inp = toy_inputs(&c, 4, 9);
        let y = m.predict(&inp, &random_orders(&c, 4, 10)).unwrap();
        assert_eq!(y.shape(), &[1, 4]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.rsnn");
        let c = toy_config();
        let m = Model::new(c.clone(), 11).unwrap();
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.config, c);
        let inp = toy_inputs(&c, 4, 12);
        let orders = random_orders(&c, 4, 13);
        assert_eq!(m.predict(&inp, &orders).unwrap(), back.predict(&inp, &orders).unwrap());
    }
}
