//! Multi-head neighborhood attention (LSA, NSA, NCA) with position encodings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{knn_indices, Point};
use crate::nn::{Bound, Linear, Mlp, ParamBuilder};
use crate::tensor::{Float, Indices, Var};

/// Which position encoding an attention layer uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionEncoding {
    /// No position information.
    None,
    /// Bias and value offset from Δp alone, no interaction with q or k.
    Relative,
    /// Context-aware: Δp embeddings dotted with the current queries and keys.
    #[default]
    Contextual,
    /// MLP of absolute coordinates added to the input features.
    Absolute,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wout: Linear,
    pub heads: usize,
    pub channels: usize,
}

impl AttentionParams {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: {channels} channels not divisible by {heads} heads"
            )));
        }
        Ok(AttentionParams {
            wq: Linear::new(b, &format!("{name}.wq"), channels, channels, true),
            wk: Linear::new(b, &format!("{name}.wk"), channels, channels, true),
            wv: Linear::new(b, &format!("{name}.wv"), channels, channels, true),
            wout: Linear::new(b, &format!("{name}.w_out"), channels, channels, true),
            heads,
            channels,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Three Δp embeddings `3 → C → C`.
#[derive(Clone, Debug)]
pub struct CapeParams {
    pub mlp_q: Mlp,
    pub mlp_k: Mlp,
    pub mlp_v: Mlp,
}

impl CapeParams {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        CapeParams {
            mlp_q: Mlp::new(b, &format!("{name}.mlp_q"), 3, channels, channels),
            mlp_k: Mlp::new(b, &format!("{name}.mlp_k"), 3, channels, channels),
            mlp_v: Mlp::new(b, &format!("{name}.mlp_v"), 3, channels, channels),
        }
    }
}

#[derive(Clone, Debug)]
pub enum PositionParams {
    None,
    Relative(CapeParams),
    Contextual(CapeParams),
    Absolute(Mlp),
}

/// One attention layer: projections plus its position encoding.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub attn: AttentionParams,
    pub pos: PositionParams,
}

impl AttentionLayer {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        channels: usize,
        heads: usize,
        encoding: PositionEncoding,
    ) -> Result<Self> {
        let attn = AttentionParams::new(b, name, channels, heads)?;
        let pos = match encoding {
            PositionEncoding::None => PositionParams::None,
            PositionEncoding::Relative => PositionParams::Relative(CapeParams::new(b, &format!("{name}.rpe"), channels)),
            PositionEncoding::Contextual => {
                PositionParams::Contextual(CapeParams::new(b, &format!("{name}.cape"), channels))
            }
            PositionEncoding::Absolute => {
                PositionParams::Absolute(Mlp::new(b, &format!("{name}.ape"), 3, channels, channels))
            }
        };
        Ok(AttentionLayer { attn, pos })
    }

    pub fn encoding(&self) -> PositionEncoding {
        match self.pos {
            PositionParams::None => PositionEncoding::None,
            PositionParams::Relative(_) => PositionEncoding::Relative,
            PositionParams::Contextual(_) => PositionEncoding::Contextual,
            PositionParams::Absolute(_) => PositionEncoding::Absolute,
        }
    }

    pub fn channels(&self) -> usize {
        self.attn.channels
    }
}

/// Neighbor indices `[A, K]` into a key set and the offsets
/// `key − query` (`A·K·3`, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    pub idx: Indices,
    pub offsets: Vec<f64>,
}

impl Neighborhood {
    /// The `k` nearest `keys` of each query.
    pub fn knn(queries: &[Point], keys: &[Point], k: usize) -> Result<Self> {
        if k > keys.len() {
            return Err(Error::Contract(format!(
                "k = {k} exceeds the {} available keys",
                keys.len()
            )));
        }
        let idx = knn_indices(queries, keys, k)?;
        Ok(Self::from_indices(queries, keys, idx))
    }

    pub fn from_indices(queries: &[Point], keys: &[Point], idx: Indices) -> Self {
        let k = idx.shape()[1];
        let mut offsets = Vec::with_capacity(idx.len() * 3);
        for (j, &key) in idx.data().iter().enumerate() {
            let q = queries[j / k];
            for d in 0..3 {
                offsets.push(keys[key][d] - q[d]);
            }
        }
        Neighborhood { idx, offsets }
    }

    /// Full attention inside each patch of `m` groups of `k` consecutive
    /// rows of `coords`.
    pub fn patches(coords: &[Point], m: usize, k: usize) -> Result<Self> {
        if coords.len() != m * k || k == 0 {
            return Err(Error::Shape {
                op: "patch neighborhood",
                lhs: vec![coords.len()],
                rhs: vec![m, k],
            });
        }
        let mut data = Vec::with_capacity(m * k * k);
        for p in 0..m {
            for _ in 0..k {
                data.extend(p * k..(p + 1) * k);
            }
        }
        let idx = Indices::new(&[m * k, k], data)?;
        Ok(Self::from_indices(coords, coords, idx))
    }

    pub fn queries(&self) -> usize {
        self.idx.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.idx.shape()[1]
    }

    fn offsets_var<'g, T: Float>(&self, p: &Bound<'g, T>) -> Result<Var<'g, T>> {
        p.graph().constant_from(
            &[self.queries(), self.k(), 3],
            self.offsets.iter().map(|&v| T::of(v)).collect(),
        )
    }
}

/// Pre-gathered attention operands.
pub struct NeighborhoodAttentionInput<'g, T: Float> {
    /// `[A, C]`
    pub query_feats: Var<'g, T>,
    /// `[A, K, C]`
    pub key_feats: Var<'g, T>,
    /// `[A, K, C]`
    pub value_feats: Var<'g, T>,
    /// `[A, K, 3]`
    pub offsets: Var<'g, T>,
}

/// Logit bias `[A, H, K]` and value offset `[A, K, C]` of the context-aware
/// encoding. `q` is `[A, C]` and `k` is `[A, K, C]`, both already projected.
pub fn cape_terms<'g, T: Float>(
    p: &Bound<'g, T>,
    cape: &CapeParams,
    offsets: Var<'g, T>,
    q: Var<'g, T>,
    k: Var<'g, T>,
    heads: usize,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let e_q = cape.mlp_q.forward(p, offsets)?;
    let e_k = cape.mlp_k.forward(p, offsets)?;
    let e_v = cape.mlp_v.forward(p, offsets)?;
    let bias = q.head_dot(e_q, heads)?.add(e_k.pair_head_dot(k, heads)?)?;
    Ok((bias, e_v))
}

/// Attention over already projected `q [A, C]`, `k`, `v [A, K, C]`.
/// Returns the output `[A, C]` and the weights `[A, H, K]`.
fn attend_projected<'g, T: Float>(
    p: &Bound<'g, T>,
    layer: &AttentionLayer,
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    offsets: Option<Var<'g, T>>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let heads = layer.attn.heads;
    let mut logits = q.head_dot(k, heads)?;
    let mut v = v;
    match &layer.pos {
        PositionParams::Relative(cape) => {
            let off = offsets.ok_or_else(|| Error::contract("relative encoding needs offsets"))?;
            let e = cape.mlp_q.forward(p, off)?.add(cape.mlp_k.forward(p, off)?)?;
            logits = logits.add(e.head_sum(heads)?)?;
            v = v.add(cape.mlp_v.forward(p, off)?)?;
        }
        PositionParams::Contextual(cape) => {
            let off = offsets.ok_or_else(|| Error::contract("contextual encoding needs offsets"))?;
            let (bias, e_v) = cape_terms(p, cape, off, q, k, heads)?;
            logits = logits.add(bias)?;
            v = v.add(e_v)?;
        }
        PositionParams::None | PositionParams::Absolute(_) => {}
    }
    let scale = T::of(1.0 / (layer.attn.head_dim() as f64).sqrt());
    let alpha = logits.scale(scale)?.softmax_last()?;
    let out = alpha.head_mix(v, heads)?;
    Ok((layer.attn.wout.forward(p, out)?, alpha))
}

fn check_rank<T: Float>(op: &'static str, v: &Var<'_, T>, rank: usize, c: usize) -> Result<()> {
    let s = v.shape();
    if s.len() != rank || s[rank - 1] != c {
        return Err(Error::Shape {
            op,
            lhs: s,
            rhs: vec![c],
        });
    }
    Ok(())
}

/// Attention of each query over its own `K` keys and values.
pub fn neighborhood_attention<'g, T: Float>(
    p: &Bound<'g, T>,
    layer: &AttentionLayer,
    inp: &NeighborhoodAttentionInput<'g, T>,
) -> Result<Var<'g, T>> {
    neighborhood_attention_with_weights(p, layer, inp).map(|(out, _)| out)
}

pub fn neighborhood_attention_with_weights<'g, T: Float>(
    p: &Bound<'g, T>,
    layer: &AttentionLayer,
    inp: &NeighborhoodAttentionInput<'g, T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let c = layer.channels();
    check_rank("neighborhood_attention query", &inp.query_feats, 2, c)?;
    check_rank("neighborhood_attention keys", &inp.key_feats, 3, c)?;
    check_rank("neighborhood_attention offsets", &inp.offsets, 3, 3)?;
    let (qs, ks, vs, os) = (
        inp.query_feats.shape(),
        inp.key_feats.shape(),
        inp.value_feats.shape(),
        inp.offsets.shape(),
    );
    if ks != vs || ks[0] != qs[0] || os[..2] != ks[..2] || ks[1] == 0 {
        return Err(Error::Shape {
            op: "neighborhood_attention",
            lhs: ks,
            rhs: vs,
        });
    }
    if let PositionParams::Absolute(_) = layer.pos {
        return Err(Error::contract(
            "absolute encoding needs coordinates; use the coordinate-aware attention ops",
        ));
    }
    let a = &layer.attn;
    let q = a.wq.forward(p, inp.query_feats)?;
    let k = a.wk.forward(p, inp.key_feats)?;
    let v = a.wv.forward(p, inp.value_feats)?;
    attend_projected(p, layer, q, k, v, Some(inp.offsets))
}

/// Attention with queries `q_src[q_rows]` over keys `kv_src[nbr.idx]`.
/// Features are projected before gathering.
pub fn attend_indexed<'g, T: Float>(
    p: &Bound<'g, T>,
    layer: &AttentionLayer,
    q_src: Var<'g, T>,
    q_coords: &[Point],
    q_rows: Option<&Indices>,
    kv_src: Var<'g, T>,
    kv_coords: &[Point],
    nbr: &Neighborhood,
) -> Result<Var<'g, T>> {
    let c = layer.channels();
    check_rank("attention queries", &q_src, 2, c)?;
    check_rank("attention keys", &kv_src, 2, c)?;
    let a_n = q_rows.map_or(q_src.shape()[0], |r| r.len());
    if a_n != nbr.queries() {
        return Err(Error::Shape {
            op: "attention neighborhood",
            lhs: vec![a_n],
            rhs: nbr.idx.shape().to_vec(),
        });
    }
    let (q_src, kv_src) = match &layer.pos {
        PositionParams::Absolute(mlp) => {
            let embed = |coords: &[Point], x: Var<'g, T>| -> Result<Var<'g, T>> {
                if coords.len() != x.shape()[0] {
                    return Err(Error::Shape {
                        op: "absolute encoding",
                        lhs: vec![coords.len()],
                        rhs: x.shape(),
                    });
                }
                let pos = p.graph().constant_from(
                    &[coords.len(), 3],
                    coords.iter().flatten().map(|&v| T::of(v)).collect(),
                )?;
                x.add(mlp.forward(p, pos)?)
            };
            (embed(q_coords, q_src)?, embed(kv_coords, kv_src)?)
        }
        _ => (q_src, kv_src),
    };
    let a = &layer.attn;
    let mut q = a.wq.forward(p, q_src)?;
    if let Some(rows) = q_rows {
        q = q.gather_rows(rows)?;
    }
    let k = a.wk.forward(p, kv_src)?.gather_rows(&nbr.idx)?;
    let v = a.wv.forward(p, kv_src)?.gather_rows(&nbr.idx)?;
    let offsets = match layer.pos {
        PositionParams::Relative(_) | PositionParams::Contextual(_) => Some(nbr.offsets_var(p)?),
        _ => None,
    };
    attend_projected(p, layer, q, k, v, offsets).map(|(out, _)| out)
}

/// Full attention inside each patch: `patch_feats [M, K, C]` with the
/// coordinates of the same `M·K` points → `[M, K, C]`.
pub fn local_self_attention<'g, T: Float>(
    p: &Bound<'g, T>,
    layer: &AttentionLayer,
    patch_feats: Var<'g, T>,
    patch_coords: &[Point],
) -> Result<Var<'g, T>> {
    let s = patch_feats.shape();
    check_rank("local_self_attention", &patch_feats, 3, layer.channels())?;
    let (m, k) = (s[0], s[1]);
    let nbr = Neighborhood::patches(patch_coords, m, k)?;
    let flat = patch_feats.reshape(&[m * k, s[2]])?;
    attend_indexed(p, layer, flat, patch_coords, None, flat, patch_coords, &nbr)?.reshape(&s)
}

/// Proxy self-attention: each proxy attends to its `nbr` proxies.
pub fn proxy_attention<'g, T: Float>(
    p: &Bound<'g, T>,
    layer: &AttentionLayer,
    proxies: Var<'g, T>,
    proxy_coords: &[Point],
    nbr: &Neighborhood,
) -> Result<Var<'g, T>> {
    attend_indexed(p, layer, proxies, proxy_coords, None, proxies, proxy_coords, nbr)
}

/// Max-pools each patch into a proxy and runs proxy self-attention over
/// the `k` nearest proxies.
pub fn collect<'g, T: Float>(
    p: &Bound<'g, T>,
    layer: &AttentionLayer,
    patch_out: Var<'g, T>,
    proxy_coords: &[Point],
    k: usize,
) -> Result<Var<'g, T>> {
    let s = patch_out.shape();
    check_rank("collect", &patch_out, 3, layer.channels())?;
    if s[0] != proxy_coords.len() {
        return Err(Error::Shape {
            op: "collect",
            lhs: s,
            rhs: vec![proxy_coords.len()],
        });
    }
    if k > s[0] {
        return Err(Error::Contract(format!("collect: k = {k} exceeds M = {}", s[0])));
    }
    let r = patch_out.reduce_max_axis()?;
    let nbr = Neighborhood::knn(proxy_coords, proxy_coords, k)?;
    proxy_attention(p, layer, r, proxy_coords, &nbr)
}

/// Cross-attention of each point over its `k` nearest proxies.
pub fn distribute<'g, T: Float>(
    p: &Bound<'g, T>,
    layer: &AttentionLayer,
    point_feats: Var<'g, T>,
    point_coords: &[Point],
    proxies: Var<'g, T>,
    proxy_coords: &[Point],
    k: usize,
) -> Result<Var<'g, T>> {
    if k > proxy_coords.len() {
        return Err(Error::Contract(format!(
            "distribute: k = {k} exceeds M = {}",
            proxy_coords.len()
        )));
    }
    let nbr = Neighborhood::knn(point_coords, proxy_coords, k)?;
    distribute_with(p, layer, point_feats, point_coords, proxies, proxy_coords, &nbr)
}

pub fn distribute_with<'g, T: Float>(
    p: &Bound<'g, T>,
    layer: &AttentionLayer,
    point_feats: Var<'g, T>,
    point_coords: &[Point],
    proxies: Var<'g, T>,
    proxy_coords: &[Point],
    nbr: &Neighborhood,
) -> Result<Var<'g, T>> {
    attend_indexed(p, layer, point_feats, point_coords, None, proxies, proxy_coords, nbr)
}
