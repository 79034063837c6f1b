//! CDFormer: embedding, CD-block stages with downsampling, decoder and
//! task heads.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use config::{ModelConfig, Task, PRESETS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend_indexed, AttentionLayer, Neighborhood};
use crate::error::{Error, Result};
use crate::geometry::{interpolation_weights, knn_indices, patch_divide_coords, Interpolation, PatchIndex, Point, PointCloud};
use crate::nn::{Bound, LayerNorm, Linear, Mlp, ParamBuilder, ParamSpec, ParamStore};
use crate::tensor::{Float, Indices, Var};

/// Geometry of one CD block stage, computed once and shared by its blocks.
#[derive(Clone, Debug)]
pub struct StageGeometry {
    pub coords: Vec<Point>,
    pub patches: PatchIndex,
    /// Patch points as queries over their own patch.
    pub lsa: Neighborhood,
    pub proxy_coords: Vec<Point>,
    /// Proxy to nearest proxies.
    pub proxy_nbr: Neighborhood,
    /// Point to nearest proxies.
    pub point_nbr: Neighborhood,
    /// Proxies onto points.
    pub proxy_interp: Interpolation,
}

/// Everything the forward pass needs from coordinates alone.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub embed_knn: Indices,
    pub stages: Vec<StageGeometry>,
    /// `K` nearest points of stage `i` around each point of stage `i + 1`.
    pub down: Vec<Indices>,
    /// Stage `i + 1` onto stage `i`.
    pub up: Vec<Interpolation>,
}

impl StageGeometry {
    pub fn new(coords: &[Point], k: usize, scale: usize) -> Result<Self> {
        let n = coords.len();
        if n == 0 {
            return Err(Error::contract("stage has no points"));
        }
        let k_patch = k.min(n);
        let patches = patch_divide_coords(coords, scale, k_patch)?;
        let m = patches.num_patches();
        let rows = patches.neighbor_idx.data();
        let mut lsa_idx = Vec::with_capacity(m * k_patch * k_patch);
        for row in rows.chunks(k_patch) {
            for _ in 0..k_patch {
                lsa_idx.extend_from_slice(row);
            }
        }
        let query_coords: Vec<Point> = rows.iter().map(|&i| coords[i]).collect();
        let lsa = Neighborhood::from_indices(
            &query_coords,
            coords,
            Indices::new(&[m * k_patch, k_patch], lsa_idx)?,
        );
        let proxy_coords: Vec<Point> = patches.center_idx.iter().map(|&i| coords[i]).collect();
        let k_proxy = k.min(m);
        Ok(StageGeometry {
            coords: coords.to_vec(),
            lsa,
            proxy_nbr: Neighborhood::knn(&proxy_coords, &proxy_coords, k_proxy)?,
            point_nbr: Neighborhood::knn(coords, &proxy_coords, k_proxy)?,
            proxy_interp: interpolation_weights(&proxy_coords, coords)?,
            proxy_coords,
            patches,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Flattened patch membership (`M·K` point indices).
    pub fn patch_rows(&self) -> Indices {
        let idx = &self.patches.neighbor_idx;
        Indices::new(&[idx.len()], idx.data().to_vec()).expect("nonempty patches")
    }
}

impl Geometry {
    pub fn new(config: &ModelConfig, coords: &[Point]) -> Result<Self> {
        config.validate()?;
        let k = config.k_neighbors;
        let embed_knn = knn_indices(coords, coords, k.min(coords.len()))?;
        let mut stages = Vec::with_capacity(config.stages());
        let mut down = Vec::new();
        let mut up = Vec::new();
        let mut level = coords.to_vec();
        for i in 0..config.stages() {
            let stage = StageGeometry::new(&level, k, config.block_scale())?;
            if i + 1 < config.stages() {
                let trans = if config.block_scale() == config.scale_s {
                    stage.patches.clone()
                } else {
                    patch_divide_coords(&level, config.scale_s, k.min(level.len()))?
                };
                let next: Vec<Point> = trans.center_idx.iter().map(|&c| level[c]).collect();
                up.push(interpolation_weights(&next, &level)?);
                down.push(trans.neighbor_idx);
                stages.push(stage);
                level = next;
            } else {
                stages.push(stage);
            }
        }
        Ok(Geometry {
            embed_knn,
            stages,
            down,
            up,
        })
    }
}

/// Weighted sum of gathered rows: `out[n] = Σ_j w[n, j] · x[idx[n, j]]`.
pub fn interpolate<'g, T: Float>(x: Var<'g, T>, interp: &Interpolation) -> Result<Var<'g, T>> {
    let (n, k) = (interp.idx.shape()[0], interp.idx.shape()[1]);
    let w = x.graph().constant_from(
        &[n, 1, k],
        interp.weights.iter().map(|&v| T::of(v)).collect(),
    )?;
    w.head_mix(x.gather_rows(&interp.idx)?, 1)
}

#[derive(Clone, Debug)]
pub struct Ffn {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl Ffn {
    fn new(b: &mut ParamBuilder, name: &str, c: usize, ratio: usize) -> Self {
        Ffn {
            norm: LayerNorm::new(b, &format!("{name}.norm"), c),
            mlp: Mlp::new(b, name, c, c * ratio, c),
        }
    }

    /// `x + mlp(norm(x))`.
    fn residual<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.add(self.mlp.forward(p, self.norm.forward(p, x)?)?)
    }
}

/// One collect-and-distribute block.
#[derive(Clone, Debug)]
pub struct CdBlock {
    pub norm1: LayerNorm,
    pub lsa: AttentionLayer,
    pub ffn1: Ffn,
    pub norm2: LayerNorm,
    pub nsa: Option<(AttentionLayer, Ffn)>,
    pub nca: Option<(LayerNorm, AttentionLayer)>,
    /// Replaces cross-attention when distribution is off.
    pub interp_proj: Option<Linear>,
    pub ffn3: Ffn,
}

impl CdBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize, heads: usize, cfg: &ModelConfig) -> Result<Self> {
        let pe = cfg.position_encoding;
        let norm1 = LayerNorm::new(b, &format!("{name}.norm1"), c);
        let lsa = AttentionLayer::new(b, &format!("{name}.lsa"), c, heads, pe)?;
        let ffn1 = Ffn::new(b, &format!("{name}.ffn1"), c, cfg.ffn_ratio);
        let norm2 = LayerNorm::new(b, &format!("{name}.norm2"), c);
        let nsa = if cfg.collect {
            Some((
                AttentionLayer::new(b, &format!("{name}.nsa"), c, heads, pe)?,
                Ffn::new(b, &format!("{name}.ffn2"), c, cfg.ffn_ratio),
            ))
        } else {
            None
        };
        Ok(CdBlock {
            norm1,
            lsa,
            ffn1,
            norm2,
            nsa,
            nca: cfg
                .distribute
                .then(|| -> Result<_> {
                    Ok((
                        LayerNorm::new(b, &format!("{name}.norm3"), c),
                        AttentionLayer::new(b, &format!("{name}.nca"), c, heads, pe)?,
                    ))
                })
                .transpose()?,
            interp_proj: (!cfg.distribute).then(|| Linear::new(b, &format!("{name}.interp"), c, c, true)),
            ffn3: Ffn::new(b, &format!("{name}.ffn3"), c, cfg.ffn_ratio),
        })
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>, geo: &StageGeometry) -> Result<Var<'g, T>> {
        let n = geo.len();
        let rows = geo.patch_rows();

        // local self-attention inside each patch, averaged back onto points
        let h = self.norm1.forward(p, x)?;
        let z = attend_indexed(p, &self.lsa, h, &geo.coords, Some(&rows), h, &geo.coords, &geo.lsa)?;
        let x1 = x.add(z.scatter_mean(rows.data(), n)?)?;
        let x1 = self.ffn1.residual(p, x1)?;

        // collect: max-pool patches into proxies, proxies attend to proxies
        let r = self
            .norm2
            .forward(p, x1)?
            .gather_rows(&geo.patches.neighbor_idx)?
            .reduce_max_axis()?;
        let r = match &self.nsa {
            Some((nsa, ffn)) => {
                let z = attend_indexed(p, nsa, r, &geo.proxy_coords, None, r, &geo.proxy_coords, &geo.proxy_nbr)?;
                ffn.residual(p, r.add(z)?)?
            }
            None => r,
        };

        // distribute: points attend to their nearest proxies
        let update = match (&self.nca, &self.interp_proj) {
            (Some((norm3, nca)), _) => {
                let h = norm3.forward(p, x1)?;
                attend_indexed(p, nca, h, &geo.coords, None, r, &geo.proxy_coords, &geo.point_nbr)?
            }
            (None, Some(proj)) => proj.forward(p, interpolate(r, &geo.proxy_interp)?)?,
            (None, None) => unreachable!("block built without a distribution path"),
        };
        self.ffn3.residual(p, x1.add(update)?)
    }
}

/// Linear lift, max over each point's neighbors, second linear and norm.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub lift: Linear,
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl Embedding {
    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, feats: Var<'g, T>, knn: &Indices) -> Result<Var<'g, T>> {
        let h = self.lift.forward(p, feats)?.gather_rows(knn)?.reduce_max_axis()?;
        self.norm.forward(p, self.proj.forward(p, h)?)
    }
}

/// Max over each center's neighbors in the finer stage, linear, norm.
#[derive(Clone, Debug)]
pub struct Transition {
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl Transition {
    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>, knn: &Indices) -> Result<Var<'g, T>> {
        let pooled = x.gather_rows(knn)?.reduce_max_axis()?;
        self.norm.forward(p, self.proj.forward(p, pooled)?)
    }
}

/// Decoder step from stage `i + 1` to stage `i`.
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub proj: Linear,
    pub fuse: Linear,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub enum Head {
    Classification { fc1: Linear, fc2: Linear },
    Segmentation { fc1: Linear, fc2: Linear, up: Vec<UpBlock> },
}

/// The full network definition; parameters live in a separate store.
#[derive(Clone, Debug)]
pub struct CdFormer {
    pub config: ModelConfig,
    pub embed: Embedding,
    pub stages: Vec<Vec<CdBlock>>,
    pub transitions: Vec<Transition>,
    pub head: Head,
    specs: Vec<ParamSpec>,
}

impl CdFormer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new();
        let ch = &config.channels;
        let c1 = ch[0];
        let embed = Embedding {
            lift: Linear::new(&mut b, "embed.lift", config.in_channels, c1, true),
            proj: Linear::new(&mut b, "embed.proj", c1, c1, true),
            norm: LayerNorm::new(&mut b, "embed.norm", c1),
        };
        let mut stages = Vec::new();
        let mut transitions = Vec::new();
        for i in 0..config.stages() {
            let blocks = (0..config.blocks[i])
                .map(|j| CdBlock::new(&mut b, &format!("stage{}.block{}", i + 1, j + 1), ch[i], config.heads[i], &config))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            if i + 1 < config.stages() {
                transitions.push(Transition {
                    proj: Linear::new(&mut b, &format!("down{}", i + 1), ch[i], ch[i + 1], true),
                    norm: LayerNorm::new(&mut b, &format!("down{}.norm", i + 1), ch[i + 1]),
                });
            }
        }
        let classes = config.task.classes();
        let head = match config.task {
            Task::Classification { .. } => {
                let c = *ch.last().expect("validated");
                Head::Classification {
                    fc1: Linear::new(&mut b, "head.fc1", c, c, true),
                    fc2: Linear::new(&mut b, "head.fc2", c, classes, true),
                }
            }
            Task::Segmentation { .. } => {
                let up = (0..config.stages() - 1)
                    .map(|i| UpBlock {
                        proj: Linear::new(&mut b, &format!("up{}.proj", i + 1), ch[i + 1], ch[i], true),
                        fuse: Linear::new(&mut b, &format!("up{}.fuse", i + 1), ch[i], ch[i], true),
                        norm: LayerNorm::new(&mut b, &format!("up{}.norm", i + 1), ch[i]),
                    })
                    .collect();
                Head::Segmentation {
                    fc1: Linear::new(&mut b, "head.fc1", c1, c1, true),
                    fc2: Linear::new(&mut b, "head.fc2", c1, classes, true),
                    up,
                }
            }
        };
        Ok(CdFormer {
            config,
            embed,
            stages,
            transitions,
            head,
            specs: b.into_specs(),
        })
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn num_params(&self) -> usize {
        self.specs.iter().map(|s| s.numel()).sum()
    }

    pub fn init_params<T: Float>(&self, seed: u64) -> ParamStore<T> {
        ParamStore::init(self.specs.clone(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn geometry(&self, coords: &[Point]) -> Result<Geometry> {
        Geometry::new(&self.config, coords)
    }

    fn check_cloud(&self, cloud: &PointCloud) -> Result<()> {
        if cloud.channels() != self.config.in_channels {
            return Err(Error::Config(format!(
                "model expects {} input channels, cloud has {}",
                self.config.in_channels,
                cloud.channels()
            )));
        }
        Ok(())
    }

    /// Per-stage features, finest first.
    pub fn encode<'g, T: Float>(&self, p: &Bound<'g, T>, cloud: &PointCloud, geo: &Geometry) -> Result<Vec<Var<'g, T>>> {
        self.check_cloud(cloud)?;
        if geo.stages.len() != self.stages.len() || geo.stages[0].len() != cloud.len() {
            return Err(Error::contract("geometry was computed for a different cloud or config"));
        }
        let feats = p.graph().constant_from(
            &[cloud.len(), cloud.channels()],
            cloud.feats().iter().map(|&v| T::of(v)).collect(),
        )?;
        let mut x = self.embed.forward(p, feats, &geo.embed_knn)?;
        let mut pyramid = Vec::with_capacity(self.stages.len());
        for (i, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                x = block.forward(p, x, &geo.stages[i])?;
            }
            pyramid.push(x);
            if let Some(t) = self.transitions.get(i) {
                x = t.forward(p, x, &geo.down[i])?;
            }
        }
        Ok(pyramid)
    }

    /// Interpolating decoder from the coarsest stage back to the input
    /// resolution.
    pub fn decode<'g, T: Float>(&self, p: &Bound<'g, T>, pyramid: &[Var<'g, T>], geo: &Geometry) -> Result<Var<'g, T>> {
        let Head::Segmentation { up, .. } = &self.head else {
            return Err(Error::Config("decoder requires a segmentation model".into()));
        };
        let mut x = *pyramid.last().ok_or_else(|| Error::contract("empty pyramid"))?;
        for i in (0..up.len()).rev() {
            let u = &up[i];
            let lifted = u.proj.forward(p, interpolate(x, &geo.up[i])?)?.add(pyramid[i])?;
            x = u.norm.forward(p, u.fuse.forward(p, lifted)?)?.gelu()?;
        }
        Ok(x)
    }

    /// Logits: `[1, U]` for classification, `[N, U]` for segmentation.
    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, cloud: &PointCloud, geo: &Geometry) -> Result<Var<'g, T>> {
        let pyramid = self.encode(p, cloud, geo)?;
        match &self.head {
            Head::Classification { fc1, fc2 } => {
                let last = *pyramid.last().expect("at least one stage");
                let s = last.shape();
                let pooled = last.reshape(&[1, s[0], s[1]])?.reduce_max_axis()?;
                fc2.forward(p, fc1.forward(p, pooled)?.gelu()?)
            }
            Head::Segmentation { fc1, fc2, .. } => {
                let x = self.decode(p, &pyramid, geo)?;
                fc2.forward(p, fc1.forward(p, x)?.gelu()?)
            }
        }
    }
}

/// Total scalar parameter count of a configuration.
pub fn count_params(config: &ModelConfig) -> Result<usize> {
    Ok(CdFormer::new(config.clone())?.num_params())
}
