//! Finite-difference gradient verification suite over the tensor ops, the
//! attention layers, one CD block and a miniature segmentation model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    collect, distribute, local_self_attention, neighborhood_attention, AttentionLayer,
    NeighborhoodAttentionInput, PositionEncoding,
};
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::model::{CdBlock, CdFormer, ModelConfig, StageGeometry, Task};
use crate::nn::{Bound, ParamBuilder, ParamStore};
use crate::tensor::{grad_check_params, GradCheckOptions, Graph, Indices, Stencil, Tensor, Var};

pub const MODULES: &[&str] = &["tensor", "attention", "model"];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Parameters whose gradient is zero for every input: the output bias of
/// the query-side Δp embedding adds the same `⟨q, b⟩` to all logits of a
/// query. They are held fixed during finite differencing.
pub fn has_zero_gradient(name: &str) -> bool {
    name.ends_with("cape.mlp_q.fc2.bias")
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// `Σ out ⊙ R` for a fixed random `R`, turning any output into a scalar.
fn project<'g>(out: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&out.shape(), &mut rng, 1.0);
    out.mul(out.graph().constant(&w))?.sum()
}

/// Grad check over `inputs` followed by every parameter of `store` that can
/// carry a gradient.
pub fn check_with_params<F>(store: &ParamStore<f64>, inputs: Vec<Tensor<f64>>, f: F, opts: GradCheckOptions) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>], &Bound<'g, f64>) -> Result<Var<'g, f64>>,
{
    let fixed: Vec<bool> = store.specs().iter().map(|s| has_zero_gradient(&s.name)).collect();
    let n_in = inputs.len();
    let mut all = inputs;
    all.extend(
        store
            .tensors()
            .iter()
            .zip(&fixed)
            .filter(|(_, &f)| !f)
            .map(|(t, _)| t.clone()),
    );
    grad_check_params(
        |g, vars| {
            let mut live = vars[n_in..].iter();
            let params = store
                .tensors()
                .iter()
                .zip(&fixed)
                .map(|(t, &f)| if f { g.constant(t) } else { *live.next().expect("one var per live param") })
                .collect();
            f(g, &vars[..n_in], &Bound::from_vars(g, params))
        },
        &mut all,
        opts,
    )
}

fn rescaled(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale));
    }
}

fn op_checks(opts: GradCheckOptions, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut push = |name: &str, err: f64| {
        out.push(CheckResult {
            module: "tensor",
            name: name.to_string(),
            max_rel_error: err,
            tolerance: 1e-6,
        })
    };
    let o = |x: GradCheckOptions| x;
    let single = |f: &dyn for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>, x: Tensor<f64>| {
        grad_check_params(|g, v| f(g, v[0]), &mut [x], o(opts))
    };
    let pair = |f: &dyn for<'g> Fn(&'g Graph<f64>, Var<'g, f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
                a: Tensor<f64>,
                b: Tensor<f64>| { grad_check_params(|g, v| f(g, v[0], v[1]), &mut [a, b], o(opts)) };

    push("add", pair(&|_, a, b| project(a.add(b)?, 1), random(&[3, 4], &mut rng, 1.0), random(&[3, 4], &mut rng, 1.0))?);
    push("sub", pair(&|_, a, b| project(a.sub(b)?, 2), random(&[3, 4], &mut rng, 1.0), random(&[3, 4], &mut rng, 1.0))?);
    push("mul", pair(&|_, a, b| project(a.mul(b)?, 3), random(&[3, 4], &mut rng, 1.0), random(&[3, 4], &mut rng, 1.0))?);
    push("scale", single(&|_, a| project(a.scale(1.7)?, 4), random(&[5], &mut rng, 1.0))?);
    push("sum", single(&|_, a| a.sum(), random(&[2, 3], &mut rng, 1.0))?);
    push("mean", single(&|_, a| a.mean(), random(&[2, 3], &mut rng, 1.0))?);
    push("reshape", single(&|_, a| project(a.reshape(&[6, 2])?, 5), random(&[3, 4], &mut rng, 1.0))?);
    push(
        "matmul",
        pair(&|_, a, b| project(a.matmul(b)?, 6), random(&[2, 3, 4], &mut rng, 1.0), random(&[4, 5], &mut rng, 1.0))?,
    );
    push(
        "linear",
        grad_check_params(
            |_, v| project(v[0].linear(v[1], Some(v[2]))?, 7),
            &mut [
                random(&[2, 3, 4], &mut rng, 1.0),
                random(&[4, 5], &mut rng, 1.0),
                random(&[5], &mut rng, 1.0),
            ],
            opts,
        )?,
    );
    push("gelu", single(&|_, a| project(a.gelu()?, 8), random(&[4, 5], &mut rng, 2.0))?);
    push(
        "layer_norm",
        grad_check_params(
            |_, v| project(v[0].layer_norm(v[1], v[2], 1e-5)?, 9),
            &mut [
                random(&[3, 6], &mut rng, 1.0),
                random(&[6], &mut rng, 1.0),
                random(&[6], &mut rng, 1.0),
            ],
            opts,
        )?,
    );
    push("softmax_last", single(&|_, a| project(a.softmax_last()?, 10), random(&[3, 7], &mut rng, 2.0))?);
    let idx = Indices::new(&[2, 3], vec![0, 3, 3, 1, 0, 2])?;
    push("gather_rows", single(&|_, a| project(a.gather_rows(&idx)?, 11), random(&[4, 3], &mut rng, 1.0))?);
    push("reduce_max_axis", single(&|_, a| project(a.reduce_max_axis()?, 12), random(&[3, 5, 4], &mut rng, 1.0))?);
    push(
        "head_dot",
        pair(&|_, q, k| project(q.head_dot(k, 2)?, 13), random(&[3, 4], &mut rng, 1.0), random(&[3, 5, 4], &mut rng, 1.0))?,
    );
    push(
        "pair_head_dot",
        pair(&|_, a, b| project(a.pair_head_dot(b, 2)?, 14), random(&[3, 5, 4], &mut rng, 1.0), random(&[3, 5, 4], &mut rng, 1.0))?,
    );
    push("head_sum", single(&|_, a| project(a.head_sum(2)?, 15), random(&[3, 5, 4], &mut rng, 1.0))?);
    push(
        "head_mix",
        pair(&|_, w, v| project(w.head_mix(v, 2)?, 16), random(&[3, 2, 5], &mut rng, 1.0), random(&[3, 5, 4], &mut rng, 1.0))?,
    );
    push(
        "scatter_mean",
        single(&|_, a| project(a.scatter_mean(&[0, 2, 0, 1, 2, 2], 4)?, 17), random(&[6, 3], &mut rng, 1.0))?,
    );
    push("cross_entropy", single(&|_, a| a.cross_entropy(&[1, 0, 3], 0.1), random(&[3, 4], &mut rng, 2.0))?);
    Ok(())
}

fn attention_layer(c: usize, h: usize, seed: u64) -> Result<(AttentionLayer, ParamStore<f64>)> {
    let mut b = ParamBuilder::new();
    let layer = AttentionLayer::new(&mut b, "attn", c, h, PositionEncoding::Contextual)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::init(b.into_specs(), &mut rng);
    rescaled(&mut store, &mut rng, 0.6);
    Ok((layer, store))
}

fn points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
}

fn attention_checks(opts: GradCheckOptions, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut push = |name: &str, err: f64| {
        out.push(CheckResult {
            module: "attention",
            name: name.into(),
            max_rel_error: err,
            tolerance: 1e-5,
        })
    };
    let (layer, store) = attention_layer(4, 2, 1)?;
    let (a, k, c) = (2, 3, 4);
    let inputs = vec![
        random(&[a, c], &mut rng, 1.0),
        random(&[a, k, c], &mut rng, 1.0),
        random(&[a, k, c], &mut rng, 1.0),
        random(&[a, k, 3], &mut rng, 1.0),
    ];
    push(
        "neighborhood_attention",
        check_with_params(
            &store,
            inputs,
            |_, v, p| {
                let inp = NeighborhoodAttentionInput {
                    query_feats: v[0],
                    key_feats: v[1],
                    value_feats: v[2],
                    offsets: v[3],
                };
                project(neighborhood_attention(p, &layer, &inp)?, 21)
            },
            opts,
        )?,
    );

    let coords = points(8, &mut rng);
    push(
        "local_self_attention",
        check_with_params(
            &store,
            vec![random(&[2, 4, c], &mut rng, 1.0)],
            |_, v, p| project(local_self_attention(p, &layer, v[0], &coords)?, 22),
            opts,
        )?,
    );
    let proxies = points(4, &mut rng);
    push(
        "collect",
        check_with_params(
            &store,
            vec![random(&[4, 3, c], &mut rng, 1.0)],
            |_, v, p| project(collect(p, &layer, v[0], &proxies, 2)?, 23),
            opts,
        )?,
    );
    push(
        "distribute",
        check_with_params(
            &store,
            vec![random(&[8, c], &mut rng, 1.0), random(&[4, c], &mut rng, 1.0)],
            |_, v, p| project(distribute(p, &layer, v[0], &coords, v[1], &proxies, 2)?, 24),
            opts,
        )?,
    );
    Ok(())
}

/// The miniature segmentation model used for the end-to-end check.
pub fn miniature_config() -> ModelConfig {
    ModelConfig {
        blocks: vec![1, 1],
        channels: vec![4, 6],
        heads: vec![2, 2],
        k_neighbors: 4,
        scale_s: 4,
        block_scale: None,
        task: Task::Segmentation { classes: 3 },
        in_channels: 3,
        collect: true,
        distribute: true,
        position_encoding: PositionEncoding::Contextual,
        ffn_ratio: 4,
    }
}

fn model_checks(opts: GradCheckOptions, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let opts = GradCheckOptions {
        eps: 1e-3,
        stencil: Stencil::MultiStep,
        ..opts
    };

    // one CD block at N = 12, K = 4, C = 8, H = 2
    let cfg = ModelConfig {
        channels: vec![8],
        heads: vec![2],
        blocks: vec![1],
        ..miniature_config()
    };
    let mut b = ParamBuilder::new();
    let block = CdBlock::new(&mut b, "block", 8, 2, &cfg)?;
    let mut store = ParamStore::init(b.into_specs(), &mut rng);
    rescaled(&mut store, &mut rng, 0.5);
    let coords = points(12, &mut rng);
    let geo = StageGeometry::new(&coords, 4, 4)?;
    let err = check_with_params(
        &store,
        vec![random(&[12, 8], &mut rng, 1.0)],
        |_, v, p| block.forward(p, v[0], &geo)?.mean(),
        opts,
    )?;
    out.push(CheckResult {
        module: "model",
        name: "cd_block".into(),
        max_rel_error: err,
        tolerance: 1e-4,
    });

    let model = CdFormer::new(miniature_config())?;
    let mut store = model.init_params::<f64>(12);
    rescaled(&mut store, &mut rng, 0.5);
    let n = 24;
    let coords = points(n, &mut rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
    let cloud = PointCloud::from_coords(coords, Some(labels.clone()))?;
    let geo = model.geometry(cloud.coords())?;
    let err = check_with_params(
        &store,
        Vec::new(),
        |_, _, p| model.forward(p, &cloud, &geo)?.cross_entropy(&labels, 0.1),
        opts,
    )?;
    out.push(CheckResult {
        module: "model",
        name: format!("miniature model ({} params)", model.num_params()),
        max_rel_error: err,
        tolerance: 1e-4,
    });
    Ok(())
}

/// Runs the checks of one module (or all when `module` is `None`).
pub fn run_suite(module: Option<&str>, corrupt: bool) -> Result<Vec<CheckResult>> {
    if let Some(m) = module {
        if !MODULES.contains(&m) {
            return Err(Error::Config(format!(
                "unknown module `{m}`; expected one of {}",
                MODULES.join(", ")
            )));
        }
    }
    let opts = GradCheckOptions {
        eps: 1e-5,
        corrupt,
        ..Default::default()
    };
    let wanted = |m: &str| module.is_none_or(|x| x == m);
    let mut out = Vec::new();
    if wanted("tensor") {
        op_checks(opts, &mut out)?;
    }
    if wanted("attention") {
        attention_checks(opts, &mut out)?;
    }
    if wanted("model") {
        model_checks(opts, &mut out)?;
    }
    Ok(out)
}
