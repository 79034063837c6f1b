//! Attention cost versus point count: the three neighborhood kernels of a
//! CD block against global self-attention.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_indexed, AttentionLayer, Neighborhood, PositionEncoding};
use crate::data::stream_rng;
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::model::StageGeometry;
use crate::nn::{ParamBuilder, ParamStore};
use crate::tensor::{peak_allocation, reset_peak_allocation, set_strict_mode, strict_mode, Graph, Indices};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Lsa,
    Collect,
    Distribute,
    FullAttention,
}

impl Kernel {
    pub const ALL: [Kernel; 4] = [Kernel::Lsa, Kernel::Collect, Kernel::Distribute, Kernel::FullAttention];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Lsa => "lsa",
            Kernel::Collect => "collect",
            Kernel::Distribute => "distribute",
            Kernel::FullAttention => "full_attention",
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown kernel `{s}` (expected lsa, collect, distribute or full_attention)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub k: usize,
    pub s: usize,
    pub channels: usize,
    pub heads: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Position encoding of the neighborhood kernels; global attention
    /// always runs without one.
    pub encoding: PositionEncoding,
    /// Queries per chunk of global attention.
    pub query_block: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            k: 16,
            s: 8,
            channels: 16,
            heads: 2,
            repeats: 5,
            seed: 0,
            encoding: PositionEncoding::Contextual,
            query_block: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub kernel: Kernel,
    pub n: usize,
    pub k: usize,
    pub s: usize,
    pub repeats: usize,
    pub median_s: f64,
    /// Largest single buffer requested during the timed runs.
    pub mem_bytes: usize,
}

pub const DEFAULT_NS: [usize; 5] = [1024, 2048, 4096, 8192, 16384];

fn random_input(n: usize, c: usize, seed: u64) -> (Vec<Point>, Vec<f32>) {
    let mut rng = stream_rng(seed, &[n as u64]);
    let coords = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let feats = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (coords, feats)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Everything a kernel needs besides the timed forward pass.
struct Prepared {
    coords: Vec<Point>,
    feats: Vec<f32>,
    geo: Option<StageGeometry>,
    proxies: Vec<f32>,
    full_blocks: Vec<Indices>,
}

fn prepare(kernel: Kernel, n: usize, cfg: &BenchConfig) -> Result<Prepared> {
    let c = cfg.channels;
    let (coords, feats) = random_input(n, c, cfg.seed);
    let mut prep = Prepared {
        coords,
        feats,
        geo: None,
        proxies: Vec::new(),
        full_blocks: Vec::new(),
    };
    if kernel == Kernel::FullAttention {
        let b = cfg.query_block.min(n);
        let full = |rows: usize| Indices::new(&[rows, n], (0..rows).flat_map(|_| 0..n).collect());
        prep.full_blocks.push(full(b)?);
        if !n.is_multiple_of(b) {
            prep.full_blocks.push(full(n % b)?);
        }
    } else {
        let geo = StageGeometry::new(&prep.coords, cfg.k, cfg.s)?;
        let mut rng = stream_rng(cfg.seed, &[n as u64, 1]);
        prep.proxies = (0..geo.proxy_coords.len() * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        prep.geo = Some(geo);
    }
    Ok(prep)
}

fn run_once(kernel: Kernel, layer: &AttentionLayer, store: &ParamStore<f32>, prep: &Prepared, cfg: &BenchConfig) -> Result<()> {
    let c = cfg.channels;
    let n = prep.coords.len();
    if kernel == Kernel::FullAttention {
        let b = cfg.query_block.min(n);
        let mut out = Vec::with_capacity(n * c);
        for start in (0..n).step_by(b) {
            let rows = b.min(n - start);
            let idx = if rows == b { &prep.full_blocks[0] } else { &prep.full_blocks[1] };
            let g = Graph::<f32>::inference();
            let p = store.bind(&g);
            let q = g.constant_from(&[rows, c], prep.feats[start * c..(start + rows) * c].to_vec())?;
            let kv = g.constant_from(&[n, c], prep.feats.clone())?;
            let nbr = Neighborhood {
                idx: idx.clone(),
                offsets: Vec::new(),
            };
            let y = attend_indexed(&p, layer, q, &prep.coords[start..start + rows], None, kv, &prep.coords, &nbr)?;
            out.extend(y.to_vec());
        }
        std::hint::black_box(out);
        return Ok(());
    }
    let geo = prep.geo.as_ref().expect("prepared geometry");
    let g = Graph::<f32>::inference();
    let p = store.bind(&g);
    let x = g.constant_from(&[n, c], prep.feats.clone())?;
    let y = match kernel {
        Kernel::Lsa => {
            let rows = geo.patch_rows();
            attend_indexed(&p, layer, x, &geo.coords, Some(&rows), x, &geo.coords, &geo.lsa)?.scatter_mean(rows.data(), n)?
        }
        Kernel::Collect => {
            let r = x.gather_rows(&geo.patches.neighbor_idx)?.reduce_max_axis()?;
            attend_indexed(&p, layer, r, &geo.proxy_coords, None, r, &geo.proxy_coords, &geo.proxy_nbr)?
        }
        Kernel::Distribute => {
            let r = g.constant_from(&[geo.proxy_coords.len(), c], prep.proxies.clone())?;
            attend_indexed(&p, layer, x, &geo.coords, None, r, &geo.proxy_coords, &geo.point_nbr)?
        }
        Kernel::FullAttention => unreachable!(),
    };
    std::hint::black_box(y.to_vec());
    Ok(())
}

/// Times one forward pass of `kernel` per `N` in `ns`: one warm-up, then
/// the median of `cfg.repeats` runs. Neighbor search and patch division
/// are prepared outside the timed region. Runs single-threaded.
pub fn run_scaling(kernel: Kernel, ns: &[usize], cfg: &BenchConfig) -> Result<Vec<BenchResult>> {
    if cfg.repeats < 5 {
        return Err(Error::Config(format!("at least 5 repeats are required, got {}", cfg.repeats)));
    }
    if ns.is_empty() || ns.windows(2).any(|w| w[0] >= w[1]) || ns[0] == 0 {
        return Err(Error::contract("point counts must be positive and strictly ascending"));
    }
    if cfg.k == 0 || cfg.s == 0 || cfg.query_block == 0 {
        return Err(Error::Config("k, s and query_block must be positive".into()));
    }
    let encoding = if kernel == Kernel::FullAttention { PositionEncoding::None } else { cfg.encoding };
    let mut b = ParamBuilder::new();
    let layer = AttentionLayer::new(&mut b, "attn", cfg.channels, cfg.heads, encoding)?;
    let store = ParamStore::<f32>::init(b.into_specs(), &mut stream_rng(cfg.seed, &[u64::MAX]));

    let was_strict = strict_mode();
    set_strict_mode(true);
    let result = ns
        .iter()
        .map(|&n| {
            let prep = prepare(kernel, n, cfg)?;
            run_once(kernel, &layer, &store, &prep, cfg)?;
            let mut times = Vec::with_capacity(cfg.repeats);
            let mut mem = 0;
            for _ in 0..cfg.repeats {
                reset_peak_allocation();
                let t = Instant::now();
                run_once(kernel, &layer, &store, &prep, cfg)?;
                times.push(t.elapsed().as_secs_f64());
                mem = mem.max(peak_allocation());
            }
            Ok(BenchResult {
                kernel,
                n,
                k: cfg.k,
                s: cfg.s,
                repeats: cfg.repeats,
                median_s: median(times),
                mem_bytes: mem,
            })
        })
        .collect();
    set_strict_mode(was_strict);
    result
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::contract("slope fit needs at least 3 paired points"));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::contract("slope fit needs positive finite values"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 1e-12 {
        return Err(Error::contract("slope fit needs distinct x values"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// Fitted exponent of median time against `N`.
pub fn fit_slope(results: &[BenchResult]) -> Result<f64> {
    let xs: Vec<f64> = results.iter().map(|r| r.n as f64).collect();
    let ys: Vec<f64> = results.iter().map(|r| r.median_s).collect();
    log_log_slope(&xs, &ys)
}

pub const CSV_HEADER: &str = "kernel,N,K,S,median_s,mem_bytes";

pub fn format_csv(results: &[BenchResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        out.push_str(&format!("{},{},{},{},{:.9},{}\n", r.kernel, r.n, r.k, r.s, r.median_s, r.mem_bytes));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeSummary {
    pub kernel: Kernel,
    pub slope: f64,
}

/// Per-kernel slopes for every kernel with at least three results.
pub fn summarize(results: &[BenchResult]) -> Vec<SlopeSummary> {
    Kernel::ALL
        .into_iter()
        .filter_map(|k| {
            let rs: Vec<BenchResult> = results.iter().filter(|r| r.kernel == k).cloned().collect();
            fit_slope(&rs).ok().map(|slope| SlopeSummary { kernel: k, slope })
        })
        .collect()
}
