//! Independent oracles shared by the integration suites. Nothing here
//! calls into the kernels it checks.
#![allow(dead_code)]

pub mod reference;

use cdformer::geometry::Point;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn d2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Uniform random points in the unit cube; distinct with probability one.
pub fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
        .collect()
}

/// Brute-force greedy FPS: recomputes every min-distance from scratch.
pub fn fps_oracle(pts: &[Point], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| {
        pts[a]
            .iter()
            .zip(&pts[b])
            .map(|(x, y)| x.partial_cmp(y).unwrap())
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut sel = vec![order[0]];
    while sel.len() < m {
        let mut best = None::<(f64, usize)>;
        for i in 0..pts.len() {
            if sel.contains(&i) {
                continue;
            }
            let md = sel
                .iter()
                .map(|&s| d2(&pts[i], &pts[s]))
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| md > bd) {
                best = Some((md, i));
            }
        }
        sel.push(best.unwrap().1);
    }
    sel
}

/// Full sort by (distance, index).
pub fn knn_oracle(queries: &[Point], pts: &[Point], k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for q in queries {
        let mut all: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, p)| (d2(q, p), i)).collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.extend(all[..k].iter().map(|x| x.1));
    }
    out
}
