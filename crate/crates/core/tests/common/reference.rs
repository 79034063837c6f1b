//! Scalar-loop attention references. Weights are read by parameter name;
//! every arithmetic step is an explicit loop.

use cdformer::geometry::Point;
use cdformer::nn::ParamStore;

use super::knn_oracle;

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub struct RefLinear {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub cin: usize,
    pub cout: usize,
}

impl RefLinear {
    pub fn load(store: &ParamStore<f64>, name: &str) -> Self {
        let w = store.by_name(&format!("{name}.weight")).expect(name);
        let (cin, cout) = (w.shape()[0], w.shape()[1]);
        let b = store
            .by_name(&format!("{name}.bias"))
            .map(|b| b.data().to_vec())
            .unwrap_or_else(|| vec![0.0; cout]);
        RefLinear {
            w: w.data().to_vec(),
            b,
            cin,
            cout,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cin);
        let mut y = self.b.clone();
        for j in 0..self.cout {
            for i in 0..self.cin {
                y[j] += x[i] * self.w[i * self.cout + j];
            }
        }
        y
    }
}

pub struct RefMlp {
    pub fc1: RefLinear,
    pub fc2: RefLinear,
}

impl RefMlp {
    pub fn load(store: &ParamStore<f64>, name: &str) -> Self {
        RefMlp {
            fc1: RefLinear::load(store, &format!("{name}.fc1")),
            fc2: RefLinear::load(store, &format!("{name}.fc2")),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self.fc1.apply(x).into_iter().map(gelu).collect();
        self.fc2.apply(&h)
    }
}

pub enum RefPos {
    None,
    Relative([RefMlp; 3]),
    Contextual([RefMlp; 3]),
    Absolute(RefMlp),
}

pub struct RefAttention {
    pub wq: RefLinear,
    pub wk: RefLinear,
    pub wv: RefLinear,
    pub wout: RefLinear,
    pub heads: usize,
    pub pos: RefPos,
}

impl RefAttention {
    /// `pos` is one of "none", "relative", "contextual", "absolute".
    pub fn load(store: &ParamStore<f64>, name: &str, heads: usize, pos: &str) -> Self {
        let three = |tag: &str| {
            [
                RefMlp::load(store, &format!("{name}.{tag}.mlp_q")),
                RefMlp::load(store, &format!("{name}.{tag}.mlp_k")),
                RefMlp::load(store, &format!("{name}.{tag}.mlp_v")),
            ]
        };
        let pos = match pos {
            "none" => RefPos::None,
            "relative" => RefPos::Relative(three("rpe")),
            "contextual" => RefPos::Contextual(three("cape")),
            "absolute" => RefPos::Absolute(RefMlp::load(store, &format!("{name}.ape"))),
            other => panic!("unknown encoding {other}"),
        };
        RefAttention {
            wq: RefLinear::load(store, &format!("{name}.wq")),
            wk: RefLinear::load(store, &format!("{name}.wk")),
            wv: RefLinear::load(store, &format!("{name}.wv")),
            wout: RefLinear::load(store, &format!("{name}.w_out")),
            heads,
            pos,
        }
    }

    fn absolute(&self, x: &[f64], at: &Point) -> Vec<f64> {
        match &self.pos {
            RefPos::Absolute(m) => {
                let e = m.apply(at);
                x.iter().zip(&e).map(|(a, b)| a + b).collect()
            }
            _ => x.to_vec(),
        }
    }

    /// One query over its keys. Offsets are key − query.
    pub fn single(&self, query: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], offsets: &[Point]) -> Vec<f64> {
        let c = query.len();
        let d = c / self.heads;
        let q = self.wq.apply(query);
        let k: Vec<Vec<f64>> = keys.iter().map(|x| self.wk.apply(x)).collect();
        let mut v: Vec<Vec<f64>> = values.iter().map(|x| self.wv.apply(x)).collect();
        let kn = keys.len();
        let mut bias = vec![vec![0.0; kn]; self.heads];
        match &self.pos {
            RefPos::Contextual([mq, mk, mv]) | RefPos::Relative([mq, mk, mv]) => {
                let contextual = matches!(self.pos, RefPos::Contextual(_));
                for j in 0..kn {
                    let eq = mq.apply(&offsets[j]);
                    let ek = mk.apply(&offsets[j]);
                    let ev = mv.apply(&offsets[j]);
                    for h in 0..self.heads {
                        let mut s = 0.0;
                        for t in h * d..(h + 1) * d {
                            s += if contextual {
                                eq[t] * q[t] + ek[t] * k[j][t]
                            } else {
                                eq[t] + ek[t]
                            };
                        }
                        bias[h][j] = s;
                    }
                    for t in 0..c {
                        v[j][t] += ev[t];
                    }
                }
            }
            RefPos::None | RefPos::Absolute(_) => {}
        }
        let mut out = vec![0.0; c];
        for h in 0..self.heads {
            let mut logits = vec![0.0; kn];
            for j in 0..kn {
                let mut s = 0.0;
                for t in h * d..(h + 1) * d {
                    s += q[t] * k[j][t];
                }
                logits[j] = (s + bias[h][j]) / (d as f64).sqrt();
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..kn {
                for t in h * d..(h + 1) * d {
                    out[t] += e[j] / z * v[j][t];
                }
            }
        }
        self.wout.apply(&out)
    }

    /// Attention over explicit neighbor lists; positions feed offsets and
    /// the absolute encoding.
    pub fn over(
        &self,
        q_feats: &[Vec<f64>],
        q_pos: &[Point],
        kv_feats: &[Vec<f64>],
        kv_pos: &[Point],
        nbrs: &[Vec<usize>],
    ) -> Vec<Vec<f64>> {
        let qf: Vec<Vec<f64>> = q_feats.iter().zip(q_pos).map(|(x, p)| self.absolute(x, p)).collect();
        let kf: Vec<Vec<f64>> = kv_feats.iter().zip(kv_pos).map(|(x, p)| self.absolute(x, p)).collect();
        (0..qf.len())
            .map(|a| {
                let keys: Vec<Vec<f64>> = nbrs[a].iter().map(|&j| kf[j].clone()).collect();
                let offs: Vec<Point> = nbrs[a]
                    .iter()
                    .map(|&j| {
                        [
                            kv_pos[j][0] - q_pos[a][0],
                            kv_pos[j][1] - q_pos[a][1],
                            kv_pos[j][2] - q_pos[a][2],
                        ]
                    })
                    .collect();
                self.single(&qf[a], &keys, &keys, &offs)
            })
            .collect()
    }

    /// `patches[m][i]` features with `coords[m][i]`.
    pub fn lsa(&self, patches: &[Vec<Vec<f64>>], coords: &[Vec<Point>]) -> Vec<Vec<Vec<f64>>> {
        patches
            .iter()
            .zip(coords)
            .map(|(feats, pos)| {
                let all: Vec<Vec<usize>> = (0..feats.len()).map(|_| (0..feats.len()).collect()).collect();
                self.over(feats, pos, feats, pos, &all)
            })
            .collect()
    }

    pub fn collect(&self, patches: &[Vec<Vec<f64>>], proxy_pos: &[Point], k: usize) -> Vec<Vec<f64>> {
        let r: Vec<Vec<f64>> = patches
            .iter()
            .map(|rows| {
                (0..rows[0].len())
                    .map(|t| rows.iter().map(|x| x[t]).fold(f64::NEG_INFINITY, f64::max))
                    .collect()
            })
            .collect();
        let flat = knn_oracle(proxy_pos, proxy_pos, k);
        let nbrs: Vec<Vec<usize>> = flat.chunks(k).map(|c| c.to_vec()).collect();
        self.over(&r, proxy_pos, &r, proxy_pos, &nbrs)
    }

    pub fn distribute(
        &self,
        feats: &[Vec<f64>],
        pos: &[Point],
        proxies: &[Vec<f64>],
        proxy_pos: &[Point],
        k: usize,
    ) -> Vec<Vec<f64>> {
        let flat = knn_oracle(pos, proxy_pos, k);
        let nbrs: Vec<Vec<usize>> = flat.chunks(k).map(|c| c.to_vec()).collect();
        self.over(feats, pos, proxies, proxy_pos, &nbrs)
    }
}
