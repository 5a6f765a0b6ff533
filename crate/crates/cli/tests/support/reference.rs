//! A second, deliberately plain implementation of the family forward pass in
//! binary64: no shared kernels, no graph, no caches. Used as the finite
//! difference oracle for the autodiff gradients.

use std::collections::BTreeMap;

use familykit::model::{FamilialModel, FamilyConfig};

pub struct Reference {
    cfg: FamilyConfig,
    pub params: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    head_blocks: Vec<Vec<String>>,
}

type Rows = Vec<Vec<f64>>;

impl Reference {
    pub fn new(model: &FamilialModel) -> Self {
        let params = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, (t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect())))
            .collect();
        let head_blocks = model
            .exits
            .iter()
            .enumerate()
            .map(|(k, h)| (0..h.depth()).map(|j| h.block_prefix(k, j)).collect())
            .collect();
        Self { cfg: model.config.clone(), params, head_blocks }
    }

    /// Dense `[out][in]` weight, multiplying out factored pairs.
    fn matrix(&self, name: &str) -> Rows {
        if let Some((s, d)) = self.params.get(name) {
            return (0..s[0]).map(|o| d[o * s[1]..(o + 1) * s[1]].to_vec()).collect();
        }
        let (sa, a) = &self.params[&format!("{name}.A")];
        let (sb, b) = &self.params[&format!("{name}.B")];
        let (out, r, inp) = (sa[0], sa[1], sb[1]);
        (0..out)
            .map(|o| (0..inp).map(|i| (0..r).map(|j| a[o * r + j] * b[j * inp + i]).sum()).collect())
            .collect()
    }

    fn vector(&self, name: &str) -> &[f64] {
        &self.params[name].1
    }

    fn linear(&self, x: &Rows, name: &str) -> Rows {
        let w = self.matrix(name);
        x.iter()
            .map(|row| w.iter().map(|wr| wr.iter().zip(row).map(|(a, b)| a * b).sum()).collect())
            .collect()
    }

    fn rmsnorm(&self, x: &Rows, name: &str) -> Rows {
        let g = self.vector(name);
        x.iter()
            .map(|row| {
                let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
                let inv = 1.0 / (ms + self.cfg.rms_eps).sqrt();
                row.iter().zip(g).map(|(v, g)| v * inv * g).collect()
            })
            .collect()
    }

    fn rope(&self, x: &mut Rows) {
        let hd = self.cfg.head_dim();
        let half = hd / 2;
        for (p, row) in x.iter_mut().enumerate() {
            for head in row.chunks_mut(hd) {
                for i in 0..half {
                    let angle = p as f64 * self.cfg.rope_base.powf(-2.0 * i as f64 / hd as f64);
                    let (s, c) = angle.sin_cos();
                    let (a, b) = (head[i], head[i + half]);
                    head[i] = a * c - b * s;
                    head[i + half] = b * c + a * s;
                }
            }
        }
    }

    fn block(&self, h: &Rows, prefix: &str) -> Rows {
        let cfg = &self.cfg;
        let hd = cfg.head_dim();
        let group = cfg.q_heads / cfg.kv_heads;
        let a = self.rmsnorm(h, &format!("{prefix}.attn_norm"));
        let mut q = self.linear(&a, &format!("{prefix}.wq"));
        let mut k = self.linear(&a, &format!("{prefix}.wk"));
        let v = self.linear(&a, &format!("{prefix}.wv"));
        self.rope(&mut q);
        self.rope(&mut k);
        let t_len = h.len();
        let mut att = vec![vec![0.0; cfg.hidden]; t_len];
        for t in 0..t_len {
            for head in 0..cfg.q_heads {
                let kvh = head / group;
                let qs = &q[t][head * hd..(head + 1) * hd];
                let scores: Vec<f64> = (0..=t)
                    .map(|j| {
                        let ks = &k[j][kvh * hd..(kvh + 1) * hd];
                        qs.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for d in 0..hd {
                        att[t][head * hd + d] += ej / z * v[j][kvh * hd + d];
                    }
                }
            }
        }
        let o = self.linear(&att, &format!("{prefix}.wo"));
        let h1: Rows = h.iter().zip(&o).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
        let m = self.rmsnorm(&h1, &format!("{prefix}.mlp_norm"));
        let gate = self.linear(&m, &format!("{prefix}.w_gate"));
        let up = self.linear(&m, &format!("{prefix}.w_up"));
        let act: Rows = gate
            .iter()
            .zip(&up)
            .map(|(g, u)| g.iter().zip(u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect())
            .collect();
        let down = self.linear(&act, &format!("{prefix}.w_down"));
        h1.iter().zip(&down).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
    }

    /// Per-exit mean next-token NLL over the batch.
    pub fn branch_losses(&self, batch: &[Vec<u32>]) -> Vec<f64> {
        let n = self.cfg.n_exits();
        let mut sums = vec![0.0; n];
        let mut count = 0usize;
        let (vocab, hidden) = (self.cfg.vocab, self.cfg.hidden);
        let emb = self.vector("embedding");
        for seq in batch {
            let mut h: Rows = seq.iter().map(|&t| emb[t as usize * hidden..(t as usize + 1) * hidden].to_vec()).collect();
            for depth in 0..=self.cfg.n_layers {
                if let Some(k) = self.cfg.exit_depths.iter().position(|&d| d == depth) {
                    let mut x = h.clone();
                    for p in &self.head_blocks[k] {
                        x = self.block(&x, p);
                    }
                    let x = self.rmsnorm(&x, &format!("exits.{k}.final_norm"));
                    let logits = self.linear(&x, &format!("exits.{k}.lm_proj"));
                    for t in 0..seq.len() - 1 {
                        let row = &logits[t];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                        sums[k] += lse - row[seq[t + 1] as usize];
                    }
                }
                if depth < self.cfg.n_layers {
                    h = self.block(&h, &format!("backbone.{depth}"));
                }
            }
            count += seq.len() - 1;
            debug_assert!(vocab > 0);
        }
        sums.iter().map(|s| s / count as f64).collect()
    }

    pub fn joint(&self, batch: &[Vec<u32>], weights: &[f64]) -> f64 {
        self.branch_losses(batch).iter().zip(weights).map(|(l, w)| l * w).sum()
    }
}
