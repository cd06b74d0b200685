//! Pre-norm causal transformer with hand-written backpropagation. Only the
//! linear projections run through the quantized GeMM paths; attention
//! scores, softmax, norms, embeddings and the output head stay wide.

use crate::engine::Optimizer;
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::synthetic::gaussian_matrix;

use super::config::ExperimentConfig;
use super::data::TokenBatch;
use super::layer::{derive_seed, Linear, LinearCache, LinearGrads};

const NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise RMS normalization with a learned gain.
#[derive(Debug, Clone)]
pub struct RmsNorm {
    pub gain: Vec<f64>,
}

struct NormCache {
    x: DenseMatrix,
    rms: Vec<f64>,
}

impl RmsNorm {
    fn new(dim: usize) -> Self {
        Self { gain: vec![1.0; dim] }
    }

    fn forward(&self, x: &DenseMatrix) -> (DenseMatrix, NormCache) {
        let (l, m) = x.shape();
        let rms: Vec<f64> = (0..l)
            .map(|i| (x.row(i).iter().map(|v| v * v).sum::<f64>() / m as f64 + NORM_EPS).sqrt())
            .collect();
        let y = DenseMatrix::from_fn(l, m, |i, j| x.get(i, j) / rms[i] * self.gain[j]);
        (y, NormCache { x: x.clone(), rms })
    }

    fn backward(&self, dy: &DenseMatrix, c: &NormCache) -> (DenseMatrix, Vec<f64>) {
        let (l, m) = dy.shape();
        let mut dgain = vec![0.0; m];
        let mut dx = DenseMatrix::zeros(l, m);
        for i in 0..l {
            let r = c.rms[i];
            let x = c.x.row(i);
            let dyr = dy.row(i);
            let mut dot = 0.0;
            for j in 0..m {
                dgain[j] += dyr[j] * x[j] / r;
                dot += dyr[j] * self.gain[j] * x[j];
            }
            let coef = dot / (m as f64 * r * r * r);
            for j in 0..m {
                dx.set(i, j, dyr[j] * self.gain[j] / r - x[j] * coef);
            }
        }
        (dx, dgain)
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub norm_attn: RmsNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm_ffn: RmsNorm,
    pub dense1: Linear,
    pub dense2: Linear,
}

struct BlockCache {
    n1: NormCache,
    qkv: LinearCache,
    qkv_out: DenseMatrix,
    probs: Vec<DenseMatrix>,
    proj: LinearCache,
    n2: NormCache,
    d1: LinearCache,
    pre_act: DenseMatrix,
    d2: LinearCache,
}

struct BlockGrads {
    norm_attn: Vec<f64>,
    qkv: LinearGrads,
    proj: LinearGrads,
    norm_ffn: Vec<f64>,
    dense1: LinearGrads,
    dense2: LinearGrads,
}

#[derive(Debug, Clone)]
pub struct TinyTransformer {
    pub embed: DenseMatrix,
    pub pos: DenseMatrix,
    pub blocks: Vec<Block>,
    pub norm_out: RmsNorm,
    pub head: DenseMatrix,
    heads: usize,
    seq_len: usize,
}

struct ForwardCache {
    blocks: Vec<BlockCache>,
    final_norm: NormCache,
    normed: DenseMatrix,
    probs: DenseMatrix,
}

impl TinyTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layers: usize,
        hidden: usize,
        ffn: usize,
        heads: usize,
        seq_len: usize,
        vocab: usize,
        cfg: &ExperimentConfig,
    ) -> Result<Self> {
        let seed = |part: u64| derive_seed(cfg.seed, &[part, 0x7f0a]);
        let w = |rows: usize, cols: usize, gain: f64, part: u64| {
            gaussian_matrix(rows, cols, gain / (rows as f64).sqrt(), seed(part))
        };
        let residual_gain = 1.0 / (2.0 * layers as f64).sqrt();
        let mut blocks = Vec::with_capacity(layers);
        for i in 0..layers {
            let id = 10 + 4 * i as u64;
            blocks.push(Block {
                norm_attn: RmsNorm::new(hidden),
                qkv: Linear::new(&format!("block{i}.qkv"), id, &w(hidden, 3 * hidden, 1.0, id), cfg)?,
                proj: Linear::new(
                    &format!("block{i}.proj"),
                    id + 1,
                    &w(hidden, hidden, residual_gain, id + 1),
                    cfg,
                )?,
                norm_ffn: RmsNorm::new(hidden),
                dense1: Linear::new(&format!("block{i}.dense1"), id + 2, &w(hidden, ffn, 1.0, id + 2), cfg)?,
                dense2: Linear::new(
                    &format!("block{i}.dense2"),
                    id + 3,
                    &w(ffn, hidden, residual_gain, id + 3),
                    cfg,
                )?,
            });
        }
        Ok(Self {
            embed: gaussian_matrix(vocab, hidden, 1.0, seed(1)),
            pos: gaussian_matrix(seq_len, hidden, 0.1, seed(2)),
            blocks,
            norm_out: RmsNorm::new(hidden),
            head: w(hidden, vocab, 1.0, 3),
            heads,
            seq_len,
        })
    }

    pub fn vocab(&self) -> usize {
        self.embed.rows()
    }

    pub fn hidden(&self) -> usize {
        self.embed.cols()
    }

    pub fn linears(&self) -> Vec<&Linear> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.qkv, &b.proj, &b.dense1, &b.dense2])
            .collect()
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq_len != self.seq_len {
            return Err(Error::Shape(format!(
                "batch sequence length {} vs model {}",
                batch.seq_len, self.seq_len
            )));
        }
        let vocab = self.vocab();
        for seq in &batch.tokens {
            if seq.len() != self.seq_len + 1 {
                return Err(Error::Shape(format!("sequence of {} tokens, expected {}", seq.len(), self.seq_len + 1)));
            }
            if let Some(&t) = seq.iter().find(|&&t| t >= vocab) {
                return Err(Error::InvalidArgument(format!("token {t} outside vocabulary {vocab}")));
            }
        }
        Ok(())
    }

    fn embed_tokens(&self, batch: &TokenBatch) -> DenseMatrix {
        let s = self.seq_len;
        let m = self.hidden();
        DenseMatrix::from_fn(batch.sequences() * s, m, |r, j| {
            let (b, t) = (r / s, r % s);
            self.embed.get(batch.tokens[b][t], j) + self.pos.get(t, j)
        })
    }

    fn attention(&self, qkv: &DenseMatrix, sequences: usize) -> (DenseMatrix, Vec<DenseMatrix>) {
        let s = self.seq_len;
        let m = self.hidden();
        let d = m / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = DenseMatrix::zeros(sequences * s, m);
        let mut probs = Vec::with_capacity(sequences * self.heads);
        for b in 0..sequences {
            for h in 0..self.heads {
                let (qo, ko, vo) = (h * d, m + h * d, 2 * m + h * d);
                let mut p = DenseMatrix::zeros(s, s);
                for t in 0..s {
                    let qrow = &qkv.row(b * s + t)[qo..qo + d];
                    let mut max = f64::NEG_INFINITY;
                    for u in 0..=t {
                        let krow = &qkv.row(b * s + u)[ko..ko + d];
                        let score = qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>() * scale;
                        p.set(t, u, score);
                        max = max.max(score);
                    }
                    let mut z = 0.0;
                    for u in 0..=t {
                        let e = (p.get(t, u) - max).exp();
                        p.set(t, u, e);
                        z += e;
                    }
                    for u in 0..=t {
                        p.set(t, u, p.get(t, u) / z);
                    }
                    for u in 0..=t {
                        let w = p.get(t, u);
                        let vrow = &qkv.row(b * s + u)[vo..vo + d];
                        for (j, v) in vrow.iter().enumerate() {
                            let cur = out.get(b * s + t, qo + j);
                            out.set(b * s + t, qo + j, cur + w * v);
                        }
                    }
                }
                probs.push(p);
            }
        }
        (out, probs)
    }

    fn attention_backward(&self, dout: &DenseMatrix, qkv: &DenseMatrix, probs: &[DenseMatrix]) -> DenseMatrix {
        let s = self.seq_len;
        let m = self.hidden();
        let d = m / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let sequences = dout.rows() / s;
        let mut dqkv = DenseMatrix::zeros(qkv.rows(), qkv.cols());
        for b in 0..sequences {
            for h in 0..self.heads {
                let p = &probs[b * self.heads + h];
                let (qo, ko, vo) = (h * d, m + h * d, 2 * m + h * d);
                for t in 0..s {
                    let dorow = &dout.row(b * s + t)[qo..qo + d];
                    // dP[t,u] = dO[t]·V[u]; dS = P ⊙ (dP − Σ_u P dP)
                    let dp: Vec<f64> = (0..=t)
                        .map(|u| {
                            let vrow = &qkv.row(b * s + u)[vo..vo + d];
                            dorow.iter().zip(vrow).map(|(a, c)| a * c).sum()
                        })
                        .collect();
                    let weighted: f64 = (0..=t).map(|u| p.get(t, u) * dp[u]).sum();
                    for u in 0..=t {
                        let pu = p.get(t, u);
                        let ds = pu * (dp[u] - weighted) * scale;
                        for j in 0..d {
                            // dV[u] += P[t,u] dO[t]
                            let cur = dqkv.get(b * s + u, vo + j);
                            dqkv.set(b * s + u, vo + j, cur + pu * dorow[j]);
                            // dQ[t] += dS[t,u] K[u]; dK[u] += dS[t,u] Q[t]
                            let k = qkv.get(b * s + u, ko + j);
                            let q = qkv.get(b * s + t, qo + j);
                            let cq = dqkv.get(b * s + t, qo + j);
                            dqkv.set(b * s + t, qo + j, cq + ds * k);
                            let ck = dqkv.get(b * s + u, ko + j);
                            dqkv.set(b * s + u, ko + j, ck + ds * q);
                        }
                    }
                }
            }
        }
        dqkv
    }

    fn run(&self, batch: &TokenBatch, step: u64) -> Result<(f64, ForwardCache)> {
        self.check_batch(batch)?;
        let sequences = batch.sequences();
        let mut x = self.embed_tokens(batch);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (n1, n1c) = blk.norm_attn.forward(&x);
            let (qkv_out, qkv_c) = blk.qkv.forward(&n1, step)?;
            let (att, probs) = self.attention(&qkv_out, sequences);
            let (proj_out, proj_c) = blk.proj.forward(&att, step)?;
            let h = x.add(&proj_out)?;
            let (n2, n2c) = blk.norm_ffn.forward(&h);
            let (pre_act, d1c) = blk.dense1.forward(&n2, step)?;
            let (ff, d2c) = blk.dense2.forward(&pre_act.map(gelu), step)?;
            x = h.add(&ff)?;
            caches.push(BlockCache {
                n1: n1c,
                qkv: qkv_c,
                qkv_out,
                probs,
                proj: proj_c,
                n2: n2c,
                d1: d1c,
                pre_act,
                d2: d2c,
            });
        }
        let (normed, final_norm) = self.norm_out.forward(&x);
        let logits = normed.matmul(&self.head)?;
        let (l, v) = logits.shape();
        let mut probs = DenseMatrix::zeros(l, v);
        let mut loss = 0.0;
        for r in 0..l {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|a| (a - max).exp()).sum();
            for (j, a) in row.iter().enumerate() {
                probs.set(r, j, (a - max).exp() / z);
            }
            let target = batch.tokens[r / self.seq_len][r % self.seq_len + 1];
            loss += z.ln() + max - row[target];
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                value: loss,
                context: "transformer loss".into(),
            });
        }
        Ok((
            loss / l as f64,
            ForwardCache {
                blocks: caches,
                final_norm,
                normed,
                probs,
            },
        ))
    }

    /// Inputs seen by every quantized projection, in [`Self::linears`] order.
    pub fn layer_inputs(&self, batch: &TokenBatch, step: u64) -> Result<Vec<DenseMatrix>> {
        let (_, cache) = self.run(batch, step)?;
        Ok(cache
            .blocks
            .iter()
            .flat_map(|c| [&c.qkv, &c.proj, &c.d1, &c.d2])
            .map(|c| c.input().clone())
            .collect())
    }

    /// Mean next-token cross-entropy.
    pub fn loss(&self, batch: &TokenBatch, step: u64) -> Result<f64> {
        Ok(self.run(batch, step)?.0)
    }

    /// One optimizer step; returns the pre-update loss.
    pub fn train_step(&mut self, batch: &TokenBatch, step: u64, opt: &mut Optimizer, lr: f64) -> Result<f64> {
        let (loss, cache) = self.run(batch, step)?;
        let grads = self.gradients(batch, &cache)?;
        opt.begin_step();
        self.apply(grads, opt, lr)?;
        Ok(loss)
    }

    fn gradients(&self, batch: &TokenBatch, cache: &ForwardCache) -> Result<Gradients> {
        let s = self.seq_len;
        // Per-token cross-entropy gradient (token-sum loss).
        let mut dlogits = cache.probs.clone();
        for r in 0..dlogits.rows() {
            let target = batch.tokens[r / s][r % s + 1];
            dlogits.set(r, target, dlogits.get(r, target) - 1.0);
        }
        let dhead = cache.normed.transpose().matmul(&dlogits)?;
        let dnormed = dlogits.matmul(&self.head.transpose())?;
        let (mut dx, dnorm_out) = self.norm_out.backward(&dnormed, &cache.final_norm);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (blk, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            // x_out = h + dense2(gelu(dense1(norm_ffn(h))))
            let g2 = blk.dense2.backward(&dx, &c.d2)?;
            let dpre = g2.weight.dx.hadamard(&c.pre_act.map(gelu_grad))?;
            let g1 = blk.dense1.backward(&dpre, &c.d1)?;
            let (dn2, dnorm_ffn) = blk.norm_ffn.backward(&g1.weight.dx, &c.n2);
            let dh = dx.add(&dn2)?;
            // h = x_in + proj(attn(qkv(norm_attn(x_in))))
            let gp = blk.proj.backward(&dh, &c.proj)?;
            let dqkv = self.attention_backward(&gp.weight.dx, &c.qkv_out, &c.probs);
            let gq = blk.qkv.backward(&dqkv, &c.qkv)?;
            let (dn1, dnorm_attn) = blk.norm_attn.backward(&gq.weight.dx, &c.n1);
            dx = dh.add(&dn1)?;
            blocks.push(BlockGrads {
                norm_attn: dnorm_attn,
                qkv: gq,
                proj: gp,
                norm_ffn: dnorm_ffn,
                dense1: g1,
                dense2: g2,
            });
        }
        blocks.reverse();
        let m = self.hidden();
        let mut dembed = DenseMatrix::zeros(self.vocab(), m);
        let mut dpos = DenseMatrix::zeros(s, m);
        for r in 0..dx.rows() {
            let (b, t) = (r / s, r % s);
            let tok = batch.tokens[b][t];
            for j in 0..m {
                let g = dx.get(r, j);
                dembed.set(tok, j, dembed.get(tok, j) + g);
                dpos.set(t, j, dpos.get(t, j) + g);
            }
        }
        Ok(Gradients {
            embed: dembed,
            pos: dpos,
            blocks,
            norm_out: dnorm_out,
            head: dhead,
        })
    }

    fn apply(&mut self, g: Gradients, opt: &mut Optimizer, lr: f64) -> Result<()> {
        opt.update_matrix("embed", &mut self.embed, &g.embed, lr)?;
        opt.update_matrix("pos", &mut self.pos, &g.pos, lr)?;
        opt.update_matrix("head", &mut self.head, &g.head, lr)?;
        opt.update("norm_out", &mut self.norm_out.gain, &g.norm_out, lr)?;
        for (i, (blk, bg)) in self.blocks.iter_mut().zip(g.blocks).enumerate() {
            opt.update(&format!("block{i}.norm_attn"), &mut blk.norm_attn.gain, &bg.norm_attn, lr)?;
            opt.update(&format!("block{i}.norm_ffn"), &mut blk.norm_ffn.gain, &bg.norm_ffn, lr)?;
            blk.qkv.apply(&bg.qkv, lr, opt)?;
            blk.proj.apply(&bg.proj, lr, opt)?;
            blk.dense1.apply(&bg.dense1, lr, opt)?;
            blk.dense2.apply(&bg.dense2, lr, opt)?;
        }
        Ok(())
    }

    /// Token-summed loss gradients for every wide parameter, in the order
    /// embed, pos, head, norm gains; used to validate backpropagation.
    pub fn wide_gradients(&self, batch: &TokenBatch) -> Result<Vec<(String, Vec<f64>)>> {
        let (_, cache) = self.run(batch, 0)?;
        let g = self.gradients(batch, &cache)?;
        let mut out = vec![
            ("embed".to_string(), g.embed.into_data()),
            ("pos".to_string(), g.pos.into_data()),
            ("head".to_string(), g.head.into_data()),
            ("norm_out".to_string(), g.norm_out),
        ];
        for (i, bg) in g.blocks.into_iter().enumerate() {
            out.push((format!("block{i}.norm_attn"), bg.norm_attn));
            out.push((format!("block{i}.qkv.residual"), bg.qkv.weight.dw_r.into_data()));
            out.push((format!("block{i}.proj.residual"), bg.proj.weight.dw_r.into_data()));
            out.push((format!("block{i}.dense1.bias"), bg.dense1.bias));
        }
        Ok(out)
    }
}

struct Gradients {
    embed: DenseMatrix,
    pos: DenseMatrix,
    blocks: Vec<BlockGrads>,
    norm_out: Vec<f64>,
    head: DenseMatrix,
}
