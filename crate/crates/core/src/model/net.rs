//! Transformer encoder over `[pose | command | step | queries | window]`
//! tokens with a hand-written backward pass.
//!
//! Activations are stored row-major as `(batch * seq_len) × width` so every
//! linear layer is one GEMM over the whole batch. Encoder blocks are post-norm
//! with GELU feed-forward.

use rand::Rng;

use super::config::{Layout, ModelConfig, POSE_DIM};
use super::params::{param_index, LayerIndex, ParamIndex};
use super::real::{gemm, matmul, matmul_nt, matmul_tn_acc, Real, View};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// One batch of model inputs. Unused groups (e.g. `x_t` for the direct head)
/// may be empty.
#[derive(Debug, Clone, Copy)]
pub struct BatchInput<'a, T> {
    pub batch: usize,
    /// `batch × history × 7`, already normalized.
    pub pose: &'a [T],
    /// `batch × history × channels`.
    pub cmd: &'a [T],
    /// Replace this sample's command tokens with the null embedding.
    pub drop_cmd: &'a [bool],
    /// `batch × horizon × channels` noisy window.
    pub x_t: &'a [T],
    /// Diffusion step per sample, in `1..=T`.
    pub steps: &'a [usize],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput<T> {
    /// `batch × horizon × channels`.
    pub x0: Vec<T>,
    /// `batch × behavior_classes`.
    pub behavior: Vec<T>,
    /// `batch × mode_classes`.
    pub mode: Vec<T>,
}

struct LayerCache<T> {
    x_in: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    ff_pre: Vec<T>,
    ff_act: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache<T> {
    batch: usize,
    steps: Vec<usize>,
    drop_cmd: Vec<bool>,
    pose: Vec<T>,
    cmd: Vec<T>,
    x_t: Vec<T>,
    dropout_mask: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    h_final: Vec<T>,
}

pub struct Network<T> {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub index: ParamIndex,
    pe: Vec<T>,
}

fn sinusoidal_table<T: Real>(len: usize, d: usize) -> Vec<T> {
    let mut pe = vec![T::zero(); len * d];
    for pos in 0..len {
        for i in 0..d {
            let k = (i / 2) as f64 * 2.0;
            let angle = pos as f64 / 10000f64.powf(k / d as f64);
            pe[pos * d + i] = T::from_f64_lossy(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

// tanh-form GELU written through the logistic function: 0.5(1 + tanh z) = 1 / (1 + e^(-2z)).
fn gelu_sigmoid<T: Real>(x: T) -> T {
    let c2 = T::from_f64_lossy(2.0 * 0.797_884_560_802_865_4);
    let a = T::from_f64_lossy(0.044_715);
    T::one() / (T::one() + (-c2 * (x + a * x * x * x)).exp())
}

fn gelu<T: Real>(x: T) -> T {
    x * gelu_sigmoid(x)
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c2 = T::from_f64_lossy(2.0 * 0.797_884_560_802_865_4);
    let a = T::from_f64_lossy(0.044_715);
    let three = T::from_f64_lossy(3.0);
    let s = gelu_sigmoid(x);
    s + x * s * (T::one() - s) * c2 * (T::one() + three * a * x * x)
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    let n = bias.len();
    for row in out.chunks_exact_mut(n) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += *b;
        }
    }
}

fn bias_grad<T: Real>(d_out: &[T], grad: &mut [T]) {
    let n = grad.len();
    for row in d_out.chunks_exact(n) {
        for (g, v) in grad.iter_mut().zip(row) {
            *g += *v;
        }
    }
}

fn layer_norm<T: Real>(x: &[T], g: &[T], b: &[T], out: &mut [T], xhat: &mut [T], rstd: &mut [T]) {
    let d = g.len();
    let inv_d = T::from_f64_lossy(1.0 / d as f64);
    let eps = T::from_f64_lossy(LN_EPS);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let base = r * d;
        for i in 0..d {
            let xh = (row[i] - mean) * rs;
            xhat[base + i] = xh;
            out[base + i] = xh * g[i] + b[i];
        }
    }
}

/// Returns `dx`, accumulating into the gain and bias gradients.
fn layer_norm_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let d = g.len();
    let inv_d = T::from_f64_lossy(1.0 / d as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxh = vec![T::zero(); d];
    for (r, &rs) in rstd.iter().enumerate() {
        let base = r * d;
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for i in 0..d {
            let dyi = dy[base + i];
            let xh = xhat[base + i];
            dg[i] += dyi * xh;
            db[i] += dyi;
            let v = dyi * g[i];
            dxh[i] = v;
            s1 += v;
            s2 += v * xh;
        }
        for i in 0..d {
            dx[base + i] = rs * (dxh[i] - inv_d * s1 - xhat[base + i] * inv_d * s2);
        }
    }
    dx
}

fn check_finite<T: Real>(values: &[T], location: &str) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            location: location.to_string(),
            detail: format!("non-finite activation at flat index {pos}"),
        });
    }
    Ok(())
}

impl<T: Real> Network<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let layout = cfg.layout();
        Network {
            cfg: cfg.clone(),
            layout,
            index: param_index(cfg),
            pe: sinusoidal_table(layout.len, cfg.latent_dim),
        }
    }

    fn check_input(&self, input: &BatchInput<'_, T>) -> Result<()> {
        let c = &self.cfg;
        let b = input.batch;
        let bad = |what: &str, got: usize, want: usize| {
            Err(Error::validation(format!("{what}: got {got} values, expected {want}")))
        };
        if c.use_pose_tokens && input.pose.len() != b * c.history * POSE_DIM {
            return bad("pose history", input.pose.len(), b * c.history * POSE_DIM);
        }
        if c.use_command_tokens {
            if input.cmd.len() != b * c.history * c.channels {
                return bad("command history", input.cmd.len(), b * c.history * c.channels);
            }
            if input.drop_cmd.len() != b {
                return bad("drop flags", input.drop_cmd.len(), b);
            }
        }
        if c.is_diffusion() {
            if input.x_t.len() != b * c.horizon * c.channels {
                return bad("noisy window", input.x_t.len(), b * c.horizon * c.channels);
            }
            if input.steps.len() != b {
                return bad("diffusion steps", input.steps.len(), b);
            }
            if let Some(t) = input.steps.iter().find(|t| **t == 0 || **t > c.diffusion_steps) {
                return Err(Error::validation(format!("diffusion step {t} out of range")));
            }
        }
        Ok(())
    }

    /// Validated embedding of `input` without running the encoder.
    pub fn embed_only(&self, p: &[T], input: &BatchInput<'_, T>) -> Result<Vec<T>> {
        self.check_input(input)?;
        Ok(self.embed(p, input))
    }

    /// Embeds all token groups, adds positional encoding and applies
    /// post-encoding command masking.
    fn embed(&self, p: &[T], input: &BatchInput<'_, T>) -> Vec<T> {
        let c = &self.cfg;
        let lay = self.layout;
        let d = c.latent_dim;
        let j = c.channels;
        let m = c.history;
        let n = c.horizon;
        let b = input.batch;
        let idx = &self.index;
        let mut h = vec![T::zero(); b * lay.len * d];

        let place = |h: &mut [T], tmp: &[T], per: usize, at: usize| {
            for s in 0..b {
                let dst = (s * lay.len + at) * d;
                h[dst..dst + per * d].copy_from_slice(&tmp[s * per * d..(s + 1) * per * d]);
            }
        };

        if c.use_pose_tokens {
            let mut tmp = vec![T::zero(); b * m * d];
            matmul(b * m, POSE_DIM, d, input.pose, &p[idx.pose_w..idx.pose_w + POSE_DIM * d], &mut tmp, false);
            add_bias(&mut tmp, &p[idx.pose_b..idx.pose_b + d]);
            place(&mut h, &tmp, m, lay.pose_at);
        }
        if c.use_command_tokens {
            let mut tmp = vec![T::zero(); b * m * d];
            matmul(b * m, j, d, input.cmd, &p[idx.cmd_w..idx.cmd_w + j * d], &mut tmp, false);
            add_bias(&mut tmp, &p[idx.cmd_b..idx.cmd_b + d]);
            place(&mut h, &tmp, m, lay.cmd_at);
        }
        if c.is_diffusion() {
            let mut tmp = vec![T::zero(); b * n * d];
            matmul(b * n, j, d, input.x_t, &p[idx.x_w..idx.x_w + j * d], &mut tmp, false);
            add_bias(&mut tmp, &p[idx.x_b..idx.x_b + d]);
            place(&mut h, &tmp, n, lay.window_at);
        }
        for s in 0..b {
            let base = s * lay.len * d;
            if c.is_diffusion() {
                let t = input.steps[s] - 1;
                let src = &p[idx.step_table + t * d..idx.step_table + (t + 1) * d];
                h[base + lay.step_at * d..base + (lay.step_at + 1) * d].copy_from_slice(src);
            } else {
                let q = &p[idx.query_window..idx.query_window + n * d];
                h[base + lay.window_at * d..base + (lay.window_at + n) * d].copy_from_slice(q);
            }
            let qb = &p[idx.query_behavior..idx.query_behavior + d];
            let qm = &p[idx.query_mode..idx.query_mode + d];
            h[base + lay.query_at * d..base + (lay.query_at + 1) * d].copy_from_slice(qb);
            h[base + (lay.query_at + 1) * d..base + (lay.query_at + 2) * d].copy_from_slice(qm);
            for (v, pe) in h[base..base + lay.len * d].iter_mut().zip(&self.pe) {
                *v += *pe;
            }
            if c.use_command_tokens && input.drop_cmd[s] {
                let null = &p[idx.null_cmd..idx.null_cmd + d];
                for r in 0..m {
                    let at = base + (lay.cmd_at + r) * d;
                    h[at..at + d].copy_from_slice(null);
                }
            }
        }
        h
    }

    fn block_forward(&self, p: &[T], li: &LayerIndex, x: Vec<T>, batch: usize) -> (Vec<T>, LayerCache<T>) {
        let c = &self.cfg;
        let d = c.latent_dim;
        let f = c.ff_dim;
        let len = self.layout.len;
        let rows = batch * len;
        let heads = c.heads;
        let dh = d / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());

        let mut qkv = vec![T::zero(); rows * 3 * d];
        matmul(rows, d, 3 * d, &x, &p[li.qkv_w..li.qkv_w + d * 3 * d], &mut qkv, false);
        add_bias(&mut qkv, &p[li.qkv_b..li.qkv_b + 3 * d]);

        let mut probs = vec![T::zero(); batch * heads * len * len];
        let mut attn = vec![T::zero(); rows * d];
        for s in 0..batch {
            for hd in 0..heads {
                let q_off = s * len * 3 * d + hd * dh;
                let k_off = q_off + d;
                let v_off = q_off + 2 * d;
                let p_off = (s * heads + hd) * len * len;
                gemm(
                    len,
                    dh,
                    len,
                    scale,
                    &qkv,
                    View::rows(q_off, 3 * d),
                    &qkv,
                    View::transposed(k_off, 3 * d),
                    T::zero(),
                    &mut probs,
                    View::rows(p_off, len),
                );
                for row in probs[p_off..p_off + len * len].chunks_exact_mut(len) {
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        sum += *v;
                    }
                    let inv = T::one() / sum;
                    for v in row.iter_mut() {
                        *v *= inv;
                    }
                }
                gemm(
                    len,
                    len,
                    dh,
                    T::one(),
                    &probs,
                    View::rows(p_off, len),
                    &qkv,
                    View::rows(v_off, 3 * d),
                    T::zero(),
                    &mut attn,
                    View::rows(s * len * d + hd * dh, d),
                );
            }
        }

        let mut r1 = x.clone();
        matmul(rows, d, d, &attn, &p[li.out_w..li.out_w + d * d], &mut r1, true);
        add_bias(&mut r1, &p[li.out_b..li.out_b + d]);
        let mut h1 = vec![T::zero(); rows * d];
        let mut xhat1 = vec![T::zero(); rows * d];
        let mut rstd1 = vec![T::zero(); rows];
        layer_norm(&r1, &p[li.ln1_g..li.ln1_g + d], &p[li.ln1_b..li.ln1_b + d], &mut h1, &mut xhat1, &mut rstd1);
        drop(r1);

        let mut ff_pre = vec![T::zero(); rows * f];
        matmul(rows, d, f, &h1, &p[li.ff1_w..li.ff1_w + d * f], &mut ff_pre, false);
        add_bias(&mut ff_pre, &p[li.ff1_b..li.ff1_b + f]);
        let ff_act: Vec<T> = ff_pre.iter().map(|v| gelu(*v)).collect();
        let mut r2 = h1.clone();
        matmul(rows, f, d, &ff_act, &p[li.ff2_w..li.ff2_w + f * d], &mut r2, true);
        add_bias(&mut r2, &p[li.ff2_b..li.ff2_b + d]);
        let mut h2 = vec![T::zero(); rows * d];
        let mut xhat2 = vec![T::zero(); rows * d];
        let mut rstd2 = vec![T::zero(); rows];
        layer_norm(&r2, &p[li.ln2_g..li.ln2_g + d], &p[li.ln2_b..li.ln2_b + d], &mut h2, &mut xhat2, &mut rstd2);

        let cache = LayerCache { x_in: x, qkv, probs, attn, xhat1, rstd1, h1, ff_pre, ff_act, xhat2, rstd2 };
        (h2, cache)
    }

    /// Full forward pass. `dropout_rng` enables positional-encoding dropout
    /// (training only, and only if the config asks for it).
    pub fn forward<R: Rng>(
        &self,
        p: &[T],
        input: &BatchInput<'_, T>,
        dropout_rng: Option<&mut R>,
    ) -> Result<(BatchOutput<T>, ForwardCache<T>)> {
        self.check_input(input)?;
        let c = &self.cfg;
        let lay = self.layout;
        let b = input.batch;
        let mut h = self.embed(p, input);

        let mut dropout_mask = None;
        if let Some(rng) = dropout_rng {
            if c.pe_dropout > 0.0 {
                let keep = T::from_f64_lossy(1.0 / (1.0 - c.pe_dropout));
                let mask: Vec<T> = (0..h.len())
                    .map(|_| if rng.gen::<f64>() < c.pe_dropout { T::zero() } else { keep })
                    .collect();
                for (v, m) in h.iter_mut().zip(&mask) {
                    *v *= *m;
                }
                dropout_mask = Some(mask);
            }
        }
        check_finite(&h, "embedding")?;

        let mut layers = Vec::with_capacity(c.layers);
        for (l, li) in self.index.layers.iter().enumerate() {
            let (out, cache) = self.block_forward(p, li, h, b);
            check_finite(&out, &format!("layers.{l}"))?;
            layers.push(cache);
            h = out;
        }

        let out = self.heads(p, &h, b);
        check_finite(&out.x0, "head.x0")?;
        check_finite(&out.behavior, "head.behavior")?;
        check_finite(&out.mode, "head.mode")?;

        let cache = ForwardCache {
            batch: b,
            steps: input.steps.to_vec(),
            drop_cmd: input.drop_cmd.to_vec(),
            pose: input.pose.to_vec(),
            cmd: input.cmd.to_vec(),
            x_t: input.x_t.to_vec(),
            dropout_mask,
            layers,
            h_final: h,
        };
        let _ = lay;
        Ok((out, cache))
    }

    fn heads(&self, p: &[T], h: &[T], b: usize) -> BatchOutput<T> {
        let c = &self.cfg;
        let d = c.latent_dim;
        let lay = self.layout;
        let idx = &self.index;
        let (n, j, kb, km) = (c.horizon, c.channels, c.behavior_classes, c.mode_classes);

        let mut x0 = vec![T::zero(); b * n * j];
        for s in 0..b {
            let src = (s * lay.len + lay.window_at) * d;
            matmul(n, d, j, &h[src..src + n * d], &p[idx.x0_w..idx.x0_w + d * j], &mut x0[s * n * j..(s + 1) * n * j], false);
        }
        add_bias(&mut x0, &p[idx.x0_b..idx.x0_b + j]);

        let mut behavior = vec![T::zero(); b * kb];
        let mut mode = vec![T::zero(); b * km];
        gemm(
            b,
            d,
            kb,
            T::one(),
            h,
            View::rows(lay.query_at * d, lay.len * d),
            &p[idx.behavior_w..idx.behavior_w + d * kb],
            View::rows(0, kb),
            T::zero(),
            &mut behavior,
            View::rows(0, kb),
        );
        add_bias(&mut behavior, &p[idx.behavior_b..idx.behavior_b + kb]);
        gemm(
            b,
            d,
            km,
            T::one(),
            h,
            View::rows((lay.query_at + 1) * d, lay.len * d),
            &p[idx.mode_w..idx.mode_w + d * km],
            View::rows(0, km),
            T::zero(),
            &mut mode,
            View::rows(0, km),
        );
        add_bias(&mut mode, &p[idx.mode_b..idx.mode_b + km]);
        BatchOutput { x0, behavior, mode }
    }

    fn block_backward(&self, p: &[T], li: &LayerIndex, cache: &LayerCache<T>, dh2: Vec<T>, batch: usize, g: &mut [T]) -> Vec<T> {
        let c = &self.cfg;
        let d = c.latent_dim;
        let f = c.ff_dim;
        let len = self.layout.len;
        let rows = batch * len;
        let heads = c.heads;
        let dh = d / heads;
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());

        // second sublayer: h2 = LN(h1 + FF(h1))
        let (dg2, rest) = g[li.ln2_g..].split_at_mut(d);
        let dr2 = layer_norm_backward(&dh2, &cache.xhat2, &cache.rstd2, &p[li.ln2_g..li.ln2_g + d], dg2, &mut rest[li.ln2_b - li.ln2_g - d..][..d]);
        drop(dh2);
        matmul_tn_acc(rows, f, d, &cache.ff_act, &dr2, &mut g[li.ff2_w..li.ff2_w + f * d]);
        bias_grad(&dr2, &mut g[li.ff2_b..li.ff2_b + d]);
        let mut dact = vec![T::zero(); rows * f];
        matmul_nt(rows, d, f, &dr2, &p[li.ff2_w..li.ff2_w + f * d], &mut dact, false);
        for (da, x) in dact.iter_mut().zip(&cache.ff_pre) {
            *da *= gelu_grad(*x);
        }
        matmul_tn_acc(rows, d, f, &cache.h1, &dact, &mut g[li.ff1_w..li.ff1_w + d * f]);
        bias_grad(&dact, &mut g[li.ff1_b..li.ff1_b + f]);
        let mut dh1 = dr2;
        matmul_nt(rows, f, d, &dact, &p[li.ff1_w..li.ff1_w + d * f], &mut dh1, true);
        drop(dact);

        // first sublayer: h1 = LN(x + Attn(x))
        let (dg1, rest) = g[li.ln1_g..].split_at_mut(d);
        let dr1 = layer_norm_backward(&dh1, &cache.xhat1, &cache.rstd1, &p[li.ln1_g..li.ln1_g + d], dg1, &mut rest[li.ln1_b - li.ln1_g - d..][..d]);
        drop(dh1);
        matmul_tn_acc(rows, d, d, &cache.attn, &dr1, &mut g[li.out_w..li.out_w + d * d]);
        bias_grad(&dr1, &mut g[li.out_b..li.out_b + d]);
        let mut dattn = vec![T::zero(); rows * d];
        matmul_nt(rows, d, d, &dr1, &p[li.out_w..li.out_w + d * d], &mut dattn, false);

        let mut dqkv = vec![T::zero(); rows * 3 * d];
        let mut dp = vec![T::zero(); len * len];
        for s in 0..batch {
            for hd in 0..heads {
                let q_off = s * len * 3 * d + hd * dh;
                let k_off = q_off + d;
                let v_off = q_off + 2 * d;
                let p_off = (s * heads + hd) * len * len;
                let o_off = s * len * d + hd * dh;
                let qkv = &cache.qkv;
                let probs = &cache.probs;
                gemm(len, dh, len, T::one(), &dattn, View::rows(o_off, d), qkv, View::transposed(v_off, 3 * d), T::zero(), &mut dp, View::rows(0, len));
                gemm(len, len, dh, T::one(), probs, View::transposed(p_off, len), &dattn, View::rows(o_off, d), T::zero(), &mut dqkv, View::rows(v_off, 3 * d));
                for r in 0..len {
                    let prow = &probs[p_off + r * len..p_off + (r + 1) * len];
                    let drow = &mut dp[r * len..(r + 1) * len];
                    let dot: T = prow.iter().zip(drow.iter()).map(|(a, b)| *a * *b).sum();
                    for (dv, pv) in drow.iter_mut().zip(prow) {
                        *dv = *pv * (*dv - dot) * scale;
                    }
                }
                gemm(len, len, dh, T::one(), &dp, View::rows(0, len), qkv, View::rows(k_off, 3 * d), T::zero(), &mut dqkv, View::rows(q_off, 3 * d));
                gemm(len, len, dh, T::one(), &dp, View::transposed(0, len), qkv, View::rows(q_off, 3 * d), T::zero(), &mut dqkv, View::rows(k_off, 3 * d));
            }
        }
        drop(dattn);
        matmul_tn_acc(rows, d, 3 * d, &cache.x_in, &dqkv, &mut g[li.qkv_w..li.qkv_w + d * 3 * d]);
        bias_grad(&dqkv, &mut g[li.qkv_b..li.qkv_b + 3 * d]);
        let mut dx = dr1;
        matmul_nt(rows, 3 * d, d, &dqkv, &p[li.qkv_w..li.qkv_w + d * 3 * d], &mut dx, true);
        dx
    }

    /// Accumulates parameter gradients of a scalar loss into `g`, given the
    /// loss gradients with respect to the three outputs.
    pub fn backward(&self, p: &[T], cache: &ForwardCache<T>, d_out: &BatchOutput<T>, g: &mut [T]) {
        let c = &self.cfg;
        let d = c.latent_dim;
        let lay = self.layout;
        let idx = &self.index;
        let b = cache.batch;
        let (m, n, j, kb, km) = (c.history, c.horizon, c.channels, c.behavior_classes, c.mode_classes);
        let h = &cache.h_final;
        let mut dh = vec![T::zero(); b * lay.len * d];

        for s in 0..b {
            let src = (s * lay.len + lay.window_at) * d;
            let dx = &d_out.x0[s * n * j..(s + 1) * n * j];
            matmul_tn_acc(n, d, j, &h[src..src + n * d], dx, &mut g[idx.x0_w..idx.x0_w + d * j]);
            matmul_nt(n, j, d, dx, &p[idx.x0_w..idx.x0_w + d * j], &mut dh[src..src + n * d], true);
        }
        bias_grad(&d_out.x0, &mut g[idx.x0_b..idx.x0_b + j]);

        for (at, w, bias, k, dl) in [
            (lay.query_at, idx.behavior_w, idx.behavior_b, kb, &d_out.behavior),
            (lay.query_at + 1, idx.mode_w, idx.mode_b, km, &d_out.mode),
        ] {
            gemm(d, b, k, T::one(), h, View { offset: at * d, rs: 1, cs: lay.len * d }, dl, View::rows(0, k), T::one(), &mut g[w..w + d * k], View::rows(0, k));
            gemm(b, k, d, T::one(), dl, View::rows(0, k), &p[w..w + d * k], View::transposed(0, k), T::one(), &mut dh, View::rows(at * d, lay.len * d));
            bias_grad(dl, &mut g[bias..bias + k]);
        }

        for (li, lc) in self.index.layers.iter().zip(&cache.layers).rev() {
            dh = self.block_backward(p, li, lc, dh, b, g);
        }

        if let Some(mask) = &cache.dropout_mask {
            for (v, mk) in dh.iter_mut().zip(mask) {
                *v *= *mk;
            }
        }

        let gather = |dh: &[T], per: usize, at: usize| {
            let mut out = vec![T::zero(); b * per * d];
            for s in 0..b {
                let src = (s * lay.len + at) * d;
                out[s * per * d..(s + 1) * per * d].copy_from_slice(&dh[src..src + per * d]);
            }
            out
        };

        if c.use_pose_tokens {
            let dt = gather(&dh, m, lay.pose_at);
            matmul_tn_acc(b * m, POSE_DIM, d, &cache.pose, &dt, &mut g[idx.pose_w..idx.pose_w + POSE_DIM * d]);
            bias_grad(&dt, &mut g[idx.pose_b..idx.pose_b + d]);
        }
        if c.use_command_tokens {
            let mut dt = gather(&dh, m, lay.cmd_at);
            for s in 0..b {
                if cache.drop_cmd[s] {
                    let blk = &mut dt[s * m * d..(s + 1) * m * d];
                    for row in blk.chunks_exact(d) {
                        for (gv, v) in g[idx.null_cmd..idx.null_cmd + d].iter_mut().zip(row) {
                            *gv += *v;
                        }
                    }
                    blk.iter_mut().for_each(|v| *v = T::zero());
                }
            }
            matmul_tn_acc(b * m, j, d, &cache.cmd, &dt, &mut g[idx.cmd_w..idx.cmd_w + j * d]);
            bias_grad(&dt, &mut g[idx.cmd_b..idx.cmd_b + d]);
        }
        if c.is_diffusion() {
            let dt = gather(&dh, n, lay.window_at);
            matmul_tn_acc(b * n, j, d, &cache.x_t, &dt, &mut g[idx.x_w..idx.x_w + j * d]);
            bias_grad(&dt, &mut g[idx.x_b..idx.x_b + d]);
        }
        for s in 0..b {
            let base = s * lay.len * d;
            if c.is_diffusion() {
                let t = cache.steps[s] - 1;
                let src = &dh[base + lay.step_at * d..base + (lay.step_at + 1) * d];
                for (gv, v) in g[idx.step_table + t * d..idx.step_table + (t + 1) * d].iter_mut().zip(src) {
                    *gv += *v;
                }
            } else {
                let src = &dh[base + lay.window_at * d..base + (lay.window_at + n) * d];
                for (gv, v) in g[idx.query_window..idx.query_window + n * d].iter_mut().zip(src) {
                    *gv += *v;
                }
            }
            for (q, at) in [(idx.query_behavior, lay.query_at), (idx.query_mode, lay.query_at + 1)] {
                let src = &dh[base + at * d..base + (at + 1) * d];
                for (gv, v) in g[q..q + d].iter_mut().zip(src) {
                    *gv += *v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_matches_tanh_form() {
        for x in [-12.0, -3.0, -0.7, 0.0, 0.4, 2.5, 30.0f64] {
            let reference = 0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh());
            assert!((gelu(x) - reference).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn output_shapes_for_default_config() {
        let cfg = ModelConfig::default();
        let net = Network::<f32>::new(&cfg);
        let params = ParamStore::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let b = 2;
        let pose = vec![0.1f32; b * 15 * 7];
        let cmd = vec![0.0f32; b * 15 * 10];
        let x_t = vec![0.3f32; b * 25 * 10];
        let input = BatchInput { batch: b, pose: &pose, cmd: &cmd, drop_cmd: &[false, true], x_t: &x_t, steps: &[1, 8] };
        let (out, _) = net.forward::<ChaCha8Rng>(&params.data, &input, None).unwrap();
        assert_eq!(out.x0.len(), b * 25 * 10);
        assert_eq!(out.behavior.len(), b * 9);
        assert_eq!(out.mode.len(), b * 2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = ModelConfig::reduced();
        let net = Network::<f64>::new(&cfg);
        let params = ParamStore::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let input = BatchInput { batch: 1, pose: &[0.0; 5], cmd: &[0.0; 30], drop_cmd: &[false], x_t: &[0.0; 40], steps: &[1] };
        assert!(net.forward::<ChaCha8Rng>(&params.data, &input, None).is_err());
    }

    #[test]
    fn nan_reports_layer() {
        let cfg = ModelConfig::reduced();
        let net = Network::<f64>::new(&cfg);
        let mut params = ParamStore::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let e = params.entry("layers.0.ff1.w").unwrap().clone();
        params.data[e.offset] = f64::NAN;
        let pose = vec![0.1; 21];
        let cmd = vec![0.1; 30];
        let x = vec![0.1; 40];
        let input = BatchInput { batch: 1, pose: &pose, cmd: &cmd, drop_cmd: &[false], x_t: &x, steps: &[2] };
        match net.forward::<ChaCha8Rng>(&params.data, &input, None) {
            Err(Error::Numeric { location, .. }) => assert_eq!(location, "layers.0"),
            other => panic!("expected numeric error, got {:?}", other.map(|o| o.0)),
        }
    }
}
