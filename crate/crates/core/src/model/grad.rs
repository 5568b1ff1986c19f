//! Reverse-mode gradient of the noise-prediction loss with respect to the
//! condition tokens, in `f64`. Used to fine-tune the projection that
//! produces those tokens while the backbone stays frozen.

use crate::error::{Error, Result};
use crate::matrix::{FeatureMatrix, Matrix};
use crate::model::attention::attention_weights;
use crate::model::hooks::NoHook;
use crate::model::latent::ControlMaps;
use crate::model::toy::{layer_norm, StepContext, ToyModel, LAYER_NORM_EPS};

type M = Matrix<f64>;

/// Mean squared error between the model's noise estimate and `target`, and
/// its gradient with respect to the condition tokens.
#[derive(Clone, Debug)]
pub struct CondGradient {
    pub loss: f64,
    pub eps: M,
    pub d_cond: M,
}

/// Loss only, through the ordinary forward pass.
pub fn noise_loss(
    model: &ToyModel,
    x: &M,
    grid: (usize, usize),
    timestep: usize,
    cond: &M,
    control: Option<&ControlMaps>,
    target: &M,
) -> Result<f64> {
    let step = StepContext { index: 0, timestep };
    let eps = model.predict_noise(x, grid, step, cond, control, &mut NoHook)?;
    mse(&eps, target)
}

fn mse(eps: &M, target: &M) -> Result<f64> {
    if (eps.rows(), eps.cols()) != (target.rows(), target.cols()) {
        return Err(Error::shape("noise target does not match the latent"));
    }
    let n = eps.as_slice().len() as f64;
    Ok(eps
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

fn t(w: &FeatureMatrix) -> M {
    w.cast::<f64>().transpose()
}

/// Backward pass of [`layer_norm`] given its output `y` and the input's
/// standard deviations.
fn layer_norm_backward(y: &M, sigma: &[f64], dy: &M) -> M {
    let d = y.cols() as f64;
    let mut dx = dy.clone();
    for r in 0..y.rows() {
        let (yr, dyr) = (y.row(r), dy.row(r));
        let mean_dy = dyr.iter().sum::<f64>() / d;
        let mean_dyy = dyr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d;
        for ((o, &g), &yv) in dx.row_mut(r).iter_mut().zip(dyr).zip(yr) {
            *o = (g - mean_dy - yv * mean_dyy) / sigma[r];
        }
    }
    dx
}

fn row_sigma(x: &M) -> Vec<f64> {
    let d = x.cols() as f64;
    x.row_iter()
        .map(|row| {
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            (var + LAYER_NORM_EPS).sqrt()
        })
        .collect()
}

/// `dS = P ⊙ (dP − rowsum(dP ⊙ P))`.
fn softmax_backward(p: &M, dp: &M) -> M {
    let mut ds = dp.clone();
    for r in 0..p.rows() {
        let dot: f64 = p.row(r).iter().zip(dp.row(r)).map(|(a, b)| a * b).sum();
        for (o, &pv) in ds.row_mut(r).iter_mut().zip(p.row(r)) {
            *o = pv * (*o - dot);
        }
    }
    ds
}

struct HeadTape {
    q: M,
    k: M,
    v: M,
    p: M,
}

struct LnTape {
    y: M,
    sigma: Vec<f64>,
}

impl LnTape {
    fn of(x: &M) -> Self {
        Self {
            y: layer_norm(x),
            sigma: row_sigma(x),
        }
    }
}

struct BlockTape {
    ln1: LnTape,
    self_heads: Vec<HeadTape>,
    ln2: LnTape,
    cross_heads: Vec<HeadTape>,
    ln3: LnTape,
    hidden: M,
}

/// Forward and backward pass. `eps` equals the ordinary forward output.
pub fn noise_loss_grad(
    model: &ToyModel,
    x: &M,
    grid: (usize, usize),
    timestep: usize,
    cond: &M,
    control: Option<&ControlMaps>,
    target: &M,
) -> Result<CondGradient> {
    let cfg = model.config();
    if cond.cols() != cfg.dim || cond.rows() == 0 {
        return Err(Error::shape("condition tokens have the wrong width"));
    }
    let scale = model.attention_scale();
    let heads = cfg.heads;

    let mut h = model.embed(x, grid, timestep, control)?;
    let mut tapes = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        let ln1 = LnTape::of(&h);
        let mut self_heads = Vec::with_capacity(heads);
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let q = ln1.y.matmul(&block.self_attn.q[head])?;
            let k = ln1.y.matmul(&block.self_attn.k[head])?;
            let v = ln1.y.matmul(&block.self_attn.v[head])?;
            let p = attention_weights(&q, &k, scale)?;
            outs.push(p.matmul(&v)?);
            self_heads.push(HeadTape { q, k, v, p });
        }
        h.add_assign(&Matrix::hstack(&outs.iter().collect::<Vec<_>>())?.matmul(&block.self_attn.o)?)?;

        let ln2 = LnTape::of(&h);
        let mut cross_heads = Vec::with_capacity(heads);
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let q = ln2.y.matmul(&block.cross_attn.q[head])?;
            let k = cond.matmul(&block.cross_attn.k[head])?;
            let v = cond.matmul(&block.cross_attn.v[head])?;
            let p = attention_weights(&q, &k, scale)?;
            outs.push(p.matmul(&v)?);
            cross_heads.push(HeadTape { q, k, v, p });
        }
        h.add_assign(&Matrix::hstack(&outs.iter().collect::<Vec<_>>())?.matmul(&block.cross_attn.o)?)?;

        let ln3 = LnTape::of(&h);
        let hidden = block.mlp_in.apply(&ln3.y)?.map(|v| v.tanh());
        h.add_assign(&block.mlp_out.apply(&hidden)?)?;
        tapes.push(BlockTape {
            ln1,
            self_heads,
            ln2,
            cross_heads,
            ln3,
            hidden,
        });
    }
    let lnf = LnTape::of(&h);
    let gain = cfg.output_gain as f64;
    let mut eps = lnf.y.matmul(&model.output.w)?;
    eps.scale(gain);
    let loss = mse(&eps, target)?;

    let n = eps.as_slice().len() as f64;
    let mut d_eps = eps.clone();
    for (d, &tv) in d_eps.as_mut_slice().iter_mut().zip(target.as_slice()) {
        *d = 2.0 * (*d - tv) / n * gain;
    }
    let mut dh = layer_norm_backward(&lnf.y, &lnf.sigma, &d_eps.matmul(&t(&model.output.w))?);
    let mut d_cond = M::zeros(cond.rows(), cond.cols());
    let hd = cfg.head_dim();

    for (block, tape) in model.blocks.iter().zip(&tapes).rev() {
        let d_hidden = dh.matmul(&t(&block.mlp_out.w))?;
        let mut dz = d_hidden;
        for (d, &u) in dz.as_mut_slice().iter_mut().zip(tape.hidden.as_slice()) {
            *d *= 1.0 - u * u;
        }
        let dn3 = dz.matmul(&t(&block.mlp_in.w))?;
        dh.add_assign(&layer_norm_backward(&tape.ln3.y, &tape.ln3.sigma, &dn3))?;

        let d_cat = dh.matmul(&t(&block.cross_attn.o))?;
        let mut dn2 = M::zeros(dh.rows(), dh.cols());
        for (head, ht) in tape.cross_heads.iter().enumerate() {
            let da = d_cat.column_block(head * hd, hd);
            let dp = da.matmul_t(&ht.v)?;
            let dv = ht.p.transpose().matmul(&da)?;
            let mut ds = softmax_backward(&ht.p, &dp);
            ds.scale(scale);
            let dq = ds.matmul(&ht.k)?;
            let dk = ds.transpose().matmul(&ht.q)?;
            dn2.add_assign(&dq.matmul(&t(&block.cross_attn.q[head]))?)?;
            d_cond.add_assign(&dk.matmul(&t(&block.cross_attn.k[head]))?)?;
            d_cond.add_assign(&dv.matmul(&t(&block.cross_attn.v[head]))?)?;
        }
        dh.add_assign(&layer_norm_backward(&tape.ln2.y, &tape.ln2.sigma, &dn2))?;

        let d_cat = dh.matmul(&t(&block.self_attn.o))?;
        let mut dn1 = M::zeros(dh.rows(), dh.cols());
        for (head, ht) in tape.self_heads.iter().enumerate() {
            let da = d_cat.column_block(head * hd, hd);
            let dp = da.matmul_t(&ht.v)?;
            let dv = ht.p.transpose().matmul(&da)?;
            let mut ds = softmax_backward(&ht.p, &dp);
            ds.scale(scale);
            let dq = ds.matmul(&ht.k)?;
            let dk = ds.transpose().matmul(&ht.q)?;
            dn1.add_assign(&dq.matmul(&t(&block.self_attn.q[head]))?)?;
            dn1.add_assign(&dk.matmul(&t(&block.self_attn.k[head]))?)?;
            dn1.add_assign(&dv.matmul(&t(&block.self_attn.v[head]))?)?;
        }
        dh.add_assign(&layer_norm_backward(&tape.ln1.y, &tape.ln1.sigma, &dn1))?;
    }

    Ok(CondGradient { loss, eps, d_cond })
}
