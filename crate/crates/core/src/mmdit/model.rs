//! Forward pass with activation cache, and the matching reverse pass.

use ndarray::{concatenate, s, Array1, Array2, Array4, ArrayView1, Axis};

use super::attention::{attention_with_bias, Segments};
use super::{patchify, unpatchify, Linear, MmDit, ModelView};
use crate::codec::LatentGrid;
use crate::error::{Error, Result};
use crate::fae::FrequencyEmbedding;
use crate::refadapter::{AdapterWeights, LoraPair};

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

struct LayerCache {
    seg: Segments,
    x: Array2<f64>,
    n1: Array2<f64>,
    inv1: Array1<f64>,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    down: [Option<Array2<f64>>; 4],
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    attn: Array2<f64>,
    n2: Array2<f64>,
    inv2: Array1<f64>,
    m: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
    f: Array2<f64>,
    modv: Array1<f64>,
}

/// Activations retained for the reverse pass and for attention diagnostics.
pub struct ForwardCache {
    slots: usize,
    height: usize,
    width: usize,
    t: usize,
    tokens_in: Array2<f64>,
    temb: Array1<f64>,
    e1: Array1<f64>,
    a1: Array1<f64>,
    c: Array1<f64>,
    cs: Array1<f64>,
    layers: Vec<LayerCache>,
    nf: Array2<f64>,
    invf: Array1<f64>,
    modf: Array1<f64>,
    y: Array2<f64>,
}

impl ForwardCache {
    pub fn timestep(&self) -> usize {
        self.t
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Per-head attention weights of one layer (`S x S` each).
    pub fn attention(&self, layer: usize) -> &[Array2<f64>] {
        &self.layers[layer].probs
    }

    pub fn segments(&self, layer: usize) -> &Segments {
        &self.layers[layer].seg
    }
}

/// Gradient buffers to accumulate into; `None` entries are frozen.
#[derive(Default)]
pub struct GradTargets<'g> {
    pub base: Option<&'g mut MmDit>,
    pub adapter: Option<&'g mut AdapterWeights>,
    pub freq: Option<&'g mut FrequencyEmbedding>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Sinusoidal timestep features `[cos(t w_i), sin(t w_i)]`.
pub(crate) fn timestep_features(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let w = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (t as f64 * w).cos();
        out[half + i] = (t as f64 * w).sin();
    }
    out
}

fn layer_norm(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut n = x.clone();
    let mut inv = Array1::zeros(x.nrows());
    for (i, mut row) in n.axis_iter_mut(Axis(0)).enumerate() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let k = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * k);
        inv[i] = k;
    }
    (n, inv)
}

fn layer_norm_backward(n: &Array2<f64>, inv: &Array1<f64>, dn: &Array2<f64>) -> Array2<f64> {
    let d = n.ncols() as f64;
    let mut dx = Array2::zeros(n.dim());
    for i in 0..n.nrows() {
        let (nr, dr) = (n.row(i), dn.row(i));
        let mean_d = dr.sum() / d;
        let mean_dn = dr.dot(&nr) / d;
        let k = inv[i];
        dx.row_mut(i)
            .iter_mut()
            .zip(nr.iter().zip(dr.iter()))
            .for_each(|(o, (&nv, &dv))| *o = k * (dv - mean_d - nv * mean_dn));
    }
    dx
}

fn modulate(n: &Array2<f64>, shift: ArrayView1<f64>, scale: ArrayView1<f64>) -> Array2<f64> {
    let one_plus = scale.mapv(|s| 1.0 + s);
    n * &one_plus + &shift
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)))
}

fn linear(x: &Array2<f64>, lin: &Linear) -> Array2<f64> {
    x.dot(&lin.w) + &lin.b
}

fn linear_vec(x: &Array1<f64>, lin: &Linear) -> Array1<f64> {
    x.dot(&lin.w) + &lin.b
}

fn projection(x: &Array2<f64>, lin: &Linear, lora: Option<(&LoraPair, f64)>) -> (Array2<f64>, Option<Array2<f64>>) {
    let mut y = linear(x, lin);
    match lora {
        Some((p, scale)) => {
            let xd = x.dot(&p.down);
            y.scaled_add(scale, &xd.dot(&p.up));
            (y, Some(xd))
        }
        None => (y, None),
    }
}

fn linear_backward(x: &Array2<f64>, lin: &Linear, dy: &Array2<f64>, grad: Option<&mut Linear>) -> Array2<f64> {
    if let Some(g) = grad {
        g.w += &x.t().dot(dy);
        g.b += &dy.sum_axis(Axis(0));
    }
    dy.dot(&lin.w.t())
}

fn projection_backward(
    x: &Array2<f64>,
    lin: &Linear,
    lora: Option<(&LoraPair, f64)>,
    xd: Option<&Array2<f64>>,
    dy: &Array2<f64>,
    grad: Option<&mut Linear>,
    lora_grad: Option<&mut LoraPair>,
) -> Array2<f64> {
    let mut dx = linear_backward(x, lin, dy, grad);
    if let Some((p, scale)) = lora {
        let dyu = dy.dot(&p.up.t());
        dx.scaled_add(scale, &dyu.dot(&p.down.t()));
        if let (Some(gp), Some(xd)) = (lora_grad, xd) {
            gp.up.scaled_add(scale, &xd.t().dot(dy));
            gp.down.scaled_add(scale, &x.t().dot(&dyu));
        }
    }
    dx
}

fn check_inputs(view: &ModelView, input: &LatentGrid) -> Result<()> {
    let cfg = &view.base.config;
    let expect = (cfg.latent_slots, cfg.latent_height, cfg.latent_width, 2 * cfg.latent_channels);
    if input.shape() != expect {
        return Err(Error::Shape(format!(
            "conditioned input {:?} does not match model input {expect:?}",
            input.shape()
        )));
    }
    if view.prompt.len() != cfg.prompt_len || view.prompt.iter().any(|&i| i >= cfg.prompt_vocab) {
        return Err(Error::Contract(format!(
            "prompt ids {:?} invalid for length {} and vocabulary {}",
            view.prompt, cfg.prompt_len, cfg.prompt_vocab
        )));
    }
    if let Some(fe) = view.freq {
        fe.check_compatible(cfg)?;
    }
    if let Some(ad) = view.adapter {
        ad.check_compatible(cfg)?;
    }
    Ok(())
}

fn lora_for<'a>(adapter: Option<&'a AdapterWeights>, layer: usize, which: usize) -> Option<(&'a LoraPair, f64)> {
    adapter.map(|a| (a.layers[layer].get(which), a.scale))
}

/// Predicts noise for a channel-concatenated `2C` latent at timestep `t`.
pub fn forward(view: &ModelView, input: &LatentGrid, t: usize, bias: f64) -> Result<(Array4<f64>, ForwardCache)> {
    check_inputs(view, input)?;
    let model = view.base;
    let cfg = &model.config;
    if t >= model.alpha_bars.len() {
        return Err(Error::Config(format!("timestep {t} outside the {}-step schedule", model.alpha_bars.len())));
    }
    let d = cfg.dim;
    let dh = cfg.head_dim();
    let p_len = cfg.prompt_len;
    let n_vid = cfg.num_video_tokens();

    let tokens_in = patchify(input, cfg.patch)?;
    let h_video = linear(&tokens_in, &model.patch_embed) + &model.pos_video;
    let mut h_prompt = Array2::zeros((p_len, d));
    for (i, &id) in view.prompt.iter().enumerate() {
        h_prompt.row_mut(i).assign(&model.prompt_table.row(id));
    }
    h_prompt += &model.pos_prompt;

    let temb = timestep_features(t, cfg.time_embed_dim);
    let e1 = linear_vec(&temb, &model.time_fc1);
    let a1 = e1.mapv(silu);
    let c = linear_vec(&a1, &model.time_fc2);
    let cs = c.mapv(silu);

    let mut h = concatenate![Axis(0), h_prompt, h_video];
    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, blk) in model.blocks.iter().enumerate() {
        let modv = linear_vec(&cs, &blk.ada);
        let part = |i: usize| modv.slice(s![i * d..(i + 1) * d]);
        let (x, seg) = match view.freq {
            Some(fe) => {
                let tok = &fe.tokens[l];
                let x = concatenate![Axis(0), h.slice(s![..p_len, ..]), tok.view(), h.slice(s![p_len.., ..])];
                (x, Segments::new(p_len, tok.nrows(), n_vid))
            }
            None => (h.clone(), Segments::new(p_len, 0, n_vid)),
        };
        let (n1, inv1) = layer_norm(&x);
        let a = modulate(&n1, part(0), part(1));
        let (q, qd) = projection(&a, &blk.q, lora_for(view.adapter, l, 0));
        let (k, kd) = projection(&a, &blk.k, lora_for(view.adapter, l, 1));
        let (v, vd) = projection(&a, &blk.v, lora_for(view.adapter, l, 2));
        let mut o = Array2::zeros(x.dim());
        let mut probs = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let res = attention_with_bias(q.slice(cols), k.slice(cols), v.slice(cols), &seg, bias)?;
            o.slice_mut(cols).assign(&res.out);
            probs.push(res.probs);
        }
        let (attn, od) = projection(&o, &blk.o, lora_for(view.adapter, l, 3));
        let x2 = &x + &(&attn * &part(2));
        let (n2, inv2) = layer_norm(&x2);
        let m = modulate(&n2, part(3), part(4));
        let u = linear(&m, &blk.fc1);
        let g = u.mapv(gelu);
        let f = linear(&g, &blk.fc2);
        let x3 = &x2 + &(&f * &part(5));
        let nf = seg.freq_len();
        h = concatenate![Axis(0), x3.slice(s![..p_len, ..]), x3.slice(s![p_len + nf.., ..])];
        layers.push(LayerCache {
            seg,
            x,
            n1,
            inv1,
            a,
            q,
            k,
            v,
            down: [qd, kd, vd, od],
            probs,
            o,
            attn,
            n2,
            inv2,
            m,
            u,
            g,
            f,
            modv,
        });
    }

    let hv = h.slice(s![p_len.., ..]).to_owned();
    let (nf, invf) = layer_norm(&hv);
    let modf = linear_vec(&cs, &model.final_ada);
    let y = modulate(&nf, modf.slice(s![..d]), modf.slice(s![d..]));
    let out_tokens = linear(&y, &model.head);
    if out_tokens.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            step: 0,
            timestep: t,
            message: "non-finite model output".into(),
        });
    }
    let (slots, height, width, _) = input.shape();
    let residual = unpatchify(&out_tokens, slots, height, width, cfg.patch)?;
    let ab = model.alpha_bars[t];
    // Clean estimate: the condition slot held still across every slot, plus the head's residual.
    let mut x0 = residual;
    x0 += &input.data.slice(s![0..1, .., .., ..cfg.latent_channels]);
    let noisy = input.data.slice(s![.., .., .., cfg.latent_channels..]);
    let out = (&noisy - &(x0 * ab.sqrt())) / (1.0 - ab).sqrt();
    let cache = ForwardCache {
        slots,
        height,
        width,
        t,
        tokens_in,
        temb,
        e1,
        a1,
        c,
        cs,
        layers,
        nf,
        invf,
        modf,
        y,
    };
    Ok((out, cache))
}

/// Accumulates gradients of a scalar loss given `d_out = dL/d(prediction)`.
pub fn backward(view: &ModelView, cache: &ForwardCache, d_out: &Array4<f64>, targets: &mut GradTargets) -> Result<()> {
    let model = view.base;
    let cfg = &model.config;
    let d = cfg.dim;
    let dh = cfg.head_dim();
    let p_len = cfg.prompt_len;
    let scale = 1.0 / (dh as f64).sqrt();
    if d_out.dim() != (cache.slots, cache.height, cache.width, cfg.latent_channels) {
        return Err(Error::Shape(format!("output gradient {:?} does not match prediction", d_out.dim())));
    }
    let ab = model.alpha_bars[cache.t];
    let d_out = &(d_out * (-ab.sqrt() / (1.0 - ab).sqrt()));
    let d_tokens = patchify(&LatentGrid::new(d_out.clone(), 1, 1), cfg.patch)?;

    let mut base = targets.base.as_deref_mut();
    let dy = linear_backward(&cache.y, &model.head, &d_tokens, base.as_mut().map(|g| &mut g.head));
    let one_plus_f = cache.modf.slice(s![d..]).mapv(|v| 1.0 + v);
    let mut dmodf = Array1::zeros(2 * d);
    dmodf.slice_mut(s![..d]).assign(&dy.sum_axis(Axis(0)));
    dmodf.slice_mut(s![d..]).assign(&(&dy * &cache.nf).sum_axis(Axis(0)));
    let dnf = &dy * &one_plus_f;
    let dhv = layer_norm_backward(&cache.nf, &cache.invf, &dnf);
    let mut dcs: Array1<f64> = model.final_ada.w.dot(&dmodf);
    if let Some(g) = base.as_mut() {
        g.final_ada.w += &outer(&cache.cs, &dmodf);
        g.final_ada.b += &dmodf;
    }

    let mut dh_prompt: Array2<f64> = Array2::zeros((p_len, d));
    let mut dh_video = dhv;
    for (l, blk) in model.blocks.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let nf = lc.seg.freq_len();
        let part = |i: usize| lc.modv.slice(s![i * d..(i + 1) * d]);
        let mut gblk = base.as_mut().map(|g| &mut g.blocks[l]);
        let mut glora = targets.adapter.as_deref_mut().map(|a| &mut a.layers[l]);

        let mut dx3 = Array2::zeros(lc.x.dim());
        dx3.slice_mut(s![..p_len, ..]).assign(&dh_prompt);
        dx3.slice_mut(s![p_len + nf.., ..]).assign(&dh_video);

        let dgate2 = (&dx3 * &lc.f).sum_axis(Axis(0));
        let df = &dx3 * &part(5);
        let mut dx2 = dx3;
        let dg = linear_backward(&lc.g, &blk.fc2, &df, gblk.as_mut().map(|b| &mut b.fc2));
        let du = &dg * &lc.u.mapv(gelu_grad);
        let dm = linear_backward(&lc.m, &blk.fc1, &du, gblk.as_mut().map(|b| &mut b.fc1));
        let dscale2 = (&dm * &lc.n2).sum_axis(Axis(0));
        let dshift2 = dm.sum_axis(Axis(0));
        let dn2 = &dm * &part(4).mapv(|v| 1.0 + v);
        dx2 += &layer_norm_backward(&lc.n2, &lc.inv2, &dn2);

        let dgate1 = (&dx2 * &lc.attn).sum_axis(Axis(0));
        let dattn = &dx2 * &part(2);
        let mut dx = dx2;
        let d_o = projection_backward(
            &lc.o,
            &blk.o,
            lora_for(view.adapter, l, 3),
            lc.down[3].as_ref(),
            &dattn,
            gblk.as_mut().map(|b| &mut b.o),
            glora.as_mut().map(|g| g.get_mut(3)),
        );

        let mut dq = Array2::zeros(lc.q.dim());
        let mut dk = Array2::zeros(lc.k.dim());
        let mut dv = Array2::zeros(lc.v.dim());
        for hd in 0..cfg.heads {
            let cols = s![.., hd * dh..(hd + 1) * dh];
            let p = &lc.probs[hd];
            let d_oh = d_o.slice(cols);
            let dp = d_oh.dot(&lc.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&d_oh));
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = p * &(&dp - &row_dot);
            dq.slice_mut(cols).assign(&(ds.dot(&lc.k.slice(cols)) * scale));
            dk.slice_mut(cols).assign(&(ds.t().dot(&lc.q.slice(cols)) * scale));
        }
        let mut da = projection_backward(
            &lc.a,
            &blk.q,
            lora_for(view.adapter, l, 0),
            lc.down[0].as_ref(),
            &dq,
            gblk.as_mut().map(|b| &mut b.q),
            glora.as_mut().map(|g| g.get_mut(0)),
        );
        da += &projection_backward(
            &lc.a,
            &blk.k,
            lora_for(view.adapter, l, 1),
            lc.down[1].as_ref(),
            &dk,
            gblk.as_mut().map(|b| &mut b.k),
            glora.as_mut().map(|g| g.get_mut(1)),
        );
        da += &projection_backward(
            &lc.a,
            &blk.v,
            lora_for(view.adapter, l, 2),
            lc.down[2].as_ref(),
            &dv,
            gblk.as_mut().map(|b| &mut b.v),
            glora.as_mut().map(|g| g.get_mut(2)),
        );
        let dscale1 = (&da * &lc.n1).sum_axis(Axis(0));
        let dshift1 = da.sum_axis(Axis(0));
        let dn1 = &da * &part(1).mapv(|v| 1.0 + v);
        dx += &layer_norm_backward(&lc.n1, &lc.inv1, &dn1);

        let mut dmod = Array1::zeros(6 * d);
        for (i, seg) in [dshift1, dscale1, dgate1, dshift2, dscale2, dgate2].iter().enumerate() {
            dmod.slice_mut(s![i * d..(i + 1) * d]).assign(seg);
        }
        dcs += &blk.ada.w.dot(&dmod);
        if let Some(b) = gblk.as_mut() {
            b.ada.w += &outer(&cache.cs, &dmod);
            b.ada.b += &dmod;
        }
        if let Some(fe) = targets.freq.as_deref_mut() {
            if nf > 0 {
                fe.tokens[l] += &dx.slice(s![p_len..p_len + nf, ..]);
            }
        }
        dh_prompt = dx.slice(s![..p_len, ..]).to_owned();
        dh_video = dx.slice(s![p_len + nf.., ..]).to_owned();
    }

    if let Some(g) = base {
        for (i, &id) in view.prompt.iter().enumerate() {
            let mut row = g.prompt_table.row_mut(id);
            row += &dh_prompt.row(i);
        }
        g.pos_prompt += &dh_prompt;
        g.pos_video += &dh_video;
        g.patch_embed.w += &cache.tokens_in.t().dot(&dh_video);
        g.patch_embed.b += &dh_video.sum_axis(Axis(0));

        let dc = &dcs * &cache.c.mapv(silu_grad);
        g.time_fc2.w += &outer(&cache.a1, &dc);
        g.time_fc2.b += &dc;
        let da1 = model.time_fc2.w.dot(&dc);
        let de1 = &da1 * &cache.e1.mapv(silu_grad);
        g.time_fc1.w += &outer(&cache.temb, &de1);
        g.time_fc1.b += &de1;
    }
    Ok(())
}

/// One forward/backward pass of the noise-prediction loss; returns the loss.
///
/// Gradients are added (scaled by `grad_scale`) into `targets`.
#[allow(clippy::too_many_arguments)]
/// `min(gamma / snr, 1)` with `snr = ab / (1 - ab)`; 1 when no gamma is set.
pub fn snr_weight(alpha_bar: f64, gamma: Option<f64>) -> f64 {
    gamma.map_or(1.0, |g| (g * (1.0 - alpha_bar) / alpha_bar).min(1.0))
}

/// Weighted noise MSE at `t` and its gradients.
pub fn loss_and_backward(
    view: &ModelView,
    input: &LatentGrid,
    t: usize,
    noise: &Array4<f64>,
    slot_mask: Option<&[bool]>,
    bias: f64,
    grad_scale: f64,
    targets: &mut GradTargets,
) -> Result<f64> {
    let (pred, cache) = forward(view, input, t, bias)?;
    if pred.dim() != noise.dim() {
        return Err(Error::Shape(format!("prediction {:?} does not match noise {:?}", pred.dim(), noise.dim())));
    }
    let (loss, mut grad) = crate::diffusion::masked_mse(&pred, noise, slot_mask);
    let weight = snr_weight(view.base.alpha_bars[t], view.base.config.min_snr_gamma);
    let loss = loss * weight;
    if !loss.is_finite() {
        return Err(Error::Numeric {
            step: 0,
            timestep: t,
            message: "non-finite loss".into(),
        });
    }
    grad *= grad_scale * weight;
    backward(view, &cache, &grad, targets)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_derivatives_match_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let x = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64 * 0.3 - 2.0);
        let (n, _) = layer_norm(&x);
        for row in n.rows() {
            assert!(row.sum().abs() < 1e-9);
            assert!((row.iter().map(|v| v * v).sum::<f64>() / 8.0 - 1.0).abs() < 1e-4);
        }
    }
}
