//! Sequence assembly, the causal decoder forward pass, and its exact
//! reverse-mode derivative.

use super::params::{BlockLinear, LayerNorm, Linear, LinearSlot, Parameters, TrainabilityMask};
use crate::error::{Error, Result};
use crate::mitigation::{AdapterSet, LoraAdapter};
use crate::scalar::Scalar;
use crate::synthdata::{Sample, SyntheticImage, TokenId, BOS, IMG};
use crate::tensor::{axpy, dot, matmul_acc, matmul_transa_acc, matmul_transb_acc, Matrix};

const LN_EPS: f64 = 1e-5;

/// `0.5·u·(1 + tanh(√(2/π)·(u + 0.044715·u³)))`
#[inline]
pub fn gelu<S: Scalar>(u: S) -> S {
    let c = S::of(0.797_884_560_802_865_4);
    let k = S::of(0.044_715);
    let half = S::of(0.5);
    half * u * (S::one() + (c * (u + k * u * u * u)).tanh())
}

#[inline]
pub fn gelu_grad<S: Scalar>(u: S) -> S {
    let c = S::of(0.797_884_560_802_865_4);
    let k = S::of(0.044_715);
    let half = S::of(0.5);
    let th = (c * (u + k * u * u * u)).tanh();
    half * (S::one() + th) + half * u * (S::one() - th * th) * c * (S::one() + S::of(3.0) * k * u * u)
}

/// Embedding sequence ready for [`forward`], with the bookkeeping needed to
/// score targets and route gradients back to embeddings and the projector.
#[derive(Clone, Debug)]
pub struct Assembled<S> {
    /// Content embeddings, `T x d`; positions are added by the forward pass.
    pub embeddings: Matrix<S>,
    /// Token id per position, `None` for image patches.
    pub tokens: Vec<Option<TokenId>>,
    /// Logits row that predicts each target token.
    pub target_positions: Vec<usize>,
    pub targets: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    /// `(start, len)` of the patch rows.
    pub image_span: Option<(usize, usize)>,
    vision: Option<AlignCache<S>>,
}

#[derive(Clone, Debug)]
struct AlignCache<S> {
    visual: Matrix<S>,
    pre: Matrix<S>,
    act: Matrix<S>,
}

impl<S: Scalar> Assembled<S> {
    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Frozen vision encoder: row-wise bias-free linear map of the patches.
pub fn encode_image<S: Scalar>(params: &Parameters<S>, image: &SyntheticImage) -> Result<Matrix<S>> {
    let f = params.vision_encoder.rows();
    if image.features != f || image.data.len() != image.patches * image.features {
        return Err(Error::Shape(format!(
            "image is {}x{}, encoder expects {} features",
            image.patches, image.features, f
        )));
    }
    let patches = Matrix::from_vec(image.patches, f, image.data.iter().map(|&v| S::of(f64::from(v))).collect());
    Ok(patches.matmul(&params.vision_encoder))
}

/// Alignment projector: `linear ∘ GELU ∘ linear`, row-wise.
pub fn align<S: Scalar>(params: &Parameters<S>, visual: &Matrix<S>) -> Result<Matrix<S>> {
    Ok(align_cached(params, visual)?.0)
}

fn align_cached<S: Scalar>(params: &Parameters<S>, visual: &Matrix<S>) -> Result<(Matrix<S>, Matrix<S>, Matrix<S>)> {
    if visual.cols() != params.align_in.fan_in() {
        return Err(Error::Shape(format!(
            "visual embeddings have width {}, projector expects {}",
            visual.cols(),
            params.align_in.fan_in()
        )));
    }
    let pre = linear_plain(visual, &params.align_in);
    let mut act = pre.clone();
    act.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
    let out = linear_plain(&act, &params.align_out);
    Ok((out, pre, act))
}

/// Builds `BOS + prompt (IMG → aligned patches) + continuation`.
pub fn assemble_parts<S: Scalar>(
    params: &Parameters<S>,
    image: Option<&SyntheticImage>,
    prompt: &[TokenId],
    continuation: &[TokenId],
) -> Result<Assembled<S>> {
    let placeholders = prompt.iter().filter(|&&t| t == IMG).count();
    match (image.is_some(), placeholders) {
        (true, 1) | (false, 0) => {}
        (true, n) => return Err(Error::Placeholder(format!("image present but prompt has {n} placeholders"))),
        (false, n) => return Err(Error::Placeholder(format!("prompt has {n} placeholders but no image"))),
    }
    let patches = image.map_or(0, |im| im.patches);
    let len = 1 + prompt.len() - placeholders + patches + continuation.len();
    let budget = params.position_embedding.rows();
    if len > budget {
        return Err(Error::ContextExceeded { len, budget });
    }
    let vocab = params.token_embedding.rows();
    if let Some(&bad) = prompt.iter().chain(continuation).find(|&&t| t as usize >= vocab) {
        return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary of {vocab}")));
    }

    let vision = match image {
        Some(im) => {
            let visual = encode_image(params, im)?;
            let (out, pre, act) = align_cached(params, &visual)?;
            Some((out, AlignCache { visual, pre, act }))
        }
        None => None,
    };

    let d = params.token_embedding.cols();
    let mut embeddings = Matrix::zeros(len, d);
    let mut tokens = Vec::with_capacity(len);
    let mut image_span = None;
    let mut pos = 0;
    let push_token = |t: TokenId, embeddings: &mut Matrix<S>, tokens: &mut Vec<Option<TokenId>>, pos: &mut usize| {
        embeddings.row_mut(*pos).copy_from_slice(params.token_embedding.row(t as usize));
        tokens.push(Some(t));
        *pos += 1;
    };
    push_token(BOS, &mut embeddings, &mut tokens, &mut pos);
    for &t in prompt {
        if t == IMG {
            let (aligned, _) = vision.as_ref().expect("placeholder implies image");
            image_span = Some((pos, aligned.rows()));
            for r in 0..aligned.rows() {
                embeddings.row_mut(pos).copy_from_slice(aligned.row(r));
                tokens.push(None);
                pos += 1;
            }
        } else {
            push_token(t, &mut embeddings, &mut tokens, &mut pos);
        }
    }
    let first_target = pos;
    for &t in continuation {
        push_token(t, &mut embeddings, &mut tokens, &mut pos);
    }
    debug_assert_eq!(pos, len);
    Ok(Assembled {
        embeddings,
        tokens,
        target_positions: (0..continuation.len()).map(|j| first_target + j - 1).collect(),
        targets: continuation.to_vec(),
        loss_mask: vec![true; continuation.len()],
        image_span,
        vision: vision.map(|(_, c)| c),
    })
}

pub fn assemble_sequence<S: Scalar>(params: &Parameters<S>, sample: &Sample) -> Result<Assembled<S>> {
    if sample.loss_mask.len() != sample.target.len() {
        return Err(Error::InvalidArgument("loss mask length differs from target length".into()));
    }
    let mut a = assemble_parts(params, sample.image.as_ref(), &sample.prompt, &sample.target)?;
    a.loss_mask = sample.loss_mask.clone();
    Ok(a)
}

fn linear_plain<S: Scalar>(x: &Matrix<S>, lin: &Linear<S>) -> Matrix<S> {
    let (t, n) = (x.rows(), lin.fan_out());
    let mut y = Matrix::zeros(t, n);
    if let Some(b) = &lin.bias {
        for r in 0..t {
            y.row_mut(r).copy_from_slice(b.as_slice());
        }
    }
    matmul_acc(y.as_mut_slice(), x.as_slice(), t, lin.fan_in(), lin.weight.as_slice(), n);
    y
}

/// Returns the output and, for an adapted layer, the `x·a` intermediate.
fn linear_fwd<S: Scalar>(x: &Matrix<S>, lin: &Linear<S>, ad: Option<&LoraAdapter<S>>) -> (Matrix<S>, Option<Matrix<S>>) {
    let mut y = linear_plain(x, lin);
    let xa = ad.map(|ad| {
        let xa = x.matmul(&ad.a);
        let low = xa.matmul(&ad.b);
        axpy(ad.scale, low.as_slice(), y.as_mut_slice());
        xa
    });
    (y, xa)
}

fn linear_back<S: Scalar>(
    dy: &Matrix<S>,
    x: &Matrix<S>,
    lin: &Linear<S>,
    ad: Option<(&LoraAdapter<S>, &Matrix<S>)>,
    grad_lin: Option<&mut Linear<S>>,
    grad_ad: Option<&mut LoraAdapter<S>>,
    dx: Option<&mut Matrix<S>>,
) {
    let (t, k, n) = (x.rows(), lin.fan_in(), lin.fan_out());
    if let Some(g) = grad_lin {
        matmul_transa_acc(g.weight.as_mut_slice(), x.as_slice(), t, k, dy.as_slice(), n);
        if let Some(gb) = &mut g.bias {
            let gb = gb.as_mut_slice();
            for r in 0..t {
                axpy(S::one(), dy.row(r), gb);
            }
        }
    }
    let mut dx = dx;
    if let Some((ad, xa)) = ad {
        let r = ad.rank();
        let mut dxa = Matrix::zeros(t, r);
        matmul_transb_acc(dxa.as_mut_slice(), dy.as_slice(), t, n, ad.b.as_slice(), r);
        dxa.scale(ad.scale);
        if let Some(g) = grad_ad {
            let mut gb = Matrix::zeros(r, n);
            matmul_transa_acc(gb.as_mut_slice(), xa.as_slice(), t, r, dy.as_slice(), n);
            axpy(ad.scale, gb.as_slice(), g.b.as_mut_slice());
            matmul_transa_acc(g.a.as_mut_slice(), x.as_slice(), t, k, dxa.as_slice(), r);
        }
        if let Some(dx) = dx.as_deref_mut() {
            matmul_transb_acc(dx.as_mut_slice(), dxa.as_slice(), t, r, ad.a.as_slice(), k);
        }
    }
    if let Some(dx) = dx {
        matmul_transb_acc(dx.as_mut_slice(), dy.as_slice(), t, n, lin.weight.as_slice(), k);
    }
}

#[derive(Clone, Debug)]
struct NormCache<S> {
    xhat: Matrix<S>,
    rstd: Vec<S>,
}

fn layer_norm<S: Scalar>(x: &Matrix<S>, ln: &LayerNorm<S>) -> (Matrix<S>, NormCache<S>) {
    let (t, d) = x.shape();
    let inv_d = S::one() / S::of(d as f64);
    let eps = S::of(LN_EPS);
    let mut y = Matrix::zeros(t, d);
    let mut xhat = Matrix::zeros(t, d);
    let mut rstd = Vec::with_capacity(t);
    let (g, b) = (ln.gain.as_slice(), ln.bias.as_slice());
    for r in 0..t {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let rs = S::one() / (var + eps).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for i in 0..d {
            xh[i] = (row[i] - mean) * rs;
        }
        let yr = y.row_mut(r);
        let xh = xhat.row(r);
        for i in 0..d {
            yr[i] = xh[i] * g[i] + b[i];
        }
    }
    (y, NormCache { xhat, rstd })
}

/// Accumulates the input gradient into `dx`.
fn layer_norm_back<S: Scalar>(
    dy: &Matrix<S>,
    cache: &NormCache<S>,
    ln: &LayerNorm<S>,
    grad: Option<&mut LayerNorm<S>>,
    dx: &mut Matrix<S>,
) {
    let (t, d) = dy.shape();
    let inv_d = S::one() / S::of(d as f64);
    let g = ln.gain.as_slice();
    if let Some(gr) = grad {
        for r in 0..t {
            let (dyr, xh) = (dy.row(r), cache.xhat.row(r));
            let gg = gr.gain.as_mut_slice();
            for i in 0..d {
                gg[i] += dyr[i] * xh[i];
            }
            axpy(S::one(), dyr, gr.bias.as_mut_slice());
        }
    }
    let mut dxhat = vec![S::zero(); d];
    for r in 0..t {
        let (dyr, xh) = (dy.row(r), cache.xhat.row(r));
        for i in 0..d {
            dxhat[i] = dyr[i] * g[i];
        }
        let m1 = dxhat.iter().copied().sum::<S>() * inv_d;
        let m2 = dot(&dxhat, xh) * inv_d;
        let rs = cache.rstd[r];
        let out = dx.row_mut(r);
        for i in 0..d {
            out[i] += rs * (dxhat[i] - m1 - xh[i] * m2);
        }
    }
}

#[derive(Clone, Debug)]
struct BlockCache<S> {
    n1: NormCache<S>,
    h1: Matrix<S>,
    q: Matrix<S>,
    k: Matrix<S>,
    v: Matrix<S>,
    /// `heads x T x T`, zero above the diagonal.
    probs: Vec<S>,
    attn: Matrix<S>,
    n2: NormCache<S>,
    h2: Matrix<S>,
    up: Matrix<S>,
    act: Matrix<S>,
    lora: [Option<Matrix<S>>; 6],
}

#[derive(Clone, Debug)]
pub struct ForwardCache<S> {
    blocks: Vec<BlockCache<S>>,
    nf: NormCache<S>,
    hf: Matrix<S>,
    lm_lora: Option<Matrix<S>>,
    /// Rows of the full sequence the logits were computed for.
    rows: Vec<usize>,
}

fn adapter<S: Scalar>(adapters: Option<&AdapterSet<S>>, slot: LinearSlot) -> Option<&LoraAdapter<S>> {
    adapters.and_then(|a| a.get(slot))
}

/// Causal decoder: logits for every position, `T x N`.
pub fn forward<S: Scalar>(params: &Parameters<S>, adapters: Option<&AdapterSet<S>>, embeddings: &Matrix<S>) -> Result<Matrix<S>> {
    Ok(forward_cached(params, adapters, embeddings, None)?.0)
}

/// Forward pass keeping activations. When `rows` is given, logits are only
/// produced for those positions (in that order).
pub fn forward_cached<S: Scalar>(
    params: &Parameters<S>,
    adapters: Option<&AdapterSet<S>>,
    embeddings: &Matrix<S>,
    rows: Option<&[usize]>,
) -> Result<(Matrix<S>, ForwardCache<S>)> {
    let (t, d) = embeddings.shape();
    if t == 0 {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    if d != params.token_embedding.cols() {
        return Err(Error::Shape(format!("embedding width {d} != d_model {}", params.token_embedding.cols())));
    }
    if t > params.position_embedding.rows() {
        return Err(Error::ContextExceeded { len: t, budget: params.position_embedding.rows() });
    }
    let mut x = embeddings.clone();
    for r in 0..t {
        axpy(S::one(), params.position_embedding.row(r), x.row_mut(r));
    }

    let mut caches = Vec::with_capacity(params.blocks.len());
    for (bi, block) in params.blocks.iter().enumerate() {
        let (h1, n1) = layer_norm(&x, &block.attn_norm);
        let mut lora: [Option<Matrix<S>>; 6] = Default::default();
        let run = |which: BlockLinear, input: &Matrix<S>, lora: &mut [Option<Matrix<S>>; 6]| {
            let (y, xa) = linear_fwd(input, block.linear(which), adapter(adapters, LinearSlot::Block(bi, which)));
            lora[which as usize] = xa;
            y
        };
        let q = run(BlockLinear::Q, &h1, &mut lora);
        let k = run(BlockLinear::K, &h1, &mut lora);
        let v = run(BlockLinear::V, &h1, &mut lora);
        let (attn, probs) = attention(&q, &k, &v, num_heads(params));
        let out = run(BlockLinear::O, &attn, &mut lora);
        x.add_assign(&out);

        let (h2, n2) = layer_norm(&x, &block.ffn_norm);
        let up = run(BlockLinear::Up, &h2, &mut lora);
        let mut act = up.clone();
        act.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
        let down = run(BlockLinear::Down, &act, &mut lora);
        x.add_assign(&down);
        caches.push(BlockCache { n1, h1, q, k, v, probs, attn, n2, h2, up, act, lora });
    }

    let (hf, nf) = layer_norm(&x, &params.final_norm);
    let rows: Vec<usize> = rows.map_or_else(|| (0..t).collect(), <[usize]>::to_vec);
    let mut sel = Matrix::zeros(rows.len(), d);
    for (i, &r) in rows.iter().enumerate() {
        sel.row_mut(i).copy_from_slice(hf.row(r));
    }
    let (logits, lm_lora) = linear_fwd(&sel, &params.lm_head, adapter(adapters, LinearSlot::LmHead));
    if !logits.is_finite() {
        return Err(Error::NonFinite { what: "logits".into(), step: None });
    }
    Ok((logits, ForwardCache { blocks: caches, nf, hf: sel, lm_lora, rows }))
}

fn num_heads<S: Scalar>(params: &Parameters<S>) -> usize {
    params.config.heads
}

fn attention<S: Scalar>(q: &Matrix<S>, k: &Matrix<S>, v: &Matrix<S>, heads: usize) -> (Matrix<S>, Vec<S>) {
    let (t, d) = q.shape();
    let dh = d / heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let mut out = Matrix::zeros(t, d);
    let mut probs = vec![S::zero(); heads * t * t];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t {
            let qi = &q.row(i)[cols.clone()];
            let p = &mut probs[(h * t + i) * t..(h * t + i) * t + t];
            let mut m = S::neg_infinity();
            for j in 0..=i {
                let s = dot(qi, &k.row(j)[cols.clone()]) * scale;
                p[j] = s;
                m = m.max(s);
            }
            let mut z = S::zero();
            for pj in p.iter_mut().take(i + 1) {
                *pj = (*pj - m).exp();
                z += *pj;
            }
            let inv = S::one() / z;
            for pj in p.iter_mut().take(i + 1) {
                *pj *= inv;
            }
            let o = &mut out.row_mut(i)[cols.clone()];
            for j in 0..=i {
                axpy(p[j], &v.row(j)[cols.clone()], o);
            }
        }
    }
    (out, probs)
}

fn attention_back<S: Scalar>(
    dout: &Matrix<S>,
    cache: &BlockCache<S>,
    heads: usize,
) -> (Matrix<S>, Matrix<S>, Matrix<S>) {
    let (t, d) = dout.shape();
    let dh = d / heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let (q, k, v) = (&cache.q, &cache.k, &cache.v);
    let mut dq = Matrix::zeros(t, d);
    let mut dk = Matrix::zeros(t, d);
    let mut dv = Matrix::zeros(t, d);
    let mut dp = vec![S::zero(); t];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t {
            let p = &cache.probs[(h * t + i) * t..(h * t + i) * t + t];
            let doi = &dout.row(i)[cols.clone()];
            let mut acc = S::zero();
            for j in 0..=i {
                dp[j] = dot(doi, &v.row(j)[cols.clone()]);
                acc += p[j] * dp[j];
                axpy(p[j], doi, &mut dv.row_mut(j)[cols.clone()]);
            }
            for j in 0..=i {
                let ds = p[j] * (dp[j] - acc) * scale;
                if ds != S::zero() {
                    axpy(ds, &k.row(j)[cols.clone()], &mut dq.row_mut(i)[cols.clone()]);
                    axpy(ds, &q.row(i)[cols.clone()], &mut dk.row_mut(j)[cols.clone()]);
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Gradient accumulators for one parameter set and its adapters.
#[derive(Clone, Debug)]
pub struct Grads<S> {
    pub params: Parameters<S>,
    pub adapters: Option<AdapterSet<S>>,
}

impl<S: Scalar> Grads<S> {
    pub fn zeros(params: &Parameters<S>, adapters: Option<&AdapterSet<S>>) -> Self {
        Self { params: params.zeros_like(), adapters: adapters.map(AdapterSet::zeros_like) }
    }
}

/// Back-propagates `dlogits` (rows matching the cached logits) and the
/// resulting embedding gradient into `grads`, honouring `mask`.
pub fn backward<S: Scalar>(
    params: &Parameters<S>,
    adapters: Option<&AdapterSet<S>>,
    assembled: &Assembled<S>,
    cache: &ForwardCache<S>,
    dlogits: &Matrix<S>,
    mask: &TrainabilityMask,
    grads: &mut Grads<S>,
) -> Result<()> {
    let t = assembled.len();
    let d = params.token_embedding.cols();
    let heads = num_heads(params);
    let train_ad = mask.adapters && adapters.is_some();

    // LM head.
    let mut dsel = Matrix::zeros(cache.rows.len(), d);
    {
        let ad = adapter(adapters, LinearSlot::LmHead).zip(cache.lm_lora.as_ref());
        let g_ad = if train_ad {
            grads.adapters.as_mut().and_then(|g| g.adapters.get_mut(&LinearSlot::LmHead))
        } else {
            None
        };
        let g_lin = mask.lm_head.then_some(&mut grads.params.lm_head);
        linear_back(dlogits, &cache.hf, &params.lm_head, ad, g_lin, g_ad, Some(&mut dsel));
    }
    let mut dhf = Matrix::zeros(t, d);
    for (i, &r) in cache.rows.iter().enumerate() {
        axpy(S::one(), dsel.row(i), dhf.row_mut(r));
    }
    let mut dx = Matrix::zeros(t, d);
    layer_norm_back(
        &dhf,
        &cache.nf,
        &params.final_norm,
        mask.final_norm.then_some(&mut grads.params.final_norm),
        &mut dx,
    );

    for (bi, (block, bc)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let Grads { params: gp, adapters: ga } = &mut *grads;
        let mut gblock = mask.blocks.then(|| &mut gp.blocks[bi]);
        let back = |which: BlockLinear, dy: &Matrix<S>, x: &Matrix<S>, dxo: &mut Matrix<S>, gblock: &mut Option<&mut super::params::Block<S>>, ga: &mut Option<AdapterSet<S>>| {
            let slot = LinearSlot::Block(bi, which);
            let ad = adapter(adapters, slot).zip(bc.lora[which as usize].as_ref());
            let g_ad = if train_ad { ga.as_mut().and_then(|g| g.adapters.get_mut(&slot)) } else { None };
            let g_lin = gblock.as_deref_mut().map(|b| b.linear_mut(which));
            linear_back(dy, x, block.linear(which), ad, g_lin, g_ad, Some(dxo));
        };

        // Feed-forward residual branch.
        let mut dact = Matrix::zeros(t, bc.act.cols());
        back(BlockLinear::Down, &dx, &bc.act, &mut dact, &mut gblock, ga);
        for (g, &u) in dact.as_mut_slice().iter_mut().zip(bc.up.as_slice()) {
            *g *= gelu_grad(u);
        }
        let mut dh2 = Matrix::zeros(t, d);
        back(BlockLinear::Up, &dact, &bc.h2, &mut dh2, &mut gblock, ga);
        layer_norm_back(&dh2, &bc.n2, &block.ffn_norm, gblock.as_deref_mut().map(|b| &mut b.ffn_norm), &mut dx);

        // Attention residual branch.
        let mut dattn = Matrix::zeros(t, d);
        back(BlockLinear::O, &dx, &bc.attn, &mut dattn, &mut gblock, ga);
        let (dq, dk, dv) = attention_back(&dattn, bc, heads);
        let mut dh1 = Matrix::zeros(t, d);
        back(BlockLinear::Q, &dq, &bc.h1, &mut dh1, &mut gblock, ga);
        back(BlockLinear::K, &dk, &bc.h1, &mut dh1, &mut gblock, ga);
        back(BlockLinear::V, &dv, &bc.h1, &mut dh1, &mut gblock, ga);
        layer_norm_back(&dh1, &bc.n1, &block.attn_norm, gblock.as_deref_mut().map(|b| &mut b.attn_norm), &mut dx);
    }

    if mask.token_embedding {
        for r in 0..t {
            axpy(S::one(), dx.row(r), grads.params.position_embedding.row_mut(r));
            if let Some(tok) = assembled.tokens[r] {
                axpy(S::one(), dx.row(r), grads.params.token_embedding.row_mut(tok as usize));
            }
        }
    }

    if mask.alignment {
        if let (Some((start, len)), Some(vc)) = (assembled.image_span, assembled.vision.as_ref()) {
            let mut dout = Matrix::zeros(len, d);
            for p in 0..len {
                dout.row_mut(p).copy_from_slice(dx.row(start + p));
            }
            let mut dact = Matrix::zeros(len, vc.act.cols());
            linear_back(&dout, &vc.act, &params.align_out, None, Some(&mut grads.params.align_out), None, Some(&mut dact));
            for (g, &u) in dact.as_mut_slice().iter_mut().zip(vc.pre.as_slice()) {
                *g *= gelu_grad(u);
            }
            linear_back(&dact, &vc.visual, &params.align_in, None, Some(&mut grads.params.align_in), None, None);
        }
    }
    Ok(())
}
