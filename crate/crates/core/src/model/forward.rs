//! Autoencoder forward pass, reconstruction loss and reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::attention::{aligned_to_dense, dense_kernel, dense_to_aligned, kernel_bwd, sparse_kernel, Kernel};
use super::config::MaskFill;
use super::layers::{
    apply_mask, dropout_mask, gelu_mat, gelu_mat_bwd, layernorm_bwd, layernorm_fwd, linear_bwd, linear_bwd_params,
    linear_fwd, LnCache,
};
use super::params::{Block, LayerNorm, Params};
use crate::error::{Error, Result};
use crate::mask::{build_mask_matrix, EncoderPolicy, MaskMatrix, MaskSpec, Stage, TokenKind, Variant};
use crate::signal::N_LEADS;
use crate::tensor::{Mat, Real};
use crate::tokenizer::TokenizedRecord;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    pub policy: EncoderPolicy,
    pub kernel: Kernel,
    /// Keep every layer's attention weights in the returned trace.
    pub trace: bool,
}

impl ForwardOptions {
    pub fn new(policy: EncoderPolicy) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }
}

/// Attention weights of one layer as a dense `heads × n × n` tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerTrace {
    pub heads: usize,
    /// Global layout positions of the rows (and columns).
    pub positions: Vec<usize>,
    /// `n × n` allow pattern the layer ran with.
    pub allowed: Vec<bool>,
    pub weights: Vec<f64>,
}

impl LayerTrace {
    pub fn n(&self) -> usize {
        self.positions.len()
    }

    pub fn row(&self, h: usize, r: usize) -> &[f64] {
        let n = self.n();
        &self.weights[(h * n + r) * n..(h * n + r + 1) * n]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace {
    pub encoder: Vec<LayerTrace>,
    pub decoder: Vec<LayerTrace>,
}

/// Model input for one record before any transformer layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedded<F> {
    /// cls tokens then visible beats, in layout order.
    pub encoder_positions: Vec<usize>,
    pub encoder_input: Mat<F>,
    /// Every active position, in layout order.
    pub decoder_positions: Vec<usize>,
    /// Decoder rows at masked positions; other rows are zero here and are
    /// taken from the encoder output at run time.
    pub decoder_fill: Mat<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction<F> {
    /// Same layout as [`TokenizedRecord::beats`]; padding beats are zero.
    pub beats: Vec<F>,
    pub trace: Option<ForwardTrace>,
}

struct BlockCache<F> {
    ln1: LnCache<F>,
    h1: Mat<F>,
    q: Mat<F>,
    k: Mat<F>,
    v: Mat<F>,
    w: Vec<F>,
    ctx: Mat<F>,
    drop1: Option<Vec<F>>,
    ln2: LnCache<F>,
    h2: Mat<F>,
    a1: Mat<F>,
    g1: Mat<F>,
    drop2: Option<Vec<F>>,
}

struct StageCache<F> {
    blocks: Vec<BlockCache<F>>,
    norm: LnCache<F>,
}

struct Pass<F> {
    enc_mask: MaskMatrix,
    dec_mask: MaskMatrix,
    /// `(encoder row, lead, beat)` of every visible beat.
    beat_rows: Vec<(usize, usize, usize)>,
    beat_in: Mat<F>,
    enc: StageCache<F>,
    /// Encoder row of each global position, `usize::MAX` if absent.
    enc_index: Vec<usize>,
    dec: StageCache<F>,
    /// Normalized decoder outputs at beat rows (the recon head input).
    dec_beats: Mat<F>,
    recon: Mat<F>,
}

fn add_rows<F: Real>(dst: &mut [F], a: &[F], b: &[F]) {
    for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
        *d = x + y;
    }
}

fn check_inputs<F: Real>(params: &Params<F>, tok: &TokenizedRecord, spec: &MaskSpec) -> Result<()> {
    let cfg = &params.config;
    if tok.n_beats != cfg.n_beats || tok.beat_len != cfg.beat_len {
        return Err(Error::Shape(format!(
            "record {} has {} beats of {} samples, model expects {} of {}",
            tok.record_id, tok.n_beats, tok.beat_len, cfg.n_beats, cfg.beat_len
        )));
    }
    if spec.layout.n_beats != cfg.n_beats {
        return Err(Error::Shape("mask layout does not match the model".into()));
    }
    if (0..cfg.n_beats).any(|j| spec.beat_valid(j) != tok.valid[j]) {
        return Err(Error::Shape(format!(
            "mask padding disagrees with record {}",
            tok.record_id
        )));
    }
    Ok(())
}

fn fill_row<F: Real>(params: &Params<F>) -> &[F] {
    match params.config.mask_fill {
        MaskFill::Learned => params.mask_token.row(0),
        MaskFill::Zero => params.beat_proj.b.row(0),
    }
}

#[allow(clippy::type_complexity)]
fn embed_encoder<F: Real>(
    params: &Params<F>,
    tok: &TokenizedRecord,
    spec: &MaskSpec,
    positions: &[usize],
) -> (Mat<F>, Vec<(usize, usize, usize)>, Mat<F>) {
    let d = params.config.d_t;
    let tb = params.config.beat_len;
    let mut x = Mat::zeros(positions.len(), d);
    let mut beat_rows = Vec::new();
    let mut beat_in = Vec::new();
    for (r, &p) in positions.iter().enumerate() {
        match spec.layout.kind(p) {
            TokenKind::Cls { lead } => {
                add_rows(x.row_mut(r), params.cls_tokens.row(lead), params.lead_embed.row(lead));
            }
            TokenKind::Beat { lead, beat } => {
                beat_rows.push((r, lead, beat));
                beat_in.extend(tok.beat(lead, beat).iter().map(|&v| F::of(v as f64)));
            }
        }
    }
    let beat_in = Mat::from_vec(beat_rows.len(), tb, beat_in);
    let proj = linear_fwd(&beat_in, &params.beat_proj);
    for (k, &(r, lead, j)) in beat_rows.iter().enumerate() {
        let row = x.row_mut(r);
        add_rows(row, proj.row(k), params.beat_pos_embed.row(j));
        for (o, &l) in row.iter_mut().zip(params.lead_embed.row(lead)) {
            *o += l;
        }
    }
    (x, beat_rows, beat_in)
}

fn masked_fill<F: Real>(params: &Params<F>, lead: usize, j: usize, out: &mut [F]) {
    let fill = fill_row(params);
    for c in 0..out.len() {
        out[c] = fill[c] + params.beat_pos_embed.at(j, c) + params.lead_embed.at(lead, c);
    }
}

/// Embeds a record: encoder input over cls and visible beats, plus the fill
/// used by the decoder at masked positions.
pub fn embed<F: Real>(params: &Params<F>, tok: &TokenizedRecord, spec: &MaskSpec) -> Result<Embedded<F>> {
    check_inputs(params, tok, spec)?;
    let encoder_positions = spec.visible_positions();
    let (encoder_input, _, _) = embed_encoder(params, tok, spec, &encoder_positions);
    let decoder_positions = spec.active_positions();
    let mut decoder_fill = Mat::zeros(decoder_positions.len(), params.config.d_t);
    for (r, &p) in decoder_positions.iter().enumerate() {
        if let TokenKind::Beat { lead, beat } = spec.layout.kind(p) {
            if spec.is_masked(p) {
                masked_fill(params, lead, beat, decoder_fill.row_mut(r));
            }
        }
    }
    Ok(Embedded {
        encoder_positions,
        encoder_input,
        decoder_positions,
        decoder_fill,
    })
}

fn block_fwd<F: Real>(
    b: &Block<F>,
    x: Mat<F>,
    mask: &MaskMatrix,
    heads: usize,
    kernel: Kernel,
    dropout: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Mat<F>, BlockCache<F>)> {
    let (h1, ln1) = layernorm_fwd(&x, &b.ln1);
    let q = linear_fwd(&h1, &b.q);
    let k = linear_fwd(&h1, &b.k);
    let v = linear_fwd(&h1, &b.v);
    let (ctx, w) = match kernel {
        Kernel::Sparse => sparse_kernel(&q, &k, &v, mask, heads)?,
        Kernel::Dense => {
            let (c, dense) = dense_kernel(&q, &k, &v, Some(mask), heads)?;
            (c, dense_to_aligned(&dense, mask, heads))
        }
        Kernel::Unmasked => {
            let (c, dense) = dense_kernel(&q, &k, &v, None, heads)?;
            (c, dense_to_aligned(&dense, mask, heads))
        }
    };
    let mut attn = linear_fwd(&ctx, &b.o);
    let (drop1, drop2) = match rng {
        Some(rng) if dropout > 0.0 => (
            Some(dropout_mask(attn.data.len(), dropout, rng)),
            Some(dropout_mask(attn.data.len(), dropout, rng)),
        ),
        _ => (None, None),
    };
    if let Some(m) = &drop1 {
        apply_mask(&mut attn, m);
    }
    let mut x_mid = x;
    x_mid.add_assign(&attn);
    let (h2, ln2) = layernorm_fwd(&x_mid, &b.ln2);
    let a1 = linear_fwd(&h2, &b.fc1);
    let g1 = gelu_mat(&a1);
    let mut m = linear_fwd(&g1, &b.fc2);
    if let Some(mk) = &drop2 {
        apply_mask(&mut m, mk);
    }
    let mut out = x_mid;
    out.add_assign(&m);
    Ok((
        out,
        BlockCache {
            ln1,
            h1,
            q,
            k,
            v,
            w,
            ctx,
            drop1,
            ln2,
            h2,
            a1,
            g1,
            drop2,
        },
    ))
}

fn block_bwd<F: Real>(
    b: &Block<F>,
    c: &BlockCache<F>,
    mask: &MaskMatrix,
    heads: usize,
    dout: &Mat<F>,
    g: &mut Block<F>,
) -> Mat<F> {
    let mut dm = dout.clone();
    if let Some(mk) = &c.drop2 {
        apply_mask(&mut dm, mk);
    }
    let dg1 = linear_bwd(&c.g1, &b.fc2, &dm, &mut g.fc2);
    let da1 = gelu_mat_bwd(&c.a1, &dg1);
    let dh2 = linear_bwd(&c.h2, &b.fc1, &da1, &mut g.fc1);
    let mut dx_mid = layernorm_bwd(&c.ln2, &b.ln2, &dh2, &mut g.ln2);
    dx_mid.add_assign(dout);

    let mut da = dx_mid.clone();
    if let Some(mk) = &c.drop1 {
        apply_mask(&mut da, mk);
    }
    let dctx = linear_bwd(&c.ctx, &b.o, &da, &mut g.o);
    let (dq, dk, dv) = kernel_bwd(&c.q, &c.k, &c.v, mask, &c.w, &dctx, heads);
    let mut dh1 = linear_bwd(&c.h1, &b.q, &dq, &mut g.q);
    dh1.add_assign(&linear_bwd(&c.h1, &b.k, &dk, &mut g.k));
    dh1.add_assign(&linear_bwd(&c.h1, &b.v, &dv, &mut g.v));
    let mut dx = layernorm_bwd(&c.ln1, &b.ln1, &dh1, &mut g.ln1);
    dx.add_assign(&dx_mid);
    dx
}

#[allow(clippy::too_many_arguments)]
fn stage_fwd<F: Real>(
    blocks: &[Block<F>],
    norm: &LayerNorm<F>,
    mut x: Mat<F>,
    mask: &MaskMatrix,
    heads: usize,
    kernel: Kernel,
    dropout: f64,
    mut rng: Option<&mut ChaCha8Rng>,
    mut trace: Option<&mut Vec<LayerTrace>>,
) -> Result<(Mat<F>, StageCache<F>)> {
    let mut caches = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (y, c) = block_fwd(b, x, mask, heads, kernel, dropout, rng.as_deref_mut())?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(LayerTrace {
                heads,
                positions: mask.positions().to_vec(),
                allowed: mask.to_dense(),
                weights: aligned_to_dense(&c.w, mask, heads).iter().map(|w| w.as_f64()).collect(),
            });
        }
        caches.push(c);
        x = y;
    }
    let (y, norm_cache) = layernorm_fwd(&x, norm);
    Ok((
        y,
        StageCache {
            blocks: caches,
            norm: norm_cache,
        },
    ))
}

fn stage_bwd<F: Real>(
    blocks: &[Block<F>],
    norm: &LayerNorm<F>,
    cache: &StageCache<F>,
    mask: &MaskMatrix,
    heads: usize,
    dout: &Mat<F>,
    g_blocks: &mut [Block<F>],
    g_norm: &mut LayerNorm<F>,
) -> Mat<F> {
    let mut dx = layernorm_bwd(&cache.norm, norm, dout, g_norm);
    for ((b, c), g) in blocks.iter().zip(&cache.blocks).zip(g_blocks.iter_mut()).rev() {
        dx = block_bwd(b, c, mask, heads, &dx, g);
    }
    dx
}

fn stage_masks(spec: &MaskSpec, opts: &ForwardOptions) -> (MaskMatrix, MaskMatrix) {
    let enc = build_mask_matrix(spec, Stage::Encoder, opts.policy);
    let dec = build_mask_matrix(spec, Stage::Decoder, opts.policy);
    match opts.kernel {
        Kernel::Unmasked => (
            MaskMatrix::full_over(enc.positions().to_vec()),
            MaskMatrix::full_over(dec.positions().to_vec()),
        ),
        _ => (enc, dec),
    }
}

fn run<F: Real>(
    params: &Params<F>,
    tok: &TokenizedRecord,
    spec: &MaskSpec,
    opts: &ForwardOptions,
    mut rng: Option<&mut ChaCha8Rng>,
    mut trace: Option<&mut ForwardTrace>,
) -> Result<Pass<F>> {
    check_inputs(params, tok, spec)?;
    let cfg = &params.config;
    let heads = cfg.n_heads;
    let dropout = cfg.dropout as f64;
    let (enc_mask, dec_mask) = stage_masks(spec, opts);

    let (x, beat_rows, beat_in) = embed_encoder(params, tok, spec, enc_mask.positions());
    let (h_e, enc) = stage_fwd(
        &params.encoder,
        &params.encoder_norm,
        x,
        &enc_mask,
        heads,
        opts.kernel,
        dropout,
        rng.as_deref_mut(),
        trace.as_deref_mut().map(|t| &mut t.encoder),
    )?;

    let mut enc_index = vec![usize::MAX; spec.layout.total()];
    for (r, &p) in enc_mask.positions().iter().enumerate() {
        enc_index[p] = r;
    }
    let mut scaffold = Mat::zeros(dec_mask.n(), cfg.d_t);
    for (r, &p) in dec_mask.positions().iter().enumerate() {
        match spec.layout.kind(p) {
            TokenKind::Beat { lead, beat } if spec.is_masked(p) => masked_fill(params, lead, beat, scaffold.row_mut(r)),
            _ => scaffold.row_mut(r).copy_from_slice(h_e.row(enc_index[p])),
        }
    }

    let (h_d, dec) = stage_fwd(
        &params.decoder,
        &params.decoder_norm,
        scaffold,
        &dec_mask,
        heads,
        opts.kernel,
        dropout,
        rng,
        trace.map(|t| &mut t.decoder),
    )?;
    let n_beats = dec_mask.n() - N_LEADS;
    let dec_beats = Mat::from_vec(n_beats, cfg.d_t, h_d.data[N_LEADS * cfg.d_t..].to_vec());
    let recon = linear_fwd(&dec_beats, &params.recon_head);
    Ok(Pass {
        enc_mask,
        dec_mask,
        beat_rows,
        beat_in,
        enc,
        enc_index,
        dec,
        dec_beats,
        recon,
    })
}

fn backward<F: Real>(params: &Params<F>, spec: &MaskSpec, pass: &Pass<F>, d_recon: &Mat<F>, g: &mut Params<F>) {
    let cfg = &params.config;
    let d = cfg.d_t;
    let heads = cfg.n_heads;
    let d_beats = linear_bwd(&pass.dec_beats, &params.recon_head, d_recon, &mut g.recon_head);
    let mut dh_d = Mat::zeros(pass.dec_mask.n(), d);
    dh_d.data[N_LEADS * d..].copy_from_slice(&d_beats.data);
    let d_scaffold = stage_bwd(
        &params.decoder,
        &params.decoder_norm,
        &pass.dec,
        &pass.dec_mask,
        heads,
        &dh_d,
        &mut g.decoder,
        &mut g.decoder_norm,
    );

    let mut dh_e = Mat::zeros(pass.enc_mask.n(), d);
    for (r, &p) in pass.dec_mask.positions().iter().enumerate() {
        let row = d_scaffold.row(r);
        match spec.layout.kind(p) {
            TokenKind::Beat { lead, beat } if spec.is_masked(p) => {
                let fill = match cfg.mask_fill {
                    MaskFill::Learned => g.mask_token.row_mut(0),
                    MaskFill::Zero => g.beat_proj.b.row_mut(0),
                };
                for (o, &v) in fill.iter_mut().zip(row) {
                    *o += v;
                }
                for (o, &v) in g.beat_pos_embed.row_mut(beat).iter_mut().zip(row) {
                    *o += v;
                }
                for (o, &v) in g.lead_embed.row_mut(lead).iter_mut().zip(row) {
                    *o += v;
                }
            }
            _ => {
                for (o, &v) in dh_e.row_mut(pass.enc_index[p]).iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
    }

    let dx = stage_bwd(
        &params.encoder,
        &params.encoder_norm,
        &pass.enc,
        &pass.enc_mask,
        heads,
        &dh_e,
        &mut g.encoder,
        &mut g.encoder_norm,
    );
    let mut d_proj = Mat::zeros(pass.beat_rows.len(), d);
    for (r, &p) in pass.enc_mask.positions().iter().enumerate() {
        if let TokenKind::Cls { lead } = spec.layout.kind(p) {
            for (o, &v) in g.cls_tokens.row_mut(lead).iter_mut().zip(dx.row(r)) {
                *o += v;
            }
            for (o, &v) in g.lead_embed.row_mut(lead).iter_mut().zip(dx.row(r)) {
                *o += v;
            }
        }
    }
    for (k, &(r, lead, j)) in pass.beat_rows.iter().enumerate() {
        let row = dx.row(r);
        d_proj.row_mut(k).copy_from_slice(row);
        for (o, &v) in g.beat_pos_embed.row_mut(j).iter_mut().zip(row) {
            *o += v;
        }
        for (o, &v) in g.lead_embed.row_mut(lead).iter_mut().zip(row) {
            *o += v;
        }
    }
    linear_bwd_params(&pass.beat_in, &d_proj, &mut g.beat_proj);
}

fn layout_beats<F: Real>(params: &Params<F>, pass: &Pass<F>) -> Vec<F> {
    let cfg = &params.config;
    let tb = cfg.beat_len;
    let mut out = vec![F::zero(); N_LEADS * cfg.n_beats * tb];
    for (r, &p) in pass.dec_mask.positions()[N_LEADS..].iter().enumerate() {
        let o = (p - N_LEADS) * tb;
        out[o..o + tb].copy_from_slice(pass.recon.row(r));
    }
    out
}

/// Encoder, decoder scaffold, decoder and reconstruction head.
pub fn forward_reconstruct<F: Real>(
    params: &Params<F>,
    tok: &TokenizedRecord,
    spec: &MaskSpec,
    opts: &ForwardOptions,
) -> Result<Reconstruction<F>> {
    let mut trace = opts.trace.then(ForwardTrace::default);
    let pass = run(params, tok, spec, opts, None, trace.as_mut())?;
    Ok(Reconstruction {
        beats: layout_beats(params, &pass),
        trace,
    })
}

/// Encoder output (after the final norm) for the record's visible tokens.
/// Rows follow [`MaskSpec::visible_positions`].
pub fn encode<F: Real>(
    params: &Params<F>,
    tok: &TokenizedRecord,
    spec: &MaskSpec,
    opts: &ForwardOptions,
) -> Result<Mat<F>> {
    check_inputs(params, tok, spec)?;
    let (mask, _) = stage_masks(spec, opts);
    let (x, _, _) = embed_encoder(params, tok, spec, mask.positions());
    let cfg = &params.config;
    let (h, _) = stage_fwd(
        &params.encoder,
        &params.encoder_norm,
        x,
        &mask,
        cfg.n_heads,
        opts.kernel,
        0.0,
        None,
        None,
    )?;
    Ok(h)
}

/// The twelve encoded cls tokens (`12 × d_t`) with nothing masked.
pub fn cls_features<F: Real>(
    params: &Params<F>,
    tok: &TokenizedRecord,
    variant: Variant,
    policy: EncoderPolicy,
) -> Result<Mat<F>> {
    let layout = crate::mask::TokenLayout::new(params.config.n_beats);
    let spec = MaskSpec::new(layout, &tok.valid, &[], variant)?;
    let h = encode(params, tok, &spec, &ForwardOptions::new(policy))?;
    Ok(Mat::from_vec(N_LEADS, h.cols, h.data[..N_LEADS * h.cols].to_vec()))
}

/// Mean squared error per sample over the selected beat positions.
pub fn reconstruction_loss<F: Real>(recon: &[F], target: &[f32], selection: &[usize], beat_len: usize) -> Result<F> {
    if recon.len() != target.len() {
        return Err(Error::Shape(format!(
            "reconstruction has {} values, target {}",
            recon.len(),
            target.len()
        )));
    }
    if selection.is_empty() {
        return Err(Error::EmptySelection("no beats selected for the loss".into()));
    }
    let mut sum = F::zero();
    for &p in selection {
        let o = (p - N_LEADS) * beat_len;
        for t in o..o + beat_len {
            let e = recon[t] - F::of(target[t] as f64);
            sum += e * e;
        }
    }
    Ok(sum / F::of((selection.len() * beat_len) as f64))
}

pub fn record_loss<F: Real>(
    params: &Params<F>,
    tok: &TokenizedRecord,
    spec: &MaskSpec,
    selection: &[usize],
    opts: &ForwardOptions,
) -> Result<F> {
    let pass = run(params, tok, spec, opts, None, None)?;
    reconstruction_loss(
        &layout_beats(params, &pass),
        &tok.beats,
        selection,
        params.config.beat_len,
    )
}

/// Loss of one record; its gradient is added into `grads`.
pub fn record_loss_grad<F: Real>(
    params: &Params<F>,
    tok: &TokenizedRecord,
    spec: &MaskSpec,
    selection: &[usize],
    opts: &ForwardOptions,
    grads: &mut Params<F>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<F> {
    if selection.is_empty() {
        return Err(Error::EmptySelection("no beats selected for the loss".into()));
    }
    let pass = run(params, tok, spec, opts, rng, None)?;
    let tb = params.config.beat_len;
    let dec_positions = &pass.dec_mask.positions()[N_LEADS..];
    let mut row_of = vec![usize::MAX; spec.layout.total()];
    for (r, &p) in dec_positions.iter().enumerate() {
        row_of[p] = r;
    }
    let scale = F::of(1.0 / (selection.len() * tb) as f64);
    let two = F::of(2.0);
    let mut d_recon = Mat::zeros(pass.recon.rows, tb);
    let mut sum = F::zero();
    for &p in selection {
        let r = row_of[p];
        if r == usize::MAX {
            return Err(Error::Config(format!("selected position {p} is not a valid beat")));
        }
        let target = &tok.beats[(p - N_LEADS) * tb..(p - N_LEADS + 1) * tb];
        let pred = pass.recon.row(r);
        let dr = d_recon.row_mut(r);
        for t in 0..tb {
            let e = pred[t] - F::of(target[t] as f64);
            sum += e * e;
            dr[t] = two * e * scale;
        }
    }
    backward(params, spec, &pass, &d_recon, grads);
    Ok(sum * scale)
}

/// One record of a training batch.
#[derive(Clone, Debug)]
pub struct BatchItem<'a> {
    pub record: &'a TokenizedRecord,
    pub spec: MaskSpec,
    pub selection: Vec<usize>,
    /// Seeds the dropout stream of this record.
    pub seed: u64,
}

/// Mean loss and mean gradient over a batch.
///
/// Records run in parallel, but per-record gradients are summed in batch
/// order, so the result does not depend on the number of worker threads.
pub fn batch_loss_grad<F: Real>(
    params: &Params<F>,
    items: &[BatchItem<'_>],
    opts: &ForwardOptions,
) -> Result<(f64, Params<F>)> {
    if items.is_empty() {
        return Err(Error::EmptySelection("empty batch".into()));
    }
    let per_record: Vec<(F, Params<F>)> = items
        .par_iter()
        .map(|it| {
            let mut g = params.zeros_like();
            let mut rng = ChaCha8Rng::seed_from_u64(it.seed);
            let loss = record_loss_grad(params, it.record, &it.spec, &it.selection, opts, &mut g, Some(&mut rng))?;
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let inv = F::of(1.0 / items.len() as f64);
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &per_record {
        loss += l.as_f64();
        total.add_scaled(g, inv);
    }
    loss /= items.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    total.ensure_finite("gradient")?;
    Ok((loss, total))
}
