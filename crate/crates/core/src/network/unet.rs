//! U-Net trunk shared by the segmentation and reconstruction heads.
//!
//! Each level is conv3x3 -> instance norm -> ReLU, twice. The encoder halves
//! resolution with 2x2 max pooling; the decoder upsamples by nearest
//! neighbor and concatenates the matching encoder output.

use super::layers::{self, Feat, NormCache};
use super::params::{Grads, NetworkParams};

struct BlockCache {
    input: Feat,
    norm1: NormCache,
    act1: Feat,
    norm2: NormCache,
    out: Feat,
}

fn block_forward(p: &NetworkParams, base: usize, input: Feat) -> BlockCache {
    let w = p.t(base + 1).len();
    let mut h = layers::conv3x3(&input, p.t(base), w);
    let (mut a1, norm1) = layers::instance_norm(&h, p.t(base + 1), p.t(base + 2));
    layers::relu_inplace(&mut a1);
    h = layers::conv3x3(&a1, p.t(base + 3), w);
    let (mut out, norm2) = layers::instance_norm(&h, p.t(base + 4), p.t(base + 5));
    layers::relu_inplace(&mut out);
    BlockCache {
        input,
        norm1,
        act1: a1,
        norm2,
        out,
    }
}

fn block_backward(
    p: &NetworkParams,
    base: usize,
    cache: &BlockCache,
    mut dout: Feat,
    grads: &mut Grads,
    need_input: bool,
) -> Option<Feat> {
    layers::relu_backward(&cache.out, &mut dout);
    let (dg, rest) = grads.0[base + 4..].split_at_mut(1);
    let mut dh = layers::instance_norm_backward(&cache.norm2, p.t(base + 4), &dout, &mut dg[0], &mut rest[0]);
    let mut da1 = layers::conv3x3_backward(&cache.act1, p.t(base + 3), &dh, &mut grads.0[base + 3], true)
        .expect("input gradient requested");
    layers::relu_backward(&cache.act1, &mut da1);
    let (dg, rest) = grads.0[base + 1..].split_at_mut(1);
    dh = layers::instance_norm_backward(&cache.norm1, p.t(base + 1), &da1, &mut dg[0], &mut rest[0]);
    layers::conv3x3_backward(&cache.input, p.t(base), &dh, &mut grads.0[base], need_input)
}

/// Saved activations of one trunk forward pass.
pub struct TrunkCache {
    enc: Vec<BlockCache>,
    pool_idx: Vec<Vec<u32>>,
    /// Indexed by decoder level (0 = finest).
    dec: Vec<Option<BlockCache>>,
}

/// Runs the trunk; returns the finest decoder features and the cache.
pub fn trunk_forward(p: &NetworkParams, x: Feat) -> (Feat, TrunkCache) {
    let arch = p.arch();
    let levels = arch.levels();
    let mut enc = Vec::with_capacity(levels);
    let mut pool_idx = Vec::with_capacity(levels - 1);
    let mut input = x;
    for level in 0..levels {
        let cache = block_forward(p, arch.enc_block(level), input);
        if level + 1 < levels {
            let (pooled, idx) = layers::maxpool2(&cache.out);
            pool_idx.push(idx);
            input = pooled;
        } else {
            input = Feat::zeros(0, 0, 0);
        }
        enc.push(cache);
    }
    let mut dec: Vec<Option<BlockCache>> = (0..levels.saturating_sub(1)).map(|_| None).collect();
    let mut below = enc[levels - 1].out.clone();
    for level in (0..levels - 1).rev() {
        let cat = layers::concat(&layers::upsample2(&below), &enc[level].out);
        let cache = block_forward(p, arch.dec_block(level), cat);
        below = cache.out.clone();
        dec[level] = Some(cache);
    }
    (below, TrunkCache { enc, pool_idx, dec })
}

/// Accumulates trunk parameter gradients for `dfeat` into `grads`.
pub fn trunk_backward(p: &NetworkParams, cache: &TrunkCache, dfeat: Feat, grads: &mut Grads) {
    let arch = p.arch();
    let levels = arch.levels();
    let mut skip: Vec<Option<Feat>> = (0..levels).map(|_| None).collect();
    let mut dbelow = dfeat;
    for level in 0..levels - 1 {
        let block = cache.dec[level].as_ref().expect("decoder cache");
        let dcat = block_backward(p, arch.dec_block(level), block, dbelow, grads, true)
            .expect("input gradient requested");
        let (dup, dskip) = layers::split(&dcat, arch.widths[level + 1]);
        skip[level] = Some(dskip);
        dbelow = layers::upsample2_backward(&dup);
    }
    let mut dout = dbelow;
    for level in (0..levels).rev() {
        if let Some(s) = skip[level].take() {
            for (a, b) in dout.data.iter_mut().zip(&s.data) {
                *a += b;
            }
        }
        let enc = &cache.enc[level];
        let Some(din) = block_backward(p, arch.enc_block(level), enc, dout, grads, level > 0) else {
            break;
        };
        let prev = &cache.enc[level - 1].out;
        dout = layers::maxpool2_backward(&cache.pool_idx[level - 1], &din, prev.c, prev.h, prev.w);
    }
}

pub fn seg_head(p: &NetworkParams, feat: &Feat) -> Feat {
    let base = p.arch().head_base();
    layers::conv1x1(feat, p.t(base), p.t(base + 1))
}

pub fn seg_head_backward(p: &NetworkParams, feat: &Feat, dlogits: &Feat, grads: &mut Grads) -> Feat {
    let base = p.arch().head_base();
    let (dw, db) = grads.0[base..].split_at_mut(1);
    layers::conv1x1_backward(feat, p.t(base), dlogits, &mut dw[0], &mut db[0])
}

/// Sigmoid-bounded reconstruction.
pub fn rec_head(p: &NetworkParams, feat: &Feat) -> Feat {
    let base = p.arch().head_base() + 2;
    let mut out = layers::conv1x1(feat, p.t(base), p.t(base + 1));
    out.data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
    out
}

pub fn rec_head_backward(
    p: &NetworkParams,
    feat: &Feat,
    recon: &Feat,
    drecon: &Feat,
    grads: &mut Grads,
) -> Feat {
    let base = p.arch().head_base() + 2;
    let mut dz = drecon.clone();
    for (g, &s) in dz.data.iter_mut().zip(&recon.data) {
        *g *= s * (1.0 - s);
    }
    let (dw, db) = grads.0[base..].split_at_mut(1);
    layers::conv1x1_backward(feat, p.t(base), &dz, &mut dw[0], &mut db[0])
}
