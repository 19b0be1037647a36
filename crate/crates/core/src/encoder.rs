//! Patch encoder: frames to token grids.
//!
//! A frame is cut into non-overlapping P x P patches (row-major), each patch
//! flattened and linearly projected to D, plus a per-view positional
//! embedding, then passed through shared pre-LN self-attention blocks. All
//! views share every weight except their positional embeddings. This module
//! also owns the block primitive itself ([`AttnBlockParams`], [`attn_block`]),
//! which the sequence generator stacks as well.

use crate::error::{OwmError, Result};
use crate::numerics::{Array, Scalar, Tape, TensorId};
use rand::Rng;
use rand_distr::Normal;

/// Samples an array with i.i.d. N(0, std^2) entries, drawn in f64 so f32 and
/// f64 instantiations of the same seed agree to rounding.
pub fn init_normal<S: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Array<S> {
    let dist = Normal::new(0.0f64, std).expect("std must be finite");
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n).map(|_| S::from_f64(rng.sample(dist))).collect();
    Array::from_vec(shape, data).expect("init shape")
}

/// Cuts (B, H, W, C) frames into (B, N, P*P*C) flattened patches, row-major
/// over the patch grid and row-major within each patch. Lossless.
pub fn patchify<S: Scalar>(frames: &Array<S>, patch: usize) -> Result<Array<S>> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(OwmError::shape("patchify", format!("expected (B,H,W,C), got {s:?}")));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(OwmError::shape("patchify", format!("patch {patch} does not tile {h}x{w}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let n = gh * gw;
    let pd = patch * patch * c;
    let mut out = vec![S::zero(); b * n * pd];
    let data = frames.data();
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = gy * gw + gx;
                for py in 0..patch {
                    let src = ((bi * h + gy * patch + py) * w + gx * patch) * c;
                    let dst = (bi * n + tok) * pd + py * patch * c;
                    out[dst..dst + patch * c].copy_from_slice(&data[src..src + patch * c]);
                }
            }
        }
    }
    Array::from_vec(&[b, n, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<S: Scalar>(patches: &Array<S>, patch: usize, h: usize, w: usize, c: usize) -> Result<Array<S>> {
    let s = patches.shape();
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * c;
    if s.len() != 3 || s[1] != gh * gw || s[2] != pd || h % patch != 0 || w % patch != 0 {
        return Err(OwmError::shape(
            "unpatchify",
            format!("patches {s:?} do not tile {h}x{w}x{c} at patch {patch}"),
        ));
    }
    let (b, n) = (s[0], s[1]);
    let mut out = vec![S::zero(); b * h * w * c];
    let data = patches.data();
    for bi in 0..b {
        for tok in 0..n {
            let (gy, gx) = (tok / gw, tok % gw);
            for py in 0..patch {
                let dst = ((bi * h + gy * patch + py) * w + gx * patch) * c;
                let src = (bi * n + tok) * pd + py * patch * c;
                out[dst..dst + patch * c].copy_from_slice(&data[src..src + patch * c]);
            }
        }
    }
    Array::from_vec(&[b, h, w, c], out)
}

/// Pre-LN transformer block: x += attn(LN(x)); x += MLP(LN(x)), GELU, MLP
/// ratio 2.
#[derive(Debug, Clone)]
pub struct AttnBlockParams<S> {
    pub ln1_g: Array<S>,
    pub ln1_b: Array<S>,
    pub wq: Array<S>,
    pub bq: Array<S>,
    pub wk: Array<S>,
    pub bk: Array<S>,
    pub wv: Array<S>,
    pub bv: Array<S>,
    pub wo: Array<S>,
    pub bo: Array<S>,
    pub ln2_g: Array<S>,
    pub ln2_b: Array<S>,
    pub w1: Array<S>,
    pub b1: Array<S>,
    pub w2: Array<S>,
    pub b2: Array<S>,
}

pub struct AttnBlockTids {
    pub ln1_g: TensorId,
    pub ln1_b: TensorId,
    pub wq: TensorId,
    pub bq: TensorId,
    pub wk: TensorId,
    pub bk: TensorId,
    pub wv: TensorId,
    pub bv: TensorId,
    pub wo: TensorId,
    pub bo: TensorId,
    pub ln2_g: TensorId,
    pub ln2_b: TensorId,
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

pub const MLP_RATIO: usize = 2;

impl<S: Scalar> AttnBlockParams<S> {
    /// `depth_scale` shrinks the residual-facing projections (wo, w2) so a
    /// stack of `L` blocks starts with unit-scale residual stream; pass
    /// 1/sqrt(2L).
    pub fn init(d: usize, depth_scale: f64, rng: &mut impl Rng) -> Self {
        let hidden = MLP_RATIO * d;
        let w_std = 1.0 / (d as f64).sqrt();
        let h_std = 1.0 / (hidden as f64).sqrt();
        AttnBlockParams {
            ln1_g: Array::full(&[d], S::one()).expect("ln gain"),
            ln1_b: Array::zeros(&[d]),
            wq: init_normal(&[d, d], w_std, rng),
            bq: Array::zeros(&[d]),
            wk: init_normal(&[d, d], w_std, rng),
            bk: Array::zeros(&[d]),
            wv: init_normal(&[d, d], w_std, rng),
            bv: Array::zeros(&[d]),
            wo: init_normal(&[d, d], w_std * depth_scale, rng),
            bo: Array::zeros(&[d]),
            ln2_g: Array::full(&[d], S::one()).expect("ln gain"),
            ln2_b: Array::zeros(&[d]),
            w1: init_normal(&[d, hidden], w_std, rng),
            b1: Array::zeros(&[hidden]),
            w2: init_normal(&[hidden, d], h_std * depth_scale, rng),
            b2: Array::zeros(&[d]),
        }
    }

    // arrays(), arrays_mut() and wire() must agree on field order.
    pub fn arrays(&self, prefix: &str) -> Vec<(String, &Array<S>)> {
        vec![
            (format!("{prefix}/ln1_g"), &self.ln1_g),
            (format!("{prefix}/ln1_b"), &self.ln1_b),
            (format!("{prefix}/wq"), &self.wq),
            (format!("{prefix}/bq"), &self.bq),
            (format!("{prefix}/wk"), &self.wk),
            (format!("{prefix}/bk"), &self.bk),
            (format!("{prefix}/wv"), &self.wv),
            (format!("{prefix}/bv"), &self.bv),
            (format!("{prefix}/wo"), &self.wo),
            (format!("{prefix}/bo"), &self.bo),
            (format!("{prefix}/ln2_g"), &self.ln2_g),
            (format!("{prefix}/ln2_b"), &self.ln2_b),
            (format!("{prefix}/w1"), &self.w1),
            (format!("{prefix}/b1"), &self.b1),
            (format!("{prefix}/w2"), &self.w2),
            (format!("{prefix}/b2"), &self.b2),
        ]
    }

    pub fn arrays_mut(&mut self, prefix: &str) -> Vec<(String, &mut Array<S>)> {
        vec![
            (format!("{prefix}/ln1_g"), &mut self.ln1_g),
            (format!("{prefix}/ln1_b"), &mut self.ln1_b),
            (format!("{prefix}/wq"), &mut self.wq),
            (format!("{prefix}/bq"), &mut self.bq),
            (format!("{prefix}/wk"), &mut self.wk),
            (format!("{prefix}/bk"), &mut self.bk),
            (format!("{prefix}/wv"), &mut self.wv),
            (format!("{prefix}/bv"), &mut self.bv),
            (format!("{prefix}/wo"), &mut self.wo),
            (format!("{prefix}/bo"), &mut self.bo),
            (format!("{prefix}/ln2_g"), &mut self.ln2_g),
            (format!("{prefix}/ln2_b"), &mut self.ln2_b),
            (format!("{prefix}/w1"), &mut self.w1),
            (format!("{prefix}/b1"), &mut self.b1),
            (format!("{prefix}/w2"), &mut self.w2),
            (format!("{prefix}/b2"), &mut self.b2),
        ]
    }

    pub fn wire(ids: &mut impl Iterator<Item = TensorId>) -> AttnBlockTids {
        let mut next = || ids.next().expect("block param id");
        AttnBlockTids {
            ln1_g: next(),
            ln1_b: next(),
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln2_g: next(),
            ln2_b: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        }
    }
}

/// Multi-head self-attention over x (B, T, D). `mask` is added to the
/// (B, H, T, T) score tensor before softmax (broadcast from (T, T)).
pub fn mha<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    t_wq: TensorId,
    t_bq: TensorId,
    t_wk: TensorId,
    t_bk: TensorId,
    t_wv: TensorId,
    t_bv: TensorId,
    t_wo: TensorId,
    t_bo: TensorId,
    heads: usize,
    mask: Option<TensorId>,
) -> Result<TensorId> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(OwmError::shape("mha", format!("expected (B,T,D), got {shape:?}")));
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(OwmError::shape("mha", format!("heads {heads} does not divide D {d}")));
    }
    let hd = d / heads;
    let split = |tape: &mut Tape<S>, y: TensorId, perm: &[usize]| -> Result<TensorId> {
        let r = tape.reshape(y, &[b, t, heads, hd])?;
        tape.permute(r, perm)
    };
    let qp = tape.matmul(x, t_wq)?;
    let qb = tape.add(qp, t_bq)?;
    let q = split(tape, qb, &[0, 2, 1, 3])?; // (B,H,T,hd)
    let kp = tape.matmul(x, t_wk)?;
    let kb = tape.add(kp, t_bk)?;
    let kt = split(tape, kb, &[0, 2, 3, 1])?; // (B,H,hd,T)
    let vp = tape.matmul(x, t_wv)?;
    let vb = tape.add(vp, t_bv)?;
    let v = split(tape, vb, &[0, 2, 1, 3])?;
    let scores = tape.matmul(q, kt)?;
    let mut scaled = tape.affine(scores, 1.0 / (hd as f64).sqrt(), 0.0)?;
    if let Some(m) = mask {
        scaled = tape.add(scaled, m)?;
    }
    let attn = tape.softmax(scaled, 3)?;
    let av = tape.matmul(attn, v)?; // (B,H,T,hd)
    let merged = tape.permute(av, &[0, 2, 1, 3])?;
    let flat = tape.reshape(merged, &[b, t, d])?;
    let proj = tape.matmul(flat, t_wo)?;
    tape.add(proj, t_bo)
}

/// One pre-LN block with residual connections.
pub fn attn_block<S: Scalar>(
    tape: &mut Tape<S>,
    blk: &AttnBlockTids,
    x: TensorId,
    heads: usize,
    mask: Option<TensorId>,
) -> Result<TensorId> {
    let n1 = tape.layer_norm(x, blk.ln1_g, blk.ln1_b)?;
    let att = mha(tape, n1, blk.wq, blk.bq, blk.wk, blk.bk, blk.wv, blk.bv, blk.wo, blk.bo, heads, mask)?;
    let x1 = tape.add(x, att)?;
    let n2 = tape.layer_norm(x1, blk.ln2_g, blk.ln2_b)?;
    let h1 = tape.matmul(n2, blk.w1)?;
    let h1b = tape.add(h1, blk.b1)?;
    let act = tape.gelu(h1b)?;
    let h2 = tape.matmul(act, blk.w2)?;
    let h2b = tape.add(h2, blk.b2)?;
    tape.add(x1, h2b)
}

/// Which encoder parameter groups receive gradients.
#[derive(Debug, Clone, Copy)]
pub struct EncoderTrainable {
    pub patch: bool,
    pub pos: bool,
    pub blocks: bool,
}

impl Default for EncoderTrainable {
    fn default() -> Self {
        EncoderTrainable { patch: true, pos: true, blocks: true }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams<S> {
    pub patch_w: Array<S>,
    pub patch_b: Array<S>,
    /// One (N, D) table per view; the only per-view weights.
    pub pos: Vec<Array<S>>,
    pub blocks: Vec<AttnBlockParams<S>>,
    pub trainable: EncoderTrainable,
}

pub struct EncoderTids {
    pub patch_w: TensorId,
    pub patch_b: TensorId,
    pub pos: Vec<TensorId>,
    pub blocks: Vec<AttnBlockTids>,
}

impl<S: Scalar> EncoderParams<S> {
    pub fn init(patch_dim: usize, d: usize, n_tokens: usize, views: usize, blocks: usize, rng: &mut impl Rng) -> Self {
        let depth_scale = 1.0 / (2.0 * blocks as f64).sqrt();
        EncoderParams {
            patch_w: init_normal(&[patch_dim, d], 1.0 / (patch_dim as f64).sqrt(), rng),
            patch_b: Array::zeros(&[d]),
            pos: (0..views).map(|_| init_normal(&[n_tokens, d], 0.02, rng)).collect(),
            blocks: (0..blocks).map(|_| AttnBlockParams::init(d, depth_scale, rng)).collect(),
            trainable: EncoderTrainable::default(),
        }
    }

    pub fn arrays(&self) -> Vec<(String, &Array<S>)> {
        let mut out = vec![
            ("enc/patch_w".to_string(), &self.patch_w),
            ("enc/patch_b".to_string(), &self.patch_b),
        ];
        for (v, p) in self.pos.iter().enumerate() {
            out.push((format!("enc/pos{v}"), p));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.arrays(&format!("enc/block{i}")));
        }
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<(String, &mut Array<S>)> {
        let mut out = vec![
            ("enc/patch_w".to_string(), &mut self.patch_w),
            ("enc/patch_b".to_string(), &mut self.patch_b),
        ];
        for (v, p) in self.pos.iter_mut().enumerate() {
            out.push((format!("enc/pos{v}"), p));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.arrays_mut(&format!("enc/block{i}")));
        }
        out
    }

    pub fn wire(views: usize, blocks: usize, ids: &mut impl Iterator<Item = TensorId>) -> EncoderTids {
        let patch_w = ids.next().expect("patch_w id");
        let patch_b = ids.next().expect("patch_b id");
        let pos = (0..views).map(|_| ids.next().expect("pos id")).collect();
        let blocks = (0..blocks).map(|_| AttnBlockParams::<S>::wire(ids)).collect();
        EncoderTids { patch_w, patch_b, pos, blocks }
    }

    /// Registers all weights on the tape. Groups whose trainable flag is off
    /// (or everything, when `trainable` is false) go in as constants.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> EncoderTids {
        let reg = |tape: &mut Tape<S>, a: &Array<S>, on: bool| {
            if trainable && on {
                tape.input(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        let patch_w = reg(tape, &self.patch_w, self.trainable.patch);
        let patch_b = reg(tape, &self.patch_b, self.trainable.patch);
        let pos = self.pos.iter().map(|p| reg(tape, p, self.trainable.pos)).collect();
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let mut ids = b
                    .arrays("")
                    .into_iter()
                    .map(|(_, a)| reg(tape, a, self.trainable.blocks))
                    .collect::<Vec<_>>()
                    .into_iter();
                AttnBlockParams::<S>::wire(&mut ids)
            })
            .collect();
        EncoderTids { patch_w, patch_b, pos, blocks }
    }
}

/// Encodes pre-patchified frames (B, N, P*P*C) of one view into a token grid
/// (B, N, D). Identical inputs produce bit-identical outputs.
pub fn encode<S: Scalar>(
    tape: &mut Tape<S>,
    enc: &EncoderTids,
    view: usize,
    patches: TensorId,
    heads: usize,
) -> Result<TensorId> {
    if view >= enc.pos.len() {
        return Err(OwmError::shape("encode", format!("view {view} of {}", enc.pos.len())));
    }
    let proj = tape.matmul(patches, enc.patch_w)?;
    let biased = tape.add(proj, enc.patch_b)?;
    let mut x = tape.add(biased, enc.pos[view])?;
    for blk in &enc.blocks {
        x = attn_block(tape, blk, x, heads, None)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, GradCheckSettings};

    fn rng() -> impl Rng {
        crate::rng::stream(99, "encoder-test")
    }

    #[test]
    fn patchify_roundtrip_is_lossless() {
        let mut r = rng();
        let frames = init_normal::<f32>(&[2, 32, 32, 3], 1.0, &mut r);
        let p = patchify(&frames, 8).unwrap();
        assert_eq!(p.shape(), &[2, 16, 192]);
        let back = unpatchify(&p, 8, 32, 32, 3).unwrap();
        assert_eq!(back.data(), frames.data());
    }

    #[test]
    fn desk_configuration_shapes() {
        let mut r = rng();
        let params = EncoderParams::<f32>::init(192, 64, 16, 3, 2, &mut r);
        let frames = init_normal::<f32>(&[2, 32, 32, 3], 1.0, &mut r);
        let patches = patchify(&frames, 8).unwrap();
        let mut tape = Tape::new();
        let pt = tape.constant(patches);
        let enc = params.bind(&mut tape, false);
        let tokens = encode(&mut tape, &enc, 0, pt, 4).unwrap();
        assert_eq!(tape.shape(tokens), &[2, 16, 64]);
    }

    #[test]
    fn encoding_is_deterministic() {
        let mut r = rng();
        let params = EncoderParams::<f32>::init(12, 8, 4, 2, 2, &mut r);
        let frames = init_normal::<f32>(&[1, 4, 4, 3], 1.0, &mut r);
        let patches = patchify(&frames, 2).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let pt = tape.constant(patches.clone());
            let enc = params.bind(&mut tape, false);
            let tokens = encode(&mut tape, &enc, 1, pt, 2).unwrap();
            tape.value(tokens).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn views_share_weights_except_positions() {
        // With positions zeroed, all views encode identically.
        let mut r = rng();
        let mut params = EncoderParams::<f32>::init(12, 8, 4, 3, 2, &mut r);
        for p in &mut params.pos {
            *p = Array::zeros(&[4, 8]);
        }
        let frames = init_normal::<f32>(&[1, 4, 4, 3], 1.0, &mut r);
        let patches = patchify(&frames, 2).unwrap();
        let mut tape = Tape::new();
        let pt = tape.constant(patches);
        let enc = params.bind(&mut tape, false);
        let a = encode(&mut tape, &enc, 0, pt, 2).unwrap();
        let b = encode(&mut tape, &enc, 2, pt, 2).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
    }

    #[test]
    fn zero_position_encoder_is_permutation_equivariant() {
        let mut r = rng();
        let mut params = EncoderParams::<f64>::init(12, 8, 4, 1, 2, &mut r);
        params.pos[0] = Array::zeros(&[4, 8]);
        let patches = init_normal::<f64>(&[1, 4, 12], 1.0, &mut r);
        let perm = [2usize, 0, 3, 1];
        let permuted = Array::from_fn(&[1, 4, 12], |i| {
            let (tok, col) = (i / 12, i % 12);
            patches.data()[perm[tok] * 12 + col]
        })
        .unwrap();
        let encode_one = |input: Array<f64>| {
            let mut tape = Tape::new();
            let pt = tape.constant(input);
            let enc = params.bind(&mut tape, false);
            let tokens = encode(&mut tape, &enc, 0, pt, 2).unwrap();
            tape.value(tokens).data().to_vec()
        };
        let base = encode_one(patches.clone());
        let shuffled = encode_one(permuted);
        for tok in 0..4 {
            for c in 0..8 {
                let a = base[perm[tok] * 8 + c];
                let b = shuffled[tok * 8 + c];
                assert!((a - b).abs() < 1e-5, "token {tok} dim {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn encoder_gradients_verify_for_all_groups() {
        let mut r = rng();
        let params = EncoderParams::<f64>::init(12, 8, 4, 2, 2, &mut r);
        let shapes: Vec<Vec<usize>> = params.arrays().iter().map(|(_, a)| a.shape().to_vec()).collect();
        let patches = init_normal::<f64>(&[2, 4, 12], 1.0, &mut r);
        let settings = GradCheckSettings { probes: 6, coord_cap: 80, ..GradCheckSettings::default() };
        let report = check_gradients("encode", &shapes, &settings, 7, move |tape, ids| {
            let enc = EncoderParams::<f64>::wire(2, 2, &mut ids.iter().copied());
            let pt = tape.constant(patches.clone());
            let tokens = encode(tape, &enc, 1, pt, 2)?;
            tape.mean_all(tokens)
        })
        .unwrap();
        assert!(report.pass(), "{report}");
    }
}
