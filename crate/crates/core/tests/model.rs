use daevi_core::bmpcf::{deinterleave_channels, interleave_channels, Bmpcf};
use daevi_core::codec::{Decoder, DecoderSpec, Encoder, EncoderSpec};
use daevi_core::ded::{loss_ded_value, Discriminator, HingeVariant, DEFAULT_CHANNELS};
use daevi_core::numerics::ConvGeometry;
use daevi_core::params::{Conv2d, ParamStore};
use daevi_core::rng::SplitMix64;
use daevi_core::stgde::{compute_attention, patchify, unpatchify, Block, MaskRule, PatchGrid, Stgde, TokenMask};
use daevi_core::{Array, Real, Tape};
use proptest::prelude::*;

fn random<T: Real>(rng: &mut SplitMix64, shape: &[usize]) -> Array<T> {
    Array::from_fn(shape, |_| T::from_f64(rng.uniform(-1.0, 1.0)))
}

fn zero_conv<T: Real>(store: &mut ParamStore<T>, conv: &Conv2d) {
    store.get_mut(conv.weight).data_mut().fill(T::zero());
    if let Some(b) = conv.bias {
        store.get_mut(b).data_mut().fill(T::zero());
    }
}

/// Every `(n, c)` plane of `a` holds a single value.
fn planes_constant<T: Real>(a: &Array<T>) -> bool {
    let s = a.shape();
    let plane = s[2] * s[3];
    a.data().chunks(plane).all(|p| p.iter().all(|&v| v == p[0]))
}

#[test]
fn encoder_latent_is_quarter_resolution_with_4c_channels() {
    for (hw, t) in [(64usize, 2usize), (288, 1)] {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new("enc", EncoderSpec { in_channels: 3, base_channels: 8 }, &mut store, &mut SplitMix64::new(1));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Array::full(&[t, 3, hw, hw], 0.5));
        let f = enc.encode_frames(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(f), &[t, 32, hw / 4, hw / 4]);
    }
}

#[test]
fn zero_input_encodes_to_constant_planes() {
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new("enc", EncoderSpec { in_channels: 3, base_channels: 2 }, &mut store, &mut SplitMix64::new(2));
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let x = tape.constant(Array::zeros(&[2, 3, 16, 16]));
    let f = enc.encode_frames(&mut tape, &p, x).unwrap();
    assert!(planes_constant(tape.value(f)));
}

#[test]
fn decoder_maps_latent_back_to_frames() {
    let mut store = ParamStore::<f32>::new();
    let dec = Decoder::new("dec", DecoderSpec { base_channels: 8, out_channels: 3 }, &mut store, &mut SplitMix64::new(3));
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let mut rng = SplitMix64::new(4);
    let f = tape.constant(random(&mut rng, &[2, 32, 16, 16]));
    let y = dec.decode_frames(&mut tape, &p, f).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 64, 64]);

    let c = tape.constant(Array::full(&[1, 32, 4, 4], 0.3));
    let y = dec.decode_frames(&mut tape, &p, c).unwrap();
    assert!(planes_constant(tape.value(y)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn codec_round_trip_keeps_shape_and_range(seed in any::<u64>(), t in 1usize..3, h4 in 1usize..5, w4 in 1usize..5, scale in 0.1f64..50.0) {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(seed);
        let enc = Encoder::new("enc", EncoderSpec { in_channels: 3, base_channels: 2 }, &mut store, &mut rng);
        let dec = Decoder::new("dec", DecoderSpec { base_channels: 2, out_channels: 3 }, &mut store, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = Array::from_fn(&[t, 3, 4 * h4, 4 * w4], |_| rng.uniform(-scale, scale));
        let x = tape.constant(x);
        let f = enc.encode_frames(&mut tape, &p, x).unwrap();
        let y = dec.decode_frames(&mut tape, &p, f).unwrap();
        prop_assert_eq!(tape.shape(y), &[t, 3, 4 * h4, 4 * w4]);
        prop_assert!(tape.value(y).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

fn block_f64(c: usize, seed: u64) -> (Block, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let block = Block::new("b", c, 2, &mut store, &mut SplitMix64::new(seed));
    (block, store)
}

#[test]
fn zero_projections_give_zero_qkv() {
    let (block, mut store) = block_f64(3, 5);
    for conv in [&block.query, &block.key, &block.value, &block.value_dw] {
        zero_conv(&mut store, conv);
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let f = tape.constant(random(&mut SplitMix64::new(6), &[2, 3, 4, 4]));
    let (q, k, v) = block.project_qkv(&mut tape, &p, f).unwrap();
    for x in [q, k, v] {
        assert!(tape.value(x).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn value_enhancement_is_a_depthwise_conv() {
    let (c, h, w) = (3, 5, 6);
    let (block, mut store) = block_f64(c, 7);
    let x = random::<f64>(&mut SplitMix64::new(8), &[2, c, h, w]);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let f = tape.constant(x.clone());
    let (_, _, v) = block.project_qkv(&mut tape, &p, f).unwrap();
    let plain = block.value.forward(&mut tape, &p, f).unwrap();
    let enhancement = tape.sub(v, plain).unwrap();

    let wd = store.get(block.value_dw.weight).data();
    let bd = store.get(block.value_dw.bias.unwrap()).data();
    for n in 0..2 {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = bd[ch];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
                            let ix = (xx as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
                            s += x.data()[((n * c + ch) * h + iy) * w + ix] * wd[ch * 9 + ky * 3 + kx];
                        }
                    }
                    let got = tape.value(enhancement).data()[((n * c + ch) * h + y) * w + xx];
                    assert!((got - s).abs() < 1e-6);
                }
            }
        }
    }

    zero_conv(&mut store, &block.value_dw);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let f = tape.constant(x);
    let (_, _, v) = block.project_qkv(&mut tape, &p, f).unwrap();
    let plain = block.value.forward(&mut tape, &p, f).unwrap();
    assert_eq!(tape.value(v), tape.value(plain));
}

#[test]
fn patchify_round_trip_on_the_reference_shape() {
    let x = random::<f32>(&mut SplitMix64::new(9), &[5, 8, 8, 8]);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let grid = PatchGrid::new(2, 2);
    let tokens = patchify(&mut tape, v, 1, grid).unwrap();
    assert_eq!(tape.shape(tokens), &[1, 20, 8 * 4 * 4]);
    let back = unpatchify(&mut tape, tokens, 8, 8, 8, grid).unwrap();
    assert_eq!(tape.value(back), &x);
}

fn attention_weights(q: &[f64], k: &[f64], tokens: usize, len: usize, valid: &[bool], grid: PatchGrid, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::<f64>::new();
    let qv = tape.constant(Array::new(&[1, tokens, len], q.to_vec()).unwrap());
    let kv = tape.constant(Array::new(&[1, tokens, len], k.to_vec()).unwrap());
    let vv = tape.constant(Array::from_fn(&[1, tokens, len], |i| i as f64));
    let mask = TokenMask { clips: 1, tokens_per_clip: tokens, valid: valid.to_vec() };
    let att = compute_attention(&mut tape, qv, kv, vv, &mask, grid, c, MaskRule::Additive).unwrap();
    (tape.value(att.weights).data().to_vec(), tape.value(att.output).data().to_vec())
}

#[test]
fn attention_examples() {
    let one = PatchGrid::new(1, 1);
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(Array::from_f64(&[1, 1, 1], &[2.0]).unwrap());
    let v = tape.constant(Array::from_f64(&[1, 1, 1], &[-3.5]).unwrap());
    let mask = TokenMask::all_valid(1, 1);
    let att = compute_attention(&mut tape, q, q, v, &mask, one, 1, MaskRule::Additive).unwrap();
    let scores = tape.matmul_t(q, q, false, true).unwrap();
    assert_eq!(tape.value(scores).data(), &[4.0]);
    assert_eq!(tape.value(att.weights).data(), &[1.0]);
    assert_eq!(tape.value(att.output).data(), &[-3.5]);

    let (w, _) = attention_weights(&[1.0, 1.0], &[0.7, 0.7], 2, 1, &[true, true], one, 1);
    assert_eq!(w, vec![0.5, 0.5, 0.5, 0.5]);
    let (w, _) = attention_weights(&[1.0, -1.0], &[-5.0, 9.0], 2, 1, &[true, false], one, 1);
    assert_eq!(w, vec![1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn multiplicative_rule_still_weights_masked_keys() {
    let one = PatchGrid::new(1, 1);
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(Array::from_f64(&[1, 2, 1], &[1.0, 1.0]).unwrap());
    let v = tape.constant(Array::from_f64(&[1, 2, 1], &[1.0, 2.0]).unwrap());
    let mask = TokenMask { clips: 1, tokens_per_clip: 2, valid: vec![true, false] };
    let att = compute_attention(&mut tape, q, q, v, &mask, one, 1, MaskRule::Multiplicative).unwrap();
    let w = tape.value(att.weights).data();
    let e = 1.0f64.exp();
    assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
    assert!(w[1] > 0.0);
}

#[test]
fn attention_matches_direct_evaluation_on_20_tokens() {
    let (tokens, len, c) = (20, 12, 3);
    let grid = PatchGrid::new(2, 2);
    for seed in 0..5u64 {
        let mut rng = SplitMix64::new(100 + seed);
        let q: Vec<f32> = (0..tokens * len).map(|_| rng.uniform(-1.5, 1.5) as f32).collect();
        let k: Vec<f32> = (0..tokens * len).map(|_| rng.uniform(-1.5, 1.5) as f32).collect();
        let v: Vec<f32> = (0..tokens * len).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let valid: Vec<bool> = (0..tokens).map(|i| i % 7 == 0 || rng.next_f64() > 0.3).collect();
        let mut tape = Tape::<f32>::new();
        let qv = tape.constant(Array::new(&[1, tokens, len], q.clone()).unwrap());
        let kv = tape.constant(Array::new(&[1, tokens, len], k.clone()).unwrap());
        let vv = tape.constant(Array::new(&[1, tokens, len], v.clone()).unwrap());
        let mask = TokenMask { clips: 1, tokens_per_clip: tokens, valid: valid.clone() };
        let att = compute_attention(&mut tape, qv, kv, vv, &mask, grid, c, MaskRule::Additive).unwrap();

        let scale = 1.0 / ((grid.patches() * c) as f64).sqrt();
        for i in 0..tokens {
            let s: Vec<f64> = (0..tokens)
                .map(|j| (0..len).map(|d| q[i * len + d] as f64 * k[j * len + d] as f64).sum::<f64>() * scale)
                .collect();
            let e: Vec<f64> = (0..tokens).map(|j| if valid[j] { s[j].exp() } else { 0.0 }).collect();
            let z: f64 = e.iter().sum();
            for j in 0..tokens {
                let got = tape.value(att.weights).data()[i * tokens + j] as f64;
                assert!((got - e[j] / z).abs() < 1e-5);
            }
            for d in 0..len {
                let want: f64 = (0..tokens).map(|j| e[j] / z * v[j * len + d] as f64).sum();
                let got = tape.value(att.output).data()[i * len + d] as f64;
                assert!((got - want).abs() < 1e-5);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_normalise_over_valid_keys(seed in any::<u64>(), tokens in 1usize..12, len in 1usize..6, valid_bits in any::<u32>()) {
        let mut rng = SplitMix64::new(seed);
        let q: Vec<f64> = (0..tokens * len).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let k: Vec<f64> = (0..tokens * len).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let valid: Vec<bool> = (0..tokens).map(|j| (valid_bits >> j) & 1 == 1).collect();
        let (w, _) = attention_weights(&q, &k, tokens, len, &valid, PatchGrid::new(1, 1), 1);
        let any_valid = valid.iter().any(|&v| v);
        for i in 0..tokens {
            let row = &w[i * tokens..(i + 1) * tokens];
            let sum: f64 = row.iter().sum();
            if any_valid {
                prop_assert!((sum - 1.0).abs() <= 1e-6);
            } else {
                prop_assert_eq!(sum, 0.0);
            }
            for j in 0..tokens {
                if !valid[j] {
                    prop_assert_eq!(row[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn patchify_is_a_bijection(seed in any::<u64>(), clips in 1usize..3, frames in 1usize..3, c in 1usize..4, r1 in 1usize..4, r2 in 1usize..4, ph in 1usize..4, pw in 1usize..4) {
        let (h, w) = (r1 * ph, r2 * pw);
        let x = random::<f64>(&mut SplitMix64::new(seed), &[clips * frames, c, h, w]);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let grid = PatchGrid::new(r1, r2);
        let tokens = patchify(&mut tape, v, clips, grid).unwrap();
        prop_assert_eq!(tape.shape(tokens), &[clips, frames * r1 * r2, c * ph * pw]);
        let back = unpatchify(&mut tape, tokens, c, h, w, grid).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }
}

#[test]
fn zeroed_residual_branches_make_the_block_an_identity() {
    let (block, mut store) = block_f64(4, 10);
    zero_conv(&mut store, &block.out_proj);
    zero_conv(&mut store, &block.ffn_out);
    let x = random::<f64>(&mut SplitMix64::new(11), &[3, 4, 4, 4]);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let f = tape.constant(x.clone());
    let mask = TokenMask::all_valid(1, 12);
    let (next, att) = block.block_forward(&mut tape, &p, f, &mask, PatchGrid::new(2, 2), MaskRule::Additive).unwrap();
    assert_eq!(tape.value(next), &x);
    assert_eq!(tape.shape(att), &[3, 4, 4, 4]);
}

#[test]
fn block_without_enhancement_equals_the_plain_composition() {
    let (block, mut store) = block_f64(2, 12);
    zero_conv(&mut store, &block.value_dw);
    let grid = PatchGrid::new(2, 2);
    let x = random::<f64>(&mut SplitMix64::new(13), &[2, 2, 4, 6]);
    let mask = TokenMask { clips: 1, tokens_per_clip: 8, valid: vec![true, false, true, true, false, true, true, true] };
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let f = tape.constant(x);
    let (next, _) = block.block_forward(&mut tape, &p, f, &mask, grid, MaskRule::Additive).unwrap();

    let q = block.query.forward(&mut tape, &p, f).unwrap();
    let k = block.key.forward(&mut tape, &p, f).unwrap();
    let v = block.value.forward(&mut tape, &p, f).unwrap();
    let (qp, kp, vp) = (patchify(&mut tape, q, 1, grid).unwrap(), patchify(&mut tape, k, 1, grid).unwrap(), patchify(&mut tape, v, 1, grid).unwrap());
    let att = compute_attention(&mut tape, qp, kp, vp, &mask, grid, 2, MaskRule::Additive).unwrap();
    let f_att = unpatchify(&mut tape, att.output, 2, 4, 6, grid).unwrap();
    let proj = block.out_proj.forward(&mut tape, &p, f_att).unwrap();
    let mid = tape.add(f, proj).unwrap();
    let h = block.ffn_in.forward(&mut tape, &p, mid).unwrap();
    let h = tape.relu(h).unwrap();
    let out = block.ffn_out.forward(&mut tape, &p, h).unwrap();
    let plain = tape.add(mid, out).unwrap();
    assert_eq!(tape.value(next), tape.value(plain));
}

fn stgde_f64(blocks: usize, base: usize, seed: u64) -> (Stgde, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let s = Stgde::new(blocks, base, 2, PatchGrid::new(2, 2), MaskRule::Additive, &mut store, &mut SplitMix64::new(seed));
    (s, store)
}

#[test]
fn identity_depth_projections_sum_the_attention_maps() {
    let (s, mut store) = stgde_f64(2, 1, 14);
    for b in &s.blocks {
        let w = store.get_mut(b.depth_proj.weight);
        let c = w.shape()[0];
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v = if i / c == i % c { 1.0 } else { 0.0 };
        }
        store.get_mut(b.depth_proj.bias.unwrap()).data_mut().fill(0.0);
    }
    let mut rng = SplitMix64::new(15);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let a1 = tape.constant(random(&mut rng, &[2, 4, 4, 4]));
    let a2 = tape.constant(random(&mut rng, &[2, 4, 4, 4]));
    let agg = s.aggregate_attention(&mut tape, &p, &[a1, a2]).unwrap();
    let sum = tape.add(a1, a2).unwrap();
    assert_eq!(tape.value(agg), tape.value(sum));
}

#[test]
fn depth_from_vanishing_attention_is_constant_and_in_range() {
    let (s, store) = stgde_f64(2, 1, 16);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let z = tape.constant(Array::zeros(&[2, 4, 4, 4]));
    let d = s.estimate_depth(&mut tape, &p, &[z, z]).unwrap();
    assert_eq!(tape.shape(d), &[2, 1, 16, 16]);
    assert!(planes_constant(tape.value(d)));
}

#[test]
fn full_resolution_depth_has_frame_shape_and_unit_range() {
    let mut store = ParamStore::<f32>::new();
    let s = Stgde::new(2, 8, 4, PatchGrid::new(2, 2), MaskRule::Additive, &mut store, &mut SplitMix64::new(17));
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let f = tape.constant(random(&mut SplitMix64::new(18), &[2, 32, 16, 16]));
    let out = s.forward(&mut tape, &p, f, &TokenMask::all_valid(1, 8)).unwrap();
    assert_eq!(tape.shape(out.depth), &[2, 1, 64, 64]);
    assert!(tape.value(out.depth).data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(out.attention.len(), 2);
}

#[test]
fn depth_head_ignores_the_order_of_its_blocks() {
    let (s, store) = stgde_f64(4, 1, 19);
    let mut rng = SplitMix64::new(20);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let att: Vec<_> = (0..4).map(|_| tape.constant(random(&mut rng, &[1, 4, 4, 4]))).collect();
    let d = s.estimate_depth(&mut tape, &p, &att).unwrap();
    let order = [2usize, 0, 3, 1];
    let mut permuted = s.clone();
    permuted.blocks = order.iter().map(|&i| s.blocks[i].clone()).collect();
    let patt: Vec<_> = order.iter().map(|&i| att[i]).collect();
    let dp = permuted.estimate_depth(&mut tape, &p, &patt).unwrap();
    assert!(tape.value(d).max_abs_diff(tape.value(dp)) <= 1e-6);
}

#[test]
fn every_block_feeds_the_depth_head() {
    let (s, store) = stgde_f64(8, 1, 21);
    let mut rng = SplitMix64::new(22);
    let x = random::<f64>(&mut rng, &[2, 4, 4, 4]);
    let mask = TokenMask::all_valid(1, 8);
    let depth = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let f = tape.constant(x.clone());
        let out = s.forward(&mut tape, &p, f, &mask).unwrap();
        tape.value(out.depth).clone()
    };
    let base = depth(&store);
    for (i, b) in s.blocks.iter().enumerate() {
        let mut ablated = store.clone();
        zero_conv(&mut ablated, &b.depth_proj);
        assert_ne!(depth(&ablated), base, "zeroing P_D of block {i} left the depth unchanged");
    }
}

fn bmpcf_f64(base: usize, kernel: usize, seed: u64) -> (Bmpcf, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let b = Bmpcf::new(base, kernel, &mut store, &mut SplitMix64::new(seed));
    (b, store)
}

#[test]
fn depth_encoder_matches_the_visual_latent() {
    let mut store = ParamStore::<f32>::new();
    let b = Bmpcf::new(8, 3, &mut store, &mut SplitMix64::new(23));
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let visual = tape.constant(Array::zeros(&[2, 32, 16, 16]));
    let d = tape.constant(Array::full(&[2, 1, 64, 64], 0.4));
    let f_d = b.encode_depth(&mut tape, &p, d, visual).unwrap();
    assert_eq!(tape.shape(f_d), &[2, 32, 16, 16]);
    assert!(planes_constant(tape.value(f_d)));
}

#[test]
fn interleave_round_trip_with_sixteen_channels() {
    let mut rng = SplitMix64::new(24);
    let v = random::<f32>(&mut rng, &[2, 16, 3, 5]);
    let d = random::<f32>(&mut rng, &[2, 16, 3, 5]);
    let mut tape = Tape::new();
    let (vv, dv) = (tape.constant(v.clone()), tape.constant(d.clone()));
    let paired = interleave_channels(&mut tape, vv, dv).unwrap();
    let plane = 15;
    for n in 0..2 {
        for c in 0..16 {
            let at = |k: usize| &tape.value(paired).data()[(n * 32 + k) * plane..(n * 32 + k + 1) * plane];
            assert_eq!(at(2 * c), &v.data()[(n * 16 + c) * plane..(n * 16 + c + 1) * plane]);
            assert_eq!(at(2 * c + 1), &d.data()[(n * 16 + c) * plane..(n * 16 + c + 1) * plane]);
        }
    }
    let (bv, bd) = deinterleave_channels(&mut tape, paired).unwrap();
    assert_eq!(tape.value(bv), &v);
    assert_eq!(tape.value(bd), &d);
}

fn fuse_with_pair_weights(a: f64, b: f64) -> (Array<f64>, Array<f64>, Array<f64>) {
    let (m, mut store) = bmpcf_f64(1, 1, 25);
    let w = store.get_mut(m.fuse.weight);
    for (i, x) in w.data_mut().iter_mut().enumerate() {
        *x = if i % 2 == 0 { a } else { b };
    }
    store.get_mut(m.fuse.bias.unwrap()).data_mut().fill(0.0);
    let mut rng = SplitMix64::new(26);
    let v = random::<f64>(&mut rng, &[2, 4, 3, 3]);
    let d = random::<f64>(&mut rng, &[2, 4, 3, 3]);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let (vv, dv) = (tape.constant(v.clone()), tape.constant(d.clone()));
    let paired = interleave_channels(&mut tape, vv, dv).unwrap();
    let out = m.fuse_pairs(&mut tape, &p, paired).unwrap();
    (tape.value(out).clone(), v, d)
}

#[test]
fn selection_and_averaging_kernels_are_exact() {
    let (out, v, _) = fuse_with_pair_weights(1.0, 0.0);
    assert_eq!(out, v);
    let (out, v, d) = fuse_with_pair_weights(0.5, 0.5);
    for ((o, a), b) in out.data().iter().zip(v.data()).zip(d.data()) {
        assert_eq!(*o, (a + b) * 0.5);
    }
}

#[test]
fn each_fused_channel_sees_only_its_pair() {
    let (m, store) = bmpcf_f64(2, 3, 27);
    let c = m.channels;
    let mut rng = SplitMix64::new(28);
    let paired = random::<f64>(&mut rng, &[1, 2 * c, 4, 4]);
    let fuse = |x: &Array<f64>| {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = m.fuse_pairs(&mut tape, &p, xv).unwrap();
        tape.value(y).clone()
    };
    let base = fuse(&paired);
    let plane = 16;
    for k in 0..2 * c {
        let mut probe = paired.clone();
        for v in &mut probe.data_mut()[k * plane..(k + 1) * plane] {
            *v += 0.75;
        }
        let out = fuse(&probe);
        for i in 0..c {
            let changed = out.data()[i * plane..(i + 1) * plane] != base.data()[i * plane..(i + 1) * plane];
            assert_eq!(changed, i == k / 2, "input channel {k}, output channel {i}");
        }
    }
}

#[test]
fn without_depth_fusion_is_a_per_channel_conv_of_the_visual_branch() {
    let (m, store) = bmpcf_f64(1, 3, 29);
    let c = m.channels;
    let v = random::<f64>(&mut SplitMix64::new(30), &[2, c, 4, 4]);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let vv = tape.constant(v.clone());
    let zero = tape.constant(Array::zeros(&[2, c, 4, 4]));
    let paired = interleave_channels(&mut tape, vv, zero).unwrap();
    let fused = m.fuse_pairs(&mut tape, &p, paired).unwrap();

    let w = store.get(m.fuse.weight);
    let visual_taps = Array::from_fn(&[c, 1, 3, 3], |i| w.data()[(i / 9) * 18 + i % 9]);
    let wt = tape.constant(visual_taps);
    let b = tape.constant(store.get(m.fuse.bias.unwrap()).clone());
    let direct = tape.conv2d(vv, wt, Some(b), ConvGeometry::conv2d(1, 1, c, m.fuse.geo.pad_mode)).unwrap();
    assert!(tape.value(fused).max_abs_diff(tape.value(direct)) < 1e-12);
}

fn discriminator_f64(channels: &[usize], seed: u64) -> (Discriminator<f64>, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let d = Discriminator::new(channels, &mut store, &mut SplitMix64::new(seed)).unwrap();
    (d, store)
}

#[test]
fn zero_discriminator_scores_its_head_bias() {
    let (d, mut store) = discriminator_f64(&[3, 3, 3], 31);
    for v in store.values_mut() {
        v.data_mut().fill(0.0);
    }
    store.get_mut(d.head.bias).data_mut()[0] = 0.37;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let x = tape.constant(random(&mut SplitMix64::new(32), &[2, 4, 2, 8, 8]));
    let s = d.discriminate(&mut tape, &p, x).unwrap();
    // the mean over score patches rounds at the last ulp
    assert!(tape.value(s).data().iter().all(|v| (v - 0.37).abs() < 1e-15));
}

#[test]
fn default_discriminator_scores_are_finite() {
    let mut store = ParamStore::<f32>::new();
    let mut d = Discriminator::new(&DEFAULT_CHANNELS, &mut store, &mut SplitMix64::new(33)).unwrap();
    d.warm_up(&store, 30);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let mut rng = SplitMix64::new(34);
    let x = tape.constant(Array::from_fn(&[2, 4, 5, 32, 32], |_| rng.next_f64() as f32));
    let s = d.discriminate(&mut tape, &p, x).unwrap();
    assert_eq!(tape.shape(s), &[2]);
    assert!(tape.value(s).data().iter().all(|v| v.is_finite()));
}

/// Leading singular value by running power iteration to convergence.
fn top_singular_value(w: &Array<f64>) -> f64 {
    let rows = w.shape()[0];
    let cols = w.len() / rows;
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..2000 {
        let u: Vec<f64> = (0..rows).map(|r| (0..cols).map(|c| w.data()[r * cols + c] * v[c]).sum()).collect();
        let mut nv: Vec<f64> = (0..cols).map(|c| (0..rows).map(|r| w.data()[r * cols + c] * u[r]).sum()).collect();
        let n = nv.iter().map(|x| x * x).sum::<f64>().sqrt();
        nv.iter_mut().for_each(|x| *x /= n);
        sigma = n.sqrt();
        v = nv;
    }
    sigma
}

#[test]
fn spectral_normalisation_bounds_every_layer() {
    let (mut d, mut store) = discriminator_f64(&DEFAULT_CHANNELS, 35);
    d.warm_up(&store, 30);
    let mut rng = SplitMix64::new(36);
    for round in 0..4 {
        for layer in d.layers() {
            let w = store.get(layer.weight);
            let normalised = top_singular_value(w) / layer.sigma(w);
            assert!(normalised <= 1.05, "round {round}: normalised spectral norm {normalised}");
        }
        for v in store.values_mut() {
            for x in v.data_mut() {
                *x += 1e-3 * rng.uniform(-1.0, 1.0);
            }
        }
        d.power_iteration(&store);
    }
}

proptest! {
    #[test]
    fn discriminator_loss_is_a_nonnegative_hinge(real in prop::collection::vec(-3.0f64..3.0, 1..6), shift in -3.0f64..3.0) {
        let fake: Vec<f64> = real.iter().map(|r| r + shift).collect();
        let l = loss_ded_value(&real, &fake, HingeVariant::AsPrinted).unwrap();
        prop_assert!(l >= 0.0);
        let satisfied = real.iter().all(|&r| r >= 1.0) && fake.iter().all(|&f| f <= 0.0);
        prop_assert_eq!(l == 0.0, satisfied);
    }

    #[test]
    fn generator_loss_gradient_is_exactly_minus_one_over_batch(fake in prop::collection::vec(-5.0f64..5.0, 1..9)) {
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(Array::from_f64(&[fake.len()], &fake).unwrap());
        let l = daevi_core::ded::loss_gen(&mut tape, f).unwrap();
        let g = tape.backward(l).unwrap();
        let want = -1.0 / fake.len() as f64;
        prop_assert!(g.get(f).unwrap().data().iter().all(|&x| x == want));
    }
}

