use daevi_core::config::RunConfig;
use daevi_core::data::{generate_clip, generate_masks, Clip, MaskSpec, SyntheticScene};
use daevi_core::inference::{composite, inpaint_video, plan_windows, InferenceMode};
use daevi_core::losses::LossWeights;
use daevi_core::rng::SplitMix64;
use daevi_core::training::{sample_batch, Dataset, LossReport, Trainer};
use daevi_core::Error;
use proptest::prelude::*;

fn micro(seed: u64) -> RunConfig {
    let mut cfg = RunConfig { seed, ..Default::default() };
    cfg.model.blocks = 1;
    cfg.model.base_channels = 2;
    cfg.model.discriminator_channels = vec![2, 2];
    cfg.data.height = 16;
    cfg.data.width = 16;
    cfg.data.clip_frames = 6;
    cfg.data.clips = 2;
    cfg.training.batch_size = 1;
    cfg.training.frames = 2;
    cfg.training.spectral_warmup = 2;
    cfg.inference.window = 2;
    cfg.inference.references = 2;
    cfg
}

fn trace(cfg: &RunConfig, steps: u64) -> Vec<LossReport> {
    let ds = Dataset::synthetic(&cfg.data).unwrap();
    let mut tr = Trainer::<f32>::new(cfg.clone()).unwrap();
    (0..steps).map(|_| {
        let b = tr.next_batch(&ds).unwrap();
        tr.train_step(&b).unwrap()
    }).collect()
}

#[test]
fn sampler_alternates_consecutive_and_random_frames() {
    let mut cfg = micro(4);
    cfg.data.clip_frames = 10;
    cfg.training.frames = 5;
    let ds = Dataset::synthetic(&cfg.data).unwrap();
    let even = sample_batch(&ds, 0, 4, &cfg.training).unwrap();
    assert!(even.indices[0].1.windows(2).all(|w| w[1] == w[0] + 1));
    let odd = sample_batch(&ds, 1, 4, &cfg.training).unwrap();
    assert!(odd.indices[0].1.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(odd, sample_batch(&ds, 1, 4, &cfg.training).unwrap());
    assert_eq!(even.frames.frames, 5);
    assert_eq!(even.masks.channels, 1);

    cfg.training.frames = 11;
    assert!(matches!(sample_batch(&ds, 0, 4, &cfg.training), Err(Error::Data(_))));
}

#[test]
fn a_generator_step_reduces_the_image_loss() {
    let mut cfg = micro(11);
    cfg.loss = LossWeights { lambda_i: 1.0, ..LossWeights::zero() };
    let ds = Dataset::synthetic(&cfg.data).unwrap();
    let mut tr = Trainer::<f32>::new(cfg).unwrap();
    let b = tr.next_batch(&ds).unwrap();
    let before = tr.evaluate(&b).unwrap();
    tr.train_step(&b).unwrap();
    let after = tr.evaluate(&b).unwrap();
    assert!(after.l_i < before.l_i, "{} -> {}", before.l_i, after.l_i);
}

#[test]
fn a_discriminator_step_does_not_raise_its_loss() {
    let cfg = micro(12);
    let ds = Dataset::synthetic(&cfg.data).unwrap();
    let mut tr = Trainer::<f32>::new(cfg).unwrap();
    let b = tr.next_batch(&ds).unwrap();
    let l1 = tr.discriminator_step(&b).unwrap();
    let l2 = tr.discriminator_step(&b).unwrap();
    assert!(l2 <= l1, "{l1} -> {l2}");
}

#[test]
fn reports_recombine_to_the_optimised_total() {
    let cfg = micro(13);
    let ds = Dataset::synthetic(&cfg.data).unwrap();
    let mut tr = Trainer::<f32>::new(cfg).unwrap();
    for i in 0..5 {
        let b = tr.next_batch(&ds).unwrap();
        let r = tr.train_step(&b).unwrap();
        assert_eq!(r.iteration, i);
        assert!((r.total - tr.recombine(&r)).abs() <= 1e-6 * (1.0 + r.total.abs()), "{r:?}");
    }
}

#[test]
fn runs_are_reproducible() {
    let cfg = micro(21);
    let a = trace(&cfg, 100);
    let b = trace(&cfg, 100);
    assert_eq!(a, b);
    assert_ne!(trace(&micro(22), 3), a[..3].to_vec());
}

#[test]
fn resuming_from_an_exported_state_is_bit_identical() {
    let cfg = micro(31);
    let ds = Dataset::synthetic(&cfg.data).unwrap();
    let mut tr = Trainer::<f32>::new(cfg.clone()).unwrap();
    for _ in 0..7 {
        let b = tr.next_batch(&ds).unwrap();
        tr.train_step(&b).unwrap();
    }
    let state = tr.export_state();
    let mut resumed = Trainer::<f32>::new(cfg).unwrap();
    resumed.import_state(state).unwrap();
    for _ in 0..10 {
        let (ba, bb) = (tr.next_batch(&ds).unwrap(), resumed.next_batch(&ds).unwrap());
        assert_eq!(ba, bb);
        assert_eq!(tr.train_step(&ba).unwrap(), resumed.train_step(&bb).unwrap());
    }
    assert_eq!(tr.export_state().tensors, resumed.export_state().tensors);
}

#[test]
fn import_rejects_a_foreign_state() {
    let mut other = micro(31);
    other.model.blocks = 2;
    let state = Trainer::<f32>::new(other).unwrap().export_state();
    let mut tr = Trainer::<f32>::new(micro(31)).unwrap();
    assert!(matches!(tr.import_state(state), Err(Error::Data(_))));

    let mut state = tr.export_state();
    state.rng_state ^= 1;
    assert!(matches!(tr.import_state(state), Err(Error::Data(_))));
}

fn video(len: usize, seed: u64) -> (Clip, Clip) {
    let (frames, _) = generate_clip(&SyntheticScene::from_seed(seed), len, 16, 16).unwrap();
    let masks = generate_masks(&MaskSpec { seed, fraction: 0.15, ..MaskSpec::default() }, len, 16, 16).unwrap();
    (frames, masks)
}

#[test]
fn online_outputs_ignore_future_frames() {
    let cfg = micro(41);
    let tr = Trainer::<f32>::new(cfg.clone()).unwrap();
    let grid = cfg.model.grid();
    let (frames, masks) = video(12, 5);
    let windows = plan_windows(12, &cfg.inference, InferenceMode::Online, cfg.seed).unwrap();
    let base = inpaint_video(&tr.generator, &tr.gen_params, grid, &frames, &masks, &windows, |_, _, _| {}).unwrap();

    let cut = 6;
    let n = frames.frame_len();
    let mut rng = SplitMix64::new(99);
    let mut future = frames.clone();
    for v in &mut future.data[cut * n..] {
        *v = rng.next_f64() as f32;
    }
    let mut future_masks = masks.clone();
    for v in &mut future_masks.data[cut * 256..] {
        *v = 1.0 - *v;
    }
    let changed = inpaint_video(&tr.generator, &tr.gen_params, grid, &future, &future_masks, &windows, |_, _, _| {}).unwrap();
    assert_eq!(&base.data[..cut * n], &changed.data[..cut * n]);
    assert_ne!(&base.data[cut * n..], &changed.data[cut * n..]);
}

#[test]
fn offline_outputs_do_see_future_frames() {
    let cfg = micro(42);
    let tr = Trainer::<f32>::new(cfg.clone()).unwrap();
    let (frames, masks) = video(6, 6);
    let windows = plan_windows(6, &cfg.inference, InferenceMode::Offline, cfg.seed).unwrap();
    assert!(windows[0].references.iter().all(|&r| r >= 2));
    let grid = cfg.model.grid();
    let base = inpaint_video(&tr.generator, &tr.gen_params, grid, &frames, &masks, &windows, |_, _, _| {}).unwrap();
    let n = frames.frame_len();
    let mut future = frames.clone();
    for v in &mut future.data[2 * n..] {
        *v = 1.0 - *v;
    }
    let changed = inpaint_video(&tr.generator, &tr.gen_params, grid, &future, &masks, &windows, |_, _, _| {}).unwrap();
    assert_ne!(&base.data[..2 * n], &changed.data[..2 * n]);
}

#[test]
fn a_five_frame_video_is_one_window() {
    let mut cfg = micro(43).inference;
    cfg.window = 5;
    cfg.references = 10;
    for mode in [InferenceMode::Offline, InferenceMode::Online] {
        let w = plan_windows(5, &cfg, mode, 0).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].targets, vec![0, 1, 2, 3, 4]);
        assert_eq!(w[0].write, w[0].targets);
        assert_eq!(w[0].references.len(), 10);
    }
}

#[test]
fn inpainting_keeps_valid_pixels_order_and_count() {
    let cfg = micro(44);
    let tr = Trainer::<f32>::new(cfg.clone()).unwrap();
    let (frames, masks) = video(7, 8);
    let windows = plan_windows(7, &cfg.inference, InferenceMode::Offline, cfg.seed).unwrap();
    let mut seen = Vec::new();
    let out = inpaint_video(&tr.generator, &tr.gen_params, cfg.model.grid(), &frames, &masks, &windows, |i, _, r| seen.push((i, r.frames))).unwrap();
    assert_eq!((out.frames, out.channels, out.height, out.width), (7, 3, 16, 16));
    assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), (0..windows.len()).collect::<Vec<_>>());
    assert!(seen.iter().all(|s| s.1 == 2));
    let plane = 256;
    for t in 0..7 {
        for c in 0..3 {
            for i in 0..plane {
                let k = (t * 3 + c) * plane + i;
                if masks.data[t * plane + i] == 1.0 {
                    assert_eq!(out.data[k], frames.data[k]);
                }
            }
        }
    }
    assert_eq!(composite(&frames, &masks, &out).unwrap(), out);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn windows_write_every_frame_once(len in 2usize..40, window in 1usize..6, refs in 1usize..8, online in any::<bool>(), seed in any::<u64>()) {
        prop_assume!(window <= len);
        let cfg = daevi_core::config::InferenceConfig { window, references: refs, radius: 30 };
        let mode = if online { InferenceMode::Online } else { InferenceMode::Offline };
        let ws = plan_windows(len, &cfg, mode, seed).unwrap();
        let written: Vec<usize> = ws.iter().flat_map(|w| w.write.clone()).collect();
        prop_assert_eq!(written, (0..len).collect::<Vec<_>>());
        for w in &ws {
            prop_assert_eq!(w.references.len(), refs);
            prop_assert!(w.write.iter().all(|t| w.targets.contains(t)));
            if online {
                let last = *w.targets.last().unwrap();
                prop_assert!(w.references.iter().all(|&r| r <= last));
            }
        }
        prop_assert_eq!(&ws, &plan_windows(len, &cfg, mode, seed).unwrap());
    }
}
