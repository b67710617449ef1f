//! Windowed inpainting of whole videos.
//!
//! Windows of `window` target frames start at 0, `window`, `2·window`, …; a
//! final partial window is shifted back to end on the last frame and writes
//! only the frames not produced yet. Each window is inpainted together with
//! `references` reference frames drawn uniformly without replacement from
//! the neighbourhood pool:
//!
//! * offline: frames within `radius` of the window on either side;
//! * online: the `radius` frames before the window, never later ones.
//!
//! A pool smaller than `references` is cycled to fill the count; an empty
//! pool (an online window at the start of the video, or a video no longer
//! than one window) is replaced by the window's own frames, cycled.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::InferenceConfig;
use crate::data::{check_mask, Clip};
use crate::model::Generator;
use crate::numerics::{Real, Tape};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::stgde::{PatchGrid, TokenMask};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    #[default]
    Offline,
    Online,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub targets: Vec<usize>,
    /// Targets whose output is kept.
    pub write: Vec<usize>,
    pub references: Vec<usize>,
}

fn fill(pool: &[usize], count: usize, rng: &mut SplitMix64) -> Vec<usize> {
    if pool.len() >= count {
        let mut p = pool.to_vec();
        for i in 0..count {
            let j = i + rng.below(p.len() - i);
            p.swap(i, j);
        }
        let mut out = p[..count].to_vec();
        out.sort_unstable();
        out
    } else {
        pool.iter().copied().cycle().take(count).collect()
    }
}

pub fn plan_windows(len: usize, cfg: &InferenceConfig, mode: InferenceMode, seed: u64) -> Result<Vec<Window>> {
    let w = cfg.window;
    if w == 0 || len < w {
        return Err(Error::Data(alloc::format!("a {len}-frame video is shorter than one {w}-frame window")));
    }
    let mut windows = Vec::new();
    let mut written = 0;
    let mut start = 0;
    while written < len {
        let s = start.min(len - w);
        let targets: Vec<usize> = (s..s + w).collect();
        let write: Vec<usize> = (written..s + w).collect();
        let end = s + w;
        let pool: Vec<usize> = match mode {
            InferenceMode::Offline => (s.saturating_sub(cfg.radius)..s).chain(end..(end + cfg.radius).min(len)).collect(),
            InferenceMode::Online => (s.saturating_sub(cfg.radius)..s).collect(),
        };
        let mut rng = SplitMix64::derive(seed, windows.len() as u64);
        let references = if pool.is_empty() { fill(&targets, cfg.references, &mut rng) } else { fill(&pool, cfg.references, &mut rng) };
        written = end;
        start += w;
        windows.push(Window { targets, write, references });
    }
    Ok(windows)
}

/// `M ⊙ X + (1 − M) ⊙ Ŷ`.
pub fn composite(input: &Clip, mask: &Clip, pred: &Clip) -> Result<Clip> {
    check_mask(input, mask)?;
    if input.channels != pred.channels || !input.same_extent(pred) {
        return Err(Error::Contract("prediction does not match the input clip".into()));
    }
    let plane = input.height * input.width;
    let mut out = pred.clone();
    for t in 0..input.frames {
        let m = mask.frame(t);
        for c in 0..input.channels {
            let start = (t * input.channels + c) * plane;
            for (i, &mv) in m.iter().enumerate() {
                let k = start + i;
                out.data[k] = mv * input.data[k] + (1.0 - mv) * pred.data[k];
            }
        }
    }
    Ok(out)
}

/// Composited output for the window's targets, in target order.
pub fn infer_window<T: Real>(generator: &Generator, params: &ParamStore<T>, grid: PatchGrid, frames: &Clip, masks: &Clip, window: &Window) -> Result<Clip> {
    check_mask(frames, masks)?;
    let order: Vec<usize> = window.targets.iter().chain(&window.references).copied().collect();
    let x = frames.select(&order)?;
    let m = masks.select(&order)?;
    let tokens = TokenMask::from_pixel_mask(&m.to_array::<T>(), 1, grid)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let xv = tape.constant(x.masked(&m)?.to_array());
    let out = generator.forward(&mut tape, &p, xv, &tokens)?;
    let pred = Clip::from_array(tape.value(out.frames))?;
    let n = window.targets.len();
    let keep: Vec<usize> = (0..n).collect();
    composite(&x.select(&keep)?, &m.select(&keep)?, &pred.select(&keep)?)
}

/// Inpaint every frame; `on_window` sees each window before it runs.
pub fn inpaint_video<T: Real>(
    generator: &Generator,
    params: &ParamStore<T>,
    grid: PatchGrid,
    frames: &Clip,
    masks: &Clip,
    windows: &[Window],
    mut on_window: impl FnMut(usize, &Window, &Clip),
) -> Result<Clip> {
    let mut out = frames.clone();
    let n = frames.frame_len();
    for (i, w) in windows.iter().enumerate() {
        let result = infer_window(generator, params, grid, frames, masks, w)?;
        for &t in &w.write {
            let k = w.targets.iter().position(|&x| x == t).expect("written frames are targets");
            out.data[t * n..(t + 1) * n].copy_from_slice(result.frame(k));
        }
        on_window(i, w, &result);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> InferenceConfig {
        InferenceConfig::default()
    }

    #[test]
    fn minimal_video_is_one_self_referencing_window() {
        for mode in [InferenceMode::Offline, InferenceMode::Online] {
            let w = plan_windows(5, &cfg(), mode, 0).unwrap();
            assert_eq!(w.len(), 1);
            assert_eq!(w[0].write, [0, 1, 2, 3, 4]);
            assert_eq!(w[0].references.len(), 10);
            assert!(w[0].references.iter().all(|&r| r < 5));
        }
    }

    #[test]
    fn windows_cover_every_frame_once() {
        for len in [5, 7, 12, 40] {
            let w = plan_windows(len, &cfg(), InferenceMode::Offline, 3).unwrap();
            let written: Vec<usize> = w.iter().flat_map(|w| w.write.clone()).collect();
            assert_eq!(written, (0..len).collect::<Vec<_>>());
        }
    }

    #[test]
    fn online_references_precede_the_window() {
        let w = plan_windows(60, &cfg(), InferenceMode::Online, 1).unwrap();
        for win in &w[1..] {
            assert!(win.references.iter().all(|&r| r < win.targets[0]));
        }
        let off = plan_windows(60, &cfg(), InferenceMode::Offline, 1).unwrap();
        assert!(off[0].references.iter().all(|&r| r >= 5 && r < 35));
    }

    #[test]
    fn too_short_video_is_a_data_error() {
        assert!(matches!(plan_windows(4, &cfg(), InferenceMode::Online, 0), Err(Error::Data(_))));
    }

    #[test]
    fn composite_keeps_valid_pixels() {
        let x = Clip::filled(1, 3, 1, 2, 0.25);
        let p = Clip::filled(1, 3, 1, 2, 0.75);
        let m = Clip::new(1, 1, 1, 2, alloc::vec![1.0, 0.0]).unwrap();
        assert_eq!(composite(&x, &m, &p).unwrap().data, [0.25, 0.75, 0.25, 0.75, 0.25, 0.75]);
    }
}
